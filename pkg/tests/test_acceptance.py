"""Acceptance suite: one test per exit criterion, each printing a PASS line.

Run with ``pytest tests/test_acceptance.py -v -s``. The behavioral check
trains five seed-paired runs per system (teacher forcing vs confidence-aware
schedule with denoising) at the pinned budgets; completed runs are cached
under .acceptance_cache keyed by their resolved config, so a green rerun is
cheap while the first run does the full work. Training is deterministic per
(config, seed), so cached artifacts are byte-identical to a rerun's.
"""

import hashlib
import json
import math
import multiprocessing
import os
import shutil
from pathlib import Path

import numpy as np
import pytest

from seqlab import tensor as T
from seqlab.cli import main as cli_main
from seqlab.config import RunConfig, TrainConfig
from seqlab.data import SyntheticTask, generate_task, make_batch
from seqlab.metrics import corpus_bleu
from seqlab.model import ModelConfig, TransformerModel
from seqlab.rng import stream_from
from seqlab.schedule import (
    GOLDEN,
    PREDICTED,
    RANDOM,
    ExponentialDecay,
    InverseSigmoidDecay,
    LinearDecay,
    McExpectationEstimator,
    McVarianceEstimator,
    ScheduleConfig,
    confidence_mc,
    confidence_ptp,
    decay_probability,
    select_tokens,
)
from seqlab.train import TrainState, pretrain_then_schedule, train_step
from seqlab.data import sample_batch

CACHE_ROOT = Path(__file__).resolve().parent.parent / ".acceptance_cache"
SEEDS = (101, 102, 103, 104, 105)


def report(name: str, ok: bool, detail: str = "") -> None:
    print(f"\nACCEPTANCE {name}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, f"{name}: {detail}"


# ---------------------------------------------------------------------------
# criterion: schedule decay curves


class TestScheduleCurves:
    def test_six_published_points_within_1e9(self):
        linear = LinearDecay(0.2, -5e-5, 1.0)
        expo = ExponentialDecay(0.99999)
        invsig = InverseSigmoidDecay(20000.0)
        points = [
            (linear, 0, 1.0),
            (linear, 16000, 0.2),
            (expo, 0, 1.0),
            (expo, 200_000, 0.13533392988152474),
            (invsig, 0, 0.9999500024998750),
            (invsig, 20000.0 * math.log(20000.0), 0.5),
        ]
        worst = 0.0
        for strat, step, expected in points:
            got = decay_probability(strat, step)
            worst = max(worst, abs(got - expected))
        report("schedule-curves/points", worst < 1e-9, f"max abs err {worst:.2e}")

    def test_monotone_non_increase_10k_pairs_each(self):
        rng = np.random.default_rng(0)
        ok = True
        for strat in (LinearDecay(0.2, -5e-5, 1.0), ExponentialDecay(0.99999),
                      InverseSigmoidDecay(20000.0)):
            pairs = rng.integers(0, 2_000_000, size=(10_000, 2))
            lo = np.minimum(pairs[:, 0], pairs[:, 1])
            hi = np.maximum(pairs[:, 0], pairs[:, 1])
            for a, b in zip(lo.tolist(), hi.tolist()):
                if decay_probability(strat, b) > decay_probability(strat, a) + 1e-15:
                    ok = False
        report("schedule-curves/monotone", ok, "3 strategies x 10^4 random step pairs")


# ---------------------------------------------------------------------------
# criterion: gradient integrity


class TestGradientIntegrity:
    def test_finite_differences_on_2layer_d64(self):
        cfg = ModelConfig(vocab_size_src=16, vocab_size_tgt=16, d_model=64, n_heads=4,
                          n_encoder_layers=2, n_decoder_layers=2, d_ff=128,
                          dropout_rate=0.0, max_len=16)
        model = TransformerModel(cfg, init_rng=stream_from(5, "init"))
        task = SyntheticTask(vocab_size=16, len_min=4, len_max=7, n_train=6,
                             n_valid=4, n_test=4)
        batch = make_batch(generate_task(task)["train"])

        def loss_value() -> float:
            with T.no_grad():
                memory = model.encode(batch.src, batch.src_pad)
                out = model.decode_pass1(memory, batch.src_pad, batch.tgt_input,
                                         batch.tgt_output)
                return T.cross_entropy(out.logits, batch.tgt_output, batch.tgt_mask).item()

        memory = model.encode(batch.src, batch.src_pad)
        out = model.decode_pass1(memory, batch.src_pad, batch.tgt_input, batch.tgt_output)
        T.cross_entropy(out.logits, batch.tgt_output, batch.tgt_mask).backward()

        probe = np.random.default_rng(11)
        names = sorted(model.params)
        h = 1e-5
        worst = 0.0
        for _ in range(24):
            name = names[int(probe.integers(0, len(names)))]
            p = model.params[name]
            flat = p.data.reshape(-1)
            i = int(probe.integers(0, flat.size))
            orig = flat[i]
            flat[i] = orig + h
            hi = loss_value()
            flat[i] = orig - h
            lo = loss_value()
            flat[i] = orig
            fd = (hi - lo) / (2 * h)
            an = p.grad.reshape(-1)[i]
            rel = abs(fd - an) / max(abs(fd), abs(an), 1e-8)
            worst = max(worst, rel)
        report("gradient-integrity", worst < 1e-4,
               f"24 sampled parameters, worst rel err {worst:.2e}")


# ---------------------------------------------------------------------------
# criterion: degeneracy equivalences (100 steps, exact equality)


def _degeneracy_config(schedule: ScheduleConfig) -> RunConfig:
    return RunConfig(
        task=SyntheticTask(variant="reverse", vocab_size=16, len_min=3, len_max=8,
                           n_train=500, n_valid=50, n_test=50),
        model=ModelConfig(vocab_size_src=16, vocab_size_tgt=16, d_model=32, n_heads=4,
                          n_encoder_layers=2, n_decoder_layers=2, d_ff=64,
                          dropout_rate=0.0, max_len=16),
        schedule=schedule,
        train=TrainConfig(phase1_steps=0, phase2_steps=100, batch_size=16,
                          val_every=10_000, final_eval="none"),
        master_seed=31,
    )


def _loss_sequence(config: RunConfig, steps: int = 100) -> list[float]:
    state = TrainState.fresh(config)
    state.phase = 2
    out = []
    for _ in range(steps):
        batch = sample_batch(state.splits["train"], config.train.batch_size,
                             state.streams["data"])
        out.append(train_step(state, batch)["loss"])
    return out


class TestDegeneracyEquivalences:
    def test_confidence_aware_threshold_one_vs_teacher_forcing(self):
        tf = _loss_sequence(_degeneracy_config(ScheduleConfig(mode="teacher_forcing")))
        ca = _loss_sequence(_degeneracy_config(
            ScheduleConfig(mode="confidence_aware", t_golden=1.0, t_rand=1.0)))
        equal = tf == ca
        report("degeneracy/confidence-aware-t1", equal,
               f"100 losses exactly equal = {equal}")

    def test_vanilla_f1_vs_teacher_forcing(self):
        tf = _loss_sequence(_degeneracy_config(ScheduleConfig(mode="teacher_forcing")))
        vs = _loss_sequence(_degeneracy_config(
            ScheduleConfig(mode="vanilla_ss", strategy="linear",
                           epsilon=1.0, k=-1e-12, b=1.0)))
        equal = tf == vs
        report("degeneracy/vanilla-f1", equal, f"100 losses exactly equal = {equal}")


# ---------------------------------------------------------------------------
# criterion: estimator consistency at zero dropout


class TestEstimatorConsistency:
    def test_mc_expectation_equals_ptp_and_variance_is_one(self):
        cfg = ModelConfig(vocab_size_src=16, vocab_size_tgt=16, d_model=32, n_heads=4,
                          n_encoder_layers=1, n_decoder_layers=1, d_ff=64,
                          dropout_rate=0.0, max_len=16)
        model = TransformerModel(cfg, init_rng=stream_from(8, "init"))
        task = SyntheticTask(vocab_size=16, len_min=4, len_max=8, n_train=12,
                             n_valid=4, n_test=4)
        batch = make_batch(generate_task(task)["train"])
        memory = model.encode(batch.src, batch.src_pad)
        ptp = confidence_ptp(model.decode_pass1(memory, batch.src_pad, batch.tgt_input,
                                                batch.tgt_output))
        exp_conf = confidence_mc(McExpectationEstimator(5, 0.0), model, batch.src,
                                 batch.src_pad, batch.tgt_input, batch.tgt_output,
                                 np.random.default_rng(0))
        var_conf = confidence_mc(McVarianceEstimator(5, 0.0), model, batch.src,
                                 batch.src_pad, batch.tgt_input, batch.tgt_output,
                                 np.random.default_rng(0))
        exact = np.array_equal(exp_conf, ptp)
        ones = np.array_equal(var_conf, np.ones_like(var_conf))
        report("estimator-consistency", exact and ones,
               f"expectation==ptp exact: {exact}; variance==1.0: {ones}")


# ---------------------------------------------------------------------------
# criterion: selection partition and threshold monotonicity


class TestSelectionPartition:
    def test_partition_and_monotonicity_10k_cases(self):
        rng = np.random.default_rng(2)
        draws = np.random.default_rng(3)
        checked = 0
        ok = True
        while checked < 10_000:
            B, L = 8, 25
            conf = rng.random((B, L))
            t_g = float(rng.random())
            t_r = t_g + (1.0 - t_g) * float(rng.random())
            tgt = rng.integers(3, 32, size=(B, L))
            non_pad = rng.random((B, L)) < 0.9
            cfg = ScheduleConfig(mode="confidence_aware_denoising",
                                 t_golden=t_g, t_rand=t_r)
            sel = select_tokens(conf, cfg, tgt, non_pad, draws)
            if not np.isin(sel.classes, [GOLDEN, PREDICTED, RANDOM]).all():
                ok = False
            if not np.all(sel.classes[~non_pad.astype(bool)] == GOLDEN):
                ok = False
            f = sel.fractions()
            if abs(sum(f.values()) - 1.0) > 1e-12:
                ok = False
            up_g = ScheduleConfig(mode="confidence_aware_denoising",
                                  t_golden=min(1.0, t_g + 0.07),
                                  t_rand=max(t_r, min(1.0, t_g + 0.07)))
            sel_g = select_tokens(conf, up_g, tgt, non_pad, np.random.default_rng(0))
            if (sel_g.classes == GOLDEN).sum() < (sel.classes == GOLDEN).sum():
                ok = False
            up_r = ScheduleConfig(mode="confidence_aware_denoising", t_golden=t_g,
                                  t_rand=min(1.0, t_r + 0.07))
            sel_r = select_tokens(conf, up_r, tgt, non_pad, np.random.default_rng(0))
            if (sel_r.classes == RANDOM).sum() > (sel.classes == RANDOM).sum():
                ok = False
            checked += B * L
        report("selection-partition", ok, f"{checked} randomized positions checked")


# ---------------------------------------------------------------------------
# criterion: BLEU oracle


class TestBleuOracle:
    def test_identity_and_clipping(self):
        rng = np.random.default_rng(4)
        corpus = [[int(t) for t in rng.integers(3, 30, size=rng.integers(4, 15))]
                  for _ in range(50)]
        identity = corpus_bleu(corpus, corpus)
        clip = corpus_bleu([[5, 5, 6, 7, 8], [10, 11, 12, 13]],
                           [[5, 6, 7, 8, 9], [10, 11, 12, 13]])
        expected = 0.7984079523098931  # hand-derived before implementation
        ok = identity == pytest.approx(1.0, abs=1e-12) and abs(clip - expected) < 1e-9
        report("bleu-oracle", ok,
               f"identity={identity:.12f}, clipping={clip:.12f} vs {expected:.12f}")


# ---------------------------------------------------------------------------
# criterion: desk-scale behavioral check + determinism


def behavioral_config(mode: str, seed: int) -> RunConfig:
    """Pinned: Reverse task, vocab 32, lengths 5-20, 2-layer model, 2k+8k.

    Width, batch, and validation cadence are sized for single-core CPU runs.
    The width is deliberately narrow: wider models (d_model >= 24) solve the
    reversal outright within the step budget and saturate the longest length
    bucket, which would make the bucket comparison vacuous. At d_model=16
    the teacher-forcing baseline reliably leaves headroom there.

    Paired runs share a master seed, and phase 1 is teacher forcing under
    both modes, so a baseline and its counterpart are bit-identical until
    the phase switch; everything after differs only by the schedule.
    """
    if mode == "teacher_forcing":
        schedule = ScheduleConfig(mode="teacher_forcing")
    else:
        schedule = ScheduleConfig(mode="confidence_aware_denoising",
                                  t_golden=0.9, t_rand=0.95, estimator="ptp")
    return RunConfig(
        task=SyntheticTask(variant="reverse", vocab_size=32, len_min=5, len_max=20,
                           n_train=10_000, n_valid=1_000, n_test=1_000),
        model=ModelConfig(vocab_size_src=32, vocab_size_tgt=32, d_model=16, n_heads=4,
                          n_encoder_layers=2, n_decoder_layers=2, d_ff=32,
                          dropout_rate=0.1, max_len=32),
        schedule=schedule,
        train=TrainConfig(phase1_steps=2000, phase2_steps=8000, batch_size=32,
                          warmup_steps=4000, val_every=1000, val_subset=128,
                          final_eval="beam", beam_size=4, length_penalty=0.6),
        master_seed=seed,
        checkpoint_every=2000,
    )


def _run_key(config: RunConfig) -> str:
    d = config.to_dict()
    d.pop("output_dir")
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def _execute_run(args: tuple[str, int]) -> str:
    mode, seed = args
    config = behavioral_config(mode, seed)
    run_dir = CACHE_ROOT / _run_key(config)
    done_flag = run_dir / "eval_test.json"
    if not done_flag.exists():
        if run_dir.exists():
            shutil.rmtree(run_dir)
        pretrain_then_schedule(config, run_dir)
    return str(run_dir)


@pytest.fixture(scope="module")
def behavioral_runs():
    CACHE_ROOT.mkdir(exist_ok=True)
    jobs = [(mode, seed) for seed in SEEDS for mode in ("teacher_forcing", "denoising")]
    workers = min(os.cpu_count() or 1, 4)
    if workers > 1:
        with multiprocessing.get_context("spawn").Pool(workers) as pool:
            dirs = pool.map(_execute_run, jobs)
    else:
        dirs = [_execute_run(j) for j in jobs]
    out = {}
    for (mode, seed), d in zip(jobs, dirs):
        out[(mode, seed)] = Path(d)
    return out


def _final_eval(run_dir: Path) -> dict:
    return json.loads((run_dir / "eval_test.json").read_text())


class TestDeskScaleBehavior:
    def test_final_accuracy_and_longest_bucket(self, behavioral_runs):
        drops = []
        bucket_wins = 0
        lines = []
        for seed in SEEDS:
            tf = _final_eval(behavioral_runs[("teacher_forcing", seed)])
            dn = _final_eval(behavioral_runs[("denoising", seed)])
            drop = tf["seq_acc"] - dn["seq_acc"]
            drops.append(drop)
            tf_long = tf["buckets"][-1]["seq_acc"]
            dn_long = dn["buckets"][-1]["seq_acc"]
            win = dn_long > tf_long
            bucket_wins += int(win)
            lines.append(
                f"seed {seed}: seq_acc tf={tf['seq_acc']:.4f} dn={dn['seq_acc']:.4f} "
                f"longest-bucket tf={tf_long:.4f} dn={dn_long:.4f} win={win}"
            )
        print()
        for line in lines:
            print("  " + line)
        cond_i = all(d <= 0.01 + 1e-12 for d in drops)
        cond_ii = bucket_wins >= 3
        report("behavioral/final-accuracy",
               cond_i, f"max drop vs baseline {max(drops):.4f} (allowed 0.01)")
        report("behavioral/longest-bucket",
               cond_ii, f"strictly higher in {bucket_wins}/5 seeds (need >=3)")

    def test_convergence_reporting_via_compare(self, behavioral_runs, capsys):
        # the measured speedups and per-seed gains are reported; only the two
        # bounds above are pass/fail
        speedups = []
        for seed in SEEDS:
            tf_dir = behavioral_runs[("teacher_forcing", seed)]
            dn_dir = behavioral_runs[("denoising", seed)]
            rc = cli_main(["compare", str(tf_dir / "metrics.jsonl"),
                           str(dn_dir / "metrics.jsonl"), "--metric", "val_seq_acc"])
            captured = capsys.readouterr()
            assert rc == 0
            payload = json.loads(captured.out.split("\n\n")[0])
            speedups.append(payload["runs"][1]["speedup_vs_first"])
        print()
        for seed, s in zip(SEEDS, speedups):
            print(f"  seed {seed}: steps-to-baseline-final speedup = "
                  f"{'n/a' if s is None else f'{s:.2f}x'}")
        measured = [s for s in speedups if s is not None]
        detail = (f"speedup measured on {len(measured)}/5 seeds"
                  + (f", median {sorted(measured)[len(measured)//2]:.2f}x" if measured else ""))
        report("behavioral/convergence-reporting", True, detail)


class TestDeterminism:
    def test_same_config_and_seed_byte_identical_metrics(self, tmp_path):
        overrides = [
            "--task.vocab_size", "16", "--task.len_min", "3", "--task.len_max", "8",
            "--task.n_train", "400", "--task.n_valid", "64", "--task.n_test", "64",
            "--model.vocab_size_src", "16", "--model.vocab_size_tgt", "16",
            "--model.d_model", "32", "--model.n_encoder_layers", "1",
            "--model.n_decoder_layers", "1", "--model.d_ff", "64",
            "--model.max_len", "16",
            "--train.phase1_steps", "60", "--train.phase2_steps", "60",
            "--train.batch_size", "16", "--train.val_every", "30",
            "--train.val_subset", "32", "--train.final_eval", "none",
            "--schedule.mode", "confidence_aware_denoising",
            "--master_seed", "909",
        ]
        for name in ("a", "b"):
            rc = cli_main(["train", *overrides, "--output_dir", str(tmp_path / name)])
            assert rc == 0
        a = (tmp_path / "a" / "metrics.jsonl").read_bytes()
        b = (tmp_path / "b" / "metrics.jsonl").read_bytes()
        report("determinism", a == b,
               f"{len(a)} bytes, identical across independent runs")
