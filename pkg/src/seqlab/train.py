"""Two-pass training loop: scheduling, optimization, metrics, checkpoints.

One train step runs: encode; first-pass decode (skipped under teacher
forcing); decay/confidence evaluation; token selection; mixed-input
assembly; second-pass decode; cross-entropy on the second pass only;
backward; clip; Adam. The loss never sees the first pass: by default its
probabilities enter the mixed input as constants, and a config flag turns
full backpropagation through both passes back on.

Metrics go to an append-only JSONL (deterministic bytes for a given config
and seed); wall-clock timings go to a separate sidecar so the metrics file
stays byte-reproducible.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as T
from .checkpoint import load_container, save_container
from .config import RunConfig
from .data import Batch, Pair, generate_task, sample_batch, save_pairs
from .errors import CheckpointError, NonFiniteLossError
from .metrics import evaluate
from .model import TransformerModel, init_params
from .optim import Adam, clip_gradients, lr_at
from .rng import RngStreams
from .schedule import (
    MODE_TEACHER_FORCING,
    MODE_VANILLA,
    PtpEstimator,
    TokenSelection,
    build_mixed_input,
    confidence_mc,
    confidence_ptp,
    decay_probability,
    select_tokens,
    vanilla_sample_mask,
)


@dataclass
class TrainState:
    config: RunConfig
    model: TransformerModel
    optimizer: Adam
    streams: RngStreams
    splits: dict[str, list[Pair]]
    step: int = 0
    phase: int = 1
    history: list[dict] = field(default_factory=list)
    last_metrics: dict = field(default_factory=dict)

    @classmethod
    def fresh(cls, config: RunConfig) -> "TrainState":
        streams = RngStreams(config.master_seed)
        params = init_params(config.model, streams["init"])
        model = TransformerModel(config.model, params)
        opt = Adam(params, config.train.adam_beta1, config.train.adam_beta2,
                   config.train.adam_eps)
        splits = generate_task(config.task)
        # always born in phase 1; the driver records the switch, so a zero
        # phase-1 budget still yields exactly one switch marker at step 0
        return cls(config, model, opt, streams, splits, phase=1)

    @property
    def mode(self) -> str:
        return MODE_TEACHER_FORCING if self.phase == 1 else self.config.schedule.mode


def _pass1(state: TrainState, batch: Batch, memory):
    cfg = state.config
    train_mode = cfg.train.pass1_dropout
    rng = state.streams["dropout_dec1"]
    if cfg.train.backprop_through_pass1:
        return state.model.decode_pass1(memory, batch.src_pad, batch.tgt_input,
                                        batch.tgt_output, train_mode=train_mode, rng=rng)
    with T.no_grad():
        return state.model.decode_pass1(memory, batch.src_pad, batch.tgt_input,
                                        batch.tgt_output, train_mode=train_mode, rng=rng)


def _choose_selection(state: TrainState, batch: Batch, pass1) -> TokenSelection:
    cfg = state.config
    non_pad = batch.tgt_mask.astype(bool)
    mode = state.mode
    if mode == MODE_TEACHER_FORCING:
        return TokenSelection.all_golden(non_pad)
    if mode == MODE_VANILLA:
        f_i = decay_probability(cfg.schedule.build_strategy(), state.step)
        return vanilla_sample_mask(f_i, non_pad, state.streams["sampling"])
    estimator = cfg.schedule.build_estimator()
    if isinstance(estimator, PtpEstimator):
        conf = confidence_ptp(pass1)
    else:
        conf = confidence_mc(estimator, state.model, batch.src, batch.src_pad,
                             batch.tgt_input, batch.tgt_output, state.streams["mc_dropout"])
    return select_tokens(conf, cfg.schedule, batch.tgt_output, non_pad,
                         state.streams["sampling"])


def train_step(state: TrainState, batch: Batch) -> dict:
    """One optimization step; returns the step's scalar metrics."""
    cfg = state.config
    model = state.model
    memory = model.encode(batch.src, batch.src_pad, train_mode=True,
                          rng=state.streams["dropout_enc"])
    pass1 = None
    if state.mode != MODE_TEACHER_FORCING:
        pass1 = _pass1(state, batch, memory)
    selection = _choose_selection(state, batch, pass1)
    mixed = build_mixed_input(selection, batch.tgt_input,
                              pass1.probs if pass1 is not None else None,
                              model.params["tgt_embed"],
                              hard_predictions=cfg.schedule.hard_predictions)
    out = model.decode_pass2(memory, batch.src_pad, mixed, batch.tgt_output,
                             train_mode=True, rng=state.streams["dropout_dec2"])
    loss = T.cross_entropy(out.logits, batch.tgt_output, batch.tgt_mask,
                           label_smoothing=cfg.train.label_smoothing)
    state.optimizer.zero_grad()
    loss.backward()

    lr = lr_at(state.step + 1, cfg.model.d_model, cfg.train.warmup_steps)
    loss_val = loss.item()
    grad_norm = clip_gradients(model.params, cfg.train.grad_clip_norm)
    if not np.isfinite(loss_val) or not np.isfinite(grad_norm):
        norms = {}
        for name, p in model.params.items():
            if p.grad is not None:
                norms[name] = float(np.sqrt((p.grad * p.grad).sum()))
        raise NonFiniteLossError(state.step, lr, loss_val, norms)
    state.optimizer.step(lr)
    state.step += 1

    fractions = selection.fractions()
    metrics = {
        "loss": float(loss_val),
        "lr": float(lr),
        "grad_norm": float(grad_norm),
        "frac_golden": float(fractions["golden"]),
        "frac_predicted": float(fractions["predicted"]),
        "frac_random": float(fractions["random"]),
    }
    state.last_metrics = metrics
    return metrics


def validate(state: TrainState) -> dict:
    """Greedy-decode the fixed validation subset and score it."""
    cfg = state.config
    subset = state.splits["valid"][: cfg.train.val_subset]
    report = evaluate(state.model, subset, decode="greedy")
    return {
        "val_token_acc": float(report.token_acc),
        "val_seq_acc": float(report.seq_acc),
        "val_bleu": float(report.bleu),
    }


def metric_record(state: TrainState) -> dict:
    val = validate(state)
    lm = state.last_metrics
    return {
        "step": int(state.step),
        "phase": int(state.phase),
        "loss": lm.get("loss"),
        "lr": lm.get("lr"),
        "val_token_acc": val["val_token_acc"],
        "val_seq_acc": val["val_seq_acc"],
        "val_bleu": val["val_bleu"],
        "frac_golden": lm.get("frac_golden"),
        "frac_predicted": lm.get("frac_predicted"),
        "frac_random": lm.get("frac_random"),
    }


def steps_to_threshold(history: list[dict], target: float,
                       metric: str = "val_seq_acc") -> Optional[int]:
    """First logged step whose metric reaches the target, if any."""
    for rec in history:
        if metric in rec and rec.get(metric) is not None and rec[metric] >= target:
            return int(rec["step"])
    return None


# ---------------------------------------------------------------------------
# checkpointing


def save_train_state(path: str | Path, state: TrainState) -> None:
    meta = {
        "kind": "train_state",
        "run_config": state.config.to_dict(),
        "step": state.step,
        "phase": state.phase,
        "adam_t": state.optimizer.t,
        "rng": state.streams.state_dict(),
        "history": state.history,
    }
    arrays = {name: p.data for name, p in state.model.params.items()}
    arrays.update(state.optimizer.state_arrays())
    save_container(path, meta, arrays)


def save_model(path: str | Path, model: TransformerModel) -> None:
    meta = {"kind": "model", "model_config": model.config.to_dict()}
    save_container(path, meta, {name: p.data for name, p in model.params.items()})


def load_model(path: str | Path) -> TransformerModel:
    from .model import ModelConfig

    meta, arrays = load_container(path)
    if meta.get("kind") == "model":
        mc = ModelConfig.from_dict(meta["model_config"])
    elif meta.get("kind") == "train_state":
        mc = ModelConfig.from_dict(meta["run_config"]["model"])
    else:
        raise CheckpointError(f"{path}: not a model or train-state checkpoint")
    params = {}
    for name, arr in arrays.items():
        if name.startswith("adam_"):
            continue
        params[name] = T.Tensor(arr, requires_grad=True)
    expected = set(init_params(mc, np.random.default_rng(0)))
    if set(params) != expected:
        missing = sorted(expected - set(params))[:4]
        extra = sorted(set(params) - expected)[:4]
        raise CheckpointError(
            f"{path}: parameter names do not match config (missing {missing}, extra {extra})"
        )
    model = TransformerModel(mc, params)
    for name, p in params.items():
        ref_shape = init_params(mc, np.random.default_rng(0))[name].shape
        if p.shape != ref_shape:
            raise CheckpointError(f"{path}: {name} has shape {p.shape}, config implies {ref_shape}")
    return model


def load_train_state(path: str | Path, config: RunConfig) -> TrainState:
    meta, arrays = load_container(path)
    if meta.get("kind") != "train_state":
        raise CheckpointError(f"{path}: not a train-state checkpoint")
    saved_cfg = dict(meta["run_config"])
    want = config.to_dict()
    # resume_from and output_dir legitimately differ between original and
    # resumed invocations; everything else must match exactly
    for side in (saved_cfg, want):
        side.get("train", {}).pop("resume_from", None)
        side.pop("output_dir", None)
    if saved_cfg != want:
        raise CheckpointError(f"{path}: checkpoint config does not match the requested run")
    state = TrainState.fresh(config)
    for name, p in state.model.params.items():
        if name not in arrays:
            raise CheckpointError(f"{path}: missing parameter {name}")
        if arrays[name].shape != p.shape:
            raise CheckpointError(f"{path}: {name} shape {arrays[name].shape} != {p.shape}")
        p.data = arrays[name].copy()
    state.optimizer.load_state_arrays(arrays, meta["adam_t"])
    state.streams.load_state_dict(meta["rng"])
    state.step = int(meta["step"])
    state.phase = int(meta["phase"])
    state.history = list(meta["history"])
    return state


# ---------------------------------------------------------------------------
# driver


def _append_jsonl(path: Path, record: dict) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(record) + "\n")


def _rewrite_jsonl(path: Path, records: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def pretrain_then_schedule(config: RunConfig, out_dir: str | Path,
                           log=None) -> TrainState:
    """Full run: teacher-forcing phase, then the configured schedule phase.

    Writes resolved config, dataset splits, metrics JSONL (+ timing sidecar),
    periodic checkpoints, and the final model; returns the final state.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.monotonic()

    resume = config.train.resume_from
    if resume:
        state = load_train_state(resume, config)
    else:
        state = TrainState.fresh(config)

    resolved = config.to_dict()
    resolved["rng_streams"] = state.streams.describe()
    (out / "config.json").write_text(json.dumps(resolved, indent=2) + "\n", encoding="utf-8")
    for name, pairs in state.splits.items():
        save_pairs(out / f"{name}.txt", pairs)
    save_pairs(out / "valid_subset.txt", state.splits["valid"][: config.train.val_subset])

    metrics_path = out / "metrics.jsonl"
    timing_path = out / "timing.jsonl"
    # the restored history replaces whatever a partial run left behind
    _rewrite_jsonl(metrics_path, state.history)
    if not resume:
        timing_path.write_text("", encoding="utf-8")

    total = config.total_steps
    train_pairs = state.splits["train"]
    while state.step < total:
        if state.phase == 1 and state.step >= config.train.phase1_steps:
            state.phase = 2
            marker = {"step": int(state.step), "event": "phase_switch",
                      "mode": config.schedule.mode}
            state.history.append(marker)
            _append_jsonl(metrics_path, marker)
        batch = sample_batch(train_pairs, config.train.batch_size, state.streams["data"])
        train_step(state, batch)
        due_val = state.step % config.train.val_every == 0 or state.step == total
        if due_val:
            rec = metric_record(state)
            state.history.append(rec)
            _append_jsonl(metrics_path, rec)
            _append_jsonl(timing_path, {"step": int(state.step),
                                        "wallclock_s": round(time.monotonic() - t0, 3)})
            if log:
                log(f"step {rec['step']:>6} phase {rec['phase']} "
                    f"loss {rec['loss']:.4f} val_seq_acc {rec['val_seq_acc']:.4f} "
                    f"val_bleu {rec['val_bleu']:.4f}")
        if state.step % config.checkpoint_every == 0 or state.step == total:
            save_train_state(out / f"step_{state.step:06d}.ckpt", state)
            save_train_state(out / "train_state.ckpt", state)

    save_train_state(out / "train_state.ckpt", state)
    save_model(out / "model.ckpt", state.model)
    if config.train.final_eval != "none":
        report = evaluate(state.model, state.splits["test"],
                          decode=config.train.final_eval,
                          beam_size=config.train.beam_size,
                          length_penalty_alpha=config.train.length_penalty)
        payload = report.to_dict()
        payload["decode"] = config.train.final_eval
        (out / "eval_test.json").write_text(json.dumps(payload, indent=2) + "\n",
                                            encoding="utf-8")
    _append_jsonl(timing_path, {"step": int(state.step), "event": "end",
                                "wallclock_s": round(time.monotonic() - t0, 3)})
    return state
