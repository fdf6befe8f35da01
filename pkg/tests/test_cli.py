import json
from pathlib import Path

import numpy as np
import pytest

from seqlab.cli import main

TINY_OVERRIDES = [
    "--task.vocab_size", "16", "--task.len_min", "3", "--task.len_max", "8",
    "--task.n_train", "300", "--task.n_valid", "60", "--task.n_test", "60",
    "--model.vocab_size_src", "16", "--model.vocab_size_tgt", "16",
    "--model.d_model", "32", "--model.n_encoder_layers", "1",
    "--model.n_decoder_layers", "1", "--model.d_ff", "64", "--model.max_len", "16",
    "--model.dropout_rate", "0.0",
    "--train.phase1_steps", "30", "--train.phase2_steps", "0",
    "--train.batch_size", "8", "--train.val_every", "15",
    "--train.val_subset", "20", "--train.final_eval", "none",
    "--checkpoint_every", "15",
]


def run_tiny_train(out_dir: Path, extra: list[str] = ()) -> int:
    return main(["train", *TINY_OVERRIDES, "--schedule.mode", "teacher_forcing",
                 "--output_dir", str(out_dir), *extra])


class TestTrainCommand:
    def test_missing_config_file_names_path(self, capsys):
        rc = main(["train", "--config", "does/not/exist.json"])
        assert rc != 0
        assert "does/not/exist.json" in capsys.readouterr().err

    def test_completes_and_writes_artifacts(self, tmp_path, capsys):
        rc = run_tiny_train(tmp_path / "run")
        assert rc == 0
        out = capsys.readouterr().out
        assert "done: 30 steps" in out
        for name in ("config.json", "metrics.jsonl", "model.ckpt", "train_state.ckpt"):
            assert (tmp_path / "run" / name).exists()
        records = [json.loads(l) for l in (tmp_path / "run" / "metrics.jsonl").read_text().splitlines()]
        assert all(r["frac_golden"] == 1.0 for r in records if "frac_golden" in r)

    def test_rerun_same_config_and_seed_is_byte_identical(self, tmp_path):
        run_tiny_train(tmp_path / "a")
        run_tiny_train(tmp_path / "b")
        assert (tmp_path / "a" / "metrics.jsonl").read_bytes() == \
            (tmp_path / "b" / "metrics.jsonl").read_bytes()

    def test_invalid_override_value_fails_cleanly(self, tmp_path, capsys):
        rc = main(["train", "--schedule.mode", "nonsense",
                   "--output_dir", str(tmp_path / "x")])
        assert rc != 0
        assert "nonsense" in capsys.readouterr().err

    def test_output_root_env_var(self, tmp_path, monkeypatch):
        monkeypatch.setenv("SEQLAB_OUTPUT_ROOT", str(tmp_path / "root"))
        rc = run_tiny_train(Path("rel_run"))
        assert rc == 0
        assert (tmp_path / "root" / "rel_run" / "metrics.jsonl").exists()

    def test_run_reproducible_from_its_own_config_echo(self, tmp_path):
        run_tiny_train(tmp_path / "orig")
        rc = main(["train", "--config", str(tmp_path / "orig" / "config.json"),
                   "--output_dir", str(tmp_path / "replay")])
        assert rc == 0
        assert (tmp_path / "orig" / "metrics.jsonl").read_bytes() == \
            (tmp_path / "replay" / "metrics.jsonl").read_bytes()


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert run_tiny_train(out) == 0
    return out


class TestEvalCommand:
    def test_eval_of_saved_checkpoint_matches_final_validation(self, trained, capsys):
        records = [json.loads(l) for l in (trained / "metrics.jsonl").read_text().splitlines()]
        final = [r for r in records if "val_seq_acc" in r][-1]
        rc = main(["eval", "--checkpoint", str(trained / "model.ckpt"),
                   "--dataset", str(trained / "valid_subset.txt"), "--decode", "greedy"])
        assert rc == 0
        report = json.loads(capsys.readouterr().out)
        assert report["seq_acc"] == pytest.approx(final["val_seq_acc"])
        assert report["token_acc"] == pytest.approx(final["val_token_acc"])
        assert report["bleu"] == pytest.approx(final["val_bleu"])

    def test_beam1_alpha0_equals_greedy(self, trained, capsys):
        args = ["--checkpoint", str(trained / "model.ckpt"),
                "--dataset", str(trained / "test.txt")]
        assert main(["eval", *args, "--decode", "greedy"]) == 0
        greedy = json.loads(capsys.readouterr().out)
        assert main(["eval", *args, "--decode", "beam", "--beam_size", "1",
                     "--length_penalty", "0"]) == 0
        beam = json.loads(capsys.readouterr().out)
        greedy.pop("decode"), beam.pop("decode")
        assert greedy == beam

    def test_corrupted_checkpoint_fails_without_partial_output(self, trained, tmp_path, capsys):
        blob = (trained / "model.ckpt").read_bytes()
        bad = tmp_path / "truncated.ckpt"
        bad.write_bytes(blob[: len(blob) // 2])
        rc = main(["eval", "--checkpoint", str(bad),
                   "--dataset", str(trained / "test.txt")])
        captured = capsys.readouterr()
        assert rc != 0
        assert captured.out == ""
        assert "truncated" in captured.err


def write_history(path: Path, crossing_step: int, final: float = 1.0) -> None:
    with open(path, "w") as fh:
        for step in range(100, 501, 100):
            acc = final if step >= crossing_step else 0.1
            fh.write(json.dumps({"step": step, "phase": 2, "loss": 1.0, "lr": 1e-3,
                                 "val_token_acc": acc, "val_seq_acc": acc,
                                 "val_bleu": acc, "frac_golden": 1.0,
                                 "frac_predicted": 0.0, "frac_random": 0.0}) + "\n")


class TestCompareCommand:
    def test_self_comparison_has_unit_speedup(self, tmp_path, capsys):
        f = tmp_path / "m.jsonl"
        write_history(f, crossing_step=300)
        assert main(["compare", str(f), str(f)]) == 0
        payload = json.loads(capsys.readouterr().out.split("\n\n")[0])
        assert payload["runs"][0]["speedup_vs_first"] == 1.0
        assert payload["runs"][1]["speedup_vs_first"] == 1.0

    def test_known_crossings_give_three_x_speedup(self, tmp_path, capsys):
        slow = tmp_path / "slow.jsonl"
        fast = tmp_path / "fast.jsonl"
        write_history(slow, crossing_step=300)
        write_history(fast, crossing_step=100)
        assert main(["compare", str(slow), str(fast), "--threshold", "0.5"]) == 0
        payload = json.loads(capsys.readouterr().out.split("\n\n")[0])
        assert payload["runs"][0]["steps_to_threshold"] == 300
        assert payload["runs"][1]["steps_to_threshold"] == 100
        assert payload["runs"][1]["speedup_vs_first"] == pytest.approx(3.0)

    def test_table_rows_match_input_count(self, tmp_path, capsys):
        files = []
        for i in range(3):
            f = tmp_path / f"m{i}.jsonl"
            write_history(f, crossing_step=100 * (i + 1))
            files.append(str(f))
        assert main(["compare", *files]) == 0
        table = capsys.readouterr().out.split("\n\n")[1]
        assert len(table.strip().splitlines()) == 2 + 3  # header + rule + rows

    def test_malformed_line_names_line_number(self, tmp_path, capsys):
        f = tmp_path / "bad.jsonl"
        f.write_text('{"step": 1, "val_seq_acc": 0.5}\nnot json\n')
        assert main(["compare", str(f)]) != 0
        assert "bad.jsonl:2" in capsys.readouterr().err
