"""Command-line interface: train, eval, compare.

Dotted-path overrides follow the config file, e.g.:

    seqlab train --config run.json --schedule.mode teacher_forcing \\
        --train.phase2_steps 0 --output_dir runs/tf

SEQLAB_OUTPUT_ROOT, when set, prefixes relative output directories.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .config import build_config
from .data import load_pairs
from .errors import CheckpointError, ConfigError, DataError, NonFiniteLossError
from .metrics import evaluate
from .train import load_model, pretrain_then_schedule, steps_to_threshold


def _split_overrides(rest: list[str]) -> list[tuple[str, str]]:
    """['--a.b', '1', '--c.d', 'x'] -> [('a.b', '1'), ('c.d', 'x')]."""
    out = []
    i = 0
    while i < len(rest):
        tok = rest[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}; overrides look like --a.b.c value")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(rest):
                raise ConfigError(f"override {tok!r} is missing a value")
            value = rest[i + 1]
            i += 2
        out.append((key, value))
    return out


def _resolve_output_dir(path: str) -> Path:
    root = os.environ.get("SEQLAB_OUTPUT_ROOT")
    p = Path(path)
    if root and not p.is_absolute():
        return Path(root) / p
    return p


def cmd_train(args: argparse.Namespace, overrides: list[tuple[str, str]]) -> int:
    try:
        config = build_config(args.config, overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    out_dir = _resolve_output_dir(config.output_dir)
    try:
        state = pretrain_then_schedule(config, out_dir, log=print)
    except NonFiniteLossError as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return 3
    except CheckpointError as exc:
        print(f"resume failed: {exc}", file=sys.stderr)
        return 2
    print(f"done: {state.step} steps -> {out_dir}")
    return 0


def cmd_eval(args: argparse.Namespace, overrides: list[tuple[str, str]]) -> int:
    if overrides:
        print(f"eval takes no overrides, got {overrides}", file=sys.stderr)
        return 2
    try:
        model = load_model(args.checkpoint)
        pairs = load_pairs(args.dataset)
        report = evaluate(model, pairs, decode=args.decode, beam_size=args.beam_size,
                          length_penalty_alpha=args.length_penalty)
    except (CheckpointError, DataError, ConfigError) as exc:
        print(f"eval failed: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(report.to_dict(), indent=2))
    return 0


def _read_metrics_file(path: str) -> list[dict]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: malformed JSONL line ({exc})") from exc
    if not records:
        raise DataError(f"{path}: no records")
    return records


def compare_runs(paths: list[str], metric: str, threshold: float | None) -> dict:
    """Steps-to-threshold and final metrics for each run, relative to the first.

    With no explicit threshold, the first (baseline) run's final metric value
    is the bar every run is measured against.
    """
    runs = []
    for path in paths:
        records = _read_metrics_file(path)
        metric_recs = [r for r in records if r.get(metric) is not None]
        if not metric_recs:
            raise DataError(f"{path}: no records carry metric {metric!r}")
        runs.append({"path": path, "records": metric_recs})
    if threshold is None:
        threshold = float(runs[0]["records"][-1][metric])
    base_steps = None
    rows = []
    for run in runs:
        final = run["records"][-1]
        steps = steps_to_threshold(run["records"], threshold, metric)
        if base_steps is None:
            base_steps = steps
        speedup = (base_steps / steps) if (steps and base_steps) else None
        rows.append({
            "path": run["path"],
            "final_step": int(final["step"]),
            f"final_{metric}": float(final[metric]),
            "final_val_bleu": float(final["val_bleu"]) if final.get("val_bleu") is not None else None,
            "steps_to_threshold": steps,
            "speedup_vs_first": speedup,
        })
    return {"metric": metric, "threshold": threshold, "runs": rows}


def _format_table(result: dict) -> str:
    final_key = "final_" + result["metric"]
    headers = ["run", "final_step", final_key, "final_val_bleu",
               "steps_to_threshold", "speedup_vs_first"]
    rows = []
    for r in result["runs"]:
        rows.append([
            r["path"],
            str(r["final_step"]),
            f"{r[final_key]:.4f}",
            "-" if r["final_val_bleu"] is None else f"{r['final_val_bleu']:.4f}",
            "-" if r["steps_to_threshold"] is None else str(r["steps_to_threshold"]),
            "-" if r["speedup_vs_first"] is None else f"{r['speedup_vs_first']:.2f}x",
        ])
    widths = [max(len(h), *(len(row[i]) for row in rows)) for i, h in enumerate(headers)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for row in rows:
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)))
    return "\n".join(lines)


def cmd_compare(args: argparse.Namespace, overrides: list[tuple[str, str]]) -> int:
    if overrides:
        print(f"compare takes no overrides, got {overrides}", file=sys.stderr)
        return 2
    try:
        result = compare_runs(args.metrics_files, args.metric, args.threshold)
    except (DataError, OSError) as exc:
        print(f"compare failed: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(result, indent=2))
    print()
    print(_format_table(result))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="seqlab",
        description="Two-pass seq2seq training lab with confidence-aware scheduled sampling",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run a training experiment")
    p_train.add_argument("--config", default=None, help="JSON run config (defaults apply)")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a dataset file")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--dataset", required=True, help="file of 'src ||| tgt' lines")
    p_eval.add_argument("--decode", choices=["greedy", "beam"], default="greedy")
    p_eval.add_argument("--beam_size", type=int, default=4)
    p_eval.add_argument("--length_penalty", type=float, default=0.6)

    p_cmp = sub.add_parser("compare", help="compare runs' metrics files")
    p_cmp.add_argument("metrics_files", nargs="+")
    p_cmp.add_argument("--metric", default="val_seq_acc")
    p_cmp.add_argument("--threshold", type=float, default=None,
                       help="target value; defaults to the first run's final metric")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, rest = parser.parse_known_args(argv)
    try:
        overrides = _split_overrides(rest)
    except ConfigError as exc:
        print(f"argument error: {exc}", file=sys.stderr)
        return 2
    if args.command == "train":
        return cmd_train(args, overrides)
    if args.command == "eval":
        return cmd_eval(args, overrides)
    return cmd_compare(args, overrides)


if __name__ == "__main__":
    sys.exit(main())
