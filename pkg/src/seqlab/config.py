"""Run configuration: nested defaults, JSON files, dotted-path overrides.

Every field has a default, so a run is fully specified by any subset of
overrides; the fully resolved config is echoed to the output directory
before training starts, making any run reproducible from its artifacts.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .data import SyntheticTask
from .errors import ConfigError
from .model import ModelConfig
from .schedule import ScheduleConfig


@dataclass
class TrainConfig:
    phase1_steps: int = 2000
    phase2_steps: int = 8000
    batch_size: int = 64
    warmup_steps: int = 4000
    label_smoothing: float = 0.1
    grad_clip_norm: float = 1.0      # <= 0 disables clipping
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-9
    val_every: int = 200
    val_subset: int = 256
    final_eval: str = "beam"         # none | greedy | beam
    beam_size: int = 4
    length_penalty: float = 0.6
    pass1_dropout: bool = True
    backprop_through_pass1: bool = False
    resume_from: Optional[str] = None

    def __post_init__(self):
        if self.phase1_steps < 0 or self.phase2_steps < 0:
            raise ConfigError("phase step budgets must be nonnegative")
        if self.phase1_steps + self.phase2_steps < 1:
            raise ConfigError("total step budget must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if self.warmup_steps < 1:
            raise ConfigError("warmup_steps must be positive")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError(f"label_smoothing must lie in [0, 1), got {self.label_smoothing}")
        if self.final_eval not in ("none", "greedy", "beam"):
            raise ConfigError(f"final_eval must be none|greedy|beam, got {self.final_eval!r}")
        if self.val_every < 1 or self.val_subset < 1:
            raise ConfigError("val_every and val_subset must be positive")
        if self.beam_size < 1:
            raise ConfigError("beam_size must be >= 1")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class RunConfig:
    task: SyntheticTask = field(default_factory=SyntheticTask)
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    master_seed: int = 1234
    output_dir: str = "runs/run"
    checkpoint_every: int = 2000

    def __post_init__(self):
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be positive")
        if self.model.vocab_size_src < self.task.vocab_size or \
           self.model.vocab_size_tgt < self.task.vocab_size:
            raise ConfigError(
                f"model vocab ({self.model.vocab_size_src}/{self.model.vocab_size_tgt}) "
                f"smaller than task vocab ({self.task.vocab_size})"
            )
        if self.model.max_len < self.task.len_max + 2:
            raise ConfigError(
                f"model max_len {self.model.max_len} cannot hold task sentences "
                f"up to {self.task.len_max} plus BOS/EOS"
            )

    @property
    def total_steps(self) -> int:
        return self.train.phase1_steps + self.train.phase2_steps

    def to_dict(self) -> dict:
        return {
            "task": self.task.to_dict(),
            "model": self.model.to_dict(),
            "schedule": self.schedule.to_dict(),
            "train": self.train.to_dict(),
            "master_seed": self.master_seed,
            "output_dir": self.output_dir,
            "checkpoint_every": self.checkpoint_every,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        d.pop("rng_streams", None)  # informational echo written by the driver
        known = {"task", "model", "schedule", "train", "master_seed", "output_dir",
                 "checkpoint_every"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config sections/fields: {sorted(unknown)}")
        kwargs = {}
        try:
            if "task" in d:
                kwargs["task"] = SyntheticTask.from_dict(d["task"])
            if "model" in d:
                kwargs["model"] = ModelConfig.from_dict(d["model"])
            if "schedule" in d:
                kwargs["schedule"] = ScheduleConfig.from_dict(d["schedule"])
            if "train" in d:
                kwargs["train"] = TrainConfig(**d["train"])
        except TypeError as exc:
            raise ConfigError(f"bad config field: {exc}") from exc
        for key in ("master_seed", "output_dir", "checkpoint_every"):
            if key in d:
                kwargs[key] = d[key]
        return cls(**kwargs)


def load_config_file(path: str | Path) -> dict:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        raw = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {p} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {p} must hold a JSON object")
    return raw


def parse_override_value(text: str):
    """Interpret an override as JSON when possible, else a bare string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(tree: dict, dotted: str, value) -> None:
    """Set tree[a][b][c] = value for a dotted path 'a.b.c'."""
    keys = dotted.split(".")
    node = tree
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override path {dotted!r} crosses a non-object at {k!r}")
    node[keys[-1]] = value


def build_config(config_path: Optional[str], overrides: list[tuple[str, str]]) -> RunConfig:
    """Config file (optional) + dotted overrides -> validated RunConfig."""
    tree = load_config_file(config_path) if config_path else {}
    for dotted, raw in overrides:
        apply_override(tree, dotted, parse_override_value(raw))
    return RunConfig.from_dict(tree)
