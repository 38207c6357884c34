"""Run configuration for the command line: model, schedule, task, seed, precision.

Uses the same key=value grammar as :mod:`hybridhead.config`. Keys::

    preset = toy            # optional starting point for model.* keys
    seed = 0
    precision = 64          # 32 or 64
    model.<field> = ...     # any ModelConfig field
    train.<field> = ...     # any TrainSettings field
    task.<field> = ...      # any TaskSettings field

A resolved snapshot spells out every model field, so it re-runs without the preset.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .config import ConfigError, ModelConfig, config_from_mapping, format_text, parse_text, preset
from .training import AdamW, BatchSampler, WsdSchedule, synthetic_corpus

__all__ = ["TrainSettings", "TaskSettings", "RunConfig"]


@dataclass(frozen=True)
class TrainSettings:
    steps: int = 2000
    batch_size: int = 16
    seq_len: int = 64
    lr_peak: float = 1e-3
    lr_min: float = 1e-5
    warmup_frac: float = 0.01
    decay_frac: float = 0.2
    weight_decay: float = 0.1
    clip: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.95

    def schedule(self) -> WsdSchedule:
        return WsdSchedule(self.steps, self.warmup_frac, self.decay_frac, self.lr_peak, self.lr_min)

    def optimizer(self, params) -> AdamW:
        return AdamW(params, (self.beta1, self.beta2), weight_decay=self.weight_decay, clip=self.clip)


@dataclass(frozen=True)
class TaskSettings:
    kind: str = "mix"
    max_pairs: int = 2
    corpus_bytes: int = 100_000
    corpus_seed: int = 0
    needle_len: int = 256

    def sampler(self, train: TrainSettings) -> BatchSampler:
        corpus = synthetic_corpus(self.corpus_bytes, self.corpus_seed)
        return BatchSampler(corpus, train.seq_len, train.batch_size, self.kind, self.max_pairs, self.needle_len)


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=lambda: preset("toy"))
    train: TrainSettings = field(default_factory=TrainSettings)
    task: TaskSettings = field(default_factory=TaskSettings)
    seed: int = 0
    precision: int = 64

    @property
    def dtype(self):
        return np.float64 if self.precision == 64 else np.float32

    def problems(self) -> list[str]:
        out = list(self.model.problems())
        if self.precision not in (32, 64):
            out.append(f"precision must be 32 or 64, got {self.precision}")
        if self.train.steps < 1 or self.train.batch_size < 1 or self.train.seq_len < 2:
            out.append("train.steps, train.batch_size must be >= 1 and train.seq_len >= 2")
        if self.task.kind not in ("text", "kv_recall", "needle", "mix"):
            out.append(f"task.kind must be text, kv_recall, needle or mix, got {self.task.kind!r}")
        if self.task.corpus_bytes <= self.train.seq_len + 1:
            out.append("task.corpus_bytes must exceed train.seq_len + 1")
        if not 1 <= self.task.max_pairs <= 26:
            out.append("task.max_pairs must lie in [1, 26]")
        elif self.task.kind in ("kv_recall", "mix") and 4 * self.task.max_pairs + 5 > self.train.seq_len + 1:
            out.append("train.seq_len too short for task.max_pairs key-value pairs")
        try:
            self.train.schedule()
        except ValueError as exc:
            out.append(f"schedule: {exc}")
        return out

    def validate(self) -> "RunConfig":
        p = self.problems()
        if p:
            raise ConfigError(p)
        return self

    def to_text(self) -> str:
        lines = format_text({"seed": self.seed, "precision": self.precision})
        for prefix, obj in (("model", self.model), ("train", self.train), ("task", self.task)):
            lines += format_text({f"{prefix}.{k}": v for k, v in dataclasses.asdict(obj).items()})
        return lines

    @classmethod
    def from_mapping(cls, values: dict[str, str]) -> "RunConfig":
        values = dict(values)
        problems = []
        try:
            base_model = preset(values.pop("preset", "toy"))
        except ConfigError as exc:
            problems += exc.problems
            base_model = preset("toy")
        sections: dict[str, dict[str, str]] = {"model": {}, "train": {}, "task": {}}
        top: dict[str, str] = {}
        for k, v in values.items():
            head, _, rest = k.partition(".")
            if rest and head in sections:
                sections[head][rest] = v
            elif not rest:
                top[k] = v
            else:
                problems.append(f"unknown section in key {k!r}")
        parts = {}
        for name, cls_, base in (("model", ModelConfig, base_model), ("train", TrainSettings, None),
                                 ("task", TaskSettings, None)):
            try:
                parts[name] = config_from_mapping(cls_, sections[name], base)
            except ConfigError as exc:
                problems += [f"{name}.{p}" for p in exc.problems]
        kw = {}
        for k, raw in top.items():
            if k not in ("seed", "precision"):
                problems.append(f"unknown key {k!r}")
                continue
            try:
                kw[k] = int(raw)
            except ValueError:
                problems.append(f"{k}: cannot parse {raw!r} as int")
        if problems:
            raise ConfigError(problems)
        return cls(parts["model"], parts["train"], parts["task"], **kw).validate()

    @classmethod
    def from_text(cls, text: str, overrides: list[str] | None = None) -> "RunConfig":
        values = parse_text(text)
        for item in overrides or []:
            extra = parse_text(item)
            values.update(extra)
        return cls.from_mapping(values)
