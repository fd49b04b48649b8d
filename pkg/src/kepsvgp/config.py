"""Run configuration: strict JSON sections for model, training, data, evaluation, benchmark and paths."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .errors import InvalidConfig
from .model import TransformerConfig
from .training import TrainConfig


@dataclass
class DataConfig:
    task: str = "majority"  # majority | csv
    n_train: int = 2000
    n_val: int = 500
    n_test: int = 1000
    seq_len: int = 16
    vocab: int = 8
    classes: int = 4
    seed: int = 0
    boost: float = 0.35
    path: Optional[str] = None  # csv task: one file split into train/val/test in order
    n_ood: Optional[int] = None  # defaults to n_test

    def validate(self):
        if self.task not in ("majority", "csv"):
            raise InvalidConfig(f"data.task must be 'majority' or 'csv', got {self.task!r}")
        if self.task == "csv" and not self.path:
            raise InvalidConfig("data.path is required for the csv task")
        for name in ("n_train", "n_val", "n_test", "seq_len", "vocab", "classes"):
            if getattr(self, name) < 1:
                raise InvalidConfig(f"data.{name} must be positive")


@dataclass
class EvalConfig:
    mc_samples: int = 10
    ece_bins: int = 15
    severities: list = field(default_factory=lambda: [1, 2, 3, 4, 5])
    hist_bins: int = 20
    spectrum_sequences: int = 16

    def validate(self):
        if self.mc_samples < 1 or self.ece_bins < 1 or self.hist_bins < 1 or self.spectrum_sequences < 1:
            raise InvalidConfig("eval.mc_samples, ece_bins, hist_bins and spectrum_sequences must be >= 1")
        if not set(self.severities) <= set(range(1, 6)):
            raise InvalidConfig(f"eval.severities must lie in 1..5, got {self.severities}")


@dataclass
class BenchConfig:
    lengths: list = field(default_factory=lambda: [128, 256, 512, 1024, 2048, 4096])
    repetitions: int = 3
    mechanisms: list = field(default_factory=lambda: ["softmax", "kep-addition", "kep-concatenation"])
    d_model: int = 64
    d_k: int = 64
    n_heads: int = 1
    rank: int = 10
    seed: int = 0

    def validate(self):
        if len(self.lengths) < 4:
            raise InvalidConfig("bench.lengths needs at least 4 sequence lengths")
        if self.repetitions < 1:
            raise InvalidConfig("bench.repetitions must be >= 1")
        unknown = set(self.mechanisms) - {"softmax", "kep-addition", "kep-concatenation"}
        if unknown:
            raise InvalidConfig(f"unknown bench mechanisms {sorted(unknown)}")


@dataclass
class PathsConfig:
    checkpoint_dir: str = "checkpoint"
    report_dir: str = "reports"


def _strict(cls, section, values):
    if values is None:
        return cls()
    if not isinstance(values, dict):
        raise InvalidConfig(f"section {section!r} must be an object")
    names = {f.name for f in dataclasses.fields(cls)}
    for key in values:
        if key not in names:
            raise InvalidConfig(f"unknown key '{section}.{key}'")
    try:
        return cls(**values)
    except TypeError as exc:
        raise InvalidConfig(f"section {section!r}: {exc}") from None


SECTIONS = ("model", "train", "data", "eval", "bench", "paths")


@dataclass
class RunConfig:
    """Everything a command needs.  Defaults: eta=10, rank s=10, 10 MC samples, 15 ECE bins."""

    model: dict = field(default_factory=dict)  # TransformerConfig overrides; sizes default from data
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    @classmethod
    def from_dict(cls, raw):
        if not isinstance(raw, dict):
            raise InvalidConfig("config must be a JSON object")
        for key in raw:
            if key not in SECTIONS:
                raise InvalidConfig(f"unknown key '{key}'")
        model = raw.get("model") or {}
        if not isinstance(model, dict):
            raise InvalidConfig("section 'model' must be an object")
        allowed = {f.name for f in dataclasses.fields(TransformerConfig)}
        for key in model:
            if key not in allowed:
                raise InvalidConfig(f"unknown key 'model.{key}'")
        cfg = cls(
            dict(model),
            _strict(TrainConfig, "train", raw.get("train")),
            _strict(DataConfig, "data", raw.get("data")),
            _strict(EvalConfig, "eval", raw.get("eval")),
            _strict(BenchConfig, "bench", raw.get("bench")),
            _strict(PathsConfig, "paths", raw.get("paths")),
        )
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path):
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise InvalidConfig(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise InvalidConfig(f"config {path} is not valid JSON: {exc}") from None
        return cls.from_dict(raw)

    def validate(self):
        self.data.validate()
        self.eval.validate()
        self.bench.validate()
        self.train.validate()
        self.transformer_config()

    def transformer_config(self) -> TransformerConfig:
        """Model sizes default to the data: twice the vocabulary leaves room for OOD tokens."""
        values = {
            "vocab_size": 2 * self.data.vocab,
            "seq_len": self.data.seq_len,
            "n_classes": self.data.classes,
        }
        values.update(self.model)
        try:
            return TransformerConfig(**values)
        except TypeError as exc:
            raise InvalidConfig(f"section 'model': {exc}") from None

    def to_dict(self):
        return {
            "model": dict(self.model),
            "train": dataclasses.asdict(self.train),
            "data": dataclasses.asdict(self.data),
            "eval": dataclasses.asdict(self.eval),
            "bench": dataclasses.asdict(self.bench),
            "paths": dataclasses.asdict(self.paths),
        }

    def digest(self):
        return config_hash(self.to_dict())


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(obj):
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()[:16]
