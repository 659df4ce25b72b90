"""Run configuration.

A config file is a JSON object whose keys are ``RunConfig`` field names;
command-line flags override it. Unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from unigrf.errors import ConfigError

OUTPUT_ROOT_ENV = "UNIGRF_OUTPUT_ROOT"


@dataclass
class RunConfig:
    # data
    data: str = ""  # processed store directory
    raw: str = ""  # raw ratings file, used when auto_prepare is set
    format: str = "dat"
    auto_prepare: bool = False
    n: int = 200
    # model
    layers: int = 2
    d: int = 64
    heads: int = 2
    # sampling and enhancer
    num_negatives: int = 128
    m: int = 5
    alpha: float = 0.85
    # loss weighting
    weighting: str = "adaptive"  # or "fixed": w = (lambda_a, lambda_b)
    temperature: float = 1.0
    lambda_a: float = 1.0
    lambda_b: float = 1.0
    ema_decay: float = 0.9
    weighter_granularity: str = "step"  # or "epoch"
    auto_scale: bool = False
    # optimization
    lr: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 100
    patience: int = 5
    seed: int = 0
    dtype: str = "float64"
    # evaluation and output
    ks: list[int] = field(default_factory=lambda: [10, 50])
    eval_batch_size: int = 256
    output_dir: str = ""
    audit: bool = False
    rank_dump: bool = False

    def validate(self) -> "RunConfig":
        problems = []
        if self.format not in ("dat", "csv"):
            problems.append(f"format must be dat or csv, not {self.format!r}")
        for name in ("n", "d", "heads", "num_negatives", "batch_size", "max_epochs", "eval_batch_size"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        if self.n < 3:
            problems.append("n must be >= 3")
        if self.layers < 0 or self.patience < 0:
            problems.append("layers and patience must be >= 0")
        if self.d % max(self.heads, 1):
            problems.append(f"d={self.d} must be divisible by heads={self.heads}")
        if not 0 <= self.m <= self.num_negatives:
            problems.append(f"need 0 <= m <= num_negatives, got m={self.m}")
        if not 0 < self.alpha <= 1:
            problems.append(f"alpha must lie in (0, 1], got {self.alpha}")
        if self.weighting not in ("adaptive", "fixed"):
            problems.append(f"weighting must be adaptive or fixed, not {self.weighting!r}")
        if self.weighter_granularity not in ("step", "epoch"):
            problems.append("weighter_granularity must be step or epoch")
        if self.temperature <= 0 or self.lambda_a <= 0 or self.lambda_b <= 0:
            problems.append("temperature and lambdas must be positive")
        if not 0 <= self.ema_decay < 1:
            problems.append("ema_decay must lie in [0, 1)")
        if self.lr <= 0:
            problems.append("lr must be positive")
        if self.dtype not in ("float64", "float32"):
            problems.append("dtype must be float64 or float32")
        if not self.ks or min(self.ks) < 1:
            problems.append("ks must be a non-empty list of positive cutoffs")
        if 10 not in self.ks:
            problems.append("ks must include 10 (early stopping watches NDCG@10)")
        if not self.data and not (self.auto_prepare and self.raw):
            problems.append("need a processed store (data) or raw + auto_prepare")
        if problems:
            raise ConfigError("; ".join(problems))
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        """Digest of everything that affects results (output location excluded)."""
        d = self.to_dict()
        d.pop("output_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def resolve_output(self) -> Path:
        if self.output_dir:
            return Path(self.output_dir)
        root = os.environ.get(OUTPUT_ROOT_ENV, "runs")
        return Path(root) / f"run-{self.hash()}"

    @classmethod
    def from_dict(cls, values: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**values)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path: str | os.PathLike, overrides: dict | None = None) -> "RunConfig":
        try:
            values = json.loads(Path(path).read_text())
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(values, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        values.update(overrides or {})
        return cls.from_dict(values)
