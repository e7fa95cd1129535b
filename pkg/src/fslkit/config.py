"""Single declarative run configuration.

Defaults live here; a TOML file can override them and CLI flags override the
file. The resolved document is echoed into every report and model manifest.
Unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field
from pathlib import Path

from .errors import UsageError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


@dataclass
class RunConfig:
    # encoder
    d_pca: int = 64
    n_words: int = 128
    encode_mode: str = "soft"
    kmeans_max_iters: int = 100
    kmeans_n_init: int = 4
    pca_subsample: int = 1000
    pca_pool: str = "support"  # or "corpus": include unlabeled non-support vectors

    # dictionary
    p: int = 1
    shrinkage_lambda: float = 0.5

    # classifier
    lda_reg: float | None = None  # None: 1e-6 * trace(S_W) / dim
    lda_rule: str = "fisher"  # or "posterior"

    # evaluation protocol
    shots: list[int] = field(default_factory=lambda: [8, 16, 32, 64])
    trials: int = 10
    test_fraction: float = 0.2
    seed: int = 0
    threads: int = 1
    deterministic: bool = False

    # backbone: path to an ONNX file, or "grid" for the built-in projection
    backbone: str = ""
    tap: str = ""
    grid_size: int = 4
    grid_d_latent: int = 32
    grid_seed: int = 0

    def __post_init__(self):
        if self.encode_mode not in ("soft", "hard"):
            raise UsageError(f"encode_mode must be 'soft' or 'hard', got '{self.encode_mode}'")
        if self.lda_rule not in ("fisher", "posterior"):
            raise UsageError(f"lda_rule must be 'fisher' or 'posterior', got '{self.lda_rule}'")
        if self.pca_pool not in ("support", "corpus"):
            raise UsageError(f"pca_pool must be 'support' or 'corpus', got '{self.pca_pool}'")
        if not 0.0 <= self.shrinkage_lambda <= 1.0:
            raise UsageError(f"shrinkage_lambda must be in [0,1], got {self.shrinkage_lambda}")
        if not 0.0 < self.test_fraction < 1.0:
            raise UsageError(f"test_fraction must be in (0,1), got {self.test_fraction}")
        if self.trials < 1:
            raise UsageError(f"trials must be >= 1, got {self.trials}")
        if any(k < 2 for k in self.shots):
            raise UsageError(f"every shot count must be >= 2, got {self.shots}")
        if self.threads < 1:
            raise UsageError(f"threads must be >= 1, got {self.threads}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def field_names(cls) -> set[str]:
        return {f.name for f in dataclasses.fields(cls)}

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        unknown = set(doc) - cls.field_names()
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return cls(**doc)

    @classmethod
    def from_toml(cls, path: str | Path) -> "RunConfig":
        try:
            with open(path, "rb") as f:
                doc = tomllib.load(f)
        except FileNotFoundError:
            raise UsageError(f"config file not found: {path}") from None
        except tomllib.TOMLDecodeError as exc:
            raise UsageError(f"{path}: invalid TOML: {exc}") from exc
        return cls.from_dict(doc)

    def override(self, **kwargs) -> "RunConfig":
        """New config with non-None keyword overrides applied."""
        doc = self.to_dict()
        for key, value in kwargs.items():
            if key not in doc:
                raise UsageError(f"unknown config key: {key}")
            if value is not None:
                doc[key] = value
        return RunConfig.from_dict(doc)
