from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import asdict, dataclass


class Arch(str, enum.Enum):
    ONE_TIER = "one_tier"
    TWO_TIER = "two_tier"


@dataclass(frozen=True)
class ModelConfig:
    arch: Arch = Arch.ONE_TIER
    d_model: int = 32
    n_layers: int = 4
    n_heads: int = 2
    ff_dim: int = 64
    max_len: int = 256
    vocab_buckets: int = 4096
    dropout: float = 0.1
    seed: int = 0
    include_description: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "arch", Arch(self.arch))
        for name in ("d_model", "n_layers", "n_heads", "ff_dim", "max_len", "vocab_buckets"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.max_len < 8:
            raise ValueError("max_len must be >= 8")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.arch is Arch.TWO_TIER and self.n_layers < 2:
            raise ValueError("two_tier needs n_layers >= 2 (thread and cross-thread layers)")

    @property
    def n_thread_layers(self) -> int:
        """Layers applied within each thread; the rest mix thread summaries."""
        if self.arch is Arch.ONE_TIER:
            return self.n_layers
        return self.n_layers - self.n_layers // 2

    def to_dict(self) -> dict:
        d = asdict(self)
        d["arch"] = self.arch.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]
