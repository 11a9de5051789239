"""Model architecture configuration."""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

ABLATIONS = ("full", "ca_only", "sa_only")
PYRAMID_LEVELS = (4, 8, 16)
LEVEL_PAIRS = ((8, 16), (4, 8), (4, 16))


@dataclass
class ModelConfig:
    """Architecture knobs for the matting network.

    ``res`` is the training resolution; it fixes the size of the learnable
    position tables (other resolutions resample them at inference).
    """

    channels: int = 256
    heads: int = 8
    blocks: int = 4
    ablation: str = "full"
    hr_level: int = 8
    lr_level: int = 16
    enc_channels: tuple[int, ...] = (16, 32, 64, 128)
    enc_groups: int = 4
    res: tuple[int, int] = (224, 224)
    mlp_act: str = "gelu"
    conv_act: str = "relu"
    ln_eps: float = 1e-6
    dtype: str = "float32"

    def __post_init__(self):
        self.enc_channels = tuple(int(c) for c in self.enc_channels)
        self.res = (int(self.res[0]), int(self.res[1])) if not isinstance(self.res, int) \
            else (int(self.res), int(self.res))
        self.validate()

    def validate(self) -> None:
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}; pick from {ABLATIONS}")
        if self.channels % self.heads:
            raise ValueError(f"channels {self.channels} not divisible by heads {self.heads}")
        if self.blocks < 1:
            raise ValueError("need at least one decoder block")
        if self.hr_level not in PYRAMID_LEVELS or self.lr_level not in PYRAMID_LEVELS:
            raise ValueError(f"levels must be in {PYRAMID_LEVELS}, "
                             f"got hr={self.hr_level} lr={self.lr_level}")
        if self.hr_level >= self.lr_level:
            raise ValueError(
                f"hr_level ({self.hr_level}) must be strictly shallower than "
                f"lr_level ({self.lr_level})")
        if len(self.enc_channels) != 4:
            raise ValueError("encoder needs exactly 4 stage channel counts")
        if self.res[0] % 16 or self.res[1] % 16:
            raise ValueError(f"training resolution {self.res} must be a multiple of 16")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    @property
    def token_grid(self) -> tuple[int, int]:
        return (self.res[0] // self.hr_level, self.res[1] // self.hr_level)

    def to_dict(self) -> dict:
        return {
            "channels": self.channels,
            "heads": self.heads,
            "blocks": self.blocks,
            "ablation": self.ablation,
            "hr_level": self.hr_level,
            "lr_level": self.lr_level,
            "enc_channels": list(self.enc_channels),
            "enc_groups": self.enc_groups,
            "res": list(self.res),
            "mlp_act": self.mlp_act,
            "conv_act": self.conv_act,
            "ln_eps": self.ln_eps,
            "dtype": self.dtype,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        kwargs = dict(d)
        if "enc_channels" in kwargs:
            kwargs["enc_channels"] = tuple(kwargs["enc_channels"])
        if "res" in kwargs and not isinstance(kwargs["res"], int):
            kwargs["res"] = tuple(kwargs["res"])
        return cls(**kwargs)

    def config_hash(self) -> str:
        import hashlib
        import json
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]
