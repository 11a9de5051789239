"""Convolutional backbone producing the three-level feature pyramid.

Four stages of [strided 3x3 conv -> group norm -> act -> 3x3 conv -> act]
halve the resolution each, and the pyramid taps stages 2..4 at 1/4, 1/8 and
1/16 of the input. Reflect padding keeps constant images spatially constant
through every stage, which makes the translation-consistency property
directly testable.
"""

from __future__ import annotations

import numpy as np

from .config import ModelConfig, PYRAMID_LEVELS
from .layers import Conv2d, GroupNorm, activation
from .tensor import ParamStore, Tensor


class ResolutionError(ValueError):
    """Input spatial extents violate the stride-16 constraint."""


class FeaturePyramid:
    """Encoder outputs at 1/4, 1/8 and 1/16 of the input resolution."""

    __slots__ = ("f4", "f8", "f16")

    def __init__(self, f4: Tensor, f8: Tensor, f16: Tensor):
        self.f4 = f4
        self.f8 = f8
        self.f16 = f16

    def level(self, divisor: int) -> Tensor:
        try:
            return {4: self.f4, 8: self.f8, 16: self.f16}[divisor]
        except KeyError:
            raise ValueError(f"no pyramid level 1/{divisor}; available: {PYRAMID_LEVELS}") from None


class _Stage:
    def __init__(self, store: ParamStore, name: str, c_in: int, c_out: int,
                 groups: int, act: str, rng: np.random.Generator, dtype):
        self.down = Conv2d(store, f"{name}/down", c_in, c_out, 3, rng, dtype, stride=2)
        self.norm = GroupNorm(store, f"{name}/norm", c_out, groups, dtype)
        self.conv = Conv2d(store, f"{name}/conv", c_out, c_out, 3, rng, dtype, stride=1)
        self.act = activation(act)

    def __call__(self, x: Tensor) -> Tensor:
        return self.act(self.conv(self.act(self.norm(self.down(x)))))


class ConvEncoder:
    """Maps an RGB image in [0,1] to a FeaturePyramid."""

    def __init__(self, store: ParamStore, cfg: ModelConfig,
                 rng: np.random.Generator, name: str = "encoder"):
        dtype = cfg.np_dtype
        chans = cfg.enc_channels
        self.stages = []
        c_prev = 3
        for i, c in enumerate(chans):
            self.stages.append(_Stage(store, f"{name}/stage{i}", c_prev, c,
                                      cfg.enc_groups, cfg.conv_act, rng, dtype))
            c_prev = c
        # per-level channel counts: stages 2, 3, 4
        self.level_channels = {4: chans[1], 8: chans[2], 16: chans[3]}

    def __call__(self, image: Tensor) -> FeaturePyramid:
        if image.ndim != 4 or image.shape[1] != 3:
            raise ResolutionError(f"encoder expects [B,3,H,W], got {image.shape}")
        _, _, h, w = image.shape
        if h % 16 or w % 16:
            raise ResolutionError(
                f"input resolution {h}x{w} must be a multiple of 16 in both extents")
        taps = []
        x = image
        for stage in self.stages:
            x = stage(x)
            taps.append(x)
        return FeaturePyramid(f4=taps[1], f8=taps[2], f16=taps[3])


def select_levels(pyramid: FeaturePyramid, hr_level: int, lr_level: int
                  ) -> tuple[Tensor, Tensor]:
    """Pick the high- and low-resolution decoder inputs from the pyramid.

    ``hr_level`` must be strictly shallower (smaller divisor) than
    ``lr_level``; both are pyramid divisors from {4, 8, 16}.
    """
    if hr_level not in PYRAMID_LEVELS or lr_level not in PYRAMID_LEVELS:
        raise ValueError(f"levels must be in {PYRAMID_LEVELS}, got ({hr_level}, {lr_level})")
    if hr_level >= lr_level:
        raise ValueError(
            f"hr_level 1/{hr_level} must be strictly shallower than lr_level 1/{lr_level}")
    return pyramid.level(hr_level), pyramid.level(lr_level)
