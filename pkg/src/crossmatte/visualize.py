"""Heatmaps of decoder activations, mirroring per-stage attention behavior.

The default map is activation energy: per-token channel-mean absolute
activation, min-max normalized onto the token grid and upsampled to the
input resolution. The gradient-weighted variant weights channels by the
gradient of the mean matte inside a probe box before collapsing them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .predictor import MattingModel
from .tensor import Tensor, backward, bilinear_resize, no_grad, tmean

TAPS = ("ca", "sa", "ceeb", "seb", "detector")

_TAP_KEYS = {
    "ca": "cross_attention",
    "sa": "self_attention",
    "ceeb": "contour_branch",
    "seb": "semantic_branch",
    "detector": "detector",
}


@dataclass
class HeatmapRequest:
    taps: tuple[str, ...]
    block: int = 0
    gradcam: bool = False
    box: tuple[int, int, int, int] | None = None  # r0, c0, r1, c1 (exclusive)

    def __post_init__(self):
        if not self.taps:
            raise ValueError("at least one tap is required")
        unknown = [t for t in self.taps if t not in TAPS]
        if unknown:
            raise ValueError(f"unknown taps {unknown}; choose from {TAPS}")


@dataclass
class HeatmapResult:
    heatmaps: dict[str, np.ndarray] = field(default_factory=dict)  # [H, W] in [0,1]
    warnings: list[str] = field(default_factory=list)


def _normalize(grid: np.ndarray) -> np.ndarray:
    lo, hi = float(grid.min()), float(grid.max())
    if hi - lo < 1e-12:
        return np.zeros_like(grid)
    return (grid - lo) / (hi - lo)


def _to_image_grid(values: np.ndarray, grid: tuple[int, int],
                   out_h: int, out_w: int) -> np.ndarray:
    spatial = _normalize(values.reshape(grid))
    with no_grad():
        up = bilinear_resize(Tensor(spatial[None, None]), out_h, out_w,
                             align_corners=False)
    return np.clip(up.data[0, 0], 0.0, 1.0)


def render_heatmaps(model: MattingModel, image: Tensor,
                    request: HeatmapRequest) -> HeatmapResult:
    """Forward the image once and emit one [0,1] heatmap per available tap.

    Taps removed by the model's ablation produce a warning instead of a map.
    Deterministic: depends only on weights and the input image.
    """
    if request.block >= model.cfg.blocks:
        raise ValueError(
            f"block index {request.block} out of range; model has {model.cfg.blocks}")
    _, _, h, w = image.shape
    record: dict = {}
    result = HeatmapResult()
    if request.gradcam:
        model.store.zero_grads()
        pred = model(image, record=record)
        r0, c0, r1, c1 = request.box or (0, 0, h, w)
        target = tmean(_box_slice(pred.matte, r0, c0, r1, c1))
        backward(target)
    else:
        with no_grad():
            model(image, record=record)
    grid = record["token_grid"]
    for tap in request.taps:
        key = f"block{request.block}/{_TAP_KEYS[tap]}"
        if key not in record:
            result.warnings.append(
                f"tap {tap!r} unavailable in this model (ablation "
                f"{model.cfg.ablation!r}); skipped")
            continue
        tokens = record[key]          # [N, B, C]
        act = tokens.data[:, 0, :]
        if request.gradcam:
            if tokens.grad is None:
                result.warnings.append(
                    f"tap {tap!r} received no gradient; skipped")
                continue
            weights = tokens.grad[:, 0, :].mean(axis=0)  # [C]
            cam = np.maximum(act @ weights, 0.0)
        else:
            cam = np.abs(act).mean(axis=1)
        result.heatmaps[tap] = _to_image_grid(cam, grid, h, w)
    return result


def _box_slice(matte: Tensor, r0: int, c0: int, r1: int, c1: int) -> Tensor:
    # crop via a mask multiply so the graph stays differentiable
    b, c, h, w = matte.shape
    if not (0 <= r0 < r1 <= h and 0 <= c0 < c1 <= w):
        raise ValueError(f"box ({r0},{c0},{r1},{c1}) outside matte {h}x{w}")
    mask = np.zeros((1, 1, h, w))
    mask[:, :, r0:r1, c0:c1] = 1.0
    area_scale = (h * w) / ((r1 - r0) * (c1 - c0))
    return matte * Tensor(mask * area_scale)


def heat_colormap(values: np.ndarray) -> np.ndarray:
    """Map [0,1] to a blue->cyan->yellow->red ramp, returns [3, H, W]."""
    v = np.clip(values, 0.0, 1.0)
    r = np.clip(2.0 * v - 0.5, 0.0, 1.0)
    g = 1.0 - np.abs(2.0 * v - 1.0) * 0.8
    b = np.clip(1.5 - 2.0 * v, 0.0, 1.0)
    return np.stack([r, g, b])


def overlay(image_chw: np.ndarray, heat: np.ndarray, weight: float = 0.5) -> np.ndarray:
    return np.clip((1.0 - weight) * image_chw + weight * heat_colormap(heat), 0.0, 1.0)
