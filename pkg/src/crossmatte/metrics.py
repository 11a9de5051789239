"""Matting quality measures: MAD, MSE, Grad and Conn.

Reported values carry the conventional reporting scales: MAD and MSE are
means multiplied by 1e3; Grad and Conn are pixel sums multiplied by 1e-3.
All four are non-negative and exactly zero on identical inputs. MAD, MSE and
Grad are symmetric in (pred, gt); Conn is not (its connectivity source region
is defined jointly but the discrepancy map is not symmetric under swapping).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .tensor import Tensor

GRAD_SIGMA = 1.4
CONN_STEP = 0.1
CONN_DISCOUNT = 0.15


def _gray2d(x, name: str) -> np.ndarray:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim != 2:
        raise ValueError(f"{name}: expected [1,H,W] or [H,W], got shape {arr.shape}")
    return arr


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    p = _gray2d(pred, "pred")
    g = _gray2d(gt, "gt")
    if p.shape != g.shape:
        raise ValueError(f"prediction shape {p.shape} != ground truth shape {g.shape}")
    return p, g


def mad(pred, gt) -> float:
    """Mean absolute difference, scaled by 1e3."""
    p, g = _pair(pred, gt)
    return float(np.abs(p - g).mean() * 1e3)


def mse(pred, gt) -> float:
    """Mean squared error, scaled by 1e3."""
    p, g = _pair(pred, gt)
    d = p - g
    return float((d * d).mean() * 1e3)


def gaussian_derivative_kernels(sigma: float) -> tuple[np.ndarray, np.ndarray]:
    """1-D smoothing and derivative-of-Gaussian taps, jointly normalized so
    their outer product has unit Frobenius norm."""
    half = int(math.ceil(sigma * math.sqrt(-2.0 * math.log(
        math.sqrt(2.0 * math.pi) * sigma * 1e-2))))
    xs = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-xs * xs / (2 * sigma * sigma)) / (sigma * math.sqrt(2 * math.pi))
    dg = -xs * g / (sigma * sigma)
    g /= math.sqrt(float((g * g).sum()))
    dg /= math.sqrt(float((dg * dg).sum()))
    return g, dg


def _gradient_magnitude(im: np.ndarray, sigma: float) -> np.ndarray:
    # separable cross-correlation with replicate ("nearest") boundaries
    g, dg = gaussian_derivative_kernels(sigma)
    gx = ndimage.correlate1d(ndimage.correlate1d(im, g, axis=0, mode="nearest"),
                             dg, axis=1, mode="nearest")
    gy = ndimage.correlate1d(ndimage.correlate1d(im, dg, axis=0, mode="nearest"),
                             g, axis=1, mode="nearest")
    return np.hypot(gx, gy)


def grad_metric(pred, gt, sigma: float = GRAD_SIGMA) -> float:
    """Sum of squared differences between Gaussian-derivative gradient
    magnitudes, scaled by 1e-3. Zero iff the magnitude maps agree."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    p, g = _pair(pred, gt)
    diff = _gradient_magnitude(p, sigma) - _gradient_magnitude(g, sigma)
    return float((diff * diff).sum() * 1e-3)


def _largest_foreground_component(mask: np.ndarray) -> np.ndarray:
    """Largest 4-connected True component; all-False when mask is empty."""
    if not mask.any():
        return np.zeros_like(mask, dtype=bool)
    labels, n = ndimage.label(mask)  # default structure = 4-connectivity
    counts = np.bincount(labels.ravel())
    counts[0] = 0
    return labels == counts.argmax()


def conn_metric(pred, gt, step: float = CONN_STEP) -> float:
    """Connectivity error, scaled by 1e-3.

    Sweeps thresholds upward in ``step`` increments; at each threshold the
    source region is the largest 4-connected component where prediction and
    ground truth both clear the threshold. A pixel's connectedness level is
    the last threshold at which it stayed attached to the source; the
    discrepancy sums the 0.15-discounted degree differences.
    """
    if not 0.0 < step < 1.0:
        raise ValueError(f"step must lie in (0, 1), got {step}")
    p, g = _pair(pred, gt)
    thresh_steps = np.arange(0.0, 1.0 + step, step)
    level = -np.ones_like(p)
    for i in range(1, len(thresh_steps)):
        theta = thresh_steps[i]
        joint = (p >= theta) & (g >= theta)
        omega = _largest_foreground_component(joint)
        newly_detached = (level == -1) & ~omega
        level[newly_detached] = thresh_steps[i - 1]
    level[level == -1] = 1.0
    dp = p - level
    dg = g - level
    phi_p = 1.0 - dp * (dp >= CONN_DISCOUNT)
    phi_g = 1.0 - dg * (dg >= CONN_DISCOUNT)
    return float(np.abs(phi_p - phi_g).sum() * 1e-3)


@dataclass
class MetricsReport:
    """Scaled metric means over an evaluation set, in reporting order
    MAD, MSE, Grad, Conn."""

    mad: float
    mse: float
    grad: float
    conn: float
    count: int

    def to_text(self) -> str:
        return (f"mad={self.mad:.6f}\nmse={self.mse:.6f}\n"
                f"grad={self.grad:.6f}\nconn={self.conn:.6f}\ncount={self.count}\n")

    def to_json(self) -> str:
        import json
        return json.dumps({"mad": self.mad, "mse": self.mse, "grad": self.grad,
                           "conn": self.conn, "count": self.count}, sort_keys=True)

    def row(self) -> tuple[float, float, float, float]:
        return (self.mad, self.mse, self.grad, self.conn)


def evaluate(pred_iter, gt_iter) -> MetricsReport:
    """Per-image metrics averaged over paired iterators of mattes."""
    sums = np.zeros(4)
    count = 0
    preds = iter(pred_iter)
    gts = iter(gt_iter)
    while True:
        p = next(preds, _SENTINEL)
        g = next(gts, _SENTINEL)
        if p is _SENTINEL and g is _SENTINEL:
            break
        if p is _SENTINEL or g is _SENTINEL:
            raise ValueError("evaluate: prediction and ground-truth streams "
                             "have different lengths")
        sums += (mad(p, g), mse(p, g), grad_metric(p, g), conn_metric(p, g))
        count += 1
    if count == 0:
        raise ValueError("evaluate: empty input streams")
    means = sums / count
    return MetricsReport(mad=float(means[0]), mse=float(means[1]),
                         grad=float(means[2]), conn=float(means[3]), count=count)


_SENTINEL = object()
