"""Metric value tests against hand computations and brute-force oracles."""

import math

import numpy as np
import pytest

from crossmatte.metrics import (
    MetricsReport,
    conn_metric,
    evaluate,
    gaussian_derivative_kernels,
    grad_metric,
    mad,
    mse,
)


class TestMadMse:
    def test_identical_is_zero(self, rng):
        x = rng.random((1, 8, 8))
        assert mad(x, x) == 0.0
        assert mse(x, x) == 0.0

    def test_small_uniform_offset(self, rng):
        g = rng.random((1, 8, 8)) * 0.9
        assert math.isclose(mad(g + 0.001, g), 1.0, rel_tol=1e-9)
        assert math.isclose(mse(g + 0.1, g), 10.0, rel_tol=1e-9)

    def test_two_by_two_hand_case(self):
        gt = np.zeros((1, 2, 2))
        pred = np.zeros((1, 2, 2))
        pred[0, 1, 1] = 1.0
        assert mad(pred, gt) == 250.0
        assert mse(pred, gt) == 250.0

    def test_symmetry(self, rng):
        a, b = rng.random((1, 6, 6)), rng.random((1, 6, 6))
        assert mad(a, b) == mad(b, a)
        assert mse(a, b) == mse(b, a)

    def test_direct_summation_oracle(self, rng):
        a, b = rng.random((1, 16, 16)), rng.random((1, 16, 16))
        mad_oracle = sum(abs(float(x) - float(y))
                         for x, y in zip(a.ravel(), b.ravel())) / 256 * 1e3
        mse_oracle = sum((float(x) - float(y)) ** 2
                         for x, y in zip(a.ravel(), b.ravel())) / 256 * 1e3
        assert abs(mad(a, b) - mad_oracle) < 1e-12 * max(1, mad_oracle)
        assert abs(mse(a, b) - mse_oracle) < 1e-12 * max(1, mse_oracle)

    def test_shape_mismatch(self, rng):
        with pytest.raises(ValueError):
            mad(rng.random((1, 4, 4)), rng.random((1, 5, 5)))


def grad_oracle(pred, gt, sigma=1.4):
    """Naive 2-D cross-correlation oracle with replicate boundaries."""
    g, dg = gaussian_derivative_kernels(sigma)
    hx = np.outer(g, dg)   # rows smoothed, columns differentiated
    hy = hx.T

    def correlate(im, kernel):
        half = kernel.shape[0] // 2
        padded = np.pad(im, half, mode="edge")
        out = np.zeros_like(im)
        k = kernel.shape[0]
        for i in range(im.shape[0]):
            for j in range(im.shape[1]):
                out[i, j] = np.sum(padded[i:i + k, j:j + k] * kernel)
        return out

    def amplitude(im):
        return np.hypot(correlate(im, hx), correlate(im, hy))

    diff = amplitude(pred) - amplitude(gt)
    return float((diff * diff).sum() * 1e-3)


class TestGrad:
    def test_identical_is_zero(self, rng):
        x = rng.random((1, 8, 8))
        assert grad_metric(x, x) == 0.0

    def test_two_constants_are_zero(self):
        a = np.full((1, 8, 8), 0.2)
        b = np.full((1, 8, 8), 0.7)
        assert grad_metric(a, b) < 1e-12

    def test_step_vs_ramp_matches_naive_oracle(self):
        step = np.zeros((8, 8))
        step[:, 4:] = 1.0
        ramp = np.tile(np.linspace(0, 1, 8), (8, 1))
        assert abs(grad_metric(step, ramp) - grad_oracle(step, ramp)) < 1e-8

    def test_random_pair_matches_naive_oracle(self, rng):
        a, b = rng.random((8, 8)), rng.random((8, 8))
        assert abs(grad_metric(a, b) - grad_oracle(a, b)) < 1e-8

    def test_symmetry(self, rng):
        a, b = rng.random((1, 8, 8)), rng.random((1, 8, 8))
        assert math.isclose(grad_metric(a, b), grad_metric(b, a), rel_tol=1e-12)

    def test_sigma_validation(self, rng):
        with pytest.raises(ValueError):
            grad_metric(rng.random((4, 4)), rng.random((4, 4)), sigma=0.0)


def conn_oracle(pred, gt, step=0.1):
    """Flood-fill (BFS) reimplementation of the connectivity sweep."""

    def largest_component(mask):
        best: set[tuple[int, int]] = set()
        seen = np.zeros_like(mask, dtype=bool)
        h, w = mask.shape
        for si in range(h):
            for sj in range(w):
                if not mask[si, sj] or seen[si, sj]:
                    continue
                queue = [(si, sj)]
                seen[si, sj] = True
                comp = set()
                while queue:
                    i, j = queue.pop()
                    comp.add((i, j))
                    for ni, nj in ((i - 1, j), (i + 1, j), (i, j - 1), (i, j + 1)):
                        if 0 <= ni < h and 0 <= nj < w and mask[ni, nj] \
                                and not seen[ni, nj]:
                            seen[ni, nj] = True
                            queue.append((ni, nj))
                if len(comp) > len(best):
                    best = comp
        out = np.zeros_like(mask, dtype=bool)
        for i, j in best:
            out[i, j] = True
        return out

    thresholds = np.arange(0.0, 1.0 + step, step)
    level = -np.ones_like(pred)
    for i in range(1, len(thresholds)):
        theta = thresholds[i]
        omega = largest_component((pred >= theta) & (gt >= theta))
        detached = (level == -1) & ~omega
        level[detached] = thresholds[i - 1]
    level[level == -1] = 1.0
    dp, dg = pred - level, gt - level
    phi_p = 1.0 - dp * (dp >= 0.15)
    phi_g = 1.0 - dg * (dg >= 0.15)
    return float(np.abs(phi_p - phi_g).sum() * 1e-3)


def disk_mask(n=8, r=2.6):
    yy, xx = np.mgrid[0:n, 0:n]
    return (np.hypot(yy - n / 2 + 0.5, xx - n / 2 + 0.5) <= r).astype(np.float64)


class TestConn:
    def test_identical_is_zero(self, rng):
        x = rng.random((1, 8, 8))
        assert conn_metric(x, x) == 0.0

    def test_matching_disks_zero(self):
        d = disk_mask()
        assert conn_metric(d, d) == 0.0

    def test_detached_blob_matches_flood_fill_oracle(self):
        gt = disk_mask()
        pred = gt.copy()
        pred[0, 7] = 1.0  # detached single-pixel blob absent in gt
        value = conn_metric(pred, gt)
        assert value > 0
        assert abs(value - conn_oracle(pred, gt)) < 1e-10

    def test_soft_mattes_match_flood_fill_oracle(self, rng):
        base = disk_mask()
        pred = np.clip(base * rng.uniform(0.5, 1.0, base.shape), 0, 1)
        gt = np.clip(base * rng.uniform(0.5, 1.0, base.shape), 0, 1)
        assert abs(conn_metric(pred, gt) - conn_oracle(pred, gt)) < 1e-10

    def test_step_validation(self, rng):
        with pytest.raises(ValueError):
            conn_metric(rng.random((4, 4)), rng.random((4, 4)), step=1.5)


class TestEvaluate:
    def test_single_identical_pair(self, rng):
        x = rng.random((1, 8, 8))
        rep = evaluate([x], [x.copy()])
        assert rep.row() == (0.0, 0.0, 0.0, 0.0)
        assert rep.count == 1

    def test_mean_of_two_images(self, rng):
        g1 = rng.random((1, 8, 8)) * 0.5
        g2 = rng.random((1, 8, 8)) * 0.5
        rep = evaluate([g1 + 0.1, g2 + 0.3], [g1, g2])
        assert math.isclose(rep.mad, (100.0 + 300.0) / 2, rel_tol=1e-9)
        assert rep.count == 2

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            evaluate([], [])

    def test_length_mismatch_rejected(self, rng):
        x = rng.random((1, 4, 4))
        with pytest.raises(ValueError, match="length"):
            evaluate([x, x], [x])

    def test_report_serialization(self):
        rep = MetricsReport(mad=1.5, mse=0.5, grad=0.1, conn=0.2, count=3)
        text = rep.to_text()
        assert text.splitlines()[0] == "mad=1.500000"
        assert "count=3" in text
        assert '"mad": 1.5' in rep.to_json()
