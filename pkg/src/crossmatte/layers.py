"""Parameter-owning building blocks shared by the encoder, decoder and head.

Each layer registers its tensors in a ParamStore under a slash-separated
path at construction time, so checkpointing and the optimizer see a flat,
deterministically ordered namespace.
"""

from __future__ import annotations

import math

import numpy as np

from .tensor import (
    ParamStore,
    Tensor,
    concat,
    conv2d,
    gelu,
    he_normal,
    layer_norm,
    matmul,
    narrow,
    pad2d,
    relu,
    softmax,
    transpose,
    trunc_normal,
)

_ACTIVATIONS = {
    "relu": relu,
    "gelu": gelu,
    "linear": lambda x: x,
}


def activation(name: str):
    try:
        return _ACTIVATIONS[name]
    except KeyError:
        raise ValueError(f"unknown activation {name!r}; pick from {sorted(_ACTIVATIONS)}") from None


class Linear:
    """y = x @ w + b over the trailing axis."""

    def __init__(self, store: ParamStore, name: str, c_in: int, c_out: int,
                 rng: np.random.Generator, dtype=np.float64, std: float = 0.02):
        self.w = store.param(f"{name}/w", trunc_normal(rng, (c_in, c_out), std, dtype))
        self.b = store.param(f"{name}/b", np.zeros(c_out, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return matmul(x, self.w) + self.b


class LayerNorm:
    """Per-token normalization over the trailing channel axis."""

    def __init__(self, store: ParamStore, name: str, channels: int,
                 dtype=np.float64, eps: float = 1e-6):
        self.gamma = store.param(f"{name}/gamma", np.ones(channels, dtype=dtype))
        self.beta = store.param(f"{name}/beta", np.zeros(channels, dtype=dtype))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)


class Mlp:
    """Two-layer token MLP, channels -> expansion*channels -> channels."""

    def __init__(self, store: ParamStore, name: str, channels: int,
                 rng: np.random.Generator, dtype=np.float64,
                 expansion: int = 4, act: str = "gelu"):
        hidden = expansion * channels
        self.fc1 = Linear(store, f"{name}/fc1", channels, hidden, rng, dtype)
        self.fc2 = Linear(store, f"{name}/fc2", hidden, channels, rng, dtype)
        self.act = activation(act)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(self.act(self.fc1(x)))


class Conv2d:
    """3x3/1x1 convolution wrapper with reflect or zero padding."""

    def __init__(self, store: ParamStore, name: str, c_in: int, c_out: int,
                 kernel: int, rng: np.random.Generator, dtype=np.float64,
                 stride: int = 1, pad_mode: str = "reflect", init: str = "he"):
        fan_in = c_in * kernel * kernel
        if init == "he":
            w = he_normal(rng, (c_out, c_in, kernel, kernel), fan_in, dtype)
        else:
            w = trunc_normal(rng, (c_out, c_in, kernel, kernel), 0.02, dtype)
        self.w = store.param(f"{name}/w", w)
        self.b = store.param(f"{name}/b", np.zeros(c_out, dtype=dtype))
        self.kernel = kernel
        self.stride = stride
        self.pad_mode = pad_mode

    def __call__(self, x: Tensor) -> Tensor:
        pad = (self.kernel - 1) // 2
        if pad and self.pad_mode == "reflect":
            x = pad2d(x, pad, mode="reflect")
            pad = 0
        return conv2d(x, self.w, self.b, stride=self.stride, padding=pad)


class GroupNorm:
    """Batch-independent normalization over channel groups of [B,C,H,W]."""

    def __init__(self, store: ParamStore, name: str, channels: int, groups: int,
                 dtype=np.float64, eps: float = 1e-6):
        if channels % groups:
            raise ValueError(f"group_norm: {channels} channels not divisible by {groups} groups")
        self.gamma = store.param(f"{name}/gamma", np.ones(channels, dtype=dtype))
        self.beta = store.param(f"{name}/beta", np.zeros(channels, dtype=dtype))
        self.groups = groups
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        b, c, h, w = x.shape
        g = self.groups
        xg = x.reshape(b, g, (c // g) * h * w)
        mu = xg.mean(axis=2, keepdims=True)
        centered = xg - mu
        var = (centered * centered).mean(axis=2, keepdims=True)
        xhat = (centered / (var + self.eps) ** 0.5).reshape(b, c, h, w)
        gamma = self.gamma.reshape(1, c, 1, 1)
        beta = self.beta.reshape(1, c, 1, 1)
        return xhat * gamma + beta


class MultiHeadAttention:
    """Scaled dot-product attention over [N, B, C] token sequences.

    Separate query/key/value inputs; heads split the channel axis into
    contiguous chunks; scores are scaled by 1/sqrt(C/heads). Long query
    sequences are processed in row chunks so the [Nq, Nk] score matrix never
    materializes whole (softmax rows are independent, so the result is
    identical up to float associativity).
    """

    query_chunk = 512

    def __init__(self, store: ParamStore, name: str, channels: int, heads: int,
                 rng: np.random.Generator, dtype=np.float64):
        if channels % heads:
            raise ValueError(f"attention: channels {channels} not divisible by heads {heads}")
        self.heads = heads
        self.head_dim = channels // heads
        self.q_proj = Linear(store, f"{name}/q", channels, channels, rng, dtype)
        self.k_proj = Linear(store, f"{name}/k", channels, channels, rng, dtype)
        self.v_proj = Linear(store, f"{name}/v", channels, channels, rng, dtype)
        self.out_proj = Linear(store, f"{name}/out", channels, channels, rng, dtype)

    def __call__(self, query: Tensor, key: Tensor, value: Tensor,
                 need_weights: bool = True) -> tuple[Tensor, Tensor | None]:
        """Returns (attended [Nq,B,C], weights [B,heads,Nq,Nk] or None)."""
        n_q, b, c = query.shape
        n_k = key.shape[0]
        q = self._split(self.q_proj(query), n_q, b)
        k = self._split(self.k_proj(key), n_k, b)
        v = self._split(self.v_proj(value), n_k, b)
        k_t = transpose(k, (0, 1, 3, 2))
        scale = 1.0 / math.sqrt(self.head_dim)
        if n_q <= self.query_chunk:
            weights = softmax(matmul(q, k_t) * scale, axis=-1)
            mixed = matmul(weights, v)
            out_weights = weights if need_weights else None
        else:
            parts, weight_parts = [], []
            for start in range(0, n_q, self.query_chunk):
                length = min(self.query_chunk, n_q - start)
                q_chunk = narrow(q, 2, start, length)
                w_chunk = softmax(matmul(q_chunk, k_t) * scale, axis=-1)
                parts.append(matmul(w_chunk, v))
                if need_weights:
                    weight_parts.append(w_chunk)
            mixed = concat(parts, axis=2)
            out_weights = concat(weight_parts, axis=2) if need_weights else None
        merged = transpose(mixed, (2, 0, 1, 3)).reshape(n_q, b, c)
        return self.out_proj(merged), out_weights

    def _split(self, x: Tensor, n: int, b: int) -> Tensor:
        # [N,B,C] -> [B, heads, N, head_dim]
        return transpose(x.reshape(n, b, self.heads, self.head_dim), (1, 2, 0, 3))
