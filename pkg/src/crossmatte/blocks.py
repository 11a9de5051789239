"""Decoder transformer blocks over mixed-resolution token streams.

Each block runs a contour/semantic detector (cross-attention from the
low-resolution query stream onto high-resolution keys, cascaded with
self-attention) followed by two extraction branches that refine the contour
and semantic token flows. Blocks chain by feeding the refined contour stream
into the next block's high-resolution slot and the semantic stream into the
low-resolution slot.

Ablation wiring:
  full     - cross-attention, then self-attention.
  ca_only  - self-attention removed; the detector output is the enhanced
             cross-attention stream itself.
  sa_only  - cross-attention removed; the normalized sum of the two input
             streams (the value stream) feeds self-attention directly.
Ablated operators are never constructed, so their parameters do not exist.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ModelConfig
from .layers import Conv2d, LayerNorm, Mlp, MultiHeadAttention
from .tensor import ParamStore, ShapeError, Tensor, bilinear_resize, transpose

# recorded attention weights are [B, heads, N, N]; past this token count the
# matrices dwarf every other allocation, so taps keep only stage outputs
RECORD_WEIGHTS_MAX_TOKENS = 4096


@dataclass
class EmbeddingPair:
    """Flattened, channel-projected token sequences entering the decoder."""

    hr_em: Tensor  # [N, B, C]
    lr_em: Tensor  # [N, B, C]
    grid: tuple[int, int]

    def __post_init__(self):
        if self.hr_em.shape != self.lr_em.shape:
            raise ShapeError(
                f"embedding pair shapes differ: {self.hr_em.shape} vs {self.lr_em.shape}")
        h, w = self.grid
        if self.hr_em.shape[0] != h * w:
            raise ShapeError(
                f"token count {self.hr_em.shape[0]} != grid {h}x{w}")


@dataclass
class BlockOutput:
    """Per-block token streams: refined contour, refined semantic, and the
    raw detector output kept for visualization."""

    contour: Tensor
    semantic: Tensor
    detector: Tensor


def flatten_tokens(x: Tensor) -> Tensor:
    """[B, C, h, w] -> [N, B, C] with token n = row*w + col (row-major)."""
    b, c, h, w = x.shape
    return transpose(x.reshape(b, c, h * w), (2, 0, 1))


def unflatten_tokens(tokens: Tensor, grid: tuple[int, int]) -> Tensor:
    """[N, B, C] -> [B, C, h, w]; exact inverse of flatten_tokens."""
    h, w = grid
    n, b, c = tokens.shape
    if n != h * w:
        raise ShapeError(f"cannot place {n} tokens on a {h}x{w} grid")
    return transpose(tokens, (1, 2, 0)).reshape(b, c, h, w)


class FeatureProjector:
    """Align the two pyramid levels onto one token grid.

    The low-resolution map is bilinearly upsampled to the high-resolution
    grid, both are 1x1-projected to the decoder width, and each is flattened
    row-major into [N, B, C].
    """

    def __init__(self, store: ParamStore, cfg: ModelConfig, hr_channels: int,
                 lr_channels: int, rng: np.random.Generator, name: str = "project"):
        dtype = cfg.np_dtype
        self.hr_proj = Conv2d(store, f"{name}/hr", hr_channels, cfg.channels, 1,
                              rng, dtype, init="trunc")
        self.lr_proj = Conv2d(store, f"{name}/lr", lr_channels, cfg.channels, 1,
                              rng, dtype, init="trunc")

    def __call__(self, f_hr: Tensor, f_lr: Tensor) -> EmbeddingPair:
        _, _, hh, hw = f_hr.shape
        _, _, lh, lw = f_lr.shape
        if lh > hh or lw > hw:
            raise ShapeError(
                f"low-resolution map {lh}x{lw} is finer than high-resolution {hh}x{hw}")
        if (lh, lw) != (hh, hw):
            f_lr = bilinear_resize(f_lr, hh, hw, align_corners=False)
        hr_em = flatten_tokens(self.hr_proj(f_hr))
        lr_em = flatten_tokens(self.lr_proj(f_lr))
        return EmbeddingPair(hr_em=hr_em, lr_em=lr_em, grid=(hh, hw))


class DecoderBlock:
    """One detector + extraction-branch block.

    The learnable absolute position table (one per block, zero-initialized,
    shape [N, 1, C]) is added to attention keys and queries; N is fixed by
    the configured training grid and resampled bilinearly when the block
    runs on a different grid.
    """

    def __init__(self, store: ParamStore, cfg: ModelConfig,
                 rng: np.random.Generator, name: str):
        dtype = cfg.np_dtype
        c = cfg.channels
        self.cfg = cfg
        self.grid = cfg.token_grid
        n_tokens = self.grid[0] * self.grid[1]
        self.pe = store.param(f"{name}/pe", np.zeros((n_tokens, 1, c), dtype=dtype))
        self.ln_v = LayerNorm(store, f"{name}/ln_v", c, dtype, cfg.ln_eps)
        self.has_ca = cfg.ablation != "sa_only"
        self.has_sa = cfg.ablation != "ca_only"
        if self.has_ca:
            self.ln_k = LayerNorm(store, f"{name}/ln_k", c, dtype, cfg.ln_eps)
            self.ln_q = LayerNorm(store, f"{name}/ln_q", c, dtype, cfg.ln_eps)
            self.cross_attn = MultiHeadAttention(store, f"{name}/ca", c, cfg.heads, rng, dtype)
        if self.has_sa:
            self.ln_s = LayerNorm(store, f"{name}/ln_s", c, dtype, cfg.ln_eps)
            self.self_attn = MultiHeadAttention(store, f"{name}/sa", c, cfg.heads, rng, dtype)
        self.ln_contour = LayerNorm(store, f"{name}/ln_contour", c, dtype, cfg.ln_eps)
        self.contour_mlp = Mlp(store, f"{name}/contour_mlp", c, rng, dtype, act=cfg.mlp_act)
        self.ln_semantic = LayerNorm(store, f"{name}/ln_semantic", c, dtype, cfg.ln_eps)
        self.semantic_mlp = Mlp(store, f"{name}/semantic_mlp", c, rng, dtype, act=cfg.mlp_act)

    def position_table(self, grid: tuple[int, int]) -> Tensor:
        """PE resampled to the requested token grid (identity on the
        configured grid)."""
        if grid == self.grid:
            return self.pe
        gh, gw = self.grid
        h, w = grid
        spatial = transpose(self.pe, (1, 2, 0)).reshape(1, -1, gh, gw)
        resized = bilinear_resize(spatial, h, w, align_corners=True)
        c = resized.shape[1]
        return transpose(resized.reshape(1, c, h * w), (2, 0, 1))

    def cross_attention_stage(self, hr_em: Tensor, lr_em: Tensor, pe: Tensor,
                              record: dict | None = None, tag: str = ""
                              ) -> tuple[Tensor, Tensor]:
        """Contour-focused mixed-resolution attention.

        Keys come from the high-resolution stream, queries from the
        low-resolution stream, values from their normalized sum; returns
        (contour_edge, enhanced) where enhanced adds the value residual.
        """
        if pe.shape[0] != hr_em.shape[0]:
            raise ShapeError(
                f"position table has {pe.shape[0]} tokens, embeddings have {hr_em.shape[0]}")
        k = self.ln_k(hr_em) + pe
        q = self.ln_q(lr_em) + pe
        v = self.ln_v(hr_em + lr_em)
        want_weights = (record is not None
                        and hr_em.shape[0] <= RECORD_WEIGHTS_MAX_TOKENS)
        attended, weights = self.cross_attn(q, k, v, need_weights=want_weights)
        enhanced = attended + v
        if record is not None:
            record[f"{tag}cross_attention"] = attended
            if weights is not None:
                record[f"{tag}ca_weights"] = weights
        return attended, enhanced

    def self_attention_stage(self, enhanced: Tensor, pe: Tensor,
                             record: dict | None = None, tag: str = "") -> Tensor:
        """Semantic refinement: self-attention over the enhanced stream with
        a residual onto its normalized values."""
        normed = self.ln_s(enhanced)
        kq = normed + pe
        want_weights = (record is not None
                        and enhanced.shape[0] <= RECORD_WEIGHTS_MAX_TOKENS)
        attended, weights = self.self_attn(kq, kq, normed, need_weights=want_weights)
        out = attended + normed
        if record is not None:
            record[f"{tag}self_attention"] = attended
            if weights is not None:
                record[f"{tag}sa_weights"] = weights
        return out

    def contour_branch(self, detector: Tensor, hr_em: Tensor) -> Tensor:
        """MLP refinement of the contour flow (detector + HR stream)."""
        return self.contour_mlp(self.ln_contour(hr_em + detector))

    def semantic_branch(self, detector: Tensor, lr_em: Tensor) -> Tensor:
        """MLP refinement of the semantic flow (detector + LR stream)."""
        return self.semantic_mlp(self.ln_semantic(lr_em + detector))

    def forward(self, hr_em: Tensor, lr_em: Tensor, grid: tuple[int, int] | None = None,
                record: dict | None = None, tag: str = "") -> BlockOutput:
        if grid is None:
            grid = self.grid
        pe = self.position_table(grid)
        if self.has_ca:
            _, enhanced = self.cross_attention_stage(hr_em, lr_em, pe, record, tag)
        else:
            enhanced = self.ln_v(hr_em + lr_em)
        if self.has_sa:
            detector = self.self_attention_stage(enhanced, pe, record, tag)
        else:
            detector = enhanced
        contour = self.contour_branch(detector, hr_em)
        semantic = self.semantic_branch(detector, lr_em)
        if record is not None:
            record[f"{tag}detector"] = detector
            record[f"{tag}contour_branch"] = contour
            record[f"{tag}semantic_branch"] = semantic
        return BlockOutput(contour=contour, semantic=semantic, detector=detector)

    __call__ = forward


class DecoderStack:
    """Chained decoder blocks; block k+1 sees (hr := contour_k, lr := semantic_k)."""

    def __init__(self, store: ParamStore, cfg: ModelConfig, rng: np.random.Generator,
                 name: str = "decoder"):
        self.blocks = [DecoderBlock(store, cfg, rng, f"{name}/block{i}")
                       for i in range(cfg.blocks)]

    def __call__(self, pair: EmbeddingPair, record: dict | None = None) -> BlockOutput:
        hr, lr = pair.hr_em, pair.lr_em
        out: BlockOutput | None = None
        for i, block in enumerate(self.blocks):
            out = block(hr, lr, grid=pair.grid, record=record, tag=f"block{i}/")
            hr, lr = out.contour, out.semantic
        return out
