"""Spatialize the decoder token streams and predict the alpha matte.

The two refined token streams are reshaped back onto their grid, each gets a
residual 3x3 convolution against the spatialized first-block input embedding
of its flow, the pair is merged by a concat + 3x3 convolution, and the head
adds the 1/4-scale encoder features before a sigmoid matte at 1/4 scale that
is bilinearly upsampled to the requested output size.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .blocks import (
    DecoderStack,
    EmbeddingPair,
    FeatureProjector,
    unflatten_tokens,
)
from .config import ModelConfig
from .encoder import ConvEncoder, FeaturePyramid, select_levels
from .layers import Conv2d, activation
from .tensor import ParamStore, ShapeError, Tensor, bilinear_resize, concat, sigmoid


@dataclass
class MattePrediction:
    """Alpha estimates: full resolution and the raw 1/4-scale head output."""

    matte: Tensor          # [B, 1, H, W], values in [0, 1]
    matte_quarter: Tensor  # [B, 1, H/4, W/4]


class FusionStage:
    """Merge the contour and semantic maps with their input-embedding residuals."""

    def __init__(self, store: ParamStore, cfg: ModelConfig, rng: np.random.Generator,
                 name: str = "fuse"):
        c = cfg.channels
        dtype = cfg.np_dtype
        self.conv_semantic = Conv2d(store, f"{name}/semantic", c, c, 3, rng, dtype)
        self.conv_contour = Conv2d(store, f"{name}/contour", c, c, 3, rng, dtype)
        self.conv_merge = Conv2d(store, f"{name}/merge", 2 * c, c, 3, rng, dtype)

    def __call__(self, semantic: Tensor, contour: Tensor,
                 lr_spatial: Tensor, hr_spatial: Tensor) -> Tensor:
        if not (semantic.shape == contour.shape == lr_spatial.shape == hr_spatial.shape):
            raise ShapeError(
                "fuse: all four maps must share a shape, got "
                f"{semantic.shape}/{contour.shape}/{lr_spatial.shape}/{hr_spatial.shape}")
        s = self.conv_semantic(semantic + lr_spatial)
        c = self.conv_contour(contour + hr_spatial)
        return self.conv_merge(concat([s, c], axis=1))


class MatteHead:
    """Project the fused map onto the 1/4 encoder features and emit the matte."""

    def __init__(self, store: ParamStore, cfg: ModelConfig, quarter_channels: int,
                 rng: np.random.Generator, name: str = "head"):
        dtype = cfg.np_dtype
        self.proj = Conv2d(store, f"{name}/proj", cfg.channels, quarter_channels, 1,
                           rng, dtype, init="trunc")
        self.conv = Conv2d(store, f"{name}/conv", quarter_channels, quarter_channels,
                           3, rng, dtype)
        self.out = Conv2d(store, f"{name}/out", quarter_channels, 1, 1, rng, dtype,
                          init="trunc")
        self.act = activation(cfg.conv_act)

    def __call__(self, fused: Tensor, f4: Tensor, target_h: int, target_w: int
                 ) -> MattePrediction:
        _, _, fh, fw = fused.shape
        _, _, qh, qw = f4.shape
        if qh % fh or qw % fw or (qh // fh) != (qw // fw):
            raise ShapeError(
                f"quarter-scale grid {qh}x{qw} is not an integer upscale of the "
                f"fused grid {fh}x{fw}")
        if (fh, fw) != (qh, qw):
            fused = bilinear_resize(fused, qh, qw, align_corners=False)
        x = self.proj(fused) + f4
        x = self.act(self.conv(x))
        quarter = sigmoid(self.out(x))
        matte = bilinear_resize(quarter, target_h, target_w, align_corners=False)
        return MattePrediction(matte=matte, matte_quarter=quarter)


class MattingModel:
    """Full pipeline: encoder pyramid -> token decoder -> fused matte head."""

    def __init__(self, cfg: ModelConfig, seed: int = 0,
                 rng: np.random.Generator | None = None):
        self.cfg = cfg
        self.store = ParamStore()
        rng = rng if rng is not None else np.random.default_rng(seed)
        self.encoder = ConvEncoder(self.store, cfg, rng)
        hr_ch = self.encoder.level_channels[cfg.hr_level]
        lr_ch = self.encoder.level_channels[cfg.lr_level]
        self.projector = FeatureProjector(self.store, cfg, hr_ch, lr_ch, rng)
        self.decoder = DecoderStack(self.store, cfg, rng)
        self.fusion = FusionStage(self.store, cfg, rng)
        self.head = MatteHead(self.store, cfg, self.encoder.level_channels[4], rng)

    def forward(self, image: Tensor, record: dict | None = None) -> MattePrediction:
        _, _, h, w = image.shape
        pyramid = self.encoder(image)
        f_hr, f_lr = select_levels(pyramid, self.cfg.hr_level, self.cfg.lr_level)
        pair = self.projector(f_hr, f_lr)
        out = self.decoder(pair, record=record)
        semantic_sp = unflatten_tokens(out.semantic, pair.grid)
        contour_sp = unflatten_tokens(out.contour, pair.grid)
        lr_sp = unflatten_tokens(pair.lr_em, pair.grid)
        hr_sp = unflatten_tokens(pair.hr_em, pair.grid)
        fused = self.fusion(semantic_sp, contour_sp, lr_sp, hr_sp)
        pred = self.head(fused, pyramid.f4, h, w)
        if record is not None:
            record["token_grid"] = pair.grid
            record["matte"] = pred.matte
        return pred

    __call__ = forward

    def embed(self, image: Tensor) -> tuple[FeaturePyramid, EmbeddingPair]:
        """Encoder + projection only (used by wiring tests and tools)."""
        pyramid = self.encoder(image)
        f_hr, f_lr = select_levels(pyramid, self.cfg.hr_level, self.cfg.lr_level)
        return pyramid, self.projector(f_hr, f_lr)

    def structure(self) -> list[dict]:
        """Per-block operator presence flags (deterministic)."""
        rows = []
        for i, block in enumerate(self.decoder.blocks):
            rows.append({
                "block": i,
                "ca": block.has_ca,
                "sa": block.has_sa,
                "ceeb": True,
                "seb": True,
            })
        return rows
