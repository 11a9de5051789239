"""Activation heatmaps for the four decoder taps, plus the gradient-weighted
variant aimed at a probe box.

Writes grayscale maps and overlays under demos/out/heatmaps.

Run: python demos/05_heatmaps.py
"""

from pathlib import Path

import numpy as np

from crossmatte import ModelConfig, MattingModel, Tensor, composite, synth_dataset
from crossmatte import imgio
from crossmatte.visualize import HeatmapRequest, overlay, render_heatmaps

out = Path(__file__).parent / "out" / "heatmaps"
out.mkdir(parents=True, exist_ok=True)

cfg = ModelConfig(channels=32, heads=4, blocks=2, res=(64, 64),
                  enc_channels=(8, 8, 16, 32), dtype="float64")
model = MattingModel(cfg, seed=3)

ds = synth_dataset(1, 64, seed=5)
image_np = composite(ds.foregrounds[0], ds.alphas[0], ds.backgrounds[0])
imgio.write_image(out / "input.png", image_np)
image = Tensor(image_np[None])

# activation energy per token: channel-mean absolute activation, min-max
# normalized over the token grid, upsampled to the input resolution
request = HeatmapRequest(taps=("ca", "sa", "ceeb", "seb"), block=0)
result = render_heatmaps(model, image, request)
for tap, heat in result.heatmaps.items():
    imgio.write_image(out / f"{tap}.png", heat)
    imgio.write_image(out / f"{tap}_overlay.png", overlay(image_np, heat))
    print(f"{tap}: heat in [{heat.min():.2f}, {heat.max():.2f}]")

# the gradient-weighted variant asks: which activations move the matte
# inside this box?
cam = render_heatmaps(model, image, HeatmapRequest(
    taps=("ceeb",), block=1, gradcam=True, box=(16, 16, 48, 48)))
imgio.write_image(out / "ceeb_gradcam_block1.png", cam.heatmaps["ceeb"])
print(f"gradient-weighted ceeb map written; outputs in {out}")
