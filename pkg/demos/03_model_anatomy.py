"""Anatomy of the matting network, stage by stage.

Follows one image through: encoder pyramid -> level selection -> token
projection -> detector block (cross-attention then self-attention) ->
extraction branches -> fusion -> matte head.

Run: python demos/03_model_anatomy.py
"""

import numpy as np

from crossmatte import ModelConfig, MattingModel, Tensor, no_grad, select_levels

cfg = ModelConfig(channels=32, heads=4, blocks=2, enc_channels=(8, 16, 24, 32),
                  enc_groups=4, res=(64, 64), dtype="float64")
model = MattingModel(cfg, seed=0)
print(f"parameters: {model.store.n_parameters()}")

image = Tensor(np.random.default_rng(0).random((1, 3, 64, 64)))

with no_grad():
    pyramid = model.encoder(image)
    print("pyramid:", {f"1/{d}": pyramid.level(d).shape for d in (4, 8, 16)})

    # the decoder consumes two levels: a high-resolution contour source and
    # a low-resolution semantic source
    f_hr, f_lr = select_levels(pyramid, cfg.hr_level, cfg.lr_level)
    pair = model.projector(f_hr, f_lr)
    print(f"token streams: hr {pair.hr_em.shape}, lr {pair.lr_em.shape}, "
          f"grid {pair.grid}")

    # record taps expose each stage of each block
    record = {}
    pred = model(image, record=record)

for key in sorted(k for k in record if k.startswith("block0/")):
    value = record[key]
    shape = value.shape if hasattr(value, "shape") else value
    print(f"  {key}: {shape}")

print("matte:", pred.matte.shape, "quarter-scale head output:",
      pred.matte_quarter.shape)

# attention weights are probability rows
w = record["block0/ca_weights"].data
print(f"cross-attention rows sum to 1: max deviation "
      f"{np.abs(w.sum(axis=-1) - 1).max():.2e}")

# ablations delete an operator and its parameters entirely
for ablation in ("full", "ca_only", "sa_only"):
    m = MattingModel(ModelConfig(**{**cfg.to_dict(), "ablation": ablation}), seed=0)
    flags = m.structure()[0]
    print(f"{ablation:8s} -> CA:{'yes' if flags['ca'] else 'no'} "
          f"SA:{'yes' if flags['sa'] else 'no'} "
          f"params {m.store.n_parameters()}")
