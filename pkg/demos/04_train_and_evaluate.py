"""Desk-scale training: overfit a tiny model, watch the metrics drop,
round-trip a checkpoint.

Run: python demos/04_train_and_evaluate.py   (about a minute on one core)
"""

from pathlib import Path

import numpy as np

from crossmatte import (
    AdamW,
    ModelConfig,
    MattingModel,
    Tensor,
    TrainConfig,
    evaluate_model,
    fit,
    load_checkpoint,
    lr_at,
    no_grad,
    restore_model,
    synth_dataset,
)

out = Path(__file__).parent / "out" / "train"
out.mkdir(parents=True, exist_ok=True)

model_cfg = ModelConfig(channels=32, heads=4, blocks=2, res=(48, 48),
                        enc_channels=(8, 8, 16, 32), dtype="float32")
train_cfg = TrainConfig(lr0=3e-3, epochs=30, decay_every=10, decay=0.8,
                        batch=4, seed=0)

# the schedule steps down by the decay factor every decay_every epochs
print("lr schedule:", [lr_at(e, train_cfg) for e in (0, 5, 10, 15)])

dataset = synth_dataset(n=8, resolution=48, seed=1)
model = MattingModel(model_cfg, seed=0)
before = evaluate_model(model, dataset, split="train", batch_size=4)
print(f"before training: MAD {before.mad:.1f}  MSE {before.mse:.1f}  "
      f"Grad {before.grad:.2f}  Conn {before.conn:.2f}")

result = fit(model, train_cfg, dataset, out_dir=out, log_fn=print)

after = evaluate_model(model, dataset, split="train", batch_size=4)
print(f"after training:  MAD {after.mad:.1f}  MSE {after.mse:.1f}  "
      f"Grad {after.grad:.2f}  Conn {after.conn:.2f}")

# checkpoints restore bit-identically
ckpt_path = result.checkpoint_paths[-1]
restored = restore_model(load_checkpoint(ckpt_path))
probe = Tensor(np.random.default_rng(9).random((1, 3, 48, 48)).astype(np.float32))
with no_grad():
    assert np.array_equal(model(probe).matte.data, restored(probe).matte.data)
print(f"checkpoint {ckpt_path.name} restores the exact forward pass")
