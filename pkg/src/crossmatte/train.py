"""Training: BCE objective, stepped LR decay, decoupled-weight-decay Adam,
the fit loop with periodic evaluation/checkpointing, and the ablation driver.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from decimal import Decimal
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointData, save_checkpoint
from .config import LEVEL_PAIRS, ModelConfig
from .data import load_split
from .metrics import MetricsReport, evaluate
from .predictor import MattingModel
from .tensor import ParamStore, Tensor, backward, clip, log, no_grad, tmean

BCE_EPS = 1e-7


class TrainingAbort(RuntimeError):
    """Optimization produced a non-finite loss."""


@dataclass
class TrainConfig:
    lr0: float = 1e-4
    decay: float = 0.8
    decay_every: int = 5
    epochs: int = 25
    batch: int = 24
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    seed: int = 0
    grad_clip: float | None = None

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if not 0 < self.decay <= 1:
            raise ValueError("decay must lie in (0, 1]")
        if self.decay_every < 1:
            raise ValueError("decay_every must be >= 1")
        if self.epochs < 0 or self.batch < 1:
            raise ValueError("epochs must be >= 0 and batch >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def bce_loss(pred, target, eps: float = BCE_EPS) -> Tensor:
    """Mean binary cross-entropy with soft targets.

    Predictions are clamped to [eps, 1-eps] before the logs, so the loss is
    finite for the sigmoid head's entire closure. Minimized at pred == target.
    """
    m = pred if isinstance(pred, Tensor) else Tensor(pred)
    g = target if isinstance(target, Tensor) else Tensor(target)
    if m.shape != g.shape:
        raise ValueError(f"bce_loss: shapes differ, {m.shape} vs {g.shape}")
    m = clip(m, eps, 1.0 - eps)
    return tmean(-(g * log(m) + (1.0 - g) * log(1.0 - m)))


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """lr0 * decay^(epoch // decay_every).

    The power is evaluated in decimal arithmetic so a human-specified rate
    like 0.8 yields the decimal-expected values (1e-4 * 0.8^4 == 4.096e-5
    exactly), which repeated binary multiplication does not.
    """
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    steps = epoch // cfg.decay_every
    return cfg.lr0 * float(Decimal(repr(cfg.decay)) ** steps)


class AdamW:
    """Adam with decoupled weight decay.

    Decay skips normalization affine parameters and position tables
    (names ending in /gamma, /beta or /pe); moments live in the parameter
    dtype and are checkpointable.
    """

    def __init__(self, store: ParamStore, cfg: TrainConfig):
        self.store = store
        self.cfg = cfg
        self.step_count = 0
        self.m = {name: np.zeros_like(t.data) for name, t in store.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in store.items()}

    @staticmethod
    def decays(name: str) -> bool:
        return not name.endswith(("/gamma", "/beta", "/pe"))

    def step(self, lr: float) -> None:
        cfg = self.cfg
        self.step_count += 1
        bc1 = 1.0 - cfg.beta1 ** self.step_count
        bc2 = 1.0 - cfg.beta2 ** self.step_count
        for name, p in self.store.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.m[name]
            v = self.v[name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
            if cfg.weight_decay and self.decays(name):
                update = update + cfg.weight_decay * p.data
            p.data = p.data - (lr * update).astype(p.data.dtype, copy=False)

    def state_dict(self) -> dict:
        return {"step": self.step_count,
                "m": {k: v.copy() for k, v in self.m.items()},
                "v": {k: v.copy() for k, v in self.v.items()}}

    def load_state(self, state: dict) -> None:
        self.step_count = int(state["step"])
        for name in self.m:
            if name not in state["m"]:
                raise ValueError(f"optimizer state missing moments for {name!r}")
            self.m[name] = state["m"][name].astype(self.m[name].dtype, copy=True)
            self.v[name] = state["v"][name].astype(self.v[name].dtype, copy=True)


def _first_non_finite(store: ParamStore) -> str | None:
    for name, t in store.items():
        if not np.all(np.isfinite(t.data)):
            return name
    return None


def clip_grad_norm(store: ParamStore, max_norm: float) -> float:
    total = 0.0
    for _, t in store.items():
        if t.grad is not None:
            total += float((t.grad * t.grad).sum())
    norm = math.sqrt(total)
    if norm > max_norm > 0:
        scale = max_norm / norm
        for _, t in store.items():
            if t.grad is not None:
                t.grad = t.grad * scale
    return norm


def train_step(model: MattingModel, batch, optimizer: AdamW, lr: float,
               cfg: TrainConfig) -> float:
    """One forward/backward/update. Returns the scalar loss value."""
    model.store.zero_grads()
    pred = model(batch.image)
    loss = bce_loss(pred.matte, batch.alpha)
    value = loss.item()
    if not math.isfinite(value):
        bad = _first_non_finite(model.store)
        raise TrainingAbort(
            f"non-finite loss ({value}); first non-finite parameter: "
            f"{bad if bad is not None else '<none, activations only>'}")
    backward(loss)
    if cfg.grad_clip:
        clip_grad_norm(model.store, cfg.grad_clip)
    optimizer.step(lr)
    return value


def evaluate_model(model: MattingModel, source, split: str = "val",
                   batch_size: int = 4, seed: int = 0) -> MetricsReport:
    """Metrics of the model's mattes over one pass of a data source."""
    preds, gts = [], []
    for batch in load_split(source, split, model.cfg.res, seed=seed,
                            batch_size=batch_size, epoch=0, augment=False,
                            dtype=model.cfg.np_dtype):
        with no_grad():
            matte = model(batch.image).matte
        for i in range(matte.shape[0]):
            preds.append(matte.data[i])
            gts.append(batch.alpha.data[i])
    return evaluate(preds, gts)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    loss: float
    metrics: MetricsReport | None = None

    def line(self) -> str:
        parts = [f"epoch={self.epoch}", f"lr={self.lr:.8g}", f"loss={self.loss:.6f}"]
        if self.metrics is not None:
            parts += [f"mad={self.metrics.mad:.4f}", f"mse={self.metrics.mse:.4f}",
                      f"grad={self.metrics.grad:.4f}", f"conn={self.metrics.conn:.4f}"]
        return " ".join(parts)


@dataclass
class FitResult:
    checkpoint: CheckpointData
    log: list[EpochRecord] = field(default_factory=list)
    checkpoint_paths: list[Path] = field(default_factory=list)


def _snapshot(model: MattingModel, optimizer: AdamW, epoch: int,
              rng: np.random.Generator) -> CheckpointData:
    return CheckpointData(
        model_config=model.cfg,
        params={name: t.data.copy() for name, t in model.store.items()},
        epoch=epoch,
        opt_state=optimizer.state_dict(),
        rng_state=rng.bit_generator.state,
    )


def fit(model: MattingModel, cfg: TrainConfig, dataset, eval_source=None,
        out_dir=None, start_epoch: int = 0, optimizer: AdamW | None = None,
        eval_split: str = "val", log_fn=None) -> FitResult:
    """Train for cfg.epochs epochs, evaluating and checkpointing every
    cfg.decay_every epochs (and at the end). Resuming from ``start_epoch``
    continues the exact LR schedule."""
    optimizer = optimizer or AdamW(model.store, cfg)
    eval_source = eval_source if eval_source is not None else dataset
    rng = np.random.default_rng(cfg.seed)
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
    result = FitResult(checkpoint=_snapshot(model, optimizer, start_epoch, rng))

    def emit(record: EpochRecord):
        result.log.append(record)
        if out_path is not None:
            with open(out_path / "train.log", "a") as fh:
                fh.write(record.line() + "\n")
        if log_fn is not None:
            log_fn(record.line())

    def checkpoint(epoch_done: int) -> CheckpointData:
        snap = _snapshot(model, optimizer, epoch_done, rng)
        if out_path is not None:
            path = out_path / f"epoch{epoch_done:03d}.ckpt"
            save_checkpoint(path, snap)
            result.checkpoint_paths.append(path)
        return snap

    if cfg.epochs == 0 or start_epoch >= cfg.epochs:
        if out_path is not None:
            save_checkpoint(out_path / "epoch000.ckpt", result.checkpoint)
            result.checkpoint_paths.append(out_path / "epoch000.ckpt")
        return result

    for epoch in range(start_epoch, cfg.epochs):
        lr = lr_at(epoch, cfg)
        losses = []
        for batch in load_split(dataset, "train", model.cfg.res, seed=cfg.seed,
                                batch_size=cfg.batch, epoch=epoch, augment=True,
                                dtype=model.cfg.np_dtype):
            losses.append(train_step(model, batch, optimizer, lr, cfg))
        record = EpochRecord(epoch=epoch, lr=lr, loss=float(np.mean(losses)))
        done = epoch + 1
        if done % cfg.decay_every == 0 or done == cfg.epochs:
            record.metrics = evaluate_model(model, eval_source, split=eval_split,
                                            batch_size=cfg.batch, seed=cfg.seed)
            result.checkpoint = checkpoint(done)
        emit(record)
    return result


# ---------------------------------------------------------------------------
# ablation matrix


@dataclass
class AblationRow:
    section: str
    label: str
    config_hash: str
    report: MetricsReport


@dataclass
class AblationTable:
    rows: list[AblationRow]
    inversions: list[str] = field(default_factory=list)

    def to_text(self) -> str:
        lines = []
        header = f"{'config':<24} {'MAD':>10} {'MSE':>10} {'Grad':>10} {'Conn':>10}"
        for section in ("attention", "levels"):
            rows = [r for r in self.rows if r.section == section]
            if not rows:
                continue
            lines.append(f"[{section}]")
            lines.append(header)
            for r in rows:
                m = r.report
                lines.append(f"{r.label:<24} {m.mad:>10.4f} {m.mse:>10.4f} "
                             f"{m.grad:>10.4f} {m.conn:>10.4f}")
            lines.append("")
        for note in self.inversions:
            lines.append(f"FLAG inversion: {note}")
        if not self.inversions:
            lines.append("no inversions: full config is at least as good as "
                         "each single-attention config")
        return "\n".join(lines) + "\n"


def run_ablation_matrix(base_cfg: ModelConfig, train_cfg: TrainConfig, dataset,
                        log_fn=None) -> AblationTable:
    """Train/evaluate the attention ablations at the base level pair and the
    level-pair alternatives at full attention. The shared full/base config is
    trained once and reported in both sections. A metric inversion (full
    worse than a single-attention config) is flagged, never silently dropped.
    """
    cache: dict[str, MetricsReport] = {}

    def run(cfg: ModelConfig) -> MetricsReport:
        key = cfg.config_hash()
        if key not in cache:
            if log_fn is not None:
                log_fn(f"training {cfg.ablation} hr=1/{cfg.hr_level} "
                       f"lr=1/{cfg.lr_level}")
            model = MattingModel(cfg, seed=train_cfg.seed)
            fit(model, train_cfg, dataset, eval_source=dataset, eval_split="train")
            cache[key] = evaluate_model(model, dataset, split="train",
                                        batch_size=train_cfg.batch,
                                        seed=train_cfg.seed)
        return cache[key]

    rows: list[AblationRow] = []
    for ablation in ("ca_only", "sa_only", "full"):
        cfg = ModelConfig.from_dict({**base_cfg.to_dict(), "ablation": ablation})
        rows.append(AblationRow("attention", ablation, cfg.config_hash(), run(cfg)))
    for hr, lr in LEVEL_PAIRS:
        cfg = ModelConfig.from_dict({**base_cfg.to_dict(), "ablation": "full",
                                     "hr_level": hr, "lr_level": lr})
        rows.append(AblationRow("levels", f"hr=1/{hr} lr=1/{lr}",
                                cfg.config_hash(), run(cfg)))

    table = AblationTable(rows=rows)
    full_mad = next(r.report.mad for r in rows
                    if r.section == "attention" and r.label == "full")
    for r in rows:
        if r.section == "attention" and r.label != "full" and full_mad > r.report.mad:
            table.inversions.append(
                f"full MAD {full_mad:.4f} > {r.label} MAD {r.report.mad:.4f}")
    return table
