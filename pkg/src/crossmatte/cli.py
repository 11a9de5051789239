"""Command-line surface: train, eval, infer, gradcheck, visualize, inspect,
ablate.

Configuration is layered: dataclass defaults, then an optional key=value
config file with [model]/[train]/[run] sections, then explicit flags.
Unknown config keys are rejected. Every run directory receives the fully
resolved configuration, and re-running from that file reproduces the run.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import imgio
from .checkpoint import CheckpointError, load_checkpoint, restore_model
from .checks import run_all
from .config import ABLATIONS, ModelConfig
from .data import ManifestError, load_split, parse_manifest, synth_dataset
from .metrics import evaluate
from .predictor import MattingModel
from .tensor import Tensor, no_grad
from .train import TrainConfig, TrainingAbort, fit, run_ablation_matrix
from .visualize import TAPS, HeatmapRequest, overlay, render_heatmaps


class ConfigError(ValueError):
    """Bad flags or config file contents."""


_MODEL_KEYS = {f.name for f in fields(ModelConfig)}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)}
_RUN_KEYS = {"out_dir", "synthetic", "manifest", "split", "val_n"}


# ---------------------------------------------------------------------------
# layered configuration


def parse_config_file(path) -> dict[str, dict[str, str]]:
    sections: dict[str, dict[str, str]] = {}
    current: str | None = None
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1]
            sections.setdefault(current, {})
            continue
        if "=" not in line or current is None:
            raise ConfigError(f"{path}:{lineno}: expected 'key=value' inside a "
                              f"[section], got {raw!r}")
        key, value = line.split("=", 1)
        sections[current][key.strip()] = value.strip()
    return sections


def _parse_value(key: str, text: str):
    if key in ("enc_channels",):
        return tuple(int(v) for v in text.split(","))
    if key == "res":
        parts = text.lower().replace("x", ",").split(",")
        if len(parts) == 1:
            return (int(parts[0]), int(parts[0]))
        return (int(parts[0]), int(parts[1]))
    if key == "grad_clip":
        return None if text in ("none", "") else float(text)
    if text.lower() in ("true", "false"):
        return text.lower() == "true"
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            continue
    return text


def resolve_config(args) -> tuple[ModelConfig, TrainConfig, dict]:
    model_kw: dict = {}
    train_kw: dict = {}
    run_kw: dict = {"out_dir": None, "synthetic": None, "manifest": None,
                    "split": "test", "val_n": None}
    config_path = getattr(args, "config", None)
    if config_path:
        for section, entries in parse_config_file(config_path).items():
            for key, text in entries.items():
                value = _parse_value(key, text)
                if section == "model":
                    if key not in _MODEL_KEYS:
                        raise ConfigError(f"unknown [model] key {key!r}")
                    model_kw[key] = value
                elif section == "train":
                    if key not in _TRAIN_KEYS:
                        raise ConfigError(f"unknown [train] key {key!r}")
                    train_kw[key] = value
                elif section == "run":
                    if key not in _RUN_KEYS:
                        raise ConfigError(f"unknown [run] key {key!r}")
                    run_kw[key] = value
                else:
                    raise ConfigError(f"unknown config section [{section}]")
    for key in _MODEL_KEYS:
        flag = getattr(args, key, None)
        if flag is not None:
            model_kw[key] = flag
    for key in _TRAIN_KEYS:
        flag = getattr(args, key, None)
        if flag is not None:
            train_kw[key] = flag
    for key in _RUN_KEYS:
        flag = getattr(args, key, None)
        if flag is not None:
            run_kw[key] = flag
    try:
        model_cfg = ModelConfig.from_dict(model_kw) if model_kw else ModelConfig()
        train_cfg = TrainConfig.from_dict(train_kw) if train_kw else TrainConfig()
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    return model_cfg, train_cfg, run_kw


def write_resolved_config(out_dir: Path, command: str, model_cfg: ModelConfig,
                          train_cfg: TrainConfig, run_kw: dict) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"# resolved configuration ({command}); reusable via --config"]
    lines.append("[model]")
    for key, value in sorted(model_cfg.to_dict().items()):
        lines.append(f"{key}={_fmt(value)}")
    lines.append("[train]")
    for key, value in sorted(train_cfg.to_dict().items()):
        lines.append(f"{key}={_fmt(value)}")
    lines.append("[run]")
    for key in sorted(_RUN_KEYS):
        value = run_kw.get(key)
        if value is not None:
            lines.append(f"{key}={_fmt(value)}")
    path = out_dir / "resolved.cfg"
    path.write_text("\n".join(lines) + "\n")
    return path


def _fmt(value) -> str:
    if isinstance(value, (tuple, list)):
        return ",".join(str(v) for v in value)
    if value is None:
        return "none"
    return str(value)


# ---------------------------------------------------------------------------
# argparse wiring


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--channels", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--blocks", type=int)
    p.add_argument("--ablation", choices=ABLATIONS)
    p.add_argument("--hr-level", dest="hr_level", type=int, choices=(4, 8))
    p.add_argument("--lr-level", dest="lr_level", type=int, choices=(8, 16))
    p.add_argument("--res", type=lambda s: _parse_value("res", s),
                   help="resolution, e.g. 64 or 288x512")
    p.add_argument("--enc-channels", dest="enc_channels",
                   type=lambda s: _parse_value("enc_channels", s))
    p.add_argument("--mlp-act", dest="mlp_act", choices=("gelu", "relu", "linear"))
    p.add_argument("--dtype", choices=("float32", "float64"))


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="layered key=value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir", dest="out_dir")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crossmatte",
        description="Portrait matting with mixed-resolution cross-attention")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model")
    _add_run_flags(p_train)
    _add_model_flags(p_train)
    p_train.add_argument("--synthetic", type=int, metavar="N",
                         help="use N in-memory synthetic samples")
    p_train.add_argument("--manifest", help="dataset manifest path")
    p_train.add_argument("--val-n", dest="val_n", type=int,
                         help="synthetic validation pool size")
    p_train.add_argument("--epochs", type=int)
    p_train.add_argument("--batch", type=int)
    p_train.add_argument("--lr0", type=float)
    p_train.add_argument("--decay", type=float)
    p_train.add_argument("--decay-every", dest="decay_every", type=int)
    p_train.add_argument("--weight-decay", dest="weight_decay", type=float)
    p_train.add_argument("--grad-clip", dest="grad_clip", type=float)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint or a matte directory")
    _add_run_flags(p_eval)
    p_eval.add_argument("--checkpoint")
    p_eval.add_argument("--synthetic", type=int, metavar="N")
    p_eval.add_argument("--manifest")
    p_eval.add_argument("--split")
    p_eval.add_argument("--batch", type=int)
    p_eval.add_argument("--pred-dir", dest="pred_dir",
                        help="directory of predicted matte PNGs")
    p_eval.add_argument("--gt-dir", dest="gt_dir",
                        help="directory of ground-truth matte PNGs")

    p_infer = sub.add_parser("infer", help="predict mattes for image files")
    _add_run_flags(p_infer)
    p_infer.add_argument("--checkpoint", required=True)
    p_infer.add_argument("--input", nargs="+", required=True,
                         help="image files or a directory")

    p_grad = sub.add_parser("gradcheck", help="finite-difference verification")
    _add_run_flags(p_grad)
    p_grad.add_argument("--skip-block", action="store_true",
                        help="skip the end-to-end block check")
    p_grad.add_argument("--inject-bug", action="store_true",
                        help=argparse.SUPPRESS)  # detector sanity fixture

    p_vis = sub.add_parser("visualize", help="emit activation heatmaps")
    _add_run_flags(p_vis)
    p_vis.add_argument("--checkpoint", required=True)
    p_vis.add_argument("--input", required=True)
    p_vis.add_argument("--taps", default="ca,sa,ceeb,seb",
                       help=f"comma list from {','.join(TAPS)}")
    p_vis.add_argument("--block", type=int, default=0)
    p_vis.add_argument("--gradcam", action="store_true",
                       help="weight activations by box-mean matte gradients")
    p_vis.add_argument("--box", help="r0,c0,r1,c1 probe box for --gradcam")

    p_inspect = sub.add_parser("inspect", help="print architecture summary")
    _add_run_flags(p_inspect)
    _add_model_flags(p_inspect)
    p_inspect.add_argument("--checkpoint")

    p_ablate = sub.add_parser("ablate", help="run the ablation matrix")
    _add_run_flags(p_ablate)
    _add_model_flags(p_ablate)
    p_ablate.add_argument("--synthetic", type=int, metavar="N")
    p_ablate.add_argument("--epochs", type=int)
    p_ablate.add_argument("--batch", type=int)
    p_ablate.add_argument("--lr0", type=float)

    return parser


# ---------------------------------------------------------------------------
# commands


def _out_dir(run_kw: dict, command: str) -> Path:
    return Path(run_kw["out_dir"] or f"runs/{command}")


def _dataset(run_kw: dict, model_cfg: ModelConfig, train_cfg: TrainConfig):
    if run_kw.get("synthetic"):
        return synth_dataset(int(run_kw["synthetic"]), model_cfg.res,
                             seed=train_cfg.seed)
    if run_kw.get("manifest"):
        return parse_manifest(run_kw["manifest"])
    raise ConfigError("need --synthetic N or --manifest PATH")


def cmd_train(args) -> int:
    model_cfg, train_cfg, run_kw = resolve_config(args)
    out_dir = _out_dir(run_kw, "train")
    dataset = _dataset(run_kw, model_cfg, train_cfg)
    write_resolved_config(out_dir, "train", model_cfg, train_cfg, run_kw)
    model = MattingModel(model_cfg, seed=train_cfg.seed)
    eval_source = dataset
    if run_kw.get("synthetic") and run_kw.get("val_n"):
        eval_source = synth_dataset(int(run_kw["val_n"]), model_cfg.res,
                                    seed=train_cfg.seed + 1)
    result = fit(model, train_cfg, dataset, eval_source=eval_source,
                 out_dir=out_dir, log_fn=print)
    print(f"checkpoints: {[str(p) for p in result.checkpoint_paths]}")
    return 0


def _eval_pred_dir(args, run_kw) -> int:
    pred_dir, gt_dir = Path(args.pred_dir), Path(args.gt_dir)
    write_resolved_config(_out_dir(run_kw, "eval"), "eval", ModelConfig(),
                          TrainConfig(), run_kw)
    preds = sorted(pred_dir.glob("*.png"))
    if not preds:
        raise ConfigError(f"no PNGs in {pred_dir}")
    pairs = []
    for pred_path in preds:
        gt_path = gt_dir / pred_path.name
        if not gt_path.exists():
            raise ConfigError(f"no ground truth for {pred_path.name}")
        pairs.append((imgio.read_alpha(pred_path), imgio.read_alpha(gt_path)))
    report = evaluate([p for p, _ in pairs], [g for _, g in pairs])
    _print_report(report, _out_dir(run_kw, "eval"))
    return 0


def _print_report(report, out_dir: Path) -> None:
    print(f"{'MAD':>10} {'MSE':>10} {'Grad':>10} {'Conn':>10}")
    print(f"{report.mad:>10.4f} {report.mse:>10.4f} "
          f"{report.grad:>10.4f} {report.conn:>10.4f}")
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "metrics.txt").write_text(report.to_text())
    (out_dir / "metrics.json").write_text(report.to_json() + "\n")


def cmd_eval(args) -> int:
    model_cfg, train_cfg, run_kw = resolve_config(args)
    if args.pred_dir or args.gt_dir:
        if not (args.pred_dir and args.gt_dir):
            raise ConfigError("pred-dir mode needs both --pred-dir and --gt-dir")
        return _eval_pred_dir(args, run_kw)
    if not args.checkpoint:
        raise ConfigError("need --checkpoint (or --pred-dir/--gt-dir)")
    model = restore_model(load_checkpoint(args.checkpoint))
    write_resolved_config(_out_dir(run_kw, "eval"), "eval", model.cfg,
                          train_cfg, run_kw)
    dataset = _dataset(run_kw, model.cfg, train_cfg)
    preds, gts = [], []
    for batch in load_split(dataset, run_kw.get("split") or "test", model.cfg.res,
                            seed=train_cfg.seed, batch_size=args.batch or 4,
                            dtype=model.cfg.np_dtype):
        with no_grad():
            matte = model(batch.image).matte
        for i in range(matte.shape[0]):
            preds.append(matte.data[i])
            gts.append(batch.alpha.data[i])
    report = evaluate(preds, gts)
    _print_report(report, _out_dir(run_kw, "eval"))
    return 0


def _pad_to_16(image: np.ndarray) -> tuple[np.ndarray, int, int]:
    _, h, w = image.shape
    ph = (16 - h % 16) % 16
    pw = (16 - w % 16) % 16
    if ph or pw:
        image = np.pad(image, ((0, 0), (0, ph), (0, pw)), mode="reflect")
    return image, h, w


def cmd_infer(args) -> int:
    _, train_cfg, run_kw = resolve_config(args)
    out_dir = _out_dir(run_kw, "infer")
    out_dir.mkdir(parents=True, exist_ok=True)
    model = restore_model(load_checkpoint(args.checkpoint))
    write_resolved_config(out_dir, "infer", model.cfg, train_cfg, run_kw)
    inputs: list[Path] = []
    for item in args.input:
        p = Path(item)
        inputs.extend(sorted(p.glob("*.png")) if p.is_dir() else [p])
    failures = 0
    for path in inputs:
        try:
            image = imgio.read_image(path)
            padded, h, w = _pad_to_16(image)
            with no_grad():
                pred = model(Tensor(padded[None].astype(model.cfg.np_dtype)))
            matte = pred.matte.data[0, 0, :h, :w]
            target = out_dir / f"{path.stem}_matte.png"
            imgio.write_image(target, matte)
            print(f"{path} -> {target}")
        except Exception as exc:  # per-file diagnostics, nonzero exit at end
            print(f"error: {path}: {exc}", file=sys.stderr)
            failures += 1
    return 1 if failures else 0


def cmd_gradcheck(args) -> int:
    _, train_cfg, _ = resolve_config(args)
    results = run_all(seed=train_cfg.seed, include_block=not args.skip_block,
                      inject_bug=args.inject_bug)
    width = max(len(r.name) for r in results)
    for r in results:
        status = "ok" if r.ok else "FAIL"
        print(f"{r.name:<{width}}  max_rel_err={r.max_rel_err:.3e}  "
              f"tol={r.tol:g}  {status}")
    ok = all(r.ok for r in results)
    print(f"gradcheck: {'all checks passed' if ok else 'FAILURES detected'}")
    return 0 if ok else 1


def cmd_visualize(args) -> int:
    _, train_cfg, run_kw = resolve_config(args)
    out_dir = _out_dir(run_kw, "visualize")
    out_dir.mkdir(parents=True, exist_ok=True)
    model = restore_model(load_checkpoint(args.checkpoint))
    write_resolved_config(out_dir, "visualize", model.cfg, train_cfg, run_kw)
    taps = tuple(t.strip().lower() for t in args.taps.split(",") if t.strip())
    box = None
    if args.box:
        parts = [int(v) for v in args.box.split(",")]
        if len(parts) != 4:
            raise ConfigError("--box needs r0,c0,r1,c1")
        box = tuple(parts)
    try:
        request = HeatmapRequest(taps=taps, block=args.block,
                                 gradcam=args.gradcam, box=box)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    image = imgio.read_image(args.input)
    padded, h, w = _pad_to_16(image)
    tensor = Tensor(padded[None].astype(model.cfg.np_dtype))
    try:
        result = render_heatmaps(model, tensor, request)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    for warning in result.warnings:
        print(f"warning: {warning}", file=sys.stderr)
    for tap, heat in result.heatmaps.items():
        heat = heat[:h, :w]
        imgio.write_image(out_dir / f"{tap}_block{args.block}.png", heat)
        imgio.write_image(out_dir / f"{tap}_block{args.block}_overlay.png",
                          overlay(image, heat))
        print(f"{tap}: {out_dir / f'{tap}_block{args.block}.png'}")
    return 0


def cmd_inspect(args) -> int:
    if args.checkpoint:
        data = load_checkpoint(args.checkpoint)
        model = restore_model(data)
        model_cfg = data.model_config
    else:
        model_cfg, train_cfg, _ = resolve_config(args)
        model = MattingModel(model_cfg, seed=getattr(args, "seed", None) or 0)
    print(f"config_hash={model_cfg.config_hash()}")
    print(f"parameters={model.store.n_parameters()}")
    for key, value in sorted(model_cfg.to_dict().items()):
        print(f"{key}={_fmt(value)}")
    flag = lambda present: "yes" if present else "no"
    for row in model.structure():
        print(f"block{row['block']}: CA:{flag(row['ca'])} SA:{flag(row['sa'])} "
              f"CEEB:{flag(row['ceeb'])} SEB:{flag(row['seb'])}")
    return 0


def cmd_ablate(args) -> int:
    model_cfg, train_cfg, run_kw = resolve_config(args)
    out_dir = _out_dir(run_kw, "ablate")
    n = int(run_kw.get("synthetic") or 32)
    dataset = synth_dataset(n, model_cfg.res, seed=train_cfg.seed)
    write_resolved_config(out_dir, "ablate", model_cfg, train_cfg, run_kw)
    table = run_ablation_matrix(model_cfg, train_cfg, dataset, log_fn=print)
    text = table.to_text()
    print(text, end="")
    (out_dir / "ablation.txt").write_text(text)
    return 0


_COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "gradcheck": cmd_gradcheck,
    "visualize": cmd_visualize,
    "inspect": cmd_inspect,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, ManifestError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingAbort as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure contract
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
