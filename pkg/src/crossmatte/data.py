"""Training data: compositing, augmentation, manifests, synthetic portraits.

Training images are composed on the fly as ``alpha * foreground +
(1 - alpha) * background``. Disk datasets are described by a line-oriented
manifest (``split<TAB>fg_path<TAB>alpha_path`` rows plus a ``[backgrounds]``
section); desk-scale runs use an in-memory synthetic dataset of soft-edged
blob portraits on textured backgrounds instead.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import imgio
from .tensor import Tensor, bilinear_resize, no_grad


class ManifestError(ValueError):
    """Dataset manifest is inconsistent with the files on disk."""


# ---------------------------------------------------------------------------
# compositing and augmentation


def _values(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def composite(foreground, alpha, background):
    """Per-pixel convex combination alpha*F + (1-alpha)*B.

    All inputs must lie in [0, 1]; foreground/background are [3, H, W] and
    alpha is [1, H, W]. Returns a Tensor when any input is one.
    """
    f, a, b = _values(foreground), _values(alpha), _values(background)
    if f.shape != b.shape or a.shape[-2:] != f.shape[-2:] or a.shape[0] != 1:
        raise ValueError(
            f"composite: incompatible shapes F{f.shape} alpha{a.shape} B{b.shape}")
    for name, arr in (("foreground", f), ("alpha", a), ("background", b)):
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError(f"composite: {name} values outside [0, 1]")
    out = a * f + (1.0 - a) * b
    if any(isinstance(x, Tensor) for x in (foreground, alpha, background)):
        return Tensor(out)
    return out


@dataclass
class Sample:
    """One training example: composed image, its alpha, and provenance."""

    image: np.ndarray  # [3, H, W] in [0, 1]
    alpha: np.ndarray  # [1, H, W] in [0, 1]
    meta: dict = field(default_factory=dict)


def hflip(sample: Sample) -> Sample:
    """Flip image and alpha together along width (an involution)."""
    meta = dict(sample.meta)
    meta["hflip"] = not meta.get("hflip", False)
    return Sample(image=sample.image[:, :, ::-1].copy(),
                  alpha=sample.alpha[:, :, ::-1].copy(),
                  meta=meta)


def resize_chw(arr: np.ndarray, h: int, w: int) -> np.ndarray:
    """Bilinear resize of a [C, H, W] array (soft edges survive)."""
    if arr.shape[-2:] == (h, w):
        return arr
    with no_grad():
        out = bilinear_resize(Tensor(arr[None]), h, w, align_corners=False)
    return np.clip(out.data[0], 0.0, 1.0)


# ---------------------------------------------------------------------------
# manifests


@dataclass
class DatasetManifest:
    """Disk dataset description: per-split (fg, alpha) pairs + backgrounds."""

    splits: dict[str, list[tuple[str, str]]]
    backgrounds: list[str]
    root: Path

    def validate(self) -> None:
        seen: dict[str, str] = {}
        for split, pairs in self.splits.items():
            for fg, alpha in pairs:
                if fg in seen and seen[fg] != split:
                    raise ManifestError(
                        f"foreground {fg!r} appears in splits {seen[fg]!r} and {split!r}")
                seen[fg] = split
                alpha_path = self.root / alpha
                if not alpha_path.exists():
                    raise ManifestError(
                        f"missing alpha for foreground {Path(fg).name!r}: {alpha_path}")
        if not self.backgrounds:
            raise ManifestError("manifest lists no backgrounds")


def parse_manifest(path) -> DatasetManifest:
    path = Path(path)
    splits: dict[str, list[tuple[str, str]]] = {}
    backgrounds: list[str] = []
    in_backgrounds = False
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line == "[backgrounds]":
            in_backgrounds = True
            continue
        if in_backgrounds:
            backgrounds.append(line)
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ManifestError(
                f"{path}:{lineno}: expected 'split<TAB>fg<TAB>alpha', got {raw!r}")
        split, fg, alpha = parts
        splits.setdefault(split, []).append((fg, alpha))
    manifest = DatasetManifest(splits=splits, backgrounds=backgrounds, root=path.parent)
    manifest.validate()
    return manifest


def write_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    lines = []
    for split in sorted(manifest.splits):
        for fg, alpha in manifest.splits[split]:
            lines.append(f"{split}\t{fg}\t{alpha}")
    lines.append("[backgrounds]")
    lines.extend(manifest.backgrounds)
    path.write_text("\n".join(lines) + "\n")


def build_manifest(fg_dir, alpha_dir, bg_dir, root=None,
                   fractions=(0.8, 0.1, 0.1), seed: int = 0) -> DatasetManifest:
    """Scan directories, pair foregrounds with alphas by basename, and split.

    Raises ManifestError naming any foreground without a matching alpha.
    """
    fg_dir, alpha_dir, bg_dir = Path(fg_dir), Path(alpha_dir), Path(bg_dir)
    root = Path(root) if root is not None else fg_dir.parent
    fgs = sorted(p for p in fg_dir.glob("*.png"))
    alphas = {p.name for p in alpha_dir.glob("*.png")}
    pairs = []
    for fg in fgs:
        if fg.name not in alphas:
            raise ManifestError(f"missing alpha for foreground {fg.name!r}")
        pairs.append((str(fg.relative_to(root)),
                      str((alpha_dir / fg.name).relative_to(root))))
    if not pairs:
        raise ManifestError(f"no foreground PNGs found in {fg_dir}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(pairs))
    n_train = int(round(fractions[0] * len(pairs)))
    n_val = int(round(fractions[1] * len(pairs)))
    splits = {
        "train": [pairs[i] for i in order[:n_train]],
        "val": [pairs[i] for i in order[n_train:n_train + n_val]],
        "test": [pairs[i] for i in order[n_train + n_val:]],
    }
    splits = {k: v for k, v in splits.items() if v}
    backgrounds = sorted(str(p.relative_to(root)) for p in bg_dir.glob("*.png"))
    manifest = DatasetManifest(splits=splits, backgrounds=backgrounds, root=root)
    manifest.validate()
    return manifest


# ---------------------------------------------------------------------------
# synthetic desk-scale data


def _blob_alpha(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Soft-edged star-convex blob: alpha 1 inside, 0 outside, a smooth
    transition band a few pixels wide along the boundary."""
    m = min(h, w)
    cy = rng.uniform(0.42, 0.58) * h
    cx = rng.uniform(0.42, 0.58) * w
    base_r = rng.uniform(0.18, 0.26) * m
    n_modes = int(rng.integers(2, 5))
    amps = rng.uniform(0.02, 0.05, size=n_modes)
    phases = rng.uniform(0, 2 * math.pi, size=n_modes)
    band = max(2.0, 0.05 * m)
    yy, xx = np.mgrid[0:h, 0:w]
    dy, dx = yy - cy, xx - cx
    r = np.hypot(dy, dx)
    theta = np.arctan2(dy, dx)
    radius = base_r * (1.0 + sum(a * np.cos((i + 2) * theta + p)
                                 for i, (a, p) in enumerate(zip(amps, phases))))
    alpha = np.clip(0.5 - (r - radius) / band, 0.0, 1.0)
    return alpha[None]


def _textured(rng: np.random.Generator, h: int, w: int, base_lo: float,
              base_hi: float) -> np.ndarray:
    """Smooth sinusoidal color field in [0, 1], [3, H, W]."""
    m = min(h, w)
    base = rng.uniform(base_lo, base_hi, size=3)
    yy, xx = np.mgrid[0:h, 0:w]
    img = np.empty((3, h, w))
    for c in range(3):
        freq = rng.uniform(1.0, 3.0)
        phi = rng.uniform(0, 2 * math.pi)
        ang = rng.uniform(0, math.pi)
        wave = np.sin(2 * math.pi * freq * (xx * math.cos(ang) + yy * math.sin(ang)) / m + phi)
        img[c] = base[c] + 0.18 * wave
    return np.clip(img, 0.0, 1.0)


class SyntheticDataset:
    """In-memory foreground/alpha/background pool for desk-scale runs.

    The same pool backs every split name (splits are a disk-dataset concern);
    provenance lives in each sample's meta.
    """

    def __init__(self, n: int, resolution, seed: int = 0):
        if n < 1:
            raise ValueError("synthetic dataset needs n >= 1")
        h, w = (resolution, resolution) if isinstance(resolution, int) else resolution
        rng = np.random.default_rng(seed)
        self.resolution = (h, w)
        self.foregrounds = [_textured(rng, h, w, 0.45, 0.9) for _ in range(n)]
        self.alphas = [_blob_alpha(rng, h, w) for _ in range(n)]
        self.backgrounds = [_textured(rng, h, w, 0.05, 0.45)
                            for _ in range(max(4, n // 2))]

    def __len__(self) -> int:
        return len(self.foregrounds)

    def pair(self, index: int) -> tuple[np.ndarray, np.ndarray, dict]:
        return (self.foregrounds[index], self.alphas[index],
                {"fg": f"synthetic/{index}"})


def synth_dataset(n: int, resolution, seed: int = 0) -> SyntheticDataset:
    return SyntheticDataset(n, resolution, seed)


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    image: Tensor  # [B, 3, H, W]
    alpha: Tensor  # [B, 1, H, W]
    meta: list[dict]


def _manifest_items(source: DatasetManifest, split: str):
    if split not in source.splits:
        raise ManifestError(f"manifest has no split {split!r}; "
                            f"available: {sorted(source.splits)}")
    items = []
    for fg, alpha in source.splits[split]:
        fg_path, alpha_path = source.root / fg, source.root / alpha
        if not alpha_path.exists():
            raise ManifestError(f"missing alpha for foreground {Path(fg).name!r}")
        items.append((fg_path, alpha_path))
    return items


def load_split(source, split: str, resolution, seed: int, batch_size: int,
               epoch: int = 0, augment: bool = False, dtype=np.float64):
    """Deterministic batch iterator.

    Pairs each foreground with a seeded background draw, composites, resizes
    to ``resolution`` and batches. The stream is a pure function of
    (source, split, resolution, seed, epoch, augment, batch_size); worker-side
    prefetching would not be allowed to change it.
    """
    h, w = (resolution, resolution) if isinstance(resolution, int) else resolution
    # zlib.crc32 is stable across processes, unlike hash() on strings
    rng = np.random.default_rng((seed, epoch, zlib.crc32(split.encode())))
    synthetic = isinstance(source, SyntheticDataset)
    if synthetic:
        n = len(source)
        get = source.pair
        n_bg = len(source.backgrounds)
    else:
        items = _manifest_items(source, split)
        n = len(items)
        n_bg = len(source.backgrounds)

        def get(index):
            fg_path, alpha_path = items[index]
            return (imgio.read_image(fg_path), imgio.read_alpha(alpha_path),
                    {"fg": str(fg_path)})

    order = rng.permutation(n)
    bg_draws = rng.integers(0, n_bg, size=n)
    flips = rng.random(n) < 0.5 if augment else np.zeros(n, dtype=bool)

    batch_imgs, batch_alphas, batch_meta = [], [], []
    for pos, index in enumerate(order):
        fg, alpha, meta = get(int(index))
        if synthetic:
            bg = source.backgrounds[int(bg_draws[pos])]
        else:
            bg = imgio.read_image(source.root / source.backgrounds[int(bg_draws[pos])])
        fg = resize_chw(fg, h, w)
        alpha = resize_chw(alpha, h, w)
        bg = resize_chw(bg, h, w)
        image = composite(fg, alpha, bg)
        meta = dict(meta, bg=int(bg_draws[pos]), hflip=False)
        sample = Sample(image=image, alpha=alpha.copy(), meta=meta)
        if flips[pos]:
            sample = hflip(sample)
        batch_imgs.append(sample.image)
        batch_alphas.append(sample.alpha)
        batch_meta.append(sample.meta)
        if len(batch_imgs) == batch_size:
            yield Batch(image=Tensor(np.stack(batch_imgs).astype(dtype)),
                        alpha=Tensor(np.stack(batch_alphas).astype(dtype)),
                        meta=batch_meta)
            batch_imgs, batch_alphas, batch_meta = [], [], []
    if batch_imgs:
        yield Batch(image=Tensor(np.stack(batch_imgs).astype(dtype)),
                    alpha=Tensor(np.stack(batch_alphas).astype(dtype)),
                    meta=batch_meta)
