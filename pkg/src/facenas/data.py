"""Datasets: raw shard I/O, the synthetic identity set, splits, normalization, augmentation."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SHARD_SUFFIX = ".shard"


class IngestionError(ValueError):
    pass


@dataclass
class SplitDataset:
    train_x: np.ndarray
    train_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    n_classes: int
    ratios: tuple = (8, 1, 1)
    mean: np.ndarray = field(default_factory=lambda: np.zeros(0))
    std: np.ndarray = field(default_factory=lambda: np.ones(0))
    source: str = ""

    @property
    def image_shape(self) -> tuple:
        return tuple(self.train_x.shape[1:])

    def sizes(self) -> tuple[int, int, int]:
        return len(self.train_y), len(self.val_y), len(self.test_y)

    def train_plus_val(self) -> tuple[np.ndarray, np.ndarray]:
        return np.concatenate([self.train_x, self.val_x]), np.concatenate([self.train_y, self.val_y])


@dataclass
class AugmentConfig:
    flip_prob: float = 0.5
    pad_pixels: int = 4
    crop_size: int = 32
    cutout_size: int = 4
    flip: bool = True
    crop: bool = True
    cutout: bool = True

    def check(self, image_size: int) -> None:
        padded = image_size + 2 * self.pad_pixels
        if self.crop and self.crop_size > padded:
            raise ValueError(f"crop_size {self.crop_size} exceeds padded size {padded}")
        if self.cutout and self.cutout_size > self.crop_size:
            raise ValueError(f"cutout_size {self.cutout_size} exceeds crop_size {self.crop_size}")


# -- raw shards ---------------------------------------------------------------------

_HEADER = struct.Struct("<IIIII")


def write_shard(path, images: np.ndarray, labels: np.ndarray, n_classes: int) -> None:
    """Header (u32 count, C, H, W, n_classes) then per record: u32 label, f32 pixels[C*H*W]."""
    images = np.asarray(images)
    N, C, H, W = images.shape
    rec = np.dtype([("label", "<u4"), ("pix", "<f4", (C * H * W,))])
    arr = np.empty(N, dtype=rec)
    arr["label"] = labels
    arr["pix"] = images.reshape(N, -1)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(N, C, H, W, n_classes))
        fh.write(arr.tobytes())


def read_shard(path) -> tuple[np.ndarray, np.ndarray, int]:
    buf = Path(path).read_bytes()
    if len(buf) < _HEADER.size:
        raise IngestionError(f"{path}: truncated header")
    N, C, H, W, n = _HEADER.unpack_from(buf)
    rec = np.dtype([("label", "<u4"), ("pix", "<f4", (C * H * W,))])
    body = len(buf) - _HEADER.size
    if body != N * rec.itemsize:
        complete = body // rec.itemsize
        raise IngestionError(f"{path}: record {complete} is truncated or missing ({N} declared, "
                             f"{body / rec.itemsize:.2f} present)")
    arr = np.frombuffer(buf, dtype=rec, count=N, offset=_HEADER.size)
    labels = arr["label"].astype(np.int64)
    bad = np.nonzero(labels >= n)[0]
    if bad.size:
        raise IngestionError(f"{path}: record {bad[0]} has label {labels[bad[0]]} >= n_classes {n}")
    pix = arr["pix"].astype(np.float64)
    nonfinite = np.nonzero(~np.isfinite(pix).all(axis=1))[0]
    if nonfinite.size:
        raise IngestionError(f"{path}: record {nonfinite[0]} has non-finite pixels")
    return pix.reshape(N, C, H, W), labels, n


def read_source(source) -> tuple[np.ndarray, np.ndarray, int]:
    """A shard file or a directory of ``*.shard`` files (read in name order)."""
    p = Path(source)
    if not p.exists():
        raise IngestionError(f"{source}: no such file or directory")
    files = sorted(p.glob(f"*{SHARD_SUFFIX}")) if p.is_dir() else [p]
    if not files:
        raise IngestionError(f"{source}: directory holds no {SHARD_SUFFIX} files")
    xs, ys, ns = [], [], set()
    for f in files:
        x, y, n = read_shard(f)
        if xs and x.shape[1:] != xs[0].shape[1:]:
            raise IngestionError(f"{f}: image shape {x.shape[1:]} differs from {xs[0].shape[1:]} in {files[0]}")
        xs.append(x)
        ys.append(y)
        ns.add(n)
    if len(ns) > 1:
        raise IngestionError(f"{source}: shards disagree on n_classes {sorted(ns)}")
    return np.concatenate(xs), np.concatenate(ys), ns.pop()


# -- synthetic identities ----------------------------------------------------------

PERIODS = (4.0, 6.0, 10.0)
SYNTH_NOISE = 1.6


def synth_images(n_classes: int, per_class: int, image_size: int, seed: int,
                 noise: float = SYNTH_NOISE) -> tuple[np.ndarray, np.ndarray]:
    """Class-conditional textures with random phase, gain and colour.

    Classes cycle through horizontal stripes, vertical stripes and checkerboards
    at three periods, then concentric rings. The random phase makes every class
    mean close to zero, so a linear pixel classifier stays near chance while a
    convolutional energy detector separates them. All patterns are symmetric
    under horizontal flips.
    """
    rng = np.random.default_rng(seed)
    S = image_size
    yy, xx = np.meshgrid(np.arange(S, dtype=np.float64), np.arange(S, dtype=np.float64), indexing="ij")
    images = np.empty((n_classes * per_class, 3, S, S))
    labels = np.repeat(np.arange(n_classes), per_class)
    for idx, c in enumerate(labels):
        kind, period = divmod(int(c), len(PERIODS))
        w = 2 * np.pi / PERIODS[period]
        w *= rng.uniform(0.95, 1.05)
        ph1, ph2 = rng.uniform(0, 2 * np.pi, 2)
        tilt = rng.uniform(-0.1, 0.1)
        if kind % 4 == 0:
            pat = np.cos(w * (yy + tilt * xx) + ph1)
        elif kind % 4 == 1:
            pat = np.cos(w * (xx + tilt * yy) + ph1)
        elif kind % 4 == 2:
            pat = np.cos(w * xx + ph1) * np.cos(w * yy + ph2) * 1.5
        else:
            cy, cx = rng.uniform(S * 0.25, S * 0.75, 2)
            pat = np.cos(w * np.hypot(yy - cy, xx - cx) + ph1)
        amp = rng.uniform(0.6, 1.0)
        colour = rng.uniform(0.4, 1.0, 3)
        images[idx] = amp * colour[:, None, None] * pat[None] + noise * rng.standard_normal((3, S, S))
    return images, labels


def synth_identity_dataset(n_classes: int = 10, per_class: int = 200, image_size: int = 32, seed: int = 0,
                           ratios=(8, 1, 1), noise: float = SYNTH_NOISE) -> SplitDataset:
    if min(n_classes, per_class, image_size) <= 0:
        raise ValueError("n_classes, per_class and image_size must be positive")
    x, y = synth_images(n_classes, per_class, image_size, seed, noise)
    return split_and_normalize(x, y, n_classes, ratios, seed, source=f"synthetic:{n_classes}x{per_class}@{image_size}")


# -- splitting ----------------------------------------------------------------------

def split_counts(n: int, ratios) -> tuple[int, int, int]:
    total = sum(ratios)
    n_train = round(n * ratios[0] / total)
    n_val = round(n * ratios[1] / total)
    return n_train, n_val, n - n_train - n_val


def split_and_normalize(x, y, n_classes, ratios=(8, 1, 1), seed=0, source="") -> SplitDataset:
    order = np.random.default_rng(seed).permutation(len(y))
    x, y = x[order], y[order]
    n_train, n_val, _ = split_counts(len(y), ratios)
    tr, va, te = slice(0, n_train), slice(n_train, n_train + n_val), slice(n_train + n_val, None)
    mean = x[tr].mean(axis=(0, 2, 3))
    std = x[tr].std(axis=(0, 2, 3))
    std = np.where(std > 0, std, 1.0)

    def norm(a):
        return (a - mean[None, :, None, None]) / std[None, :, None, None]

    return SplitDataset(norm(x[tr]), y[tr], norm(x[va]), y[va], norm(x[te]), y[te], n_classes,
                        tuple(ratios), mean, std, source)


def load_dataset(source, ratios=(8, 1, 1), seed: int = 0) -> SplitDataset:
    """``source`` is a shard path/directory or ``synthetic[:classes,per_class,size[,noise]]``."""
    s = str(source)
    if s.startswith("synthetic"):
        _, _, spec = s.partition(":")
        parts = spec.split(",") if spec else []
        args = [int(v) for v in parts[:3]]
        kw = {"noise": float(parts[3])} if len(parts) > 3 else {}
        return synth_identity_dataset(*args, seed=seed, ratios=ratios, **kw)
    x, y, n = read_source(source)
    present = np.unique(y)
    if present.size != n:
        missing = sorted(set(range(n)) - set(present.tolist()))
        raise IngestionError(f"{source}: labels not dense in [0, {n}); missing {missing[:10]}")
    return split_and_normalize(x, y, n, ratios, seed, source=s)


# -- augmentation --------------------------------------------------------------------

def augment(image: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Single CxHxW image: flip -> zero pad -> random crop -> cutout."""
    return augment_batch(image[None], cfg, rng)[0]


def flip(image: np.ndarray) -> np.ndarray:
    return image[..., ::-1].copy()


def augment_batch(batch: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    N, C, H, W = batch.shape
    cfg.check(H)
    out = batch.copy()
    if cfg.flip:
        flips = rng.random(N) < cfg.flip_prob
        out[flips] = out[flips][..., ::-1]
    if cfg.crop:
        p, s = cfg.pad_pixels, cfg.crop_size
        padded = np.pad(out, ((0, 0), (0, 0), (p, p), (p, p)))
        offs = rng.integers(0, H + 2 * p - s + 1, size=(N, 2))
        out = np.stack([padded[i, :, oy:oy + s, ox:ox + s] for i, (oy, ox) in enumerate(offs)])
    if cfg.cutout and cfg.cutout_size > 0:
        S = out.shape[2]
        half = cfg.cutout_size // 2
        centres = rng.integers(0, S, size=(N, 2))
        for i, (cy, cx) in enumerate(centres):
            y0, x0 = max(cy - half, 0), max(cx - half, 0)
            y1, x1 = min(cy - half + cfg.cutout_size, S), min(cx - half + cfg.cutout_size, S)
            out[i, :, y0:y1, x0:x1] = 0.0
    return out


def batch_rng(seed: int, epoch: int, index: int, stream: int = 0) -> np.random.Generator:
    """Independent stream per (seed, epoch, batch); ordering of consumers cannot leak between batches."""
    return np.random.default_rng([seed, epoch, index, stream])
