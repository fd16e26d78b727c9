"""Dataset loading and preprocessing.

Covers MNIST IDX files, grayscale image directories turned into locally
contrast-normalised patches, Gaussian corruption and planted sparse data.
Samples are stored column-wise: ``Dataset.samples`` is ``d x N``.
"""
from __future__ import annotations

import gzip
import logging
import os
import struct
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import spck
from .models import LinearDecoder
from .numerics import Rng, col_norms

log = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    samples: np.ndarray  # d x N
    labels: np.ndarray | None = None
    source: str = ""
    mean: float = 0.0
    std: float = 1.0
    peak: float | None = None  # dynamic range of the training split, for PSNR
    image_shape: tuple[int, int] | None = None
    meta: dict = field(default_factory=dict)

    @property
    def d(self) -> int:
        return self.samples.shape[0]

    def __len__(self) -> int:
        return self.samples.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        labels = None if self.labels is None else self.labels[idx]
        return replace(self, samples=np.ascontiguousarray(self.samples[:, idx]), labels=labels,
                       meta=dict(self.meta))


# -- IDX --------------------------------------------------------------------

def _read_bytes(path: str | os.PathLike) -> bytes:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def read_idx_images(path: str | os.PathLike) -> np.ndarray:
    """Return a ``N x rows x cols`` uint8 array."""
    raw = _read_bytes(path)
    if len(raw) < 16:
        raise DataError(f"{path}: truncated IDX header ({len(raw)} bytes)")
    magic, n, rows, cols = struct.unpack_from(">IIII", raw, 0)
    if magic != IDX_IMAGES_MAGIC:
        raise DataError(f"{path}: bad IDX image magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}")
    need = 16 + n * rows * cols
    if len(raw) < need:
        raise DataError(f"{path}: truncated IDX image data ({len(raw)} of {need} bytes)")
    return np.frombuffer(raw, dtype=np.uint8, count=n * rows * cols, offset=16).reshape(n, rows, cols)


def read_idx_labels(path: str | os.PathLike) -> np.ndarray:
    raw = _read_bytes(path)
    if len(raw) < 8:
        raise DataError(f"{path}: truncated IDX header ({len(raw)} bytes)")
    magic, n = struct.unpack_from(">II", raw, 0)
    if magic != IDX_LABELS_MAGIC:
        raise DataError(f"{path}: bad IDX label magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}")
    if len(raw) < 8 + n:
        raise DataError(f"{path}: truncated IDX label data ({len(raw)} of {8 + n} bytes)")
    return np.frombuffer(raw, dtype=np.uint8, count=n, offset=8).copy()


def write_idx_images(path: str | os.PathLike, images: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    payload = struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols) + images.tobytes()
    _write_maybe_gz(path, payload)


def write_idx_labels(path: str | os.PathLike, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    _write_maybe_gz(path, struct.pack(">II", IDX_LABELS_MAGIC, labels.size) + labels.tobytes())


def _write_maybe_gz(path, payload: bytes) -> None:
    if str(path).endswith(".gz"):
        payload = gzip.compress(payload, mtime=0)
    Path(path).write_bytes(payload)


def load_idx(images_path: str | os.PathLike, labels_path: str | os.PathLike | None = None) -> Dataset:
    """Raw (unstandardised) dataset with pixel values 0..255 as float32."""
    images = read_idx_images(images_path)
    n, rows, cols = images.shape
    labels = None
    if labels_path is not None:
        labels = read_idx_labels(labels_path).astype(np.int64)
        if labels.size != n:
            raise DataError(f"count mismatch: {n} images in {images_path} but {labels.size} labels in {labels_path}")
    samples = np.ascontiguousarray(images.reshape(n, rows * cols).T, dtype=np.float32)
    return Dataset(samples, labels, source=str(images_path), image_shape=(rows, cols))


# -- standardisation --------------------------------------------------------

def standardize(raw: Dataset) -> Dataset:
    """Global mean/std standardisation; stats are stored for reuse and inversion."""
    if len(raw) < 1:
        raise DataError("cannot standardize an empty dataset")
    x = raw.samples.astype(np.float64)
    mean = float(x.mean())
    std = float(x.std())
    if std == 0:
        raise DataError("global standard deviation is 0; cannot standardize a constant dataset")
    out = apply_standardization(raw, mean, std)
    out.peak = float(out.samples.max()) - float(out.samples.min())
    return out


def apply_standardization(raw: Dataset, mean: float, std: float) -> Dataset:
    x = ((raw.samples.astype(np.float64) - mean) / std).astype(np.float32)
    return replace(raw, samples=x, mean=mean, std=std, meta=dict(raw.meta))


def destandardize(x: np.ndarray, ds: Dataset) -> np.ndarray:
    return x.astype(np.float64) * ds.std + ds.mean


def split(ds: Dataset, n_second: int, rng: Rng) -> tuple[Dataset, Dataset]:
    """Seeded random split into ``(N - n_second, n_second)`` parts."""
    if not 0 <= n_second <= len(ds):
        raise DataError(f"cannot split {n_second} of {len(ds)} samples")
    perm = rng.gen.permutation(len(ds))
    return ds.subset(np.sort(perm[n_second:])), ds.subset(np.sort(perm[:n_second]))


def load_mnist(images_path, labels_path, test_images=None, test_labels=None, n_val: int = 5000,
               n_train: int | None = None, rng: Rng | None = None) -> dict[str, Dataset]:
    """Load MNIST-style IDX files into standardised train/val(/test) splits.

    Statistics come from the training portion only and are applied to the
    other splits; ``peak`` is the training split's dynamic range.
    """
    rng = rng or Rng(0)
    raw = load_idx(images_path, labels_path)
    if n_train is not None:
        keep = rng.child("subset").gen.permutation(len(raw))[: n_train + n_val]
        raw = raw.subset(np.sort(keep))
    train_raw, val_raw = split(raw, n_val, rng.child("split"))
    train = standardize(train_raw)
    out = {"train": train, "val": _like(val_raw, train)}
    if test_images is not None:
        out["test"] = _like(load_idx(test_images, test_labels), train)
    return out


def _like(raw: Dataset, ref: Dataset) -> Dataset:
    ds = apply_standardization(raw, ref.mean, ref.std)
    ds.peak = ref.peak
    return ds


def save_dataset(path: str | os.PathLike, ds: Dataset) -> None:
    t = {"samples": ds.samples, "mean": ds.mean, "std": ds.std}
    if ds.labels is not None:
        t["labels"] = ds.labels.astype(np.float32)
    if ds.peak is not None:
        t["peak"] = ds.peak
    if ds.image_shape is not None:
        t["image_shape"] = np.asarray(ds.image_shape, dtype=np.float32)
    spck.save(path, t)


def load_dataset(path: str | os.PathLike) -> Dataset:
    t = spck.load(path)
    if "samples" not in t:
        raise DataError(f"{path}: no 'samples' tensor")
    labels = t["labels"].astype(np.int64) if "labels" in t else None
    shape = tuple(int(v) for v in t["image_shape"]) if "image_shape" in t else None
    return Dataset(t["samples"], labels, source=str(path), mean=float(t.get("mean", 0.0)),
                   std=float(t.get("std", 1.0)),
                   peak=float(t["peak"]) if "peak" in t else None, image_shape=shape)


# -- natural image patches --------------------------------------------------

@dataclass
class PatchPipelineConfig:
    patch_size: int = 28
    lcn_size: int = 13
    lcn_sigma: float = 5.0
    lcn_floor: float = 1e-4
    n_train: int = 200_000
    n_val: int = 20_000
    n_test: int = 20_000
    pool_fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2.0 * sigma ** 2))
    k = np.outer(g, g)
    return k / k.sum()


def lcn(image: np.ndarray, cfg: PatchPipelineConfig | None = None) -> np.ndarray:
    """Subtractive then divisive local contrast normalisation (reflect borders)."""
    cfg = cfg or PatchPipelineConfig()
    x = np.asarray(image, dtype=np.float64)
    if min(x.shape) < cfg.lcn_size:
        raise DataError(f"image {x.shape} smaller than the {cfg.lcn_size}x{cfg.lcn_size} LCN kernel")
    k = gaussian_kernel(cfg.lcn_size, cfg.lcn_sigma)
    v = x - ndimage.correlate(x, k, mode="reflect")
    denom = np.maximum(np.sqrt(ndimage.correlate(v * v, k, mode="reflect")), cfg.lcn_floor)
    return v / denom


def lcn_subtractive(image: np.ndarray, cfg: PatchPipelineConfig | None = None) -> np.ndarray:
    cfg = cfg or PatchPipelineConfig()
    x = np.asarray(image, dtype=np.float64)
    return x - ndimage.correlate(x, gaussian_kernel(cfg.lcn_size, cfg.lcn_sigma), mode="reflect")


def to_grayscale(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 2:
        return arr
    if arr.ndim == 3 and arr.shape[2] >= 3:
        return arr[..., 0] * 0.299 + arr[..., 1] * 0.587 + arr[..., 2] * 0.114
    if arr.ndim == 3 and arr.shape[2] in (1, 2):
        return arr[..., 0]
    raise DataError(f"unsupported image array shape {arr.shape}")


def read_image(path: str | os.PathLike) -> np.ndarray:
    """Read a PGM or PNG file as a float64 grayscale array."""
    from PIL import Image

    with Image.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I"):
            return np.asarray(im, dtype=np.float64)
        if im.mode not in ("L", "RGB", "RGBA", "LA"):
            im = im.convert("RGB")
        return to_grayscale(np.asarray(im))


def read_image_dir(directory: str | os.PathLike) -> list[np.ndarray]:
    exts = {".pgm", ".png"}
    files = sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in exts)
    if not files:
        raise DataError(f"no .pgm/.png images found in {directory}")
    return [read_image(p) for p in files]


def extract_patches(images: list[np.ndarray], cfg: PatchPipelineConfig,
                    rng: Rng | None = None) -> dict[str, Dataset]:
    """Grayscale images -> standardised, LCN'd, randomly placed square patches.

    Source images are split into disjoint train/val/test pools before any
    patch is drawn, so no image contributes to more than one split.
    """
    rng = rng or Rng(cfg.seed)
    p = cfg.patch_size
    usable = [i for i, im in enumerate(images) if im.shape[0] >= p and im.shape[1] >= p]
    skipped = len(images) - len(usable)
    if skipped:
        warnings.warn(f"skipped {skipped} image(s) smaller than {p}x{p}", stacklevel=2)

    order = rng.child("pools").gen.permutation(len(usable))
    usable = [usable[i] for i in order]
    names = ("train", "val", "test")
    counts = {"train": cfg.n_train, "val": cfg.n_val, "test": cfg.n_test}
    pools = _assign_pools(len(usable), cfg.pool_fractions, [counts[n] > 0 for n in names])
    pool_idx = {n: usable[a:b] for n, (a, b) in zip(names, pools)}

    train_pix = [images[i].ravel() for i in pool_idx["train"]] or [images[i].ravel() for i in usable]
    if train_pix:
        allpix = np.concatenate(train_pix).astype(np.float64)
        mean, std = float(allpix.mean()), float(allpix.std())
    else:
        mean, std = 0.0, 1.0
    if std == 0:
        std = 1.0

    out: dict[str, Dataset] = {}
    for name in names:
        n = counts[name]
        idx = pool_idx[name]
        if n > 0 and not idx:
            raise DataError(f"no usable source images left for the {name} split")
        prepped = [lcn((images[i] - mean) / std, cfg) for i in idx]
        prng = rng.child(f"patches.{name}").gen
        samples = np.empty((p * p, n), dtype=np.float32)
        src = np.empty(n, dtype=np.int64)
        for j in range(n):
            which = int(prng.integers(len(prepped)))
            im = prepped[which]
            r = int(prng.integers(im.shape[0] - p + 1))
            c = int(prng.integers(im.shape[1] - p + 1))
            samples[:, j] = im[r:r + p, c:c + p].ravel()
            src[j] = idx[which]
        out[name] = Dataset(samples, None, source=f"patches:{name}", mean=mean, std=std,
                            image_shape=(p, p), meta={"source_images": src, "skipped": skipped})
    train = out["train"]
    peak = float(train.samples.max() - train.samples.min()) if len(train) else None
    for ds in out.values():
        ds.peak = peak
    return out


def _assign_pools(n_images: int, fractions, wanted) -> list[tuple[int, int]]:
    """Contiguous ``[start, end)`` ranges; every wanted pool gets at least one image when possible."""
    w = np.array([f if want else 0.0 for f, want in zip(fractions, wanted)], dtype=np.float64)
    if w.sum() == 0:
        return [(0, 0)] * 3
    sizes = np.floor(w / w.sum() * n_images).astype(int)
    for i in range(3):
        if wanted[i] and sizes[i] == 0 and sizes.sum() < n_images:
            sizes[i] = 1
    while sizes.sum() < n_images:
        sizes[int(np.argmax(w))] += 1
    while sizes.sum() > n_images:
        i = int(np.argmax(sizes))
        sizes[i] -= 1
    ends = np.cumsum(sizes)
    starts = ends - sizes
    return list(zip(starts.tolist(), ends.tolist()))


# -- corruption and synthetic data -----------------------------------------

def add_gaussian_noise(batch: np.ndarray, sigma: float, rng: Rng) -> np.ndarray:
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return batch.copy()
    noise = rng.gen.standard_normal(batch.shape)
    return (batch + sigma * noise).astype(batch.dtype, copy=False)


def synth_sparse(d: int, l: int, k_active: int, N: int, noise_std: float,
                 rng: Rng) -> tuple[Dataset, LinearDecoder, np.ndarray]:
    """Samples ``y = W z + noise`` from a planted unit-column dictionary.

    Each code has ``k_active`` non-zero entries drawn from ``|N(0, 1)|``.
    Returns the dataset, the planted decoder and the planted codes.
    """
    if k_active > l:
        raise ValueError(f"k_active ({k_active}) must be <= l ({l})")
    g = rng.gen
    W = g.standard_normal((d, l))
    W /= col_norms(W)
    Z = np.zeros((l, N))
    for i in range(N):
        idx = g.choice(l, size=k_active, replace=False)
        Z[idx, i] = np.abs(g.standard_normal(k_active))
    Y = W @ Z + noise_std * g.standard_normal((d, N))
    ds = Dataset(Y.astype(np.float32), None, source="synthetic",
                 meta={"d": d, "l": l, "k_active": k_active, "noise_std": noise_std, "seed": rng.seed})
    ds.peak = float(ds.samples.max() - ds.samples.min()) if N else None
    return ds, LinearDecoder(W), Z
