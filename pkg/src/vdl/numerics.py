"""Dense linear-algebra and randomness helpers shared by the other modules.

Matrices are plain ``numpy.ndarray`` objects. Training paths use float32,
oracle and gradient-check paths use float64; every function here preserves
the dtype of its inputs except the reductions, which accumulate in float64.
"""
from __future__ import annotations

import zlib

import numpy as np

TRAIN_DTYPE = np.float32
CHECK_DTYPE = np.float64


class Rng:
    """Seeded PCG64 generator with named, independent sub-streams.

    ``Rng(7).child("init")`` always yields the same stream, regardless of
    how many other children were drawn before it.
    """

    algorithm = "PCG64"

    def __init__(self, seed: int, _key: tuple[int, ...] = ()):
        if seed < 0 or seed >= 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self._key = _key
        ss = np.random.SeedSequence(self.seed, spawn_key=_key)
        self.gen = np.random.Generator(np.random.PCG64(ss))

    def child(self, name: str) -> "Rng":
        return Rng(self.seed, self._key + (zlib.crc32(name.encode("utf-8")),))

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, key={self._key})"


def as_rng(rng: Rng | int | None) -> Rng:
    if isinstance(rng, Rng):
        return rng
    return Rng(0 if rng is None else int(rng))


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    return a @ b


def transpose(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(a).T)


def randn(rng: Rng, rows: int, cols: int, mean: float = 0.0, std: float = 1.0,
          dtype=CHECK_DTYPE) -> np.ndarray:
    """I.i.d. Gaussian ``rows x cols`` matrix drawn from ``rng``."""
    if std < 0:
        raise ValueError(f"std must be >= 0, got {std}")
    out = rng.gen.standard_normal((rows, cols))
    return (mean + std * out).astype(dtype, copy=False)


def row_mean(x: np.ndarray) -> np.ndarray:
    return np.asarray(x, dtype=np.float64).mean(axis=1)


def row_var(x: np.ndarray) -> np.ndarray:
    """Per-row variance with the n-1 denominator (float64 accumulation)."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[1]
    if n < 2:
        raise ValueError("variance needs at least 2 columns")
    c = x - x.mean(axis=1, keepdims=True)
    return np.einsum("ij,ij->i", c, c) / (n - 1)


def row_std(x: np.ndarray) -> np.ndarray:
    return np.sqrt(row_var(x))


def col_norms(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.sqrt(np.einsum("ij,ij->j", x, x))


def all_finite(*arrays: np.ndarray) -> bool:
    return all(bool(np.isfinite(a).all()) for a in arrays)
