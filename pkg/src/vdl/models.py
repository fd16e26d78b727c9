"""Decoders (linear and one-hidden-layer MLP) and the LISTA encoder.

All batches are column-major in the sample index: inputs ``y`` are ``d x n``
and codes ``z`` are ``l x n``. Gradients are written out by hand; the test
suite checks every one of them against central finite differences.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from . import spck
from .numerics import Rng, col_norms, randn


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def _check_rows(x: np.ndarray, rows: int, what: str) -> None:
    if x.ndim != 2 or x.shape[0] != rows:
        raise ValueError(f"{what}: expected {rows} rows, got shape {x.shape}")


@dataclass
class LinearDecoder:
    W: np.ndarray  # d x l, no bias

    @property
    def in_dim(self) -> int:
        return self.W.shape[1]

    @property
    def out_dim(self) -> int:
        return self.W.shape[0]

    def params(self) -> dict[str, np.ndarray]:
        return {"W": self.W}

    def copy(self) -> "LinearDecoder":
        return LinearDecoder(self.W.copy())


@dataclass
class MlpDecoder:
    W1: np.ndarray  # m x l
    b1: np.ndarray  # m
    W2: np.ndarray  # d x m, no output bias

    @property
    def in_dim(self) -> int:
        return self.W1.shape[1]

    @property
    def out_dim(self) -> int:
        return self.W2.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.W1.shape[0]

    def params(self) -> dict[str, np.ndarray]:
        return {"W1": self.W1, "b1": self.b1, "W2": self.W2}

    def copy(self) -> "MlpDecoder":
        return MlpDecoder(self.W1.copy(), self.b1.copy(), self.W2.copy())


Decoder = Union[LinearDecoder, MlpDecoder]


@dataclass
class ListaEncoder:
    U: np.ndarray  # l x d (maps R^d -> R^l)
    S: np.ndarray  # l x l
    b: np.ndarray  # l
    L: int = 3

    @property
    def in_dim(self) -> int:
        return self.U.shape[1]

    @property
    def out_dim(self) -> int:
        return self.U.shape[0]

    def params(self) -> dict[str, np.ndarray]:
        return {"U": self.U, "S": self.S, "b": self.b}

    def copy(self) -> "ListaEncoder":
        return ListaEncoder(self.U.copy(), self.S.copy(), self.b.copy(), self.L)


# -- initialisation ---------------------------------------------------------

def _scaled_gaussian(rng: Rng, rows: int, cols: int, dtype) -> np.ndarray:
    return randn(rng, rows, cols, 0.0, 1.0 / np.sqrt(cols), dtype=dtype)


def init_linear_decoder(d: int, l: int, rng: Rng, unit_columns: bool = False,
                        dtype=np.float32) -> LinearDecoder:
    dec = LinearDecoder(_scaled_gaussian(rng, d, l, dtype))
    return project_columns_unit_norm(dec, rng) if unit_columns else dec


def init_mlp_decoder(d: int, l: int, m: int, rng: Rng, unit_columns: bool = False,
                     dtype=np.float32) -> MlpDecoder:
    dec = MlpDecoder(_scaled_gaussian(rng, m, l, dtype), np.zeros(m, dtype=dtype),
                     _scaled_gaussian(rng, d, m, dtype))
    return project_columns_unit_norm(dec, rng) if unit_columns else dec


def init_encoder(d: int, l: int, L: int, rng: Rng, dtype=np.float32) -> ListaEncoder:
    return ListaEncoder(_scaled_gaussian(rng, l, d, dtype), _scaled_gaussian(rng, l, l, dtype),
                        np.zeros(l, dtype=dtype), int(L))


# -- decoders ---------------------------------------------------------------

def decode(dec: Decoder, z: np.ndarray) -> np.ndarray:
    _check_rows(z, dec.in_dim, "decode")
    if isinstance(dec, LinearDecoder):
        return dec.W @ z
    return dec.W2 @ relu(dec.W1 @ z + dec.b1[:, None])


def decoder_grad_z(dec: Decoder, z: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Column-wise gradient of ``0.5 * ||y_t - D(z_t)||^2`` with respect to ``z_t``."""
    _check_rows(z, dec.in_dim, "decoder_grad_z")
    _check_rows(y, dec.out_dim, "decoder_grad_z")
    if z.shape[1] != y.shape[1]:
        raise ValueError(f"batch mismatch: z {z.shape} vs y {y.shape}")
    if isinstance(dec, LinearDecoder):
        return dec.W.T @ (dec.W @ z - y)
    h = dec.W1 @ z + dec.b1[:, None]
    resid = dec.W2 @ relu(h) - y
    return dec.W1.T @ ((h > 0) * (dec.W2.T @ resid))


def reconstruction_loss(dec: Decoder, z: np.ndarray, y: np.ndarray) -> float:
    """Mean over the batch of ``||y_i - D(z_i)||^2`` (no 1/2 factor)."""
    r = decode(dec, z) - y
    return float(np.einsum("ij,ij->", r, r, dtype=np.float64) / y.shape[1])


def decoder_grad_params(dec: Decoder, z: np.ndarray, y: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of :func:`reconstruction_loss` with respect to the decoder weights."""
    _check_rows(z, dec.in_dim, "decoder_grad_params")
    _check_rows(y, dec.out_dim, "decoder_grad_params")
    n = y.shape[1]
    if isinstance(dec, LinearDecoder):
        g_out = (2.0 / n) * (dec.W @ z - y)
        return {"W": g_out @ z.T}
    h = dec.W1 @ z + dec.b1[:, None]
    r = relu(h)
    g_out = (2.0 / n) * (dec.W2 @ r - y)
    g_h = (h > 0) * (dec.W2.T @ g_out)
    return {"W1": g_h @ z.T, "b1": g_h.sum(axis=1), "W2": g_out @ r.T}


def project_columns_unit_norm(dec: Decoder, rng: Rng | None = None) -> Decoder:
    """Rescale every weight-matrix column to unit l2 norm, in place.

    A zero column cannot be normalised; it is redrawn from the Gaussian
    initialiser first. ``b1`` is left untouched.
    """
    mats = [dec.W] if isinstance(dec, LinearDecoder) else [dec.W1, dec.W2]
    for W in mats:
        norms = col_norms(W)
        dead = norms < 1e-12
        if dead.any():
            rng = rng if rng is not None else Rng(0).child("reinit")
            W[:, dead] = randn(rng, W.shape[0], int(dead.sum()), dtype=W.dtype)
            norms = col_norms(W)
        W /= norms.astype(W.dtype)
        # second pass removes the float32 rounding left by the first division
        W /= col_norms(W).astype(W.dtype)
    return dec


# -- encoder ----------------------------------------------------------------

def _encode_trace(enc: ListaEncoder, y: np.ndarray):
    _check_rows(y, enc.in_dim, "encode")
    u = enc.U @ y + enc.b[:, None]
    pre = [u]
    zs = [relu(u)]
    for _ in range(enc.L):
        a = u + enc.S @ zs[-1]
        pre.append(a)
        zs.append(relu(a))
    return pre, zs


def encode(enc: ListaEncoder, y: np.ndarray) -> np.ndarray:
    _check_rows(y, enc.in_dim, "encode")
    u = enc.U @ y + enc.b[:, None]
    z = relu(u)
    for _ in range(enc.L):
        z = relu(u + enc.S @ z)
    return z


def encoder_backward(enc: ListaEncoder, y: np.ndarray, grad_out: np.ndarray) -> dict[str, np.ndarray]:
    """Reverse-mode pass through the ``L`` unrolled iterations.

    ``grad_out`` is the gradient of some scalar loss with respect to the
    encoder output; returns the gradients for ``U``, ``S`` and ``b``.
    """
    pre, zs = _encode_trace(enc, y)
    g_S = np.zeros_like(enc.S)
    g_u = np.zeros_like(pre[0])
    g_z = grad_out
    for i in range(enc.L, 0, -1):
        g_a = g_z * (pre[i] > 0)
        g_S += g_a @ zs[i - 1].T
        g_u += g_a
        g_z = enc.S.T @ g_a
    g_u += g_z * (pre[0] > 0)
    return {"U": g_u @ y.T, "S": g_S, "b": g_u.sum(axis=1)}


def encoder_loss(enc: ListaEncoder, y: np.ndarray, target: np.ndarray) -> float:
    r = encode(enc, y) - target
    return float(np.einsum("ij,ij->", r, r, dtype=np.float64) / y.shape[1])


def encoder_grad_params(enc: ListaEncoder, y: np.ndarray, target: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of ``(1/n) sum_i ||E(y_i) - target_i||^2``; ``target`` is a constant."""
    _check_rows(target, enc.out_dim, "encoder_grad_params")
    if target.shape[1] != y.shape[1]:
        raise ValueError(f"batch mismatch: y {y.shape} vs target {target.shape}")
    z = encode(enc, y)
    return encoder_backward(enc, y, (2.0 / y.shape[1]) * (z - target))


# -- checkpoints ------------------------------------------------------------

@dataclass
class Checkpoint:
    decoder: Decoder
    encoder: ListaEncoder | None
    meta: dict[str, float] = field(default_factory=dict)


def checkpoint_tensors(dec: Decoder, enc: ListaEncoder | None,
                       meta: dict[str, float] | None = None) -> dict[str, np.ndarray]:
    t: dict[str, np.ndarray] = {}
    if isinstance(dec, LinearDecoder):
        t["dec.W"] = dec.W
    else:
        t.update({"dec.W1": dec.W1, "dec.b1": dec.b1, "dec.W2": dec.W2})
    if enc is not None:
        t.update({"enc.U": enc.U, "enc.S": enc.S, "enc.b": enc.b,
                  "enc.L": np.float32(enc.L)})
    for k, v in (meta or {}).items():
        t[f"meta.{k}"] = np.float32(v)
    return t


def save_checkpoint(path: str | os.PathLike, dec: Decoder, enc: ListaEncoder | None,
                    meta: dict[str, float] | None = None) -> None:
    spck.save(path, checkpoint_tensors(dec, enc, meta))


def checkpoint_from_tensors(t: dict[str, np.ndarray]) -> Checkpoint:
    if "dec.W" in t:
        dec: Decoder = LinearDecoder(t["dec.W"].copy())
    elif {"dec.W1", "dec.b1", "dec.W2"} <= t.keys():
        dec = MlpDecoder(t["dec.W1"].copy(), t["dec.b1"].copy(), t["dec.W2"].copy())
    else:
        raise spck.SpckError("checkpoint holds no decoder tensors")
    enc = None
    if "enc.U" in t:
        enc = ListaEncoder(t["enc.U"].copy(), t["enc.S"].copy(), t["enc.b"].copy(),
                           int(round(float(t["enc.L"]))))
    meta = {k[5:]: float(v) for k, v in t.items() if k.startswith("meta.")}
    return Checkpoint(dec, enc, meta)


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    return checkpoint_from_tensors(spck.load(path))
