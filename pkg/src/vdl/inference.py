"""Sparse inference: ISTA/FISTA with the variance hinge and encoder pull.

The smooth part of the batch energy is

    sum_i 0.5 ||y_i - D(z_i)||^2
    + beta * sum_j [(T - std(z_j.))_+]^2
    + gamma * sum_i ||z_i - E(y_i)||^2

and the non-smooth part is ``lambda * sum_i ||z_i||_1``, handled by the
shrinkage step with threshold ``lambda * step``.

With ``reduction="mean"`` the reconstruction and pull sums are divided by
the batch size while the l1 and hinge terms stay batch sums, so ``lambda``
and ``beta`` act at batch scale (the per-sample problem is the "sum" one
with ``lambda * n`` and ``beta * n``).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .models import Decoder, LinearDecoder, ListaEncoder, decode, decoder_grad_z, encode

log = logging.getLogger(__name__)

_VAR_EPS = 1e-12
_NORM_EPS = 1e-12


class InferenceDivergedError(FloatingPointError):
    """Raised when FISTA/ISTA iterates stop being finite."""


@dataclass
class InferenceConfig:
    lam: float = 0.0
    beta: float = 0.0
    T: float = 0.5
    gamma: float = 0.0
    eta: float = 1.0
    max_iters: int = 200
    tol: float = 1e-3
    nonneg: bool = True
    step_mode: str = "absolute"  # "absolute": step = eta; "lipschitz": step = eta / L
    reduction: str = "sum"  # "mean": reconstruction and pull terms averaged over the batch

    def validate(self) -> "InferenceConfig":
        for name in ("lam", "beta", "gamma", "tol"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")
        if not np.isfinite(self.eta) or self.eta <= 0:
            raise ValueError(f"eta must be > 0, got {self.eta}")
        if self.beta > 0 and not self.T > 0:
            raise ValueError(f"T must be > 0 when beta > 0, got {self.T}")
        if self.step_mode not in ("absolute", "lipschitz"):
            raise ValueError(f"step_mode must be 'absolute' or 'lipschitz', got {self.step_mode!r}")
        if self.reduction not in ("sum", "mean"):
            raise ValueError(f"reduction must be 'sum' or 'mean', got {self.reduction!r}")
        if self.max_iters < 0:
            raise ValueError(f"max_iters must be >= 0, got {self.max_iters}")
        return self


@dataclass
class InferenceResult:
    codes: np.ndarray
    iters_run: int
    converged: bool
    final_energy: float
    energy_trace: list[float] = field(default_factory=list)


def shrink(x: np.ndarray, alpha: float, nonneg: bool = True) -> np.ndarray:
    """Soft-thresholding; with ``nonneg`` negative outputs are also zeroed."""
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    x = np.asarray(x)
    if nonneg:
        return np.maximum(x - alpha, 0)
    return np.sign(x) * np.maximum(np.abs(x) - alpha, 0)


def base_energy(z: np.ndarray, y: np.ndarray, dec: Decoder, lam: float) -> float:
    """Per-sample energy ``0.5 ||y - D(z)||^2 + lam ||z||_1`` for one code vector."""
    z = np.asarray(z).reshape(-1, 1)
    y = np.asarray(y).reshape(-1, 1)
    r = y - decode(dec, z)
    return float(0.5 * np.sum(r.astype(np.float64) ** 2) + lam * np.abs(z).sum(dtype=np.float64))


def per_sample_energy(z: np.ndarray, Y: np.ndarray, dec: Decoder, lam: float) -> np.ndarray:
    r = (Y - decode(dec, z)).astype(np.float64)
    return 0.5 * np.einsum("ij,ij->j", r, r) + lam * np.abs(z).sum(axis=0, dtype=np.float64)


def _component_std(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n = z.shape[1]
    if n < 2:
        raise ValueError("batch too small for variance regularization")
    mu = z.mean(axis=1, keepdims=True)
    c = z - mu
    var = np.einsum("ij,ij->i", c, c) / (n - 1)
    return np.sqrt(var), c


def variance_penalty(z: np.ndarray, beta: float, T: float) -> float:
    std, _ = _component_std(np.asarray(z, dtype=np.float64))
    return float(beta * np.sum(np.maximum(T - std, 0.0) ** 2))


def variance_penalty_grad(z: np.ndarray, beta: float, T: float) -> np.ndarray:
    """Gradient of :func:`variance_penalty`; zero on rows with std >= T or var ~ 0."""
    z = np.asarray(z)
    std, centered = _component_std(z)
    n = z.shape[1]
    active = (std < T) & (std * std >= _VAR_EPS)
    coef = np.zeros_like(std)
    coef[active] = -(2.0 * beta / (n - 1)) * (T - std[active]) / std[active]
    return (coef[:, None] * centered).astype(z.dtype, copy=False)


def data_weight(cfg: InferenceConfig, n: int) -> float:
    """Weight on the reconstruction and pull sums for a batch of ``n`` codes."""
    return 1.0 / n if cfg.reduction == "mean" else 1.0


def batch_energy(z: np.ndarray, Y: np.ndarray, dec: Decoder, enc: ListaEncoder | None,
                 cfg: InferenceConfig, enc_codes: np.ndarray | None = None) -> float:
    w = data_weight(cfg, z.shape[1])
    r = (Y - decode(dec, z)).astype(np.float64)
    total = w * 0.5 * float(np.einsum("ij,ij->", r, r)) + cfg.lam * float(np.abs(z).sum(dtype=np.float64))
    if cfg.beta > 0:
        total += variance_penalty(z, cfg.beta, cfg.T)
    if cfg.gamma > 0 and (enc is not None or enc_codes is not None):
        if enc_codes is None:
            enc_codes = encode(enc, Y)
        diff = (z - enc_codes).astype(np.float64)
        total += w * cfg.gamma * float(np.einsum("ij,ij->", diff, diff))
    return total


def smooth_grad(x: np.ndarray, Y: np.ndarray, dec: Decoder, cfg: InferenceConfig,
                enc_codes: np.ndarray | None) -> np.ndarray:
    g = decoder_grad_z(dec, x, Y)
    if cfg.gamma > 0 and enc_codes is not None:
        g = g + (2.0 * cfg.gamma) * (x - enc_codes)
    w = data_weight(cfg, x.shape[1])
    if w != 1.0:
        g = g * np.asarray(w, dtype=g.dtype)
    if cfg.beta > 0:
        g = g + variance_penalty_grad(x, cfg.beta, cfg.T)
    return g


def spectral_norm_sq(A: np.ndarray, iters: int = 50) -> float:
    """Largest eigenvalue of ``A^T A`` by power iteration from a fixed start."""
    A = np.asarray(A, dtype=np.float64)
    v = np.ones(A.shape[1]) / np.sqrt(A.shape[1])
    lam = 0.0
    for _ in range(iters):
        w = A.T @ (A @ v)
        lam = float(np.linalg.norm(w))
        if lam == 0.0:
            return 0.0
        v = w / lam
    return lam


def smooth_lipschitz(dec: Decoder, cfg: InferenceConfig, n: int = 1) -> float:
    """Lipschitz bound of the reconstruction + pull gradient (hinge term excluded)."""
    if isinstance(dec, LinearDecoder):
        L = spectral_norm_sq(dec.W)
    else:
        L = spectral_norm_sq(dec.W2) * spectral_norm_sq(dec.W1)
    return (L + 2.0 * cfg.gamma) * data_weight(cfg, n)


def _relative_change(z_new: np.ndarray, z_old: np.ndarray, tol: float) -> bool:
    den = float(np.linalg.norm(z_old))
    num = float(np.linalg.norm(z_new - z_old))
    if den < _NORM_EPS:
        return tol > 0 and float(np.linalg.norm(z_new)) < _NORM_EPS
    return num / den < tol


def _run(Y, dec, enc, cfg, z0, momentum: bool, record_energy: bool) -> InferenceResult:
    cfg.validate()
    enc_codes = encode(enc, Y) if enc is not None else None
    if z0 is None:
        z0 = enc_codes if enc_codes is not None else np.zeros((dec.in_dim, Y.shape[1]), dtype=Y.dtype)
    z = np.array(z0, dtype=Y.dtype, copy=True)
    if cfg.gamma == 0:
        enc_codes = None
    z_prev = z
    t_prev = 1.0
    step = cfg.eta if cfg.step_mode == "absolute" else cfg.eta / max(smooth_lipschitz(dec, cfg, Y.shape[1]), 1e-12)
    thresh = cfg.lam * step
    trace: list[float] = []
    if record_energy:
        trace.append(batch_energy(z, Y, dec, None, cfg, enc_codes))

    converged = False
    k = 0
    for k in range(1, cfg.max_iters + 1):
        if momentum and k >= 2:
            t = (1.0 + np.sqrt(1.0 + 4.0 * t_prev * t_prev)) / 2.0
            x = z + ((t_prev - 1.0) / t) * (z - z_prev)
            t_prev = t
        else:
            x = z
        with np.errstate(over="ignore", invalid="ignore"):
            z_tilde = x - step * smooth_grad(x, Y, dec, cfg, enc_codes)
            z_new = shrink(z_tilde, thresh, cfg.nonneg)
        if not np.isfinite(z_new).all():
            raise InferenceDivergedError("inference diverged (step size too large)")
        z_prev, z = z, z_new
        if record_energy:
            trace.append(batch_energy(z, Y, dec, None, cfg, enc_codes))
        if _relative_change(z, z_prev, cfg.tol):
            converged = True
            break

    energy = batch_energy(z, Y, dec, None, cfg, enc_codes)
    if not np.isfinite(energy):
        raise InferenceDivergedError("inference diverged (step size too large)")
    return InferenceResult(z, k, converged, energy, trace)


def fista_infer(Y: np.ndarray, dec: Decoder, enc: ListaEncoder | None, cfg: InferenceConfig,
                z0: np.ndarray | None = None, record_energy: bool = False) -> InferenceResult:
    """FISTA on the batch energy.

    ``z0`` defaults to the encoder's prediction when an encoder is given and
    to zeros otherwise. The encoder output is a constant throughout; it only
    enters the pull term when ``cfg.gamma > 0``.
    """
    return _run(Y, dec, enc, cfg, z0, momentum=True, record_energy=record_energy)


def ista_infer(Y: np.ndarray, dec: Decoder, enc: ListaEncoder | None, cfg: InferenceConfig,
               z0: np.ndarray | None = None, record_energy: bool = False) -> InferenceResult:
    return _run(Y, dec, enc, cfg, z0, momentum=False, record_energy=record_energy)
