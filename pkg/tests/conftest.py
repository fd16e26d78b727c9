import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def central_diff(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of scalar ``f`` at ``x`` (perturbed in place, restored)."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + h
        fp = f()
        x[i] = orig - h
        fm = f()
        x[i] = orig
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    den = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-30)
    return float(np.linalg.norm(a - b) / den)


def cd_lasso(W: np.ndarray, y: np.ndarray, lam: float, nonneg: bool, sweeps: int = 20000,
             tol: float = 1e-15) -> np.ndarray:
    """Cyclic coordinate descent for 0.5||y - Wz||^2 + lam ||z||_1 (optionally z >= 0)."""
    l = W.shape[1]
    z = np.zeros(l)
    r = y.astype(np.float64).copy()
    col_sq = (W * W).sum(axis=0)
    for _ in range(sweeps):
        delta = 0.0
        for j in range(l):
            if col_sq[j] == 0:
                continue
            rho = W[:, j] @ r + col_sq[j] * z[j]
            if nonneg:
                new = max(rho - lam, 0.0) / col_sq[j]
            else:
                new = np.sign(rho) * max(abs(rho) - lam, 0.0) / col_sq[j]
            if new != z[j]:
                r -= W[:, j] * (new - z[j])
                delta = max(delta, abs(new - z[j]))
                z[j] = new
        if delta < tol:
            break
    return z


def lasso_energy(W, y, z, lam) -> float:
    r = y - W @ z
    return 0.5 * float(r @ r) + lam * float(np.abs(z).sum())


@pytest.fixture
def rng64():
    return np.random.default_rng(12345)
