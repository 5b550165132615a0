"""Stable softmax/divergence primitives and a finite-difference gradient probe.

Everything here works in float64 and reports divergences in nats.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

EPS = 1e-12


def _as_vector(v, name: str = "v") -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {v.shape}")
    if v.size == 0:
        raise ValueError(f"{name} is empty")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name} has non-finite entries")
    return v


def softmax(v) -> np.ndarray:
    v = _as_vector(v)
    e = np.exp(v - v.max())
    return e / e.sum()


def log_softmax(v) -> np.ndarray:
    v = _as_vector(v)
    shifted = v - v.max()
    return shifted - np.log(np.exp(shifted).sum())


def _pair(p, q):
    p = _as_vector(p, "p")
    q = _as_vector(q, "q")
    if p.shape != q.shape:
        raise ValueError(f"length mismatch: {p.size} vs {q.size}")
    return p, q


def kl_div(p, q) -> float:
    """KL(p || q) with both arguments clamped to ``EPS`` inside the log."""
    p, q = _pair(p, q)
    value = float(np.sum(p * (np.log(np.maximum(p, EPS)) - np.log(np.maximum(q, EPS)))))
    return max(value, 0.0)


def jsd(p, q) -> float:
    p, q = _pair(p, q)
    m = 0.5 * (p + q)
    return 0.5 * kl_div(p, m) + 0.5 * kl_div(q, m)


# Divergences between softmax-normalized rows, with gradients w.r.t. the
# unnormalized rows. These stay in log space, so no clamp is needed.

def kl_softmax(a: np.ndarray, b: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """KL(softmax(a) || softmax(b)) and its gradients w.r.t. ``a`` and ``b``."""
    log_p = log_softmax(a)
    log_q = log_softmax(b)
    p = np.exp(log_p)
    r = log_p - log_q
    value = float(p @ r)
    grad_a = p * (r - value)
    grad_b = np.exp(log_q) - p
    return value, grad_a, grad_b


def jsd_softmax(a: np.ndarray, b: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """JSD(softmax(a), softmax(b)) and its gradients w.r.t. ``a`` and ``b``."""
    log_p = log_softmax(a)
    log_q = log_softmax(b)
    p = np.exp(log_p)
    q = np.exp(log_q)
    # where the entries agree the mixture is exact; avoids roundoff from logaddexp
    log_m = np.where(log_p == log_q, log_p, np.logaddexp(log_p, log_q) - np.log(2.0))
    gp = 0.5 * (log_p - log_m)
    gq = 0.5 * (log_q - log_m)
    value = float(p @ gp + q @ gq)
    grad_a = p * (gp - p @ gp)
    grad_b = q * (gq - q @ gq)
    return max(value, 0.0), grad_a, grad_b


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of a flat vector."""
    x = np.array(x, dtype=np.float64).ravel()
    grad = np.empty_like(x)
    for i in range(x.size):
        orig = x[i]
        x[i] = orig + h
        fp = f(x)
        x[i] = orig - h
        fm = f(x)
        x[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value probing coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(analytic, numeric, floor: float = 1e-6) -> np.ndarray:
    """Elementwise |a - n| / max(|a|, |n|, floor).

    The floor turns the check into an absolute one for near-zero entries,
    where central differences carry roundoff of order 1e-11.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom
