"""Hierarchy-aware loss terms.

Each term returns its value together with gradients w.r.t. the tensors it
reads, so the model's reverse pass can be seeded directly. Feature rows are
softmax-normalized over their P entries before any divergence.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .numerics import jsd_softmax, kl_softmax, log_softmax
from .taxonomy import Taxonomy


@dataclass(frozen=True)
class LossConfig:
    enable_con: bool = True
    enable_int: bool = True
    enable_gce: bool = True
    alpha: float = 1.0
    ce_coarse_weight: float = 1.0
    ce_fine_weight: float = 1.0
    con_weight: float = 1.0
    int_weight: float = 1.0
    gce_weight: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name.startswith("enable_"):
                if not isinstance(value, bool):
                    raise ValueError(f"{f.name} must be a boolean")
            elif not (np.isfinite(value) and value >= 0):
                raise ValueError(f"{f.name} must be finite and nonnegative, got {value!r}")

    @classmethod
    def from_dict(cls, data: dict) -> "LossConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown loss config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class LossBreakdown:
    ce_coarse: float = 0.0
    ce_fine: float = 0.0
    con: float = 0.0
    int: float = 0.0
    gce: float = 0.0
    total: float = 0.0


@dataclass
class SeedGradients:
    d_o_c: np.ndarray
    d_o_f: np.ndarray
    d_f_c: np.ndarray
    d_f_f: np.ndarray


def ce_loss(logits, true_index: int) -> tuple[float, np.ndarray]:
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= true_index < logits.size:
        raise IndexError(f"class index {true_index} out of range for {logits.size} logits")
    log_p = log_softmax(logits)
    grad = np.exp(log_p)
    grad[true_index] -= 1.0
    return float(-log_p[true_index]), grad


def con_loss(f_c, f_f, o_c, o_f):
    """JSD between the softmax-normalized feature rows of the top coarse and top fine logits.

    Returns ``(value, grad_f_c, grad_f_f)``; only the two selected rows get
    nonzero gradient. Argmax ties resolve to the lowest index.
    """
    f_c = np.asarray(f_c, dtype=np.float64)
    f_f = np.asarray(f_f, dtype=np.float64)
    if f_c.ndim != 2 or f_f.ndim != 2 or f_c.shape[1] != f_f.shape[1]:
        raise ValueError(f"feature matrices {f_c.shape} and {f_f.shape} are incompatible")
    if len(o_c) != f_c.shape[0] or len(o_f) != f_f.shape[0]:
        raise ValueError("logit lengths do not match feature rows")
    i_c = int(np.argmax(o_c))
    i_f = int(np.argmax(o_f))
    value, g_c, g_f = jsd_softmax(f_c[i_c], f_f[i_f])
    grad_c = np.zeros_like(f_c)
    grad_f = np.zeros_like(f_f)
    grad_c[i_c] = g_c
    grad_f[i_f] = g_f
    return value, grad_c, grad_f


def int_loss(f_f, true_fine: int, taxonomy: Taxonomy, alpha: float = 1.0):
    """Pull sibling rows toward the true row, push other groups past margin ``alpha``.

    Sum over siblings i+ != i* of KL(row_i* || row_i+), plus the sum over the
    complement of max(0, alpha - KL(row_i* || row_i-)). Returns
    ``(value, grad_f_f)``.
    """
    f_f = np.asarray(f_f, dtype=np.float64)
    if f_f.ndim != 2 or f_f.shape[0] != taxonomy.n_fine:
        raise ValueError(f"fine features {f_f.shape} do not match {taxonomy.n_fine} fine classes")
    siblings = taxonomy.siblings_of(true_fine)
    grad = np.zeros_like(f_f)
    anchor = f_f[true_fine]
    value = 0.0
    for j in sorted(siblings):
        if j == true_fine:
            continue
        kl, g_anchor, g_j = kl_softmax(anchor, f_f[j])
        value += kl
        grad[true_fine] += g_anchor
        grad[j] += g_j
    for j in sorted(taxonomy.complement_of(true_fine)):
        kl, g_anchor, g_j = kl_softmax(anchor, f_f[j])
        gap = alpha - kl
        if gap > 0:
            value += gap
            grad[true_fine] -= g_anchor
            grad[j] -= g_j
    return value, grad


def gce_loss(o_f, true_fine: int, taxonomy: Taxonomy) -> tuple[float, np.ndarray]:
    """Cross-entropy with the softmax restricted to the true class's sibling group."""
    o_f = np.asarray(o_f, dtype=np.float64)
    if o_f.size != taxonomy.n_fine:
        raise ValueError(f"{o_f.size} fine logits for {taxonomy.n_fine} fine classes")
    group = np.array(sorted(taxonomy.siblings_of(true_fine)))
    pos = int(np.searchsorted(group, true_fine))
    value, g_group = ce_loss(o_f[group], pos)
    grad = np.zeros_like(o_f)
    grad[group] = g_group
    return value, grad


def total_loss(trace, coarse_label: int, fine_label: int, taxonomy: Taxonomy,
               config: LossConfig = LossConfig()) -> tuple[LossBreakdown, SeedGradients]:
    if taxonomy.group_of(fine_label) != coarse_label:
        raise ValueError(f"fine label {fine_label} is not a child of coarse label {coarse_label}")
    out = LossBreakdown()
    seeds = SeedGradients(
        np.zeros_like(trace.o_c), np.zeros_like(trace.o_f),
        np.zeros_like(trace.f_c), np.zeros_like(trace.f_f),
    )

    out.ce_coarse, g = ce_loss(trace.o_c, coarse_label)
    seeds.d_o_c += config.ce_coarse_weight * g
    out.ce_fine, g = ce_loss(trace.o_f, fine_label)
    seeds.d_o_f += config.ce_fine_weight * g
    total = config.ce_coarse_weight * out.ce_coarse + config.ce_fine_weight * out.ce_fine

    if config.enable_con:
        out.con, g_c, g_f = con_loss(trace.f_c, trace.f_f, trace.o_c, trace.o_f)
        seeds.d_f_c += config.con_weight * g_c
        seeds.d_f_f += config.con_weight * g_f
        total += config.con_weight * out.con
    if config.enable_int:
        out.int, g = int_loss(trace.f_f, fine_label, taxonomy, config.alpha)
        seeds.d_f_f += config.int_weight * g
        total += config.int_weight * out.int
    if config.enable_gce:
        out.gce, g = gce_loss(trace.o_f, fine_label, taxonomy)
        seeds.d_o_f += config.gce_weight * g
        total += config.gce_weight * out.gce
    out.total = float(total)
    return out, seeds
