"""Batch-size-1 training loop with Adam and cosine-annealed learning rate."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numba
import numpy as np

from .evaluation import evaluate
from .losses import LossConfig, total_loss
from .model import ModelConfig, backward, encode_checkpoint, forward, init_params
from .taxonomy import Taxonomy

log = logging.getLogger(__name__)

CHECKPOINT_POLICIES = ("best_val_fine_f1", "last", "every_k")
SCHEDULES = ("step", "epoch")

LOG_COLUMNS = (
    "epoch", "mean_ce_coarse", "mean_ce_fine", "mean_con", "mean_int", "mean_gce",
    "mean_total", "lr_last", "val_acc_coarse", "val_f1_coarse", "val_acc_fine",
    "val_f1_fine", "val_consistency",
)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    lr_initial: float = 1e-4
    lr_final: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    shuffle_each_epoch: bool = True
    checkpoint_policy: str = "best_val_fine_f1"
    checkpoint_every: int = 1
    schedule: str = "step"

    def __post_init__(self):
        if not isinstance(self.epochs, int) or self.epochs < 1:
            raise ValueError("epochs must be a positive integer")
        if not 0 < self.lr_final <= self.lr_initial:
            raise ValueError("need 0 < lr_final <= lr_initial")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ValueError("invalid Adam hyperparameters")
        if self.checkpoint_policy not in CHECKPOINT_POLICIES:
            raise ValueError(f"checkpoint_policy must be one of {CHECKPOINT_POLICIES}")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be >= 1")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}")

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**data)


def cosine_lr(step: int, total_steps: int, lr_initial: float, lr_final: float) -> float:
    if total_steps < 1 or not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr_final + 0.5 * (lr_initial - lr_final) * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "OptimizerState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


@numba.njit(cache=True)
def _all_finite(g):
    for i in range(g.size):
        if not np.isfinite(g[i]):
            return False
    return True


@numba.njit(cache=True)
def _adam_kernel(p, g, m, v, beta1, beta2, c1, c2, lr, eps):
    # one fused pass; parameter blocks run to millions of entries
    for i in range(p.size):
        gi = g[i]
        mi = beta1 * m[i] + (1.0 - beta1) * gi
        vi = beta2 * v[i] + (1.0 - beta2) * gi * gi
        m[i] = mi
        v[i] = vi
        p[i] -= lr * (mi / c1) / (np.sqrt(vi / c2) + eps)


def adam_step(params, grads, state: OptimizerState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """Bias-corrected Adam update, applied in place; returns ``(params, state)``.

    theta -= lr * m_hat / (sqrt(v_hat) + eps). Raises FloatingPointError
    naming the first non-finite gradient before anything is modified.
    """
    if not lr > 0:
        raise ValueError("learning rate must be positive")
    flat_grads = {}
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {params[name].shape}")
        g = np.ascontiguousarray(g, dtype=np.float64).reshape(-1)
        if not _all_finite(g):
            raise FloatingPointError(f"non-finite gradient for parameter {name}")
        flat_grads[name] = g
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    for name, g in flat_grads.items():
        p, m, v = params[name], state.m[name], state.v[name]
        if not (p.flags.c_contiguous and m.flags.c_contiguous and v.flags.c_contiguous):
            raise ValueError(f"{name}: parameter and moment arrays must be C-contiguous")
        _adam_kernel(p.reshape(-1), g, m.reshape(-1), v.reshape(-1),
                     beta1, beta2, c1, c2, float(lr), eps)
    return params, state


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    config: ModelConfig
    log_rows: list[dict] = field(default_factory=list)
    n_steps: int = 0
    selected_epoch: int = 0
    checkpoints: dict[int, bytes] = field(default_factory=dict)

    @property
    def checkpoint_bytes(self) -> bytes:
        return encode_checkpoint(self.params, self.config)

    def log_csv(self) -> str:
        return format_log(self.log_rows)


def _fmt(value) -> str:
    if isinstance(value, int):
        return str(value)
    return repr(float(value))


def format_log(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(LOG_COLUMNS)
    for row in rows:
        writer.writerow([_fmt(row[c]) for c in LOG_COLUMNS])
    return buf.getvalue()


def train(train_bags, val_bags, taxonomy: Taxonomy, model_config: ModelConfig,
          loss_config: LossConfig = LossConfig(), train_config: TrainConfig = TrainConfig(),
          out_dir=None) -> TrainResult:
    """Train from scratch; deterministic given the configs and the bag contents.

    With ``out_dir`` set, writes ``checkpoint.hckp`` (the policy-selected
    parameters), ``train_log.csv`` and, for ``every_k``, per-epoch
    ``checkpoint_epochNNN.hckp`` files.
    """
    train_bags = list(train_bags)
    val_bags = list(val_bags)
    if not train_bags:
        raise ValueError("training split is empty")
    if (model_config.n_coarse, model_config.n_fine) != (taxonomy.n_coarse, taxonomy.n_fine):
        raise ValueError("model class counts do not match the taxonomy")
    for bag in (*train_bags, *val_bags):
        bag.check_labels(taxonomy)
        if bag.features.shape[1] != model_config.dim:
            raise ValueError(f"bag {bag.slide_id} has D={bag.features.shape[1]}, config has {model_config.dim}")

    tc = train_config
    params = init_params(model_config, tc.seed)
    state = OptimizerState.zeros_like(params)
    n = len(train_bags)
    total_steps = tc.epochs * n
    features = [np.asarray(b.features, dtype=np.float64) for b in train_bags]

    result = TrainResult(params, model_config)
    best_f1, best_params = -math.inf, None
    for epoch in range(tc.epochs):
        if tc.shuffle_each_epoch:
            order = np.random.default_rng([tc.seed, epoch]).permutation(n)
        else:
            order = np.arange(n)
        sums = dict.fromkeys(("ce_coarse", "ce_fine", "con", "int", "gce", "total"), 0.0)
        lr = tc.lr_initial
        for idx in order:
            bag = train_bags[idx]
            if tc.schedule == "step":
                lr = cosine_lr(result.n_steps, max(total_steps - 1, 1), tc.lr_initial, tc.lr_final)
            else:
                lr = cosine_lr(epoch, max(tc.epochs - 1, 1), tc.lr_initial, tc.lr_final)
            trace = forward(features[idx], params, model_config)
            breakdown, seeds = total_loss(trace, bag.coarse_label, bag.fine_label, taxonomy, loss_config)
            if not math.isfinite(breakdown.total):
                raise FloatingPointError(f"non-finite loss on bag {bag.slide_id}")
            grads = backward(trace, params, model_config, seeds.d_o_c, seeds.d_o_f, seeds.d_f_c, seeds.d_f_f)
            adam_step(params, grads, state, lr, tc.beta1, tc.beta2, tc.eps)
            result.n_steps += 1
            for key in sums:
                sums[key] += getattr(breakdown, key)

        if val_bags:
            report = evaluate(params, model_config, val_bags, taxonomy)
            val = (report.acc_coarse, report.f1_macro_coarse, report.acc_fine,
                   report.f1_macro_fine, report.consistency_rate)
        else:
            val = (math.nan,) * 5
        row = {"epoch": epoch + 1, "lr_last": lr}
        row.update({f"mean_{k}": v / n for k, v in sums.items()})
        row.update(zip(("val_acc_coarse", "val_f1_coarse", "val_acc_fine", "val_f1_fine", "val_consistency"), val))
        result.log_rows.append(row)
        log.info("epoch %d: loss %.4f, val fine F1 %.4f", epoch + 1, row["mean_total"], row["val_f1_fine"])

        if tc.checkpoint_policy == "best_val_fine_f1" and val_bags and row["val_f1_fine"] > best_f1:
            best_f1 = row["val_f1_fine"]
            best_params = {k: p.copy() for k, p in params.items()}
            result.selected_epoch = epoch + 1
        if tc.checkpoint_policy == "every_k" and ((epoch + 1) % tc.checkpoint_every == 0):
            result.checkpoints[epoch + 1] = encode_checkpoint(params, model_config)

    if best_params is not None:
        result.params = best_params
    else:
        result.selected_epoch = tc.epochs

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "checkpoint.hckp").write_bytes(result.checkpoint_bytes)
        (out / "train_log.csv").write_text(result.log_csv(), encoding="utf-8")
        for epoch, blob in result.checkpoints.items():
            (out / f"checkpoint_epoch{epoch:03d}.hckp").write_bytes(blob)
    return result
