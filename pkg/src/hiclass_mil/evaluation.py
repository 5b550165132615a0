"""Accuracy, macro-F1, confusion matrices and hierarchical consistency."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .model import ModelConfig, forward
from .taxonomy import Taxonomy


def predict(trace, taxonomy: Taxonomy | None = None, restricted: bool = False) -> tuple[int, int]:
    """Argmax readout of both heads (ties to the lowest index).

    With ``restricted=True`` the fine prediction is the argmax among the
    children of the predicted coarse class. Analysis only; the default fine
    decoding is unrestricted.
    """
    coarse = int(np.argmax(trace.o_c))
    if not restricted:
        return coarse, int(np.argmax(trace.o_f))
    if taxonomy is None:
        raise ValueError("restricted decoding needs a taxonomy")
    children = np.array(taxonomy.children_of(coarse))
    return coarse, int(children[np.argmax(trace.o_f[children])])


def confusion_matrix(y_true: Sequence[int], y_pred: Sequence[int], n_classes: int) -> np.ndarray:
    """Rows are true classes, columns predictions."""
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true, dtype=np.int64), np.asarray(y_pred, dtype=np.int64)), 1)
    return cm


def per_class_prf(confusion) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    cm = np.asarray(confusion, dtype=np.float64)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ValueError(f"confusion matrix must be square, got shape {cm.shape}")
    tp = np.diag(cm)
    predicted = cm.sum(axis=0)
    actual = cm.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(predicted > 0, tp / predicted, 0.0)
        recall = np.where(actual > 0, tp / actual, 0.0)
        denom = precision + recall
        f1 = np.where(denom > 0, 2 * precision * recall / denom, 0.0)
    return precision, recall, f1


def macro_f1(confusion) -> float:
    """Unweighted mean of per-class F1; a class with P + R = 0 scores 0."""
    return float(np.mean(per_class_prf(confusion)[2]))


def consistency_rate(coarse_pred: Sequence[int], fine_pred: Sequence[int], taxonomy: Taxonomy) -> float:
    """Fraction of samples whose fine prediction lies inside the predicted coarse group."""
    coarse_pred = list(coarse_pred)
    fine_pred = list(fine_pred)
    if len(coarse_pred) != len(fine_pred):
        raise ValueError("prediction lists differ in length")
    if not coarse_pred:
        return float("nan")
    hits = sum(taxonomy.group_of(f) == c for c, f in zip(coarse_pred, fine_pred))
    return hits / len(coarse_pred)


@dataclass
class EvalReport:
    n_samples: int
    acc_coarse: float
    f1_macro_coarse: float
    acc_fine: float
    f1_macro_fine: float
    consistency_rate: float
    confusion_coarse: np.ndarray
    confusion_fine: np.ndarray
    precision_coarse: list[float]
    recall_coarse: list[float]
    f1_coarse: list[float]
    precision_fine: list[float]
    recall_fine: list[float]
    f1_fine: list[float]

    def to_dict(self) -> dict:
        out = asdict(self)
        out["confusion_coarse"] = self.confusion_coarse.tolist()
        out["confusion_fine"] = self.confusion_fine.tolist()
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


def confusion_csv(confusion: np.ndarray, names: Sequence[str]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["true\\pred", *names])
    for name, row in zip(names, confusion):
        writer.writerow([name, *(int(v) for v in row)])
    return buf.getvalue()


def report_from_predictions(coarse_true, fine_true, coarse_pred, fine_pred, taxonomy: Taxonomy) -> EvalReport:
    n = len(coarse_true)
    cm_c = confusion_matrix(coarse_true, coarse_pred, taxonomy.n_coarse)
    cm_f = confusion_matrix(fine_true, fine_pred, taxonomy.n_fine)
    p_c, r_c, f_c = per_class_prf(cm_c)
    p_f, r_f, f_f = per_class_prf(cm_f)
    nan = float("nan")
    return EvalReport(
        n_samples=n,
        acc_coarse=float(np.trace(cm_c) / n) if n else nan,
        f1_macro_coarse=float(f_c.mean()),
        acc_fine=float(np.trace(cm_f) / n) if n else nan,
        f1_macro_fine=float(f_f.mean()),
        consistency_rate=consistency_rate(coarse_pred, fine_pred, taxonomy),
        confusion_coarse=cm_c,
        confusion_fine=cm_f,
        precision_coarse=p_c.tolist(), recall_coarse=r_c.tolist(), f1_coarse=f_c.tolist(),
        precision_fine=p_f.tolist(), recall_fine=r_f.tolist(), f1_fine=f_f.tolist(),
    )


def evaluate(params, config: ModelConfig, bags, taxonomy: Taxonomy, restricted: bool = False) -> EvalReport:
    if (config.n_coarse, config.n_fine) != (taxonomy.n_coarse, taxonomy.n_fine):
        raise ValueError(
            f"model has {config.n_coarse}/{config.n_fine} classes, taxonomy "
            f"{taxonomy.n_coarse}/{taxonomy.n_fine}"
        )
    coarse_true, fine_true, coarse_pred, fine_pred = [], [], [], []
    for bag in bags:
        if bag.features.shape[1] != config.dim:
            raise ValueError(f"bag {bag.slide_id} has D={bag.features.shape[1]}, model expects {config.dim}")
        c, f = predict(forward(bag.features, params, config), taxonomy, restricted)
        coarse_true.append(bag.coarse_label)
        fine_true.append(bag.fine_label)
        coarse_pred.append(c)
        fine_pred.append(f)
    return report_from_predictions(coarse_true, fine_true, coarse_pred, fine_pred, taxonomy)
