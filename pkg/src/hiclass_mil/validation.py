"""Input checks for bag collections and hierarchical labels."""

from __future__ import annotations

import numpy as np
from sklearn.utils import check_array, column_or_1d

from .taxonomy import Taxonomy


def check_bags(X, n_features: int | None = None) -> list[np.ndarray]:
    """Validate a sequence of bags (each N_p x D) and return float64 copies.

    A single 2-D array is ambiguous (one bag or many single-patch bags) and
    is rejected.
    """
    if isinstance(X, np.ndarray) and X.ndim == 2:
        raise ValueError("expected a sequence of 2-D bags, got one 2-D array; wrap it in a list")
    if isinstance(X, np.ndarray) and X.ndim == 3:
        X = list(X)
    try:
        bags = list(X)
    except TypeError as exc:
        raise TypeError("X must be a sequence of bags") from exc
    if not bags:
        raise ValueError("X contains no bags")
    out = []
    for i, bag in enumerate(bags):
        arr = check_array(bag, dtype=np.float64, ensure_2d=True, input_name=f"bag {i}")
        if n_features is not None and arr.shape[1] != n_features:
            raise ValueError(f"bag {i} has {arr.shape[1]} features, expected {n_features}")
        out.append(arr)
    dims = {a.shape[1] for a in out}
    if len(dims) != 1:
        raise ValueError(f"bags disagree on feature dimension: {sorted(dims)}")
    return out


def check_fine_labels(y, taxonomy: Taxonomy, n_samples: int) -> np.ndarray:
    """Fine labels as int indices; class names from the taxonomy are also accepted."""
    y = column_or_1d(np.asarray(y, dtype=object), warn=True)
    if y.shape[0] != n_samples:
        raise ValueError(f"{y.shape[0]} labels for {n_samples} bags")
    out = np.empty(n_samples, dtype=np.int64)
    for i, label in enumerate(y):
        if isinstance(label, str):
            try:
                out[i] = taxonomy.fine_index(label)
            except ValueError:
                raise ValueError(f"unknown fine class name {label!r}") from None
        else:
            if int(label) != label:
                raise ValueError(f"label {label!r} is not an integer class index")
            out[i] = int(label)
            if not 0 <= out[i] < taxonomy.n_fine:
                raise ValueError(f"fine label {out[i]} out of range [0, {taxonomy.n_fine})")
    return out
