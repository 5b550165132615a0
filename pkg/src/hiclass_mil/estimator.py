"""scikit-learn style wrapper around the hierarchical MIL model."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils import check_random_state
from sklearn.utils.validation import check_is_fitted

from .datagen import Bag
from .losses import LossConfig
from .model import ModelConfig, forward
from .numerics import softmax
from .taxonomy import Taxonomy, gastric
from .taxonomy import load as load_taxonomy
from .trainer import TrainConfig, train
from .validation import check_bags, check_fine_labels


class HiClassMIL(ClassifierMixin, BaseEstimator):
    """Hierarchical attention-MIL classifier over bags of patch features.

    ``fit`` takes a sequence of bags (each an ``N_p x D`` array) and fine
    labels; coarse labels follow from the taxonomy. ``predict`` returns fine
    class indices, ``predict_coarse`` coarse indices and ``transform`` the
    pooled slide embeddings.

    Parameters
    ----------
    taxonomy : Taxonomy, path or None
        Class hierarchy; ``None`` uses the bundled 4/14 gastric hierarchy.
    hidden_dim, proj_dim, attention_dim : int
        Slide embedding width (split in half between the coarse and fine
        branches), per-class projection width and attention hidden width.
    integration : {"bidirectional", "fine_to_coarse", "coarse_to_fine", "none"}
    aggregator : {"attention", "max", "mean"}
    enable_con, enable_int, enable_gce : bool
        Toggle the consistency, distance and group-wise CE terms.
    alpha : float
        Margin of the inter-group hinge.
    epochs, lr_initial, lr_final : training schedule (Adam, cosine decay).
    checkpoint_policy : {"best_val_fine_f1", "last"}
        ``best_val_fine_f1`` needs ``X_val``/``y_val`` in ``fit``.
    random_state : int or RandomState
    """

    def __init__(self, taxonomy=None, hidden_dim=512, proj_dim=256, attention_dim=256,
                 integration="bidirectional", aggregator="attention",
                 enable_con=True, enable_int=True, enable_gce=True, alpha=1.0,
                 epochs=20, lr_initial=1e-4, lr_final=1e-5, shuffle=True,
                 checkpoint_policy="last", random_state=0):
        self.taxonomy = taxonomy
        self.hidden_dim = hidden_dim
        self.proj_dim = proj_dim
        self.attention_dim = attention_dim
        self.integration = integration
        self.aggregator = aggregator
        self.enable_con = enable_con
        self.enable_int = enable_int
        self.enable_gce = enable_gce
        self.alpha = alpha
        self.epochs = epochs
        self.lr_initial = lr_initial
        self.lr_final = lr_final
        self.shuffle = shuffle
        self.checkpoint_policy = checkpoint_policy
        self.random_state = random_state

    def _resolve_taxonomy(self) -> Taxonomy:
        if self.taxonomy is None:
            return gastric()
        if isinstance(self.taxonomy, Taxonomy):
            return self.taxonomy
        if isinstance(self.taxonomy, (str, Path)):
            return load_taxonomy(self.taxonomy)
        raise TypeError("taxonomy must be a Taxonomy, a path or None")

    def _seed(self) -> int:
        if isinstance(self.random_state, (int, np.integer)):
            return int(self.random_state)
        return int(check_random_state(self.random_state).randint(0, 2**31 - 1))

    def _to_bags(self, X, y, prefix):
        fine = check_fine_labels(y, self.taxonomy_, len(X))
        return [
            Bag(f"{prefix}{i}", x, self.taxonomy_.group_of(int(f)), int(f))
            for i, (x, f) in enumerate(zip(X, fine))
        ]

    def fit(self, X, y, X_val=None, y_val=None):
        self.taxonomy_ = self._resolve_taxonomy()
        X = check_bags(X)
        self.n_features_in_ = X[0].shape[1]
        train_bags = self._to_bags(X, y, "train")
        val_bags = []
        if X_val is not None:
            val_bags = self._to_bags(check_bags(X_val, self.n_features_in_), y_val, "val")
        if self.checkpoint_policy == "best_val_fine_f1" and not val_bags:
            raise ValueError("checkpoint_policy='best_val_fine_f1' needs validation bags")

        self.config_ = ModelConfig(
            dim=self.n_features_in_, n_coarse=self.taxonomy_.n_coarse, n_fine=self.taxonomy_.n_fine,
            hidden=self.hidden_dim, split=self.hidden_dim // 2, proj=self.proj_dim,
            attn=self.attention_dim, integration=self.integration, aggregator=self.aggregator,
        )
        loss_config = LossConfig(enable_con=self.enable_con, enable_int=self.enable_int,
                                 enable_gce=self.enable_gce, alpha=self.alpha)
        train_config = TrainConfig(epochs=self.epochs, lr_initial=self.lr_initial,
                                   lr_final=self.lr_final, seed=self._seed(),
                                   shuffle_each_epoch=self.shuffle,
                                   checkpoint_policy=self.checkpoint_policy)
        result = train(train_bags, val_bags, self.taxonomy_, self.config_, loss_config, train_config)
        self.params_ = result.params
        self.train_log_ = result.log_rows
        self.classes_ = np.arange(self.taxonomy_.n_fine)
        self.coarse_classes_ = np.arange(self.taxonomy_.n_coarse)
        return self

    def _traces(self, X):
        check_is_fitted(self, "params_")
        return [forward(x, self.params_, self.config_) for x in check_bags(X, self.n_features_in_)]

    def decision_function(self, X) -> np.ndarray:
        """Fine-level logits, shape (n_bags, n_fine)."""
        return np.stack([t.o_f for t in self._traces(X)])

    def coarse_decision_function(self, X) -> np.ndarray:
        return np.stack([t.o_c for t in self._traces(X)])

    def predict_proba(self, X) -> np.ndarray:
        return np.stack([softmax(row) for row in self.decision_function(X)])

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.decision_function(X), axis=1)

    def predict_coarse(self, X) -> np.ndarray:
        return np.argmax(self.coarse_decision_function(X), axis=1)

    def predict_hierarchical(self, X) -> np.ndarray:
        """(coarse, fine) index pairs, shape (n_bags, 2)."""
        traces = self._traces(X)
        return np.array([[np.argmax(t.o_c), np.argmax(t.o_f)] for t in traces], dtype=np.int64)

    def transform(self, X) -> np.ndarray:
        """Pooled slide embeddings, shape (n_bags, hidden_dim)."""
        return np.stack([t.slide for t in self._traces(X)])
