"""scikit-learn style front end for the MLP trainer."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_is_fitted, validate_data

from . import ndgrad
from .autodecay import AutoDecayConfig
from .trainer import Auto, Constant, Step, TrainConfig, fit_arrays

__all__ = ["DecayMLPClassifier"]


class DecayMLPClassifier(ClassifierMixin, BaseEstimator):
    """ReLU MLP trained by plain (S)GD under a constant, step or AutoDecay schedule.

    Parameters
    ----------
    hidden_dims : tuple of int
    schedule : {"constant", "step", "auto"}
    lr : float
        Initial learning rate.
    milestones : tuple of int
        Epochs at which a step schedule divides the rate by ``factor``.
    factor : float
    auto_config : AutoDecayConfig or None
        Controller settings for ``schedule="auto"``; defaults when None.
    epochs, batch_size, optimizer, seed :
        Passed to :class:`~lrdecay.trainer.TrainConfig`. ``seed`` also seeds
        the weight initialisation.

    Attributes
    ----------
    classes_ : ndarray
    model_ : MlpConfig
    params_ : ndarray
        Flat parameter vector after training.
    result_ : RunResult
    """

    def __init__(
        self,
        hidden_dims=(64, 64),
        schedule="step",
        lr=0.1,
        milestones=(),
        factor=10.0,
        auto_config=None,
        epochs=100,
        batch_size=128,
        optimizer="sgd",
        seed=0,
    ):
        self.hidden_dims = hidden_dims
        self.schedule = schedule
        self.lr = lr
        self.milestones = milestones
        self.factor = factor
        self.auto_config = auto_config
        self.epochs = epochs
        self.batch_size = batch_size
        self.optimizer = optimizer
        self.seed = seed

    def _make_schedule(self):
        if self.schedule == "constant":
            return Constant(self.lr)
        if self.schedule == "step":
            return Step(self.lr, tuple(self.milestones), self.factor)
        if self.schedule == "auto":
            return Auto(self.auto_config or AutoDecayConfig(), self.lr)
        raise ValueError(f"schedule must be 'constant', 'step' or 'auto', got {self.schedule!r}")

    def fit(self, X, y):
        X, y = validate_data(self, X, y, dtype=np.float64)
        check_classification_targets(y)
        self.classes_, encoded = np.unique(y, return_inverse=True)
        if self.classes_.size < 2:
            raise ValueError("need at least two classes to fit")
        self.model_ = ndgrad.MlpConfig(
            input_dim=X.shape[1],
            hidden_dims=tuple(self.hidden_dims),
            num_classes=int(self.classes_.size),
            init_seed=self.seed,
        )
        cfg = TrainConfig(
            self._make_schedule(),
            epochs=self.epochs,
            optimizer=self.optimizer,
            batch_size=self.batch_size,
            seed=self.seed,
        )
        self.result_ = fit_arrays(self.model_, X, encoded, cfg)
        self.params_ = self.result_.final_params
        return self

    def _logits(self, X):
        check_is_fitted(self, "params_")
        X = validate_data(self, X, dtype=np.float64, reset=False)
        with np.errstate(all="ignore"):
            return ndgrad.forward(self.model_, self.params_, X)

    def decision_function(self, X):
        return self._logits(X)

    def predict_proba(self, X):
        z = self._logits(X)
        z = z - z.max(axis=1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X):
        z = np.nan_to_num(self._logits(X), nan=-np.inf)
        return self.classes_[np.argmax(z, axis=1)]

    def transform(self, X):
        """Penultimate-layer activations (the features a transfer head sees)."""
        check_is_fitted(self, "params_")
        X = validate_data(self, X, dtype=np.float64, reset=False)
        return ndgrad.hidden_features(self.model_, self.params_, X)
