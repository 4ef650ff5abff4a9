"""scikit-learn style wrapper around the 3-D CNN."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted

from ..core import CLASSES
from ..errors import ValidationError
from .network import DEFAULT_ARCHITECTURE
from .training import TrainConfig, train


class Conv3dNetClassifier(ClassifierMixin, BaseEstimator):
    """Patch classifier.  ``X`` has shape (n, 31, 31, 41); ``y`` holds tissue codes 1..5.

    ``fit`` holds out ``X_val``/``y_val`` for checkpoint selection and the
    plateau schedule; without them the training data doubles as validation.
    """

    def __init__(self, learning_rate=1.2e-4, batch_size=64, max_epochs=30, plateau_factor=0.5,
                 plateau_patience=5, min_lr=1e-6, seed=0, architecture=DEFAULT_ARCHITECTURE):
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.plateau_factor = plateau_factor
        self.plateau_patience = plateau_patience
        self.min_lr = min_lr
        self.seed = seed
        self.architecture = architecture

    def _config(self):
        return TrainConfig(learning_rate=self.learning_rate, batch_size=self.batch_size,
                           max_epochs=self.max_epochs, plateau_factor=self.plateau_factor,
                           plateau_patience=self.plateau_patience, min_lr=self.min_lr,
                           seed=self.seed)

    def _check_x(self, X):
        X = check_array(X, allow_nd=True, dtype=np.float32, ensure_all_finite=True)
        if X.shape[1:] != tuple(self.architecture.input_shape):
            raise ValidationError(f"patches must have shape {self.architecture.input_shape}, "
                                  f"got {X.shape[1:]}")
        return X

    @staticmethod
    def _check_y(y, n):
        y = np.asarray(y, dtype=np.int64).reshape(-1)
        if len(y) != n:
            raise ValidationError(f"{n} patches but {len(y)} labels")
        return y

    def fit(self, X, y, X_val=None, y_val=None):
        X = self._check_x(X)
        y = self._check_y(y, len(X))
        if X_val is None:
            X_val, y_val = X, y
        else:
            X_val = self._check_x(X_val)
            y_val = self._check_y(y_val, len(X_val))
        self.network_, self.report_ = train(X, y, X_val, y_val, self._config(), self.architecture)
        self.classes_ = np.array([int(c) for c in CLASSES])
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "network_")
        return self.network_.predict_proba(self._check_x(X), self.batch_size)

    def predict(self, X):
        check_is_fitted(self, "network_")
        return self.classes_[self.predict_proba(X).argmax(axis=1)]
