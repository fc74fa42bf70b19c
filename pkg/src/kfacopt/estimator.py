"""Scikit-learn style estimators wrapping the training loop.

`KFACClassifier` and `KFACRegressor` expose the optimizers through the usual
fit/predict surface so they compose with model selection and pipelines.
Samples follow the sklearn convention (rows are samples); internally the
network works on column batches.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit, softmax
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .data import Dataset
from .network import Architecture, forward, init_params
from .optim import OptimizerConfig, seed_streams, train


class _KFACBase(BaseEstimator):
    def __init__(self, hidden_layer_sizes=(10,), activation="identity",
                 batchnorm=False, optimizer="kfac2", learning_rate=1e-3,
                 momentum=0.9, weight_decay=1e-3, damping=1e-2, kl_clip=1e-3,
                 damping_mode="eig", cov_update_interval=10,
                 precond_update_interval=100, epochs=20, batch_size=128,
                 lr_schedule=(), random_state=None):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.activation = activation
        self.batchnorm = batchnorm
        self.optimizer = optimizer
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.damping = damping
        self.kl_clip = kl_clip
        self.damping_mode = damping_mode
        self.cov_update_interval = cov_update_interval
        self.precond_update_interval = precond_update_interval
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr_schedule = lr_schedule
        self.random_state = random_state

    def _optimizer_config(self) -> OptimizerConfig:
        return OptimizerConfig(
            kind=self.optimizer,
            lr=self.learning_rate,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            damping=self.damping,
            kl_clip=self.kl_clip,
            damping_mode=self.damping_mode,
            cov_update_interval=self.cov_update_interval,
            precond_update_interval=self.precond_update_interval,
            lr_schedule=tuple(self.lr_schedule),
        )

    def _fit_network(self, arch: Architecture, x_cols: np.ndarray, y) -> None:
        seed = 0 if self.random_state is None else int(self.random_state)
        init_rng, batch_rng, label_rng = seed_streams(seed)
        self.arch_ = arch
        self.params_ = init_params(arch, init_rng)
        dataset = Dataset(x_cols, y)
        self.history_ = train(
            arch, self.params_, self._optimizer_config(), dataset, None,
            epochs=self.epochs, batch_size=self.batch_size,
            batch_rng=batch_rng, label_rng=label_rng)

    def _decision(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(
                f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        out, _ = forward(self.arch_, self.params_, X.T, training=False)
        return out


class KFACClassifier(ClassifierMixin, _KFACBase):
    """MLP classifier trained with SGD, Adam, or one-/two-level K-FAC.

    Binary problems use a single logit with a Bernoulli likelihood,
    multiclass problems a softmax cross-entropy head.
    """

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_, encoded = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        self.n_features_in_ = X.shape[1]
        binary = len(self.classes_) == 2
        arch = Architecture.mlp(
            d_in=self.n_features_in_,
            hidden=list(self.hidden_layer_sizes),
            d_out=1 if binary else len(self.classes_),
            activation=self.activation,
            batchnorm=self.batchnorm,
            loss_kind="bernoulli_logit" if binary else "softmax_ce",
        )
        self._fit_network(arch, X.T, encoded.astype(np.int64))
        return self

    def decision_function(self, X):
        out = self._decision(X)
        return out[0] if len(self.classes_) == 2 else out.T

    def predict_proba(self, X):
        out = self._decision(X)
        if len(self.classes_) == 2:
            p1 = expit(out[0])
            return np.column_stack([1.0 - p1, p1])
        return softmax(out, axis=0).T

    def predict(self, X):
        out = self._decision(X)
        if len(self.classes_) == 2:
            idx = (out[0] > 0.0).astype(np.int64)
        else:
            idx = out.argmax(axis=0)
        return self.classes_[idx]


class KFACRegressor(RegressorMixin, _KFACBase):
    """MLP regressor (squared-error loss) trained with the same optimizers."""

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64, multi_output=True)
        self.n_features_in_ = X.shape[1]
        targets = np.asarray(y, dtype=np.float64)
        self._single_output_ = targets.ndim == 1
        cols = targets[None, :] if self._single_output_ else targets.T
        arch = Architecture.mlp(
            d_in=self.n_features_in_,
            hidden=list(self.hidden_layer_sizes),
            d_out=cols.shape[0],
            activation=self.activation,
            batchnorm=self.batchnorm,
            loss_kind="mse",
        )
        self._fit_network(arch, X.T, cols)
        return self

    def predict(self, X):
        out = self._decision(X)
        return out[0] if self._single_output_ else out.T
