"""scikit-learn style wrapper around the Poisson-solver network."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .bvp import BVPSpec
from .net import forward_activations, forward_value, input_derivatives
from .trainer import AdamParams, TrainConfig, train


class DGMPoissonRegressor(RegressorMixin, TransformerMixin, BaseEstimator):
    """Network solution of the Poisson problem with a Gaussian point source.

    The problem is fully described by the parameters, so ``fit`` needs no
    data: ``X`` and ``y`` are accepted for pipeline compatibility and ignored.

    Parameters
    ----------
    hidden_widths : tuple of int
        Widths of the tanh hidden layers.
    x_source, y_source, r, eta : float
        Source centre, source radius and boundary penalty weight.
    max_epochs, resample_every, eval_every, patience : int
        Training schedule; see :class:`~denn_svcca.trainer.TrainConfig`.
    learning_rate : float
        Adam step size.
    n_interior, n_per_edge : int
        Training points per resample.
    norm : {"L2", "L1"}
    layer : int
        Hidden layer (1-based) returned by ``transform``.
    random_state : int
        Run seed (64-bit).

    Attributes
    ----------
    network_ : MLP
        Best network found during training.
    record_ : TrainRecord
    """

    def __init__(
        self,
        hidden_widths=(16, 16, 16, 16),
        x_source=0.0,
        y_source=0.0,
        r=0.1,
        eta=1.0,
        max_epochs=20000,
        resample_every=100,
        eval_every=1000,
        patience=5,
        learning_rate=1e-3,
        n_interior=1000,
        n_per_edge=1000,
        norm="L2",
        layer=1,
        random_state=0,
    ):
        self.hidden_widths = hidden_widths
        self.x_source = x_source
        self.y_source = y_source
        self.r = r
        self.eta = eta
        self.max_epochs = max_epochs
        self.resample_every = resample_every
        self.eval_every = eval_every
        self.patience = patience
        self.learning_rate = learning_rate
        self.n_interior = n_interior
        self.n_per_edge = n_per_edge
        self.norm = norm
        self.layer = layer
        self.random_state = random_state

    def _problem(self) -> BVPSpec:
        return BVPSpec(x_source=self.x_source, y_source=self.y_source, r=self.r, eta=self.eta)

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            resample_every=self.resample_every,
            eval_every=self.eval_every,
            patience=self.patience,
            adam=AdamParams(lr=self.learning_rate),
            n_interior=self.n_interior,
            n_per_edge=self.n_per_edge,
            norm=self.norm,
            max_epochs=self.max_epochs,
            seed=int(self.random_state),
        )

    def fit(self, X=None, y=None):
        widths = [2, *(int(w) for w in self.hidden_widths), 1]
        self.network_, self.record_ = train(self._problem(), widths, self._train_config())
        self.n_features_in_ = 2
        return self

    def _points(self, X) -> np.ndarray:
        check_is_fitted(self, "network_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != 2:
            raise ValueError(f"expected (n, 2) points, got {X.shape[1]} columns")
        return X

    def predict(self, X) -> np.ndarray:
        """Network solution ``u`` at the points ``X`` of shape ``(n, 2)``."""
        X = self._points(X)
        return forward_value(self.network_, X)

    def laplacian(self, X) -> np.ndarray:
        X = self._points(X)
        _, _, second = input_derivatives(self.network_, X)
        return second.sum(axis=1)

    def transform(self, X) -> np.ndarray:
        """Activations of hidden layer ``layer`` at ``X``."""
        X = self._points(X)
        if not 1 <= self.layer <= self.network_.depth:
            raise ValueError(f"layer {self.layer} out of range 1..{self.network_.depth}")
        return forward_activations(self.network_, X)[self.layer - 1]
