"""Gaussian-process regression for the unknown residual dynamics.

One independent squared-exponential GP per output dimension, fixed
hyperparameters, FIFO-bounded dataset, Cholesky solves with jitter on
factorization failure.
"""

from __future__ import annotations

import logging

import numpy as np

log = logging.getLogger(__name__)

_JITTER = 1e-9


class GpResidualModel:
    """Posterior mean/variance of a vector-valued residual d(x)."""

    def __init__(self, input_dim, output_dim, signal_var=1.0, length_scale=1.0,
                 noise_var=1e-4, capacity=200):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.input_dim = int(input_dim)
        self.output_dim = int(output_dim)
        self.signal_var = float(signal_var)
        self.length_scales = np.broadcast_to(
            np.asarray(length_scale, dtype=np.float64), (input_dim,)).copy()
        self.noise_var = float(noise_var)
        self.capacity = int(capacity)
        self.X = np.zeros((0, input_dim))
        self.Y = np.zeros((0, output_dim))
        self.frozen = False
        self._chol = None
        self._alpha = None

    def __len__(self):
        return self.X.shape[0]

    def freeze(self):
        self.frozen = True

    def _kernel(self, A, B):
        d = (A[:, None, :] - B[None, :, :]) / self.length_scales
        return self.signal_var * np.exp(-0.5 * np.sum(d * d, axis=2))

    def _refactor(self):
        n = len(self)
        if n == 0:
            self._chol = None
            self._alpha = None
            return
        K = self._kernel(self.X, self.X) + self.noise_var * np.eye(n)
        try:
            self._chol = np.linalg.cholesky(K)
        except np.linalg.LinAlgError:
            self._chol = np.linalg.cholesky(K + _JITTER * np.eye(n))
        self._alpha = np.linalg.solve(
            self._chol.T, np.linalg.solve(self._chol, self.Y))

    def fit(self, X_new, Y_new):
        """Append observations, evicting oldest points past capacity.

        Silently ignored (with a log line) once the model is frozen,
        mirroring the cessation of updates late in training.
        """
        if self.frozen:
            log.debug("residual model frozen; ignoring %d new points",
                      np.atleast_2d(X_new).shape[0])
            return
        X_new = np.atleast_2d(np.asarray(X_new, dtype=np.float64))
        Y_new = np.atleast_2d(np.asarray(Y_new, dtype=np.float64))
        if X_new.shape[1] != self.input_dim or Y_new.shape[1] != self.output_dim:
            raise ValueError("observation dimensions do not match model")
        if X_new.shape[0] != Y_new.shape[0]:
            raise ValueError("input/target count mismatch")
        self.X = np.concatenate([self.X, X_new])[-self.capacity:]
        self.Y = np.concatenate([self.Y, Y_new])[-self.capacity:]
        self._refactor()

    def predict(self, x):
        mean, var = self.predict_batch(np.asarray(x, dtype=np.float64)[None, :])
        return mean[0], var[0]

    def predict_batch(self, X_query):
        """Posterior mean (B, out) and per-dimension variance (B, out)."""
        X_query = np.asarray(X_query, dtype=np.float64)
        if not np.all(np.isfinite(X_query)):
            raise ValueError("non-finite query point")
        B = X_query.shape[0]
        if len(self) == 0:
            return (np.zeros((B, self.output_dim)),
                    np.full((B, self.output_dim), self.signal_var))
        k_star = self._kernel(X_query, self.X)  # (B, n)
        mean = k_star @ self._alpha
        v = np.linalg.solve(self._chol, k_star.T)  # (n, B)
        var_scalar = self.signal_var - np.sum(v * v, axis=0)
        var_scalar = np.maximum(var_scalar, 0.0)
        var = np.repeat(var_scalar[:, None], self.output_dim, axis=1)
        return mean, var


class ResidualEstimator:
    """Maps a GP over selected state dimensions to full-state residuals.

    ``dims`` are the state indices whose residual is modeled; predictions
    for all other dimensions are zero (mean and variance alike).
    """

    def __init__(self, state_dim, dims, **gp_kwargs):
        self.state_dim = int(state_dim)
        self.dims = tuple(dims)
        self.gp = GpResidualModel(input_dim=state_dim,
                                  output_dim=len(self.dims), **gp_kwargs)

    def observe(self, x, nominal_next, x_next):
        """Record one residual sample x' - (f(x) + g(x) u)."""
        residual = np.asarray(x_next) - np.asarray(nominal_next)
        self.gp.fit(np.asarray(x)[None, :], residual[list(self.dims)][None, :])

    def freeze(self):
        self.gp.freeze()

    @property
    def frozen(self):
        return self.gp.frozen

    @property
    def n_observations(self):
        return len(self.gp)

    def mean(self, x):
        return self.mean_std(x)[0]

    def mean_std(self, x):
        m, v = self.gp.predict(x)
        mean = np.zeros(self.state_dim)
        std = np.zeros(self.state_dim)
        mean[list(self.dims)] = m
        std[list(self.dims)] = np.sqrt(v)
        return mean, std

    def mean_batch(self, X):
        m, _ = self.gp.predict_batch(X)
        out = np.zeros((X.shape[0], self.state_dim))
        out[:, list(self.dims)] = m
        return out
