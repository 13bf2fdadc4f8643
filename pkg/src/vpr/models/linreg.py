"""Bayesian linear regression with known noise variance."""

from __future__ import annotations

import numpy as np

from ..families import MeanFieldGaussian
from ..samples import default_names
from ._common import Batch, MeanFieldModelMixin, default_weights, rowdot, split_mf


class LinearRegressionModel(MeanFieldModelMixin):
    """``y | beta ~ N(X beta, noise_var I)`` with ``beta ~ N(0, prior_scale^2 I)``."""

    has_covariates = True

    def __init__(self, design, noise_var: float, prior_scale: float, responses=None):
        design = np.asarray(design, dtype=float)
        if design.ndim != 2 or design.shape[0] < 1 or design.shape[1] < 1:
            raise ValueError("design must be an (n, d) matrix with n, d >= 1")
        if noise_var <= 0 or prior_scale <= 0:
            raise ValueError("noise_var and prior_scale must be positive")
        self.design = design
        self.noise_var = float(noise_var)
        self.prior_scale = float(prior_scale)
        self.prior_var = self.prior_scale**2
        self.dim = design.shape[1]
        self.names = default_names(self.dim, "beta")
        self.responses = None if responses is None else self._check_responses(responses)

    def _check_responses(self, y):
        y = np.asarray(y, dtype=float)
        if y.shape != (self.design.shape[0],):
            raise ValueError(f"responses must have shape ({self.design.shape[0]},), got {y.shape}")
        return y

    def with_responses(self, y) -> "LinearRegressionModel":
        return LinearRegressionModel(self.design, self.noise_var, self.prior_scale, y)

    @property
    def n_obs(self) -> int:
        return self.design.shape[0]

    def full_batch(self) -> Batch:
        if self.responses is None:
            raise ValueError("model has no responses attached")
        return Batch(np.arange(self.n_obs), self.responses)

    def covariate_pool(self) -> int:
        return self.n_obs

    # -- densities --------------------------------------------------------

    def log_likelihood(self, theta, datum):
        x, y = datum
        resid = y - rowdot(np.asarray(x), np.asarray(theta))
        return -0.5 * (np.log(2 * np.pi * self.noise_var) + resid**2 / self.noise_var)

    def prior_log_density(self, theta):
        theta = np.asarray(theta)
        return -0.5 * np.sum(theta**2 / self.prior_var + np.log(2 * np.pi * self.prior_var), axis=-1)

    # -- ELBO -------------------------------------------------------------

    def expected_loglik(self, params, batch: Batch):
        mean, log_scale = split_mf(params, self.dim)
        x = self.design[batch.rows]
        var = np.exp(2 * log_scale)
        resid = batch.y - rowdot(x, mean[..., None, :])
        spread = rowdot(x**2, var[..., None, :])
        return -0.5 * (np.log(2 * np.pi * self.noise_var) + (resid**2 + spread) / self.noise_var)

    def elbo(self, params, batch: Batch | None = None, weights=None):
        batch = self.full_batch() if batch is None else batch
        mean, log_scale = split_mf(params, self.dim)
        w = default_weights(batch.y, weights, batch.y.ndim)
        return np.sum(w * self.expected_loglik(params, batch), axis=-1) - self._kl(mean, log_scale)

    def elbo_gradient(self, params, batch: Batch | None = None, weights=None):
        batch = self.full_batch() if batch is None else batch
        mean, log_scale = split_mf(params, self.dim)
        var = np.exp(2 * log_scale)
        x = self.design[batch.rows]
        w = default_weights(batch.y, weights, batch.y.ndim)
        resid = batch.y - rowdot(x, mean[..., None, :])
        g_mean = np.sum((w * resid)[..., None] * x, axis=-2) / self.noise_var
        g_ls = -np.sum(w[..., None] * x**2, axis=-2) * var / self.noise_var
        k_mean, k_ls = self._kl_grad(mean, log_scale)
        return np.concatenate([g_mean - k_mean, g_ls - k_ls], axis=-1)

    def stats_gradient(self, params, sxx, sxy):
        """Full-data ELBO gradient from weighted sufficient statistics.

        ``sxx`` = sum w x x^T (shape (..., d, d)), ``sxy`` = sum w x y.
        """
        mean, log_scale = split_mf(params, self.dim)
        var = np.exp(2 * log_scale)
        g_mean = (sxy - np.sum(mean[..., None, :] * sxx, axis=-1)) / self.noise_var
        g_ls = -np.diagonal(sxx, axis1=-2, axis2=-1) * var / self.noise_var
        k_mean, k_ls = self._kl_grad(mean, log_scale)
        return np.concatenate([g_mean - k_mean, g_ls - k_ls], axis=-1)

    # -- conjugate structure ---------------------------------------------

    def prior_precision(self):
        return np.eye(self.dim) / self.prior_var

    def information(self, batch: Batch):
        x = self.design[batch.rows]
        return x.T @ x / self.noise_var, x.T @ batch.y / self.noise_var

    def linear_gaussian(self, rows):
        x = self.design[rows]
        return x[..., None, :], np.full(np.shape(rows) + (1, 1), 1.0 / self.noise_var)

    def closed_form_from_information(self, info_matrix, info_vector) -> MeanFieldGaussian:
        prec = info_matrix + self.prior_precision()
        chol = np.linalg.cholesky(prec)
        mean = np.linalg.solve(chol.T, np.linalg.solve(chol, info_vector))
        return MeanFieldGaussian.from_variance(mean, 1.0 / np.diag(prec))

    def mle(self, info_matrix, info_vector):
        return np.linalg.solve(info_matrix, info_vector)

    # -- predictive -------------------------------------------------------

    def obs_noise_dim(self) -> int:
        return 1

    def theta_noise_dim(self) -> int:
        return 1

    def _linear_predictor(self, params, rows, theta_noise):
        # x^T theta under q is N(x^T m, sum_j x_j^2 s_j^2): one normal per draw
        mean, log_scale = split_mf(params, self.dim)
        x = self.design[rows]
        sd = np.sqrt(rowdot(x**2, np.exp(2 * log_scale)))
        return rowdot(x, mean) + sd * theta_noise[..., 0]

    def predictive_from_noise(self, params, rows, theta_noise, obs_noise):
        eta = self._linear_predictor(params, rows, theta_noise)
        return eta + np.sqrt(self.noise_var) * obs_noise[..., 0]

    def sample_predictive(self, state: MeanFieldGaussian, covariate, rng=None):
        """One draw of y at ``covariate`` (a design row vector)."""
        rng = np.random.default_rng() if rng is None else rng
        beta = state.mean + state.scale * rng.standard_normal(self.dim)
        x = np.asarray(covariate, dtype=float)
        return float(x @ beta + np.sqrt(self.noise_var) * rng.standard_normal())


def linreg_closed_form(model: LinearRegressionModel, responses, extra=()) -> MeanFieldGaussian:
    """ELBO-optimal MF fit on the observed responses plus imputed ``(x, y)`` pairs."""
    y = model._check_responses(responses)
    x = model.design
    if len(extra):
        ex = np.array([np.asarray(e[0], dtype=float) for e in extra])
        ey = np.array([float(e[1]) for e in extra])
        if ex.shape[1] != model.dim:
            raise ValueError("imputed covariates have the wrong dimension")
        x = np.vstack([x, ex])
        y = np.concatenate([y, ey])
    info = x.T @ x / model.noise_var
    return model.closed_form_from_information(info, x.T @ y / model.noise_var)
