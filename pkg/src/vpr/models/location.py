"""Multivariate Gaussian location model with a standard-normal prior.

``y_i | theta ~ N(theta, A)``, ``theta ~ N(0, I)``. Everything is conjugate,
so the ELBO-optimal mean-field fit is available in closed form.
"""

from __future__ import annotations

import numpy as np

from ..families import MeanFieldGaussian
from ..samples import default_names
from ._common import Batch, MeanFieldModelMixin, default_weights, matvec, split_mf


class GaussianLocationModel(MeanFieldModelMixin):
    prior_var = 1.0
    has_covariates = False

    def __init__(self, obs_cov, data=None):
        obs_cov = np.asarray(obs_cov, dtype=float)
        if obs_cov.ndim != 2 or obs_cov.shape[0] != obs_cov.shape[1]:
            raise ValueError("obs_cov must be square")
        if not np.allclose(obs_cov, obs_cov.T, atol=1e-12):
            raise ValueError("obs_cov must be symmetric")
        try:
            chol = np.linalg.cholesky(obs_cov)
        except np.linalg.LinAlgError as exc:
            raise ValueError("obs_cov must be positive definite") from exc
        self.obs_cov = obs_cov
        self.obs_chol = chol
        prec = np.linalg.inv(obs_cov)
        self.precision = 0.5 * (prec + prec.T)
        self.dim = obs_cov.shape[0]
        self.names = default_names(self.dim)
        self._logdet_cov = 2 * np.sum(np.log(np.diag(chol)))
        if data is None:
            data = np.zeros((0, self.dim))
        self.data = self._check_data(data)

    def _check_data(self, y):
        y = np.asarray(y, dtype=float)
        if y.ndim == 1 and y.size == 0:
            y = y.reshape(0, self.dim)
        if y.ndim != 2 or y.shape[1] != self.dim:
            raise ValueError(f"data must have shape (n, {self.dim}), got {y.shape}")
        return y

    def with_data(self, data) -> "GaussianLocationModel":
        return GaussianLocationModel(self.obs_cov, data)

    @property
    def n_obs(self) -> int:
        return self.data.shape[0]

    def full_batch(self) -> Batch:
        return Batch(None, self.data)

    def covariate_pool(self) -> int:
        return 0

    # -- densities --------------------------------------------------------

    def log_likelihood(self, theta, y):
        diff = np.asarray(y) - np.asarray(theta)
        quad = np.sum(diff * matvec(self.precision, diff), axis=-1)
        return -0.5 * (self.dim * np.log(2 * np.pi) + self._logdet_cov + quad)

    def prior_log_density(self, theta):
        theta = np.asarray(theta)
        return -0.5 * np.sum(theta**2 + np.log(2 * np.pi), axis=-1)

    # -- ELBO -------------------------------------------------------------

    def expected_loglik(self, params, batch: Batch):
        """Per-observation E_q[log p(y_i | theta)], shape ``batch.y.shape[:-1]``."""
        mean, log_scale = split_mf(params, self.dim)
        var = np.exp(2 * log_scale)
        diff = batch.y - mean[..., None, :]
        quad = np.sum(diff * matvec(self.precision, diff), axis=-1)
        trace = np.sum(np.diag(self.precision) * var, axis=-1)[..., None]
        return -0.5 * (self.dim * np.log(2 * np.pi) + self._logdet_cov + quad + trace)

    def elbo(self, params, batch: Batch | None = None, weights=None):
        batch = self.full_batch() if batch is None else batch
        mean, log_scale = split_mf(params, self.dim)
        w = default_weights(batch.y, weights, batch.y.ndim - 1)
        return np.sum(w * self.expected_loglik(params, batch), axis=-1) - self._kl(mean, log_scale)

    def elbo_gradient(self, params, batch: Batch | None = None, weights=None):
        batch = self.full_batch() if batch is None else batch
        mean, log_scale = split_mf(params, self.dim)
        var = np.exp(2 * log_scale)
        w = default_weights(batch.y, weights, batch.y.ndim - 1)
        diff = batch.y - mean[..., None, :]
        wsum = np.sum(w, axis=-1)[..., None]
        g_mean = matvec(self.precision, np.sum(w[..., None] * diff, axis=-2))
        g_ls = -wsum * np.diag(self.precision) * var
        k_mean, k_ls = self._kl_grad(mean, log_scale)
        return np.concatenate([g_mean - k_mean, g_ls - k_ls], axis=-1)

    # -- conjugate structure ---------------------------------------------

    def posterior_precision(self, count):
        return np.eye(self.dim) + count * self.precision

    def closed_form(self, sum_y, count) -> MeanFieldGaussian:
        prec = self.posterior_precision(count)
        mean = np.linalg.solve(prec, self.precision @ np.asarray(sum_y, dtype=float))
        return MeanFieldGaussian.from_variance(mean, 1.0 / np.diag(prec))

    def linear_gaussian(self, rows):
        """Observation operator ``H`` and noise precision ``R^{-1}`` for one datum."""
        return np.eye(self.dim), self.precision

    def information(self, batch: Batch):
        """Data contribution (H^T R^{-1} H summed, H^T R^{-1} y summed)."""
        y = self._check_data(batch.y)
        return y.shape[0] * self.precision, self.precision @ y.sum(axis=0)

    def prior_precision(self):
        return np.eye(self.dim)

    def mle(self, info_matrix, info_vector):
        """Maximum-likelihood theta from accumulated information (no prior)."""
        return np.linalg.solve(info_matrix, info_vector)

    # -- predictive -------------------------------------------------------

    def obs_noise_dim(self) -> int:
        return self.dim

    def predictive_from_noise(self, params, rows, theta_noise, obs_noise):
        theta = self.draw_theta(params, theta_noise)
        return theta + np.sum(obs_noise[..., None, :] * self.obs_chol, axis=-1)

    def sample_predictive(self, state: MeanFieldGaussian, covariate=None, rng=None):
        if covariate is not None:
            raise ValueError("the location model takes no covariate")
        rng = np.random.default_rng() if rng is None else rng
        params = self.params(state)
        return self.predictive_from_noise(
            params, None, rng.standard_normal(self.dim), rng.standard_normal(self.dim)
        )


def location_closed_form(model: GaussianLocationModel, data, extra=()) -> MeanFieldGaussian:
    """ELBO-optimal mean-field fit given observed ``data`` plus imputed points ``extra``."""
    data = model._check_data(data)
    extra = np.asarray(extra, dtype=float).reshape(-1, model.dim) if len(extra) else np.zeros((0, model.dim))
    total = np.vstack([data, extra])
    return model.closed_form(total.sum(axis=0), total.shape[0])
