"""Shared helpers for the model bundles.

Variational parameters travel as a flat array ``params`` of shape
``(..., n_params)``; leading axes index resampling paths. For the plain
mean-field models the layout is ``[mean (p), log_scale (p)]``.

Per-path reductions are written as broadcast-multiply + ``sum(-1)`` rather
than BLAS matmuls so that each path's arithmetic does not depend on how many
paths are evaluated together.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..families import MeanFieldGaussian


@dataclass(frozen=True)
class Batch:
    """A set of (possibly imputed) observations.

    ``rows`` indexes the observed covariate rows (``None`` for models without
    covariates); ``y`` holds the responses. Leading shapes of ``rows`` and
    ``y`` agree.
    """

    rows: np.ndarray | None
    y: np.ndarray

    def __len__(self):
        return np.shape(self.y)[0]


def rowdot(a, b):
    return np.sum(a * b, axis=-1)


def matvec(mat, vec):
    """``mat @ vec`` for a shared (p, p) matrix and batched vectors."""
    return np.sum(vec[..., None, :] * mat, axis=-1)


def split_mf(params, p: int):
    params = np.asarray(params, dtype=float)
    return params[..., :p], params[..., p : 2 * p]


def join_mf(mean, log_scale):
    return np.concatenate([mean, log_scale], axis=-1)


def mf_params(state: MeanFieldGaussian) -> np.ndarray:
    return join_mf(state.mean, state.log_scale)


def default_weights(y, weights, lead_ndim: int):
    if weights is None:
        shape = np.shape(y)[: lead_ndim]
        return np.ones(shape)
    return np.asarray(weights, dtype=float)


class MeanFieldModelMixin:
    """Plumbing for models whose variational family is a single MF Gaussian."""

    dim: int
    prior_var: float

    @property
    def n_params(self) -> int:
        return 2 * self.dim

    def state(self, params) -> MeanFieldGaussian:
        mean, log_scale = split_mf(params, self.dim)
        return MeanFieldGaussian(mean, log_scale)

    def params(self, state: MeanFieldGaussian) -> np.ndarray:
        return mf_params(state)

    def theta_noise_dim(self) -> int:
        return self.dim

    def terminal_mean(self, params) -> np.ndarray:
        return np.asarray(params)[..., : self.dim]

    def default_init(self) -> np.ndarray:
        return join_mf(np.zeros(self.dim), np.full(self.dim, 0.5 * np.log(self.prior_var)))

    def _kl(self, mean, log_scale):
        var = np.exp(2 * log_scale)
        ratio = var / self.prior_var
        return np.sum(0.5 * (ratio + mean**2 / self.prior_var - 1.0 - 2 * log_scale + np.log(self.prior_var)), axis=-1)

    def _kl_grad(self, mean, log_scale):
        var = np.exp(2 * log_scale)
        return mean / self.prior_var, var / self.prior_var - 1.0

    def draw_theta(self, params, noise):
        """Reparameterised draw ``mean + scale * noise`` (batched)."""
        mean, log_scale = split_mf(params, self.dim)
        return mean + np.exp(log_scale) * noise
