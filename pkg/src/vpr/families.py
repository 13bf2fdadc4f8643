"""Variational family primitives.

Mean-field Gaussian blocks are stored as ``(mean, log_scale)`` so that
gradient updates stay unconstrained. Both arrays may carry leading batch
dimensions (one row per resampling path); every function here broadcasts
over them.

The inverse-Wishart block is stored as ``(dof, scale_chol)`` where
``scale_chol`` is the lower Cholesky factor of the scale matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special

from .samples import SampleMatrix, default_names

DOF_EPS = 1e-3


@dataclass(frozen=True)
class MeanFieldGaussian:
    """Diagonal Gaussian ``N(mean, diag(exp(2 * log_scale)))``."""

    mean: np.ndarray
    log_scale: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        log_scale = np.asarray(self.log_scale, dtype=float)
        if mean.shape != log_scale.shape:
            raise ValueError(
                f"mean and log_scale shapes differ: {mean.shape} vs {log_scale.shape}"
            )
        if not np.all(np.isfinite(log_scale)):
            raise ValueError("log_scale entries must be finite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "log_scale", log_scale)

    @classmethod
    def from_variance(cls, mean, variance) -> "MeanFieldGaussian":
        variance = np.asarray(variance, dtype=float)
        if np.any(variance <= 0):
            raise ValueError("variances must be strictly positive")
        return cls(mean, 0.5 * np.log(variance))

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)

    @property
    def variance(self) -> np.ndarray:
        return np.exp(2.0 * self.log_scale)

    def entropy(self) -> np.ndarray:
        return np.sum(0.5 * np.log(2 * np.pi * np.e) + self.log_scale, axis=-1)

    def log_density(self, theta) -> np.ndarray:
        z = (np.asarray(theta) - self.mean) / self.scale
        return np.sum(-0.5 * z**2 - self.log_scale - 0.5 * np.log(2 * np.pi), axis=-1)


def mf_sample(state: MeanFieldGaussian, rng: np.random.Generator, count: int, names=None) -> SampleMatrix:
    """Draw ``count`` reparameterised samples ``mean + scale * eps``."""
    if count < 1:
        raise ValueError("count must be >= 1")
    if state.mean.ndim != 1:
        raise ValueError("mf_sample expects an unbatched state")
    eps = rng.standard_normal((count, state.dim))
    return SampleMatrix(state.mean + state.scale * eps, names or default_names(state.dim))


def mf_kl_to_gaussian_prior(state: MeanFieldGaussian, prior_var: float) -> np.ndarray:
    """KL[q || N(0, prior_var * I)], summed over the last axis."""
    if prior_var <= 0:
        raise ValueError("prior_var must be positive")
    ratio = state.variance / prior_var
    terms = 0.5 * (ratio + state.mean**2 / prior_var - 1.0 - np.log(ratio))
    return np.sum(terms, axis=-1)


def mf_kl_gradient(state: MeanFieldGaussian, prior_var: float):
    """Gradient of ``mf_kl_to_gaussian_prior`` w.r.t. (mean, log_scale)."""
    return state.mean / prior_var, state.variance / prior_var - 1.0


# ---------------------------------------------------------------------------
# inverse-Wishart


def _check_chol(chol: np.ndarray) -> np.ndarray:
    chol = np.asarray(chol, dtype=float)
    if chol.ndim != 2 or chol.shape[0] != chol.shape[1]:
        raise ValueError("scale_chol must be a square matrix")
    if not np.allclose(chol, np.tril(chol)):
        raise ValueError("scale_chol must be lower triangular")
    if np.any(np.diag(chol) <= 0):
        raise ValueError("scale_chol must have a strictly positive diagonal")
    return chol


@dataclass(frozen=True)
class InverseWishartFactor:
    """Inverse-Wishart law ``IW(dof, scale_chol @ scale_chol.T)``."""

    dof: float
    scale_chol: np.ndarray

    def __post_init__(self):
        chol = _check_chol(self.scale_chol)
        r = chol.shape[0]
        if not self.dof > r - 1:
            raise ValueError(f"dof must exceed r - 1 = {r - 1}, got {self.dof}")
        object.__setattr__(self, "scale_chol", chol)
        object.__setattr__(self, "dof", float(self.dof))

    @classmethod
    def from_scale(cls, dof: float, scale) -> "InverseWishartFactor":
        scale = np.asarray(scale, dtype=float)
        try:
            chol = np.linalg.cholesky(scale)
        except np.linalg.LinAlgError as exc:
            raise ValueError("scale matrix must be symmetric positive definite") from exc
        return cls(dof, chol)

    @property
    def dim(self) -> int:
        return self.scale_chol.shape[0]

    @property
    def scale(self) -> np.ndarray:
        return self.scale_chol @ self.scale_chol.T

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        """Draws via the Bartlett decomposition of the inverse matrix."""
        r = self.dim
        # D^{-1} ~ W(dof, scale^{-1}); write scale^{-1} = M M^T with M = L^{-T}
        m = np.linalg.inv(self.scale_chol).T
        out = np.empty((count, r, r))
        for k in range(count):
            a = np.zeros((r, r))
            for i in range(r):
                a[i, i] = np.sqrt(rng.chisquare(self.dof - i))
                a[i, :i] = rng.standard_normal(i)
            w_chol = m @ a
            out[k] = np.linalg.inv(w_chol @ w_chol.T)
        return out


def multi_digamma(a, r: int):
    """sum_{k=1}^{r} digamma(a + (1 - k) / 2)."""
    k = np.arange(1, r + 1)
    return np.sum(special.digamma(np.add.outer(a, (1 - k) / 2.0)), axis=-1)


def multi_trigamma(a, r: int):
    k = np.arange(1, r + 1)
    return np.sum(special.polygamma(1, np.add.outer(a, (1 - k) / 2.0)), axis=-1)


def chol_logdet(chol) -> np.ndarray:
    return 2.0 * np.sum(np.log(np.diagonal(chol, axis1=-2, axis2=-1)), axis=-1)


def iw_expectations(factor: InverseWishartFactor) -> dict:
    """E[D^{-1}] and E[log|D|] under ``factor``."""
    r = factor.dim
    chol_inv = np.linalg.inv(factor.scale_chol)
    scale_inv = chol_inv.T @ chol_inv
    mean_precision = factor.dof * scale_inv
    mean_logdet = (
        chol_logdet(factor.scale_chol) - multi_digamma(factor.dof / 2.0, r) - r * np.log(2.0)
    )
    return {"mean_precision": 0.5 * (mean_precision + mean_precision.T), "mean_logdet": float(mean_logdet)}


def iw_kl(dof, scale_chol, prior_dof: float, prior_scale) -> np.ndarray:
    """KL[IW(dof, LL^T) || IW(prior_dof, prior_scale)], batched over ``dof``/``scale_chol``.

    Uses the fact that ``D -> D^{-1}`` maps both laws to Wisharts and KL is
    invariant under bijections.
    """
    r = scale_chol.shape[-1]
    dof = np.asarray(dof, dtype=float)
    prior_chol = np.linalg.cholesky(prior_scale)
    chol_inv = np.linalg.inv(scale_chol)
    scale_inv = np.swapaxes(chol_inv, -1, -2) @ chol_inv
    trace = np.einsum("ij,...ji->...", prior_scale, scale_inv)
    return (
        0.5 * prior_dof * (chol_logdet(scale_chol) - chol_logdet(prior_chol))
        + 0.5 * dof * (trace - r)
        + special.multigammaln(prior_dof / 2.0, r)
        - _multigammaln(dof / 2.0, r)
        + 0.5 * (dof - prior_dof) * multi_digamma(dof / 2.0, r)
    )


def _multigammaln(a, r: int):
    k = np.arange(1, r + 1)
    return r * (r - 1) / 4.0 * np.log(np.pi) + np.sum(
        special.gammaln(np.add.outer(a, (1 - k) / 2.0)), axis=-1
    )


def iw_kl_to_prior(factor: InverseWishartFactor, prior_dof: float, prior_scale) -> float:
    prior_scale = np.asarray(prior_scale, dtype=float)
    r = factor.dim
    if prior_scale.shape != (r, r):
        raise ValueError("prior_scale has the wrong shape")
    if not np.allclose(prior_scale, prior_scale.T):
        raise ValueError("prior_scale must be symmetric")
    try:
        np.linalg.cholesky(prior_scale)
    except np.linalg.LinAlgError as exc:
        raise ValueError("prior_scale must be positive definite") from exc
    if not prior_dof > r - 1:
        raise ValueError("prior_dof must exceed r - 1")
    return float(max(iw_kl(factor.dof, factor.scale_chol, prior_dof, prior_scale), 0.0))


def dof_from_raw(raw, r: int):
    """Map an unconstrained scalar to ``dof > r - 1`` (softplus + r - 1 + eps)."""
    return np.logaddexp(0.0, raw) + r - 1 + DOF_EPS


def dof_to_raw(dof, r: int):
    x = np.asarray(dof, dtype=float) - (r - 1) - DOF_EPS
    if np.any(x <= 0):
        raise ValueError("dof too small to invert")
    return x + np.log(-np.expm1(-x))
