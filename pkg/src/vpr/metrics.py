"""Posterior-quality and predictive metrics."""

from __future__ import annotations

import numpy as np
from scipy import special
from scipy.spatial.distance import cdist, pdist

from .samples import SampleMatrix, as_values

MMD_CAP = 2000


def marginal_coverage(samples, truth, level: float = 0.9):
    """Equal-tailed empirical credible intervals; returns (covered, mean)."""
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    x = as_values(samples)
    truth = np.asarray(truth, dtype=float).ravel()
    if truth.size != x.shape[1]:
        raise ValueError("truth length does not match the number of parameters")
    if x.shape[0] < 2:
        raise ValueError("need at least two draws")
    alpha = (1 - level) / 2
    lo, hi = np.quantile(x, [alpha, 1 - alpha], axis=0, method="linear")
    covered = (truth >= lo) & (truth <= hi)
    return covered, float(covered.mean())


def whiten(x, reference):
    ref = as_values(reference)
    mu = ref.mean(axis=0)
    cov = np.atleast_2d(np.cov(ref, rowvar=False))
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise ValueError("whitening reference has a degenerate covariance") from exc
    return np.linalg.solve(chol, (as_values(x) - mu).T).T


def _subsample(x, cap, rng):
    if x.shape[0] <= cap:
        return x
    return x[np.sort(rng.choice(x.shape[0], cap, replace=False))]


def mmd_squared(a, b, whitening_reference=None, cap: int = MMD_CAP, seed: int = 0,
                bandwidth: float | None = None) -> float:
    """Unbiased MMD^2 with an RBF kernel on whitened samples.

    Both sets are whitened by the reference mean and Cholesky factor (the
    pooled sample when no reference is given). The bandwidth is the median
    pairwise distance of the pooled whitened sample unless supplied.
    """
    xa, xb = as_values(a), as_values(b)
    if xa.shape[1] != xb.shape[1]:
        raise ValueError("sample sets have different dimensions")
    if xa.shape[0] < 2 or xb.shape[0] < 2:
        raise ValueError("need at least two draws per set")
    rng = np.random.default_rng(seed)
    xa, xb = _subsample(xa, cap, rng), _subsample(xb, cap, rng)
    ref = np.vstack([xa, xb]) if whitening_reference is None else as_values(whitening_reference)
    if ref.shape[1] != xa.shape[1]:
        raise ValueError("reference has the wrong dimension")
    za, zb = whiten(xa, ref), whiten(xb, ref)
    pooled = np.vstack([za, zb])
    h = float(np.median(pdist(pooled))) if bandwidth is None else float(bandwidth)
    if not h > 0:
        raise ValueError("degenerate bandwidth")
    return _mmd_u(za, zb, h)


def _mmd_u(za, zb, h):
    gamma = 1.0 / (2 * h * h)
    kaa = np.exp(-gamma * cdist(za, za, "sqeuclidean"))
    kbb = np.exp(-gamma * cdist(zb, zb, "sqeuclidean"))
    kab = np.exp(-gamma * cdist(za, zb, "sqeuclidean"))
    m, n = za.shape[0], zb.shape[0]
    return float(
        (kaa.sum() - np.trace(kaa)) / (m * (m - 1))
        + (kbb.sum() - np.trace(kbb)) / (n * (n - 1))
        - 2 * kab.mean()
    )


def mmd_permutation_test(a, b, permutations: int = 200, cap: int = 1000, seed: int = 0):
    """Two-sample permutation test; returns (statistic, p_value)."""
    rng = np.random.default_rng(seed)
    xa, xb = _subsample(as_values(a), cap, rng), _subsample(as_values(b), cap, rng)
    pooled = np.vstack([xa, xb])
    z = whiten(pooled, pooled)
    h = float(np.median(pdist(z)))
    m = xa.shape[0]
    stat = _mmd_u(z[:m], z[m:], h)
    count = 0
    for _ in range(permutations):
        perm = rng.permutation(z.shape[0])
        count += _mmd_u(z[perm[:m]], z[perm[m:]], h) >= stat
    return stat, (count + 1) / (permutations + 1)


def nlpd(samples, model, test_set) -> float:
    """-(1/|T|) sum_t log (1/L) sum_l p(y_t | x_t, theta_l), via log-sum-exp.

    ``test_set`` is a sequence of data items in the form ``model.log_likelihood``
    expects (``(x, y)`` pairs for regression, observations for the location model).
    """
    theta = as_values(samples)
    L = theta.shape[0]
    total = 0.0
    count = 0
    for datum in test_set:
        ll = np.asarray(model.log_likelihood(theta, datum), dtype=float)
        total += special.logsumexp(ll) - np.log(L)
        count += 1
    if count == 0:
        raise ValueError("empty test set")
    return float(-total / count)


def pearson_matrix(samples) -> np.ndarray:
    x = as_values(samples)
    if x.shape[0] < 2:
        raise ValueError("need at least two draws")
    c = np.corrcoef(x, rowvar=False)
    c = np.atleast_2d(c)
    c = 0.5 * (c + c.T)
    np.fill_diagonal(c, 1.0)
    return c


def max_offdiag_gap(a, b) -> float:
    """Largest absolute difference between off-diagonal entries of two matrices."""
    a, b = np.asarray(a), np.asarray(b)
    mask = ~np.eye(a.shape[0], dtype=bool)
    return float(np.max(np.abs(a - b)[mask]))


__all__ = [
    "SampleMatrix",
    "marginal_coverage",
    "max_offdiag_gap",
    "mmd_permutation_test",
    "mmd_squared",
    "nlpd",
    "pearson_matrix",
    "whiten",
]
