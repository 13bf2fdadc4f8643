"""Reference laws: exact conjugate posteriors, the limiting law of ideal VPR
for the Gaussian location model, Gaussian KL, a random-walk Metropolis
reference sampler and MCMC diagnostics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .models.linreg import LinearRegressionModel
from .models.location import GaussianLocationModel


@dataclass(frozen=True)
class GaussianPosterior:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if cov.shape != (mean.size, mean.size):
            raise ValueError("cov shape does not match mean")
        if not np.allclose(cov, cov.T, rtol=0, atol=1e-12 * max(1.0, np.abs(cov).max())):
            raise ValueError("cov must be symmetric")
        cov = 0.5 * (cov + cov.T)
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise ValueError("cov must be positive definite") from exc
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "_chol", chol)

    @property
    def dim(self) -> int:
        return self.mean.size

    def log_density(self, theta):
        diff = np.asarray(theta, dtype=float) - self.mean
        sol = linalg.solve_triangular(self._chol, diff.T, lower=True)
        logdet = 2 * np.sum(np.log(np.diag(self._chol)))
        return -0.5 * (np.sum(sol**2, axis=0) + logdet + self.dim * np.log(2 * np.pi))

    def sample(self, rng, count: int) -> np.ndarray:
        return self.mean + rng.standard_normal((count, self.dim)) @ self._chol.T


def exact_posterior_location(model: GaussianLocationModel, data=None) -> GaussianPosterior:
    y = model.data if data is None else model._check_data(data)
    prec = model.posterior_precision(y.shape[0])
    cov = np.linalg.inv(prec)
    return GaussianPosterior(cov @ model.precision @ y.sum(axis=0), cov)


def exact_posterior_linreg(model: LinearRegressionModel, responses=None) -> GaussianPosterior:
    y = model.responses if responses is None else model._check_responses(responses)
    if y is None:
        raise ValueError("no responses supplied")
    x = model.design
    prec = x.T @ x / model.noise_var + model.prior_precision()
    chol = np.linalg.cholesky(prec)
    mean = linalg.cho_solve((chol, True), x.T @ y / model.noise_var)
    cov = linalg.cho_solve((chol, True), np.eye(model.dim))
    return GaussianPosterior(mean, cov)


# ---------------------------------------------------------------------------
# limiting law of ideal VPR in the location model
#
# With K_j = Sigma_j B, C_{j-1} = A + S_{j-1} (S the MF covariance), the step
# covariance is M_j = K_j C_{j-1} K_j and K_j (A + Sigma_{j-1}) K_j telescopes
# to Sigma_{j-1} - Sigma_j. Hence
#     sum_{j<=T} M_j = Sigma_0 - Sigma_T + sum_{j<=T} K_j (S_{j-1} - Sigma_{j-1}) K_j,
# which is how it is evaluated: the correction terms are O((n+j)^-3).


def _eig(model: GaussianLocationModel):
    lam, Q = np.linalg.eigh(model.precision)
    return lam, Q


def _correction_sum(model, n: int, j_from: int, j_to: int, block: int = 200_000):
    """sum_{j=j_from}^{j_to} K_j (S_{j-1} - Sigma_{j-1}) K_j."""
    lam, Q = _eig(model)
    bdiag = np.diag(model.precision)
    total = np.zeros((model.dim, model.dim))
    for start in range(j_from, j_to + 1, block):
        j = np.arange(start, min(j_to, start + block - 1) + 1, dtype=float)[:, None]
        k = lam / (1.0 + (n + j) * lam)
        sig = 1.0 / (1.0 + (n + j - 1) * lam)
        s = 1.0 / (1.0 + (n + j - 1) * bdiag)
        # S_{j-1} rotated into the eigenbasis of B
        s_rot = np.einsum("ai,ja,ak->jik", Q, s, Q)
        diff = s_rot - sig[:, :, None] * np.eye(model.dim)
        total += np.einsum("ji,jik,jk->ik", k, diff, k)
    return Q @ total @ Q.T


def vpr_limit_covariance(model: GaussianLocationModel, n: int, truncation: int) -> dict:
    """Partial sum of the VPR step covariances and a bound on the remainder.

    ``V_partial = sum_{j=1}^{truncation} M_{n,j}``. ``tail_bound`` bounds the
    spectral norm of the omitted terms: ``||K_j|| <= 1/(n+j)`` and
    ``||C_{j-1}|| <= 1/lambda_min(B) + 1`` give ``||M_j|| <= c/(n+j)^2`` and
    so a tail of at most ``c / (n + truncation)``.
    """
    if truncation < 1:
        raise ValueError("truncation must be >= 1")
    if n < 0:
        raise ValueError("n must be >= 0")
    eye = np.eye(model.dim)
    sig0 = np.linalg.inv(eye + n * model.precision)
    sigT = np.linalg.inv(eye + (n + truncation) * model.precision)
    V = sig0 - sigT + _correction_sum(model, n, 1, truncation)
    lam_min = np.linalg.eigvalsh(model.precision)[0]
    c = 1.0 / lam_min + 1.0
    return {"V_partial": 0.5 * (V + V.T), "tail_bound": c / (n + truncation)}


def vpr_limit_law(model: GaussianLocationModel, data=None, horizon: int | None = None,
                  terms: int = 2_000_000) -> GaussianPosterior:
    """Gaussian law of the ideal-VPR terminal mean.

    ``horizon=None`` gives the N -> infinity limit ``Sigma_0 + E``, where the
    correction series is summed to ``terms`` (remainder O(1/(n+terms)^2)).
    """
    y = model.data if data is None else model._check_data(data)
    n = y.shape[0]
    post = exact_posterior_location(model, y)
    if horizon is not None:
        if horizon < 1:
            raise ValueError("horizon must be >= 1 (the N = 0 law is a point mass)")
        return GaussianPosterior(post.mean, vpr_limit_covariance(model, n, horizon)["V_partial"])
    V = post.cov + _correction_sum(model, n, 1, terms)
    return GaussianPosterior(post.mean, 0.5 * (V + V.T))


def location_martingale_step(model: GaussianLocationModel, n: int, i: int):
    """Gain ``K_{n,i+1}`` and predictive covariance ``A + S_{n,i}`` of one ideal step."""
    eye = np.eye(model.dim)
    sig_next = np.linalg.inv(eye + (n + i + 1) * model.precision)
    K = sig_next @ model.precision
    S = np.diag(1.0 / np.diag(eye + (n + i) * model.precision))
    return K, model.obs_cov + S


def scale_decrement(model: GaussianLocationModel, n: int, i):
    """Closed form of s^2_{n,i+1,j} - s^2_{n,i,j} (MF variances) for each coordinate."""
    b = np.diag(model.precision)
    i = np.asarray(i, dtype=float)[..., None]
    return -b / ((1 + (n + i + 1) * b) * (1 + (n + i) * b))


def kld_gaussians(p: GaussianPosterior, q: GaussianPosterior) -> float:
    """KL[p || q] between two Gaussians."""
    if p.dim != q.dim:
        raise ValueError("dimension mismatch")
    lq = np.linalg.cholesky(q.cov)
    lp = np.linalg.cholesky(p.cov)
    a = linalg.solve_triangular(lq, lp, lower=True)
    diff = linalg.solve_triangular(lq, q.mean - p.mean, lower=True)
    logdet = 2 * (np.sum(np.log(np.diag(lq))) - np.sum(np.log(np.diag(lp))))
    return float(0.5 * (np.sum(a**2) + diff @ diff - p.dim + logdet))


def mf_location_kld(precision, n) -> float:
    """KL[MF fit || posterior] in the location model, ``n`` observations."""
    B = np.asarray(precision, dtype=float)
    if np.isinf(n):
        _, logdet = np.linalg.slogdet(B)
        return float(-0.5 * (logdet - np.sum(np.log(np.diag(B)))))
    _, logdet = np.linalg.slogdet(np.eye(B.shape[0]) / n + B)
    return float(-0.5 * (logdet - np.sum(np.log(1.0 / n + np.diag(B)))))


# ---------------------------------------------------------------------------
# adaptive random-walk Metropolis


@dataclass(frozen=True)
class McmcChain:
    draws: np.ndarray
    acceptance_rate: float
    proposal_cov: np.ndarray
    accepted: np.ndarray

    def __post_init__(self):
        if self.draws.shape[0] < 1:
            raise ValueError("empty chain")
        if not np.isclose(self.acceptance_rate, np.mean(self.accepted)):
            raise ValueError("acceptance rate inconsistent with accept flags")


def adaptive_rwm(log_target, init, warmup: int, draws: int, rng: np.random.Generator,
                 target_accept: float = 0.234, thin: int = 1) -> McmcChain:
    """Gaussian random-walk Metropolis with warmup adaptation.

    During warmup the proposal covariance is ``exp(2 log_s) * 2.38^2/p * Cov``
    where ``Cov`` is the running empirical covariance of the chain (plus a
    small jitter) and ``log_s`` follows a Robbins-Monro recursion towards
    ``target_accept``. Both are frozen afterwards, so the retained draws come
    from a fixed Metropolis kernel with the target as invariant law.
    """
    x = np.atleast_1d(np.asarray(init, dtype=float)).copy()
    p = x.size
    lp = float(log_target(x))
    if not np.isfinite(lp):
        raise ValueError("log_target is not finite at init")
    base = 2.38**2 / p
    mean = x.copy()
    m2 = np.zeros((p, p))
    cov = np.eye(p) * 0.01
    log_s = 0.0
    n_seen = 1
    warm_accepts = 0
    chol = np.linalg.cholesky(base * cov)
    adapt_from = max(2 * p, 100)

    out = np.empty((draws, p))
    accepted = np.zeros(draws * thin, dtype=bool)
    for t in range(warmup + draws * thin):
        prop = x + chol @ rng.standard_normal(p)
        lq = float(log_target(prop))
        acc_prob = np.exp(min(0.0, lq - lp)) if np.isfinite(lq) else 0.0
        accept = rng.random() < acc_prob
        if accept:
            x, lp = prop, lq
        if t < warmup:
            warm_accepts += accept
            n_seen += 1
            delta = x - mean
            mean = mean + delta / n_seen
            m2 = m2 + np.outer(delta, x - mean)
            log_s += (acc_prob - target_accept) / np.sqrt(t + 1.0)
            if t >= adapt_from:
                cov = m2 / (n_seen - 1) + 1e-10 * np.eye(p)
            try:
                chol = np.linalg.cholesky(np.exp(2 * log_s) * base * cov)
            except np.linalg.LinAlgError:
                pass
            if t == warmup - 1 and warm_accepts == 0:
                raise RuntimeError("adaptive_rwm: no proposal accepted during warmup; check the target and init")
        else:
            k = t - warmup
            accepted[k] = accept
            if k % thin == thin - 1:
                out[k // thin] = x
    proposal = chol @ chol.T
    return McmcChain(out, float(np.mean(accepted)), proposal, accepted)


# ---------------------------------------------------------------------------
# diagnostics


def _autocorr(x):
    x = np.asarray(x, dtype=float)
    T = x.size
    x = x - x.mean()
    size = 1 << (2 * T - 1).bit_length()
    f = np.fft.rfft(x, size)
    ac = np.fft.irfft(f * np.conj(f), size)[:T]
    return ac / ac[0]


def effective_sample_size(draws) -> float:
    """ESS of a scalar chain by Geyer's initial positive sequence."""
    x = np.asarray(draws, dtype=float)
    if x.ndim == 2:
        if x.shape[1] != 1:
            raise ValueError("effective_sample_size takes one series; use min_ess for matrices")
        x = x[:, 0]
    T = x.size
    if T < 4:
        raise ValueError("need at least 4 draws")
    if np.ptp(x) == 0:
        raise ValueError("constant series: ESS undefined")
    rho = _autocorr(x)
    # pair sums Gamma_k = rho_{2k} + rho_{2k+1}; keep the initial positive run,
    # then enforce monotonicity
    n_pairs = (T - 1) // 2
    gam = rho[0 : 2 * n_pairs : 2] + rho[1 : 2 * n_pairs + 1 : 2]
    neg = np.nonzero(gam <= 0)[0]
    gam = gam[: neg[0]] if neg.size else gam
    gam = np.minimum.accumulate(gam)
    tau = -1.0 + 2.0 * np.sum(gam)
    return float(min(T / max(tau, 1e-12), T))


def min_ess(samples) -> float:
    x = np.asarray(samples, dtype=float)
    return min(effective_sample_size(x[:, j]) for j in range(x.shape[1]))


def split_rhat(chains) -> float:
    """Split-R-hat for an (m, T) array of scalar chains."""
    c = np.atleast_2d(np.asarray(chains, dtype=float))
    half = c.shape[1] // 2
    if half < 2:
        raise ValueError("chains too short")
    parts = np.concatenate([c[:, :half], c[:, -half:]])
    w = parts.var(axis=1, ddof=1).mean()
    b = half * parts.mean(axis=1).var(ddof=1)
    var_plus = (half - 1) / half * w + b / half
    return float(np.sqrt(var_plus / w))
