"""Synthetic data generators and a CSV loader."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, special


def exchangeable(dim: int, corr: float = 0.5, var: float = 1.0) -> np.ndarray:
    return var * ((1 - corr) * np.eye(dim) + corr * np.ones((dim, dim)))


def random_orthonormal(rng, rows: int, cols: int) -> np.ndarray:
    """Orthonormal columns from the QR of a Gaussian matrix, with sign-fixed R."""
    q, r = np.linalg.qr(rng.standard_normal((rows, cols)))
    return q * np.sign(np.diag(r))


# ---------------------------------------------------------------------------
# Gaussian location model


@dataclass(frozen=True)
class LocationSpec:
    dim: int = 3
    n: int = 10
    eig_low: float = 0.25
    eig_high: float = 4.0

    def __post_init__(self):
        if self.dim < 1 or self.n < 0:
            raise ValueError("need dim >= 1 and n >= 0")
        if not 0 < self.eig_low <= self.eig_high:
            raise ValueError("need 0 < eig_low <= eig_high")


def gen_location(spec: LocationSpec, rng):
    """Returns ``(A, theta_star, y)``: A = Q diag(lam) Q^T with log-uniform lam and a
    random rotation Q (so B = A^-1 is non-diagonal), theta* ~ N(0, I), y_i ~ N(theta*, A)."""
    lam = np.exp(rng.uniform(np.log(spec.eig_low), np.log(spec.eig_high), spec.dim))
    Q = random_orthonormal(rng, spec.dim, spec.dim)
    A = (Q * lam) @ Q.T
    A = 0.5 * (A + A.T)
    theta = rng.standard_normal(spec.dim)
    y = theta + rng.standard_normal((spec.n, spec.dim)) @ np.linalg.cholesky(A).T
    return A, theta, y


# ---------------------------------------------------------------------------
# linear regression with a prescribed Gram spectrum


@dataclass(frozen=True)
class SpectrumDesignSpec:
    n: int
    d: int
    kappa_ref: float = 350.0
    d_ref: int = 20
    alpha: float = 1.5
    kappa_max: float = 1e12
    signal_var_target: float = 4.0
    noise_var: float = 1.0

    def __post_init__(self):
        if self.d < 1 or self.n < self.d:
            raise ValueError("need n >= d >= 1 for an orthonormal-column design")
        for name in ("kappa_ref", "d_ref", "alpha", "kappa_max", "signal_var_target", "noise_var"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    @property
    def kappa(self) -> float:
        return float(min(self.kappa_max, self.kappa_ref * (self.d / self.d_ref) ** self.alpha))

    def eigenvalues(self) -> np.ndarray:
        """Gram eigenvalues: log-evenly spaced on [kappa^-1/2, kappa^1/2]."""
        if self.d == 1:
            return np.ones(1)
        half = 0.5 * np.log(self.kappa)
        return np.exp(np.linspace(-half, half, self.d))


def gen_spectrum_truth(spec: SpectrumDesignSpec, rng) -> np.ndarray:
    """beta* ~ N(0, I) rescaled so that E Var(X beta*) equals the signal target.

    For X = U diag(sqrt(lam)) V^T with a uniformly random rotation V,
    E ||X beta||^2 / n = ||beta||^2 mean(lam) / n, so the scaling depends on
    the spectrum only and beta* can stay fixed across design replicates.
    """
    z = rng.standard_normal(spec.d)
    lam = spec.eigenvalues()
    target_norm2 = spec.signal_var_target * spec.n / lam.mean()
    return z * np.sqrt(target_norm2 / np.sum(z**2))


def gen_spectrum_design(spec: SpectrumDesignSpec, rng, beta_star=None):
    """Returns ``(X, beta_star, y)``; ``beta_star`` is drawn from ``rng`` if omitted."""
    if beta_star is None:
        beta_star = gen_spectrum_truth(spec, rng)
    beta_star = np.asarray(beta_star, dtype=float)
    if beta_star.shape != (spec.d,):
        raise ValueError("beta_star has the wrong length")
    lam = spec.eigenvalues()
    U = random_orthonormal(rng, spec.n, spec.d)
    V = random_orthonormal(rng, spec.d, spec.d)
    X = (U * np.sqrt(lam)) @ V.T
    y = X @ beta_star + np.sqrt(spec.noise_var) * rng.standard_normal(spec.n)
    return X, beta_star, y


# ---------------------------------------------------------------------------
# logistic regression with a Toeplitz design


@dataclass(frozen=True)
class ToeplitzLogisticSpec:
    n: int = 15
    d: int = 5
    rho: float = 0.99

    def __post_init__(self):
        if self.n < 1 or self.d < 1:
            raise ValueError("n and d must be >= 1")
        if not -1 < self.rho < 1:
            raise ValueError("rho must lie in (-1, 1)")

    def covariance(self) -> np.ndarray:
        return linalg.toeplitz(self.rho ** np.arange(self.d))


def gen_toeplitz_logistic(spec: ToeplitzLogisticSpec, rng, beta_star=None):
    """Returns ``(X, beta_star, y)`` with x_i ~ N(0, Toeplitz(rho)), y_i ~ Bern(sigmoid(x_i^T beta*))."""
    if beta_star is None:
        beta_star = rng.standard_normal(spec.d) / np.sqrt(spec.d)
    chol = np.linalg.cholesky(spec.covariance())
    X = rng.standard_normal((spec.n, spec.d)) @ chol.T
    y = (rng.random(spec.n) < special.expit(X @ beta_star)).astype(int)
    return X, np.asarray(beta_star, dtype=float), y


# ---------------------------------------------------------------------------
# linear mixed random effects


@dataclass(frozen=True)
class LmreSpec:
    d: int = 3
    r: int = 3
    G: int = 4
    group_sizes: tuple = (15, 25, 12, 30)
    noise_var: float = 1.0
    beta_cov: np.ndarray = field(default=None)
    D_true: np.ndarray = field(default=None)
    design_corr: float = 0.8
    shared_design: bool = False

    def __post_init__(self):
        if len(self.group_sizes) != self.G:
            raise ValueError("need one size per group")
        if min(self.group_sizes) < 1:
            raise ValueError("group sizes must be >= 1")
        if self.shared_design and self.r > self.d:
            raise ValueError("a shared design uses the first r fixed-effect columns, so r <= d")
        if not -1 / max(self.d - 1, 1) < self.design_corr < 1:
            raise ValueError("design_corr must keep the exchangeable covariate matrix positive definite")
        object.__setattr__(self, "group_sizes", tuple(int(s) for s in self.group_sizes))
        bc = exchangeable(self.d) if self.beta_cov is None else np.asarray(self.beta_cov, dtype=float)
        dt = exchangeable(self.r) if self.D_true is None else np.asarray(self.D_true, dtype=float)
        for m, k in ((bc, self.d), (dt, self.r)):
            if m.shape != (k, k):
                raise ValueError("covariance has the wrong shape")
            np.linalg.cholesky(m)
        object.__setattr__(self, "beta_cov", bc)
        object.__setattr__(self, "D_true", dt)


@dataclass
class LmreDataset:
    groups: list
    beta_true: np.ndarray
    u_true: np.ndarray
    D_true: np.ndarray

    @property
    def truth(self) -> np.ndarray:
        """(beta, u_1, ..., u_G) flattened, the order used by the LMRE model."""
        return np.concatenate([self.beta_true, self.u_true.ravel()])


def gen_lmre(spec: LmreSpec, rng) -> LmreDataset:
    """Rows of X_g ~ N(0, exchangeable(design_corr)); rows of Z_g ~ N(0, I_r).

    With ``shared_design`` Z_g is instead the first r columns of
    X_g = [1, N(0,1), ...]. Then beta and the u_g enter only through
    beta + u_g, and within-group data cannot separate them.
    """
    beta = np.linalg.cholesky(spec.beta_cov) @ rng.standard_normal(spec.d)
    chol_d = np.linalg.cholesky(spec.D_true)
    u = rng.standard_normal((spec.G, spec.r)) @ chol_d.T
    chol_x = np.linalg.cholesky(exchangeable(spec.d, spec.design_corr))
    groups = []
    for g, n_g in enumerate(spec.group_sizes):
        if spec.shared_design:
            X = np.column_stack([np.ones(n_g), rng.standard_normal((n_g, spec.d - 1))])
            Z = X[:, : spec.r].copy()
        else:
            X = rng.standard_normal((n_g, spec.d)) @ chol_x.T
            Z = rng.standard_normal((n_g, spec.r))
        y = X @ beta + Z @ u[g] + np.sqrt(spec.noise_var) * rng.standard_normal(n_g)
        groups.append((X, Z, y))
    return LmreDataset(groups, beta, u, spec.D_true.copy())


# ---------------------------------------------------------------------------
# CSV


@dataclass
class Split:
    X: np.ndarray
    y: np.ndarray
    feature_names: list


def load_csv(path, label_column: str, standardize: bool = True, split=(100, 0)):
    """Load a numeric CSV and split it into (train, test).

    ``split = (train_n, seed)``; the training rows are drawn uniformly
    without replacement and the standardisation statistics come from the
    training split only.
    """
    train_n, seed = split
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        rows = [r for r in reader if any(c.strip() for c in r)]
    if label_column not in header:
        raise ValueError(f"{path}: no column named {label_column!r}")
    for k, r in enumerate(rows):
        if len(r) != len(header):
            raise ValueError(f"{path}: row {k + 2} has {len(r)} fields, expected {len(header)}")
    try:
        data = np.array([[float(c) for c in r] for r in rows])
    except ValueError as exc:
        raise ValueError(f"{path}: non-numeric entry ({exc})") from None
    j = header.index(label_column)
    y = data[:, j]
    X = np.delete(data, j, axis=1)
    names = [h for h in header if h != label_column]
    if not 0 < train_n < X.shape[0]:
        raise ValueError(f"train_n must be in (0, {X.shape[0]}), got {train_n}")
    rng = np.random.default_rng(seed)
    idx = rng.permutation(X.shape[0])
    tr, te = np.sort(idx[:train_n]), np.sort(idx[train_n:])
    Xtr, Xte = X[tr], X[te]
    if standardize:
        mu = Xtr.mean(axis=0)
        sd = Xtr.std(axis=0)
        sd[sd == 0] = 1.0
        Xtr = (Xtr - mu) / sd
        Xte = (Xte - mu) / sd
    return Split(Xtr, y[tr], names), Split(Xte, y[te], names)
