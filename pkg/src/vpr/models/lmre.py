"""Linear mixed random-effects model.

    y_g = X_g beta + Z_g u_g + eps_g,   u_g | D ~ N(0, D),   eps_g ~ N(0, sigma^2 I)
    beta ~ N(0, tau^2 I),   D ~ IW(nu0, S0)

Variational family: q(beta) prod_g q(u_g) q(D) with diagonal Gaussians for
beta and each u_g and an inverse-Wishart q(D). Every expectation in the ELBO
is closed form, so there is no Monte Carlo noise in the objective.

Flat parameter layout (per path)::

    [m_beta (d), logscale_beta (d), m_u (G*r), logscale_u (G*r),
     raw_dof (1), chol (r(r+1)/2, tril order, diagonal stored as log)]
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special

from ..families import (
    InverseWishartFactor,
    MeanFieldGaussian,
    chol_logdet,
    dof_from_raw,
    dof_to_raw,
    iw_kl,
    multi_digamma,
    multi_trigamma,
)
from ._common import Batch, default_weights, rowdot

LOG_2PI = np.log(2 * np.pi)


@dataclass(frozen=True)
class LmreState:
    beta: MeanFieldGaussian
    u: list
    D: InverseWishartFactor


class LmreModel:
    has_covariates = True

    def __init__(self, group_designs, noise_var: float = 1.0, beta_prior_scale: float = 1.0, iw_prior=None):
        if len(group_designs) < 1:
            raise ValueError("need at least one group")
        xs, zs, ys, gs = [], [], [], []
        for g, (xg, zg, yg) in enumerate(group_designs):
            xg = np.atleast_2d(np.asarray(xg, dtype=float))
            zg = np.atleast_2d(np.asarray(zg, dtype=float))
            yg = np.asarray(yg, dtype=float).ravel()
            if not (xg.shape[0] == zg.shape[0] == yg.shape[0]) or yg.shape[0] < 1:
                raise ValueError(f"group {g}: inconsistent or empty block")
            xs.append(xg), zs.append(zg), ys.append(yg), gs.append(np.full(yg.shape[0], g))
        if len({x.shape[1] for x in xs}) != 1 or len({z.shape[1] for z in zs}) != 1:
            raise ValueError("inconsistent d or r across groups")
        self.X = np.vstack(xs)
        self.Z = np.vstack(zs)
        self.y = np.concatenate(ys)
        self.group = np.concatenate(gs)
        self.n_groups = len(group_designs)
        self.d = self.X.shape[1]
        self.r = self.Z.shape[1]
        self.group_sizes = np.bincount(self.group, minlength=self.n_groups)
        if noise_var <= 0 or beta_prior_scale <= 0:
            raise ValueError("noise_var and beta_prior_scale must be positive")
        self.noise_var = float(noise_var)
        self.beta_prior_scale = float(beta_prior_scale)
        self.prior_var = self.beta_prior_scale**2
        if iw_prior is None:
            iw_prior = (self.r + 2.0, np.eye(self.r))
        nu0, s0 = iw_prior
        s0 = np.asarray(s0, dtype=float)
        if not nu0 > self.r - 1:
            raise ValueError("inverse-Wishart prior dof must exceed r - 1")
        np.linalg.cholesky(s0)
        self.iw_dof, self.iw_scale = float(nu0), s0
        self.dim = self.d + self.n_groups * self.r
        self.names = [f"beta[{j}]" for j in range(self.d)] + [
            f"u[{g}][{k}]" for g in range(self.n_groups) for k in range(self.r)
        ]
        self._tril = np.tril_indices(self.r)
        self._diag_pos = np.array([i for i, (a, b) in enumerate(zip(*self._tril)) if a == b])
        self.n_params = 2 * self.d + 2 * self.n_groups * self.r + 1 + len(self._tril[0])

    @property
    def n_obs(self) -> int:
        return self.y.shape[0]

    def full_batch(self) -> Batch:
        return Batch(np.arange(self.n_obs), self.y)

    def covariate_pool(self) -> int:
        return self.n_obs

    # -- parameter packing ------------------------------------------------

    def unpack(self, params) -> dict:
        params = np.asarray(params, dtype=float)
        d, G, r = self.d, self.n_groups, self.r
        lead = params.shape[:-1]
        o = 0
        mb = params[..., o : o + d]; o += d
        lb = params[..., o : o + d]; o += d
        mu = params[..., o : o + G * r].reshape(lead + (G, r)); o += G * r
        lu = params[..., o : o + G * r].reshape(lead + (G, r)); o += G * r
        raw_dof = params[..., o]; o += 1
        entries = params[..., o:].copy()
        entries[..., self._diag_pos] = np.exp(entries[..., self._diag_pos])
        chol = np.zeros(lead + (r, r))
        chol[..., self._tril[0], self._tril[1]] = entries
        return {"mb": mb, "lb": lb, "mu": mu, "lu": lu, "raw_dof": raw_dof,
                "dof": dof_from_raw(raw_dof, r), "chol": chol}

    def pack(self, mb, lb, mu, lu, dof, chol) -> np.ndarray:
        chol = np.asarray(chol, dtype=float)
        lead = np.shape(mb)[:-1]
        entries = chol[..., self._tril[0], self._tril[1]].copy()
        entries[..., self._diag_pos] = np.log(entries[..., self._diag_pos])
        raw = np.broadcast_to(dof_to_raw(dof, self.r), lead)[..., None]
        return np.concatenate(
            [mb, lb, np.reshape(mu, lead + (-1,)), np.reshape(lu, lead + (-1,)), raw, entries], axis=-1
        )

    def state(self, params) -> LmreState:
        p = self.unpack(params)
        return LmreState(
            MeanFieldGaussian(p["mb"], p["lb"]),
            [MeanFieldGaussian(p["mu"][g], p["lu"][g]) for g in range(self.n_groups)],
            InverseWishartFactor(float(p["dof"]), p["chol"]),
        )

    def params(self, state: LmreState) -> np.ndarray:
        return self.pack(
            state.beta.mean, state.beta.log_scale,
            np.stack([u.mean for u in state.u]), np.stack([u.log_scale for u in state.u]),
            state.D.dof, state.D.scale_chol,
        )

    def default_init(self) -> np.ndarray:
        G, r = self.n_groups, self.r
        return self.pack(
            np.zeros(self.d), np.zeros(self.d), np.zeros((G, r)), np.full((G, r), np.log(0.5)),
            self.iw_dof + G, np.linalg.cholesky(self.iw_scale),
        )

    def terminal_mean(self, params) -> np.ndarray:
        d, G, r = self.d, self.n_groups, self.r
        params = np.asarray(params)
        return params[..., : d].copy() if G == 0 else np.concatenate(
            [params[..., :d], params[..., 2 * d : 2 * d + G * r]], axis=-1
        )

    # -- ELBO -------------------------------------------------------------

    def _batch_terms(self, p, batch: Batch):
        rows = batch.rows
        x, z, g = self.X[rows], self.Z[rows], self.group[rows]
        lead = np.broadcast_shapes(p["mu"].shape[:-2], g.shape[:-1])
        idx = np.broadcast_to(g[..., None], lead + g.shape[-1:] + (self.r,))
        mu_sel = np.take_along_axis(p["mu"], idx, axis=-2)
        vu_sel = np.exp(2 * np.take_along_axis(p["lu"], idx, axis=-2))
        resid = batch.y - rowdot(x, p["mb"][..., None, :]) - rowdot(z, mu_sel)
        spread = rowdot(x**2, np.exp(2 * p["lb"])[..., None, :]) + rowdot(z**2, vu_sel)
        return x, z, g, resid, spread

    def _scale_inv(self, chol):
        chol_inv = np.linalg.inv(chol)
        return np.swapaxes(chol_inv, -1, -2) @ chol_inv

    def expected_loglik(self, params, batch: Batch):
        p = self.unpack(params)
        _, _, _, resid, spread = self._batch_terms(p, batch)
        return -0.5 * (np.log(2 * np.pi * self.noise_var) + (resid**2 + spread) / self.noise_var)

    def elbo(self, params, batch: Batch | None = None, weights=None):
        """Weighted expected log-likelihood plus all prior/entropy terms.

        With ``weights`` from :func:`lmre_rescale_weights` this is an unbiased
        estimate of the full-data ELBO.
        """
        batch = self.full_batch() if batch is None else batch
        p = self.unpack(params)
        G, r = self.n_groups, self.r
        w = default_weights(batch.y, weights, np.ndim(batch.y))
        _, _, _, resid, spread = self._batch_terms(p, batch)
        ell = -0.5 * (np.log(2 * np.pi * self.noise_var) + (resid**2 + spread) / self.noise_var)
        lik = np.sum(w * ell, axis=-1)

        dof, chol = p["dof"], p["chol"]
        prec = dof[..., None, None] * self._scale_inv(chol)
        e_logdet = chol_logdet(chol) - multi_digamma(dof / 2.0, r) - r * np.log(2.0)
        vu = np.exp(2 * p["lu"])
        quad = np.sum(np.diagonal(prec, axis1=-2, axis2=-1)[..., None, :] * vu, axis=(-2, -1)) + np.sum(
            p["mu"] * np.sum(p["mu"][..., :, None, :] * prec[..., None, :, :], axis=-1), axis=(-2, -1)
        )
        u_prior = -0.5 * G * (r * LOG_2PI + e_logdet) - 0.5 * quad
        u_entropy = np.sum(0.5 * (LOG_2PI + 1.0) + p["lu"], axis=(-2, -1))

        vb = np.exp(2 * p["lb"])
        kl_beta = np.sum(
            0.5 * (vb / self.prior_var + p["mb"] ** 2 / self.prior_var - 1.0 - np.log(vb / self.prior_var)),
            axis=-1,
        )
        kl_d = iw_kl(dof, chol, self.iw_dof, self.iw_scale)
        return lik + u_prior + u_entropy - kl_beta - kl_d

    def elbo_gradient(self, params, batch: Batch | None = None, weights=None):
        batch = self.full_batch() if batch is None else batch
        p = self.unpack(params)
        G, r, s2 = self.n_groups, self.r, self.noise_var
        w = default_weights(batch.y, weights, np.ndim(batch.y))
        x, z, g, resid, _ = self._batch_terms(p, batch)
        vb = np.exp(2 * p["lb"])
        vu = np.exp(2 * p["lu"])

        we = w * resid / s2
        g_mb = np.sum(we[..., None] * x, axis=-2) - p["mb"] / self.prior_var
        g_lb = -np.sum(w[..., None] * x**2, axis=-2) * vb / s2 - (vb / self.prior_var - 1.0)

        onehot = (g[..., None] == np.arange(G)).astype(float)
        g_mu = np.sum((onehot * we[..., None])[..., :, :, None] * z[..., :, None, :], axis=-3)
        g_lu = -np.sum((onehot * w[..., None])[..., :, :, None] * (z**2)[..., :, None, :], axis=-3) * vu / s2

        dof, chol = p["dof"], p["chol"]
        scale_inv = self._scale_inv(chol)
        prec = dof[..., None, None] * scale_inv
        g_mu = g_mu - np.sum(p["mu"][..., :, None, :] * prec[..., None, :, :], axis=-1)
        g_lu = g_lu - np.diagonal(prec, axis1=-2, axis2=-1)[..., None, :] * vu + 1.0

        # second moments of the random effects, summed over groups
        W = np.sum(vu[..., :, :, None] * np.eye(r), axis=-3) + np.sum(
            p["mu"][..., :, :, None] * p["mu"][..., :, None, :], axis=-3
        )
        tg = multi_trigamma(dof / 2.0, r)
        tr_w = np.sum(scale_inv * W, axis=(-2, -1))
        tr_s0 = np.sum(scale_inv * self.iw_scale, axis=(-2, -1))
        d_dof = 0.25 * G * tg - 0.5 * tr_w - 0.5 * (tr_s0 - r) - 0.25 * (dof - self.iw_dof) * tg
        g_raw = d_dof * special.expit(p["raw_dof"])

        g_psi = -0.5 * (G + self.iw_dof) * scale_inv[...] + 0.5 * dof[..., None, None] * (
            scale_inv @ (W + self.iw_scale) @ scale_inv
        )
        g_chol = 2.0 * g_psi @ chol
        g_entries = g_chol[..., self._tril[0], self._tril[1]]
        diag_vals = chol[..., self._tril[0][self._diag_pos], self._tril[1][self._diag_pos]]
        g_entries[..., self._diag_pos] *= diag_vals

        lead = g_mb.shape[:-1]
        return np.concatenate(
            [g_mb, g_lb, g_mu.reshape(lead + (-1,)), g_lu.reshape(lead + (-1,)), g_raw[..., None], g_entries],
            axis=-1,
        )

    # -- likelihood / joint (for MCMC and checks) -------------------------

    def log_likelihood(self, theta, datum):
        """``theta`` = (beta, u_flat); ``datum`` = (pooled row index, y)."""
        theta = np.asarray(theta, dtype=float)
        row, y = datum
        beta = theta[..., : self.d]
        u = theta[..., self.d :].reshape(theta.shape[:-1] + (self.n_groups, self.r))
        mean = rowdot(self.X[row], beta) + rowdot(self.Z[row], u[..., self.group[row], :])
        return -0.5 * (np.log(2 * np.pi * self.noise_var) + (y - mean) ** 2 / self.noise_var)

    def prior_log_density(self, theta, D):
        theta = np.asarray(theta, dtype=float)
        beta = theta[: self.d]
        u = theta[self.d :].reshape(self.n_groups, self.r)
        lp = -0.5 * np.sum(beta**2 / self.prior_var + np.log(2 * np.pi * self.prior_var))
        chol = np.linalg.cholesky(D)
        sol = np.linalg.solve(chol, u.T)
        lp += -0.5 * np.sum(sol**2) - self.n_groups * (0.5 * self.r * LOG_2PI + 0.5 * chol_logdet(chol))
        return lp + iw_log_density(D, self.iw_dof, self.iw_scale)

    def log_joint_unconstrained(self, z):
        """Log posterior density over (beta, u, log-Cholesky of D), with Jacobian."""
        d, G, r = self.d, self.n_groups, self.r
        theta = z[: d + G * r]
        entries = z[d + G * r :].copy()
        log_diag = entries[self._diag_pos].copy()
        entries[self._diag_pos] = np.exp(log_diag)
        chol = np.zeros((r, r))
        chol[self._tril] = entries
        D = chol @ chol.T
        beta = theta[:d]
        u = theta[d:].reshape(G, r)
        mean = self.X @ beta + np.sum(self.Z * u[self.group], axis=1)
        loglik = -0.5 * np.sum(np.log(2 * np.pi * self.noise_var) + (self.y - mean) ** 2 / self.noise_var)
        # |dD/dL| = 2^r prod_i L_ii^{r-i+1}; plus dL_ii/dlogL_ii = L_ii
        log_jac = r * np.log(2.0) + np.sum((r - np.arange(r) + 1) * log_diag)
        return loglik + self.prior_log_density(theta, D) + log_jac

    # -- predictive -------------------------------------------------------

    def obs_noise_dim(self) -> int:
        return 1

    def theta_noise_dim(self) -> int:
        return self.d + self.r

    def predictive_from_noise(self, params, rows, theta_noise, obs_noise):
        p = self.unpack(params)
        lead = np.shape(params)[:-1]
        g = np.broadcast_to(self.group[rows], lead)
        idx = np.broadcast_to(g[..., None, None], lead + (1, self.r))
        mu = np.take_along_axis(p["mu"], idx, axis=-2)[..., 0, :]
        su = np.exp(np.take_along_axis(p["lu"], idx, axis=-2)[..., 0, :])
        beta = p["mb"] + np.exp(p["lb"]) * theta_noise[..., : self.d]
        u = mu + su * theta_noise[..., self.d :]
        return (
            rowdot(self.X[rows], beta) + rowdot(self.Z[rows], u) + np.sqrt(self.noise_var) * obs_noise[..., 0]
        )

    def sample_predictive(self, state: LmreState, covariate, rng=None):
        """``covariate`` is a pooled row index (carries x, z and the group)."""
        rng = np.random.default_rng() if rng is None else rng
        params = self.params(state)
        noise = rng.standard_normal(self.theta_noise_dim())
        return float(self.predictive_from_noise(params, int(covariate), noise, rng.standard_normal(1)))

    def group_of_rows(self, rows):
        return self.group[rows]


def iw_log_density(D, dof, scale):
    D = np.asarray(D, dtype=float)
    r = D.shape[0]
    chol_d = np.linalg.cholesky(D)
    chol_s = np.linalg.cholesky(scale)
    d_inv = np.linalg.inv(D)
    return (
        0.5 * dof * chol_logdet(chol_s)
        - 0.5 * dof * r * np.log(2.0)
        - special.multigammaln(dof / 2.0, r)
        - 0.5 * (dof + r + 1) * chol_logdet(chol_d)
        - 0.5 * np.trace(scale @ d_inv)
    )


def lmre_rescale_weights(groups, group_counts, newest_mask=None):
    """Per-observation likelihood weights for a minibatch.

    Each sampled observation from group g gets weight ``n_g / k_g`` where
    ``n_g`` is the number of available observations in the group and ``k_g``
    the number sampled from it, making the weighted likelihood unbiased for
    the full-data term. Entries flagged in ``newest_mask`` were included
    deterministically: they get weight 1 and are removed from both counts.

    ``groups``: (..., b) ints; ``group_counts``: (..., G).
    """
    groups = np.asarray(groups)
    G = np.shape(group_counts)[-1]
    onehot = (groups[..., None] == np.arange(G)).astype(float)
    counts = np.asarray(group_counts, dtype=float)
    if newest_mask is not None:
        fixed = np.asarray(newest_mask, dtype=float)
        counts = counts - np.sum(onehot * fixed[..., None], axis=-2)
        onehot = onehot * (1.0 - fixed)[..., None]
    sampled = np.sum(onehot, axis=-2)
    ratio = np.where(sampled > 0, counts / np.maximum(sampled, 1.0), 0.0)
    w = np.sum(onehot * ratio[..., None, :], axis=-1)
    if newest_mask is not None:
        w = w + np.asarray(newest_mask, dtype=float)
    return w


def lmre_elbo(model: LmreModel, states: LmreState, batch=None, rescale_weights=None) -> float:
    """ELBO estimate on ``batch`` (pooled row indices) with per-observation weights."""
    params = model.params(states)
    if batch is None:
        return float(model.elbo(params))
    rows = np.asarray(batch, dtype=int)
    if np.any(rows < 0) or np.any(rows >= model.n_obs):
        raise ValueError("batch indices out of range")
    if rescale_weights is None:
        rescale_weights = lmre_rescale_weights(model.group[rows], model.group_sizes)
    return float(model.elbo(params, Batch(rows, model.y[rows]), rescale_weights))
