"""Fused per-path inner loops for the scalable engine (numba).

These mirror :func:`vpr.optimizer.inner_steps` for the logistic and LMRE
models: same Floyd minibatch selection from the same uniforms, same
unbiasing weights, same Adam update. Each path is processed by its own loop,
so results do not depend on how paths are chunked. When numba is missing the
engine falls back to the numpy implementation.
"""

from __future__ import annotations

import math

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

ENABLED = numba is not None


def _jit(fn):
    return numba.njit(cache=True, fastmath=False)(fn) if ENABLED else fn


@_jit
def _floyd(u, population, k, out, mark):
    # distinct indices in [0, population); mark must be all-zero on entry
    for j in range(k):
        top = population - k + j
        t = int(math.floor(u[j] * (top + 1)))
        if t > top:
            t = top
        if mark[t]:
            t = top
        mark[t] = 1
        out[j] = t
    for j in range(k):
        mark[out[j]] = 0


@_jit
def _select(u, M, b, include_newest, sel, w, newest, mark):
    """Fill sel/w/newest for one path; returns the batch size used."""
    if b >= M:
        for j in range(M):
            sel[j] = j
            w[j] = 1.0
            newest[j] = include_newest and j == M - 1
        return M
    if include_newest:
        k = b - 1
        _floyd(u, M - 1, k, sel, mark)
        for j in range(k):
            w[j] = (M - 1) / k
            newest[j] = False
        sel[k] = M - 1
        w[k] = 1.0
        newest[k] = True
        return b
    _floyd(u, M, b, sel, mark)
    for j in range(b):
        w[j] = M / b
        newest[j] = False
    return b


@_jit
def _adam(params, grad, m1, m2, t, lr, b1, b2, eps):
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for k in range(params.shape[0]):
        m1[k] = b1 * m1[k] + (1.0 - b1) * grad[k]
        m2[k] = b2 * m2[k] + (1.0 - b2) * grad[k] * grad[k]
        params[k] += lr * (m1[k] / c1) / (math.sqrt(m2[k] / c2) + eps)


@_jit
def _finite(grad):
    for k in range(grad.shape[0]):
        if not math.isfinite(grad[k]):
            return False
    return True


# ---------------------------------------------------------------------------
# logistic


@_jit
def logistic_inner(params, m1, m2, t0, lr, b1, b2, eps, design, labels_buf, rows_buf, M, uniforms,
                   include_newest, nodes, qweights, symmetric, prior_var, bad):
    C, P = params.shape
    d = P // 2
    S = uniforms.shape[1]
    b = uniforms.shape[2]
    cap = max(b, M)
    sel = np.empty(cap, np.int64)
    w = np.empty(cap)
    newest = np.empty(cap, np.bool_)
    mark = np.zeros(M, np.uint8)
    grad = np.empty(P)
    var = np.empty(d)
    for c in range(C):
        if bad[c]:
            continue
        for s in range(S):
            nb = _select(uniforms[c, s], M, b, include_newest, sel, w, newest, mark)
            for j in range(d):
                var[j] = math.exp(2.0 * params[c, d + j])
                grad[j] = 0.0
                grad[d + j] = 0.0
            for k in range(nb):
                row = rows_buf[c, sel[k]]
                sign = 2.0 * labels_buf[c, sel[k]] - 1.0
                mu = 0.0
                v = 0.0
                for j in range(d):
                    x = design[row, j]
                    mu += x * params[c, j]
                    v += x * x * var[j]
                sd = math.sqrt(v)
                a = 0.0
                bq = 0.0
                Q = nodes.shape[0]
                if symmetric and abs(mu) + sd * nodes[Q - 1] < 700.0:
                    # nodes come in +-x pairs: exp(s(mu +- sd x)) = e_mu * e^{+-s sd x}
                    e_mu = math.exp(sign * mu)
                    for q in range(Q // 2):
                        hi = Q - 1 - q
                        e = math.exp(sign * sd * nodes[hi])
                        sp = 1.0 / (1.0 + e_mu * e)
                        sm = 1.0 / (1.0 + e_mu / e)
                        a += qweights[hi] * (sp + sm)
                        bq += qweights[hi] * nodes[hi] * (sp - sm)
                    if Q % 2:
                        a += qweights[Q // 2] / (1.0 + e_mu)
                else:
                    for q in range(Q):
                        eta = mu + sd * nodes[q]
                        sl = 1.0 / (1.0 + math.exp(sign * eta))
                        a += qweights[q] * sl
                        bq += qweights[q] * nodes[q] * sl
                dmu = sign * a * w[k]
                ratio = sign * bq / sd * w[k] if sd > 1e-300 else 0.0
                for j in range(d):
                    x = design[row, j]
                    grad[j] += dmu * x
                    grad[d + j] += ratio * x * x * var[j]
            for j in range(d):
                grad[j] -= params[c, j] / prior_var
                grad[d + j] -= var[j] / prior_var - 1.0
            if not _finite(grad):
                bad[c] = True
                break
            _adam(params[c], grad, m1[c], m2[c], t0 + s + 1, lr, b1, b2, eps)


# ---------------------------------------------------------------------------
# LMRE


@_jit
def trigamma(x):
    """Recurrence up to x >= 10, then the asymptotic series."""
    acc = 0.0
    while x < 10.0:
        acc += 1.0 / (x * x)
        x += 1.0
    x2 = 1.0 / (x * x)
    series = 1.0 / x + 0.5 * x2 + (1.0 / x) * x2 * (
        1.0 / 6 + x2 * (-1.0 / 30 + x2 * (1.0 / 42 + x2 * (-1.0 / 30 + x2 * (5.0 / 66 + x2 * (-691.0 / 2730)))))
    )
    return acc + series


@_jit
def lmre_inner(params, m1, m2, t0, lr, b1, b2, eps, X, Z, group, y_buf, rows_buf, M, uniforms,
               include_newest, counts, noise_var, prior_var, nu0, S0, tril_i, tril_j, bad):
    C, P = params.shape
    d = X.shape[1]
    r = Z.shape[1]
    G = counts.shape[1]
    S = uniforms.shape[1]
    b = uniforms.shape[2]
    n_tri = tril_i.shape[0]
    o_lb = d
    o_mu = 2 * d
    o_lu = 2 * d + G * r
    o_raw = 2 * d + 2 * G * r
    o_ch = o_raw + 1
    cap = max(b, M)
    sel = np.empty(cap, np.int64)
    w = np.empty(cap)
    newest = np.empty(cap, np.bool_)
    mark = np.zeros(M, np.uint8)
    grad = np.empty(P)
    acc_b = np.empty(d)
    acc_u = np.empty((G, r))
    kg = np.empty(G)
    ng = np.empty(G)
    L = np.zeros((r, r))
    Li = np.zeros((r, r))
    Pi = np.zeros((r, r))
    W = np.zeros((r, r))
    T1 = np.zeros((r, r))
    Gp = np.zeros((r, r))
    for c in range(C):
        if bad[c]:
            continue
        for s in range(S):
            nb = _select(uniforms[c, s], M, b, include_newest, sel, w, newest, mark)
            # per-group reweighting n_g / k_g (the forced newest datum keeps weight 1)
            for g in range(G):
                kg[g] = 0.0
                ng[g] = counts[c, g]
            for k in range(nb):
                g = group[rows_buf[c, sel[k]]]
                if newest[k]:
                    ng[g] -= 1.0
                else:
                    kg[g] += 1.0
            for k in range(nb):
                if newest[k]:
                    w[k] = 1.0
                else:
                    g = group[rows_buf[c, sel[k]]]
                    w[k] = ng[g] / kg[g]
            for q in range(P):
                grad[q] = 0.0
            for j in range(d):
                acc_b[j] = 0.0
            for g in range(G):
                for j in range(r):
                    acc_u[g, j] = 0.0
            for k in range(nb):
                row = rows_buf[c, sel[k]]
                g = group[row]
                resid = y_buf[c, sel[k]]
                for j in range(d):
                    resid -= X[row, j] * params[c, j]
                for j in range(r):
                    resid -= Z[row, j] * params[c, o_mu + g * r + j]
                we = w[k] * resid / noise_var
                for j in range(d):
                    grad[j] += we * X[row, j]
                    acc_b[j] += w[k] * X[row, j] * X[row, j]
                for j in range(r):
                    grad[o_mu + g * r + j] += we * Z[row, j]
                    acc_u[g, j] += w[k] * Z[row, j] * Z[row, j]
            for j in range(d):
                vb = math.exp(2.0 * params[c, o_lb + j])
                grad[j] -= params[c, j] / prior_var
                grad[o_lb + j] = -acc_b[j] * vb / noise_var - (vb / prior_var - 1.0)
            # inverse-Wishart block
            raw = params[c, o_raw]
            dof = max(raw, 0.0) + math.log1p(math.exp(-abs(raw))) + r - 1 + 1e-3
            for a in range(r):
                for e in range(r):
                    L[a, e] = 0.0
            for q in range(n_tri):
                val = params[c, o_ch + q]
                L[tril_i[q], tril_j[q]] = math.exp(val) if tril_i[q] == tril_j[q] else val
            # Li = L^{-1} by forward substitution
            for e in range(r):
                for a in range(r):
                    acc = 1.0 if a == e else 0.0
                    for k2 in range(a):
                        acc -= L[a, k2] * Li[k2, e]
                    Li[a, e] = acc / L[a, a]
            for a in range(r):
                for e in range(r):
                    acc = 0.0
                    for k2 in range(r):
                        acc += Li[k2, a] * Li[k2, e]
                    Pi[a, e] = acc
            for a in range(r):
                for e in range(r):
                    W[a, e] = S0[a, e]
            trW = 0.0
            trS0 = 0.0
            for g in range(G):
                base = o_mu + g * r
                for a in range(r):
                    vu = math.exp(2.0 * params[c, o_lu + g * r + a])
                    W[a, a] += vu
                    pm = 0.0
                    for e in range(r):
                        W[a, e] += params[c, base + a] * params[c, base + e]
                        pm += Pi[a, e] * params[c, base + e]
                    grad[base + a] -= dof * pm
                    grad[o_lu + g * r + a] = -acc_u[g, a] * vu / noise_var - dof * Pi[a, a] * vu + 1.0
            for a in range(r):
                for e in range(r):
                    trW += Pi[a, e] * (W[a, e] - S0[a, e])
                    trS0 += Pi[a, e] * S0[a, e]
            tg = 0.0
            for k2 in range(r):
                tg += trigamma(0.5 * dof - 0.5 * k2)
            d_dof = 0.25 * G * tg - 0.5 * trW - 0.5 * (trS0 - r) - 0.25 * (dof - nu0) * tg
            grad[o_raw] = d_dof / (1.0 + math.exp(-raw))
            # dF/dPsi = -((G + nu0)/2) Psi^-1 + (dof/2) Psi^-1 (W_u + S0) Psi^-1
            for a in range(r):
                for e in range(r):
                    acc = 0.0
                    for k2 in range(r):
                        acc += W[a, k2] * Pi[k2, e]
                    T1[a, e] = acc
            for a in range(r):
                for e in range(r):
                    acc = 0.0
                    for k2 in range(r):
                        acc += Pi[a, k2] * T1[k2, e]
                    Gp[a, e] = -0.5 * (G + nu0) * Pi[a, e] + 0.5 * dof * acc
            for q in range(n_tri):
                a = tril_i[q]
                e = tril_j[q]
                acc = 0.0
                for k2 in range(r):
                    acc += Gp[a, k2] * L[k2, e]
                acc *= 2.0
                if a == e:
                    acc *= L[a, a]
                grad[o_ch + q] = acc
            if not _finite(grad):
                bad[c] = True
                break
            _adam(params[c], grad, m1[c], m2[c], t0 + s + 1, lr, b1, b2, eps)


def _symmetric(nodes, weights) -> bool:
    return bool(np.allclose(nodes, -nodes[::-1], rtol=0, atol=1e-14) and np.allclose(weights, weights[::-1]))


def accelerated_inner(model, params, adam, cfg, available, rbuf, ybuf, uniforms, counts):
    """Run the fused inner loop if one exists for ``model``; else return None.

    Returns ``(params, adam, bad_rows)``.
    """
    if not ENABLED:
        return None
    from .models.lmre import LmreModel
    from .models.logistic import LogisticRegressionModel
    from .optimizer import AdamState

    if cfg.reset_moments:
        adam = adam.reset()
    p = np.ascontiguousarray(params, dtype=float).copy()
    m1 = np.ascontiguousarray(adam.first_moment, dtype=float).copy()
    m2 = np.ascontiguousarray(adam.second_moment, dtype=float).copy()
    bad = np.zeros(p.shape[0], np.bool_)
    u = np.ascontiguousarray(uniforms)
    consts = (adam.step_count, adam.step_size, adam.beta1, adam.beta2, adam.epsilon)
    if type(model) is LogisticRegressionModel:
        logistic_inner(p, m1, m2, *consts, model.design, ybuf, rbuf, int(available), u,
                       bool(cfg.include_newest), model.nodes, model.weights, _symmetric(model.nodes, model.weights),
                       model.prior_var, bad)
    elif type(model) is LmreModel:
        ti, tj = model._tril
        lmre_inner(p, m1, m2, *consts, model.X, model.Z, model.group, ybuf, rbuf, int(available), u,
                   bool(cfg.include_newest), counts, model.noise_var, model.prior_var, model.iw_dof,
                   model.iw_scale, np.asarray(ti, np.int64), np.asarray(tj, np.int64), bad)
    else:
        return None
    new_adam = AdamState(adam.step_count + cfg.steps, m1, m2, adam.step_size, adam.beta1, adam.beta2, adam.epsilon)
    return p, new_adam, np.nonzero(bad)[0]
