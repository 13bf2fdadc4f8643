import numpy as np
import pytest
from scipy import stats

from vpr.datagen import SpectrumDesignSpec, gen_spectrum_design
from vpr.models import GaussianLocationModel, LinearRegressionModel
from vpr.models.linreg import linreg_closed_form
from vpr.models.location import location_closed_form
from vpr.reference import (GaussianPosterior, adaptive_rwm, effective_sample_size, exact_posterior_linreg,
                           exact_posterior_location, kld_gaussians, mf_location_kld, min_ess, scale_decrement,
                           split_rhat, vpr_limit_covariance, vpr_limit_law)


def random_spd(rng, p):
    q, _ = np.linalg.qr(rng.standard_normal((p, p)))
    return (q * rng.uniform(0.3, 3.0, p)) @ q.T


def sym(m):
    return 0.5 * (m + m.T)


# -- exact posteriors ------------------------------------------------------------------

def test_location_prior_when_no_data():
    post = exact_posterior_location(GaussianLocationModel(np.eye(2)), np.zeros((0, 2)))
    assert np.allclose(post.mean, 0) and np.allclose(post.cov, np.eye(2))


def test_location_diagonal_precision():
    A = np.diag([0.5, 2.0])
    post = exact_posterior_location(GaussianLocationModel(A), np.ones((4, 2)))
    assert np.allclose(np.diag(post.cov), 1 / (1 + 4 / np.diag(A)))
    assert post.cov[0, 1] == 0


def test_location_matches_sequential_updates(rng):
    A = sym(random_spd(rng, 3))
    y = rng.standard_normal((8, 3))
    # oracle: one-observation-at-a-time conjugate updates (Kalman form)
    m, S = np.zeros(3), np.eye(3)
    for obs in y:
        K = S @ np.linalg.inv(S + A)
        m, S = m + K @ (obs - m), S - K @ S
    post = exact_posterior_location(GaussianLocationModel(A), y)
    assert np.allclose(post.mean, m, atol=1e-12) and np.allclose(post.cov, sym(S), atol=1e-12)


def test_linreg_scalar_hand_formula():
    model = LinearRegressionModel(np.array([[2.0]]), 0.5, 3.0)
    post = exact_posterior_linreg(model, np.array([1.0]))
    prec = 4 / 0.5 + 1 / 9
    assert post.cov[0, 0] == pytest.approx(1 / prec, rel=1e-14)
    assert post.mean[0] == pytest.approx(2 * 1.0 / 0.5 / prec, rel=1e-14)


def test_linreg_mean_field_relationship(rng):
    X = rng.standard_normal((10, 3)) @ np.array([[1, 0.8, 0], [0, 1, 0.5], [0, 0, 1]])
    model = LinearRegressionModel(X, 1.0, 2.0, rng.standard_normal(10))
    post = exact_posterior_linreg(model)
    q = linreg_closed_form(model, model.responses)
    prec = np.linalg.inv(post.cov)
    assert np.allclose(q.mean, post.mean, atol=1e-12)
    assert np.allclose(q.variance, 1 / np.diag(prec), rtol=1e-10)


@pytest.mark.parametrize("d", [5, 10, 20])
def test_linreg_precision_condition_number_follows_schedule(d):
    spec = SpectrumDesignSpec(n=3 * d, d=d)
    X, _, y = gen_spectrum_design(spec, np.random.default_rng(d))
    post = exact_posterior_linreg(LinearRegressionModel(X, 1.0, 1000.0, y))
    assert np.linalg.cond(np.linalg.inv(post.cov)) == pytest.approx(spec.kappa, rel=0.10)


def test_gaussian_posterior_validation():
    with pytest.raises(ValueError):
        GaussianPosterior([0.0, 0.0], [[1.0, 0.5], [0.4, 1.0]])
    with pytest.raises(ValueError):
        GaussianPosterior([0.0, 0.0], [[1.0, 2.0], [2.0, 1.0]])


# -- limiting covariance --------------------------------------------------------------------

def brute_force_series(B, n, T):
    """Direct sum of K_j (A + S_{j-1}) K_j, step by step."""
    p = B.shape[0]
    A = np.linalg.inv(B)
    V = np.zeros((p, p))
    for j in range(1, T + 1):
        sig = np.linalg.inv(np.eye(p) + (n + j) * B)
        K = sig @ B
        S = np.diag(1 / np.diag(np.eye(p) + (n + j - 1) * B))
        V += K @ (A + S) @ K.T
    return V


def test_series_matches_brute_force(rng):
    A = random_spd(rng, 3)
    model = GaussianLocationModel(sym(A))
    V = vpr_limit_covariance(model, 10, 300)["V_partial"]
    assert np.allclose(V, brute_force_series(model.precision, 10, 300), rtol=1e-10, atol=1e-13)


def test_series_diagonal_precision_has_no_correction():
    model = GaussianLocationModel(np.diag([0.5, 1.0, 3.0]))
    out = vpr_limit_covariance(model, 10, 777)
    sig = lambda m: np.linalg.inv(np.eye(3) + m * model.precision)
    assert np.allclose(out["V_partial"], sig(10) - sig(787), rtol=0, atol=1e-15)


def test_series_increasing_and_tail_bounded(rng):
    model = GaussianLocationModel(sym(random_spd(rng, 3)))
    prev = vpr_limit_covariance(model, 10, 50)
    for T in (100, 200, 400, 800, 3200):
        cur = vpr_limit_covariance(model, 10, T)
        gap = cur["V_partial"] - prev["V_partial"]
        assert np.linalg.eigvalsh(gap).min() >= -1e-14
        assert np.linalg.norm(gap, 2) <= prev["tail_bound"]
        prev = cur


def test_series_converges_under_doubling(rng):
    # Sigma_0 - Sigma_T is closed form; the doubling criterion applies to the correction E_T
    model = GaussianLocationModel(sym(random_spd(rng, 3)))
    sig = lambda m: np.linalg.inv(np.eye(3) + m * model.precision)

    def correction(T):
        out = vpr_limit_covariance(model, 10, T)
        return out["V_partial"] - (sig(10) - sig(10 + T)), out

    T = 100
    E, _ = correction(T)
    while True:
        T *= 2
        E_next, out = correction(T)
        if np.abs(E_next - E).max() < 1e-10:
            break
        E = E_next
        assert T < 2**24
    limit = sig(10) + E_next
    assert np.linalg.norm(limit - out["V_partial"], 2) <= out["tail_bound"]
    assert np.allclose(vpr_limit_law(model, np.zeros((10, 3))).cov, limit, atol=1e-9)


def test_series_rejects_zero_truncation():
    with pytest.raises(ValueError):
        vpr_limit_covariance(GaussianLocationModel(np.eye(2)), 10, 0)


def test_scale_decrement_exact(rng):
    model = GaussianLocationModel(sym(random_spd(rng, 3)))
    i = np.arange(0, 50)
    s2 = lambda k: 1 / np.diag(np.eye(3) + (10 + k) * model.precision)
    direct = np.array([s2(k + 1) - s2(k) for k in i])
    assert np.allclose(scale_decrement(model, 10, i), direct, rtol=1e-12, atol=1e-15)


# -- KL divergences -----------------------------------------------------------------------

def test_kld_zero_for_identical():
    p = GaussianPosterior([1.0, 2.0], [[2.0, 0.3], [0.3, 1.0]])
    assert abs(kld_gaussians(p, p)) < 1e-14


def test_kld_asymmetric():
    p = GaussianPosterior([0.0, 0.0], np.diag([1.0, 9.0]))
    q = GaussianPosterior([1.0, 0.0], np.diag([4.0, 0.5]))
    assert abs(kld_gaussians(p, q) - kld_gaussians(q, p)) > 0.1


def test_kld_matches_monte_carlo(rng):
    p = GaussianPosterior([0.3, -0.2, 1.0], random_spd(rng, 3))
    q = GaussianPosterior([0.0, 0.5, 0.0], random_spd(rng, 3))
    x = p.sample(rng, 10**6)
    terms = p.log_density(x) - q.log_density(x)
    assert abs(terms.mean() - kld_gaussians(p, q)) < 3 * terms.std() / 1e3


def test_mf_kld_closed_form_for_mean_field_fit(rng):
    for _ in range(20):
        model = GaussianLocationModel(sym(random_spd(rng, 3)))
        n = int(rng.integers(1, 500))
        y = rng.standard_normal((n, 3))
        q = location_closed_form(model, y)
        kl = kld_gaussians(GaussianPosterior(q.mean, np.diag(q.variance)), exact_posterior_location(model, y))
        assert kl == pytest.approx(mf_location_kld(model.precision, n), abs=1e-10)


def test_mf_kld_limit_is_approached(rng):
    B = sym(random_spd(rng, 3))
    vals = [mf_location_kld(B, n) for n in (10, 100, 1000, 10_000)]
    assert np.all(np.diff(np.abs(np.diff(vals))) < 0)
    limit = mf_location_kld(B, np.inf)
    assert limit > 0
    assert vals[-1] == pytest.approx(limit, rel=0.01)


def test_limit_law_kld_decays_like_inverse_square():
    rng = np.random.default_rng(0)
    model = GaussianLocationModel(sym(random_spd(rng, 3)))
    ns = np.array([10, 20, 50, 100, 200, 500, 1000])
    kl = []
    for n in ns:
        y = rng.standard_normal((n, 3))
        post = exact_posterior_location(model, y)
        kl.append(kld_gaussians(vpr_limit_law(model, y), post))
    slope = np.polyfit(np.log(ns), np.log(kl), 1)[0]
    assert -2.3 <= slope <= -1.7


# -- MCMC ----------------------------------------------------------------------------------------

def _ess_adjusted_check(draws, mean, cov, k=5.0):
    ess = np.array([effective_sample_size(draws[:, j]) for j in range(draws.shape[1])])
    sd = np.sqrt(np.diag(cov))
    assert np.all(np.abs(draws.mean(0) - mean) < k * sd / np.sqrt(ess))
    # sample variance: se approx sd^2 sqrt(2 / ess)
    assert np.all(np.abs(draws.var(0) - sd**2) < k * sd**2 * np.sqrt(2 / ess))


def test_rwm_standard_gaussian():
    target = stats.multivariate_normal(np.zeros(2), np.eye(2))
    chain = adaptive_rwm(target.logpdf, np.array([3.0, -3.0]), 5000, 40000, np.random.default_rng(1))
    _ess_adjusted_check(chain.draws, np.zeros(2), np.eye(2))
    assert 0.1 < chain.acceptance_rate < 0.5
    assert chain.acceptance_rate == pytest.approx(chain.accepted.mean())


def test_rwm_linreg_posterior():
    rng = np.random.default_rng(4)
    X = rng.standard_normal((20, 3)) @ np.array([[1, 0.9, 0], [0, 1, 0.9], [0, 0, 1]])
    model = LinearRegressionModel(X, 1.0, 5.0, X @ [1.0, -0.5, 0.2] + rng.standard_normal(20))
    post = exact_posterior_linreg(model)
    target = lambda b: float(np.sum(model.log_likelihood(b, (X, model.responses))) + model.prior_log_density(b))
    chain = adaptive_rwm(target, np.zeros(3), 5000, 40000, np.random.default_rng(5))
    _ess_adjusted_check(chain.draws, post.mean, post.cov)


def test_rwm_deterministic_given_seed():
    f = lambda x: -0.5 * float(x @ x)
    a = adaptive_rwm(f, np.zeros(2), 300, 200, np.random.default_rng(9))
    b = adaptive_rwm(f, np.zeros(2), 300, 200, np.random.default_rng(9))
    assert np.array_equal(a.draws, b.draws)


def test_rwm_thinning_keeps_requested_draws():
    chain = adaptive_rwm(lambda x: -0.5 * float(x @ x), np.zeros(2), 300, 100, np.random.default_rng(0), thin=5)
    assert chain.draws.shape == (100, 2) and chain.accepted.size == 500


def test_rwm_errors():
    with pytest.raises(ValueError):
        adaptive_rwm(lambda x: -np.inf, np.zeros(2), 10, 10, np.random.default_rng(0))
    spike = lambda x: 0.0 if np.all(x == 0) else -np.inf
    with pytest.raises(RuntimeError, match="no proposal accepted"):
        adaptive_rwm(spike, np.zeros(2), 200, 10, np.random.default_rng(0))


def test_ess_iid():
    x = np.random.default_rng(0).standard_normal(10_000)
    assert effective_sample_size(x) == pytest.approx(10_000, rel=0.15)


def test_ess_ar1():
    rng = np.random.default_rng(1)
    phi, T = 0.9, 100_000
    e = rng.standard_normal(T)
    x = np.empty(T)
    x[0] = e[0] / np.sqrt(1 - phi**2)
    for t in range(1, T):
        x[t] = phi * x[t - 1] + e[t]
    assert effective_sample_size(x) / T == pytest.approx((1 - phi) / (1 + phi), rel=0.25)


def test_ess_bounds_and_constant_series():
    x = np.random.default_rng(3).standard_normal(500)
    assert 0 < effective_sample_size(x) <= 500
    with pytest.raises(ValueError, match="constant"):
        effective_sample_size(np.ones(100))
    assert min_ess(np.column_stack([x, x[::-1]])) > 0


def test_split_rhat_near_one_for_iid_chains():
    c = np.random.default_rng(2).standard_normal((4, 2000))
    assert split_rhat(c) == pytest.approx(1.0, abs=0.01)
    shifted = c + np.arange(4)[:, None]
    assert split_rhat(shifted) > 1.1
