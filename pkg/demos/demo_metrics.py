"""Posterior-quality metrics: coverage, MMD, correlations and NLPD.

Run: python demos/demo_metrics.py
"""

import numpy as np

from vpr.datagen import SpectrumDesignSpec, gen_spectrum_design
from vpr.metrics import marginal_coverage, max_offdiag_gap, mmd_permutation_test, mmd_squared, nlpd, pearson_matrix
from vpr.models import LinearRegressionModel, linreg_closed_form
from vpr.reference import exact_posterior_linreg
from vpr.resampler import ResamplingConfig, run_ensemble

rng = np.random.default_rng(7)
spec = SpectrumDesignSpec(n=30, d=10)
X, beta, y = gen_spectrum_design(spec, rng)
model = LinearRegressionModel(X, 1.0, 1000.0, y)
exact = exact_posterior_linreg(model).sample(rng, 2000)
q = linreg_closed_form(model, y)
mf = q.mean + q.scale * rng.standard_normal((2000, 10))
vpr = run_ensemble(model, None, ResamplingConfig(horizon=3000, paths=2000, seed=0), "ideal").samples.values

print("linear regression d=10, n=30 (one dataset)")
for name, s in (("exact", exact), ("MF-VI", mf), ("VPR", vpr)):
    cov = marginal_coverage(s, beta, 0.9)[1]
    mmd = mmd_squared(s, exact, whitening_reference=exact) if name != "exact" else 0.0
    gap = max_offdiag_gap(pearson_matrix(s), pearson_matrix(exact))
    print(f"  {name:6s} 90% coverage {cov:.2f}   MMD^2 to exact {mmd:8.5f}   max corr gap {gap:.3f}")

stat, p = mmd_permutation_test(vpr, exact, permutations=200, seed=1)
print("  permutation test VPR vs exact: MMD^2 %.2e, p = %.2f" % (stat, p))
stat, p = mmd_permutation_test(mf, exact, permutations=200, seed=1)
print("  permutation test MF  vs exact: MMD^2 %.2e, p = %.3f" % (stat, p))

# NLPD on fresh data from the same design distribution.
Xt, _, yt = gen_spectrum_design(spec, rng, beta)
test = list(zip(Xt, yt))
for name, s in (("exact", exact), ("MF-VI", mf), ("VPR", vpr)):
    print(f"  {name:6s} NLPD {nlpd(s, model, test):.4f}")
