"""The four models: ELBOs, closed-form mean-field fits and why MF-VI is overconfident.

Run: python demos/demo_models.py
"""

import numpy as np

from vpr.datagen import (LmreSpec, SpectrumDesignSpec, ToeplitzLogisticSpec, gen_lmre, gen_spectrum_design,
                         gen_toeplitz_logistic)
from vpr.models import (GaussianLocationModel, LinearRegressionModel, LmreModel, LogisticRegressionModel,
                        linreg_closed_form, location_closed_form)
from vpr.reference import exact_posterior_linreg, exact_posterior_location
from vpr.resampler import fit_mean_field

rng = np.random.default_rng(1)

# Location model with correlated observation noise: the MF fit recovers the
# posterior mean but its variances are the inverse diagonal of the precision,
# smaller than the posterior's marginal variances.
A = np.array([[1.0, 0.8], [0.8, 1.0]])
y = rng.multivariate_normal([0.5, -0.5], A, size=10)
loc = GaussianLocationModel(A, y)
mf, post = location_closed_form(loc, y), exact_posterior_location(loc)
print("location model, n = 10, corr(A) = 0.8")
print("  MF mean    ", np.round(mf.mean, 4), " exact mean", np.round(post.mean, 4))
print("  MF sd      ", np.round(mf.scale, 4), " exact sd  ", np.round(np.sqrt(np.diag(post.cov)), 4))

# Linear regression with an ill-conditioned Gram matrix: same story, stronger.
spec = SpectrumDesignSpec(n=30, d=10)
X, beta, yl = gen_spectrum_design(spec, rng)
lin = LinearRegressionModel(X, 1.0, 1000.0, yl)
q, exact = linreg_closed_form(lin, yl), exact_posterior_linreg(lin)
ratio = q.scale / np.sqrt(np.diag(exact.cov))
print(f"\nlinear regression d=10, n=30, cond(X^T X) = {spec.kappa:.0f}")
print("  MF sd / exact sd per coordinate:", np.round(ratio, 2))
print("  ELBO at the MF optimum %.3f  (<= log evidence)" % lin.elbo(lin.params(q)))

# Logistic regression uses Gauss-Hermite quadrature for E_q[log sigmoid].
Xb, _, yb = gen_toeplitz_logistic(ToeplitzLogisticSpec(15, 5, 0.99), rng)
logit = LogisticRegressionModel(Xb, yb, prior_scale=10.0, quad_nodes=20)
p0, _ = fit_mean_field(logit, steps=3000)
print("\nlogistic regression n=15, d=5, rho=0.99")
print("  MF-VI means :", np.round(p0[:5], 3))
print("  MF-VI sds   :", np.round(np.exp(p0[5:]), 3))
print("  ELBO        : %.4f" % logit.elbo(p0))

# Mixed model: fixed effects, per-group random effects, inverse-Wishart on D.
data = gen_lmre(LmreSpec(), rng)
lm = LmreModel(data.groups, noise_var=1.0, beta_prior_scale=1.0)
pl, _ = fit_mean_field(lm, steps=3000, step_size=0.01)
parts = lm.unpack(pl)
print("\nlinear mixed model, d = r = 3, G = 4, n = 82")
print("  beta true   :", np.round(data.beta_true, 3))
print("  MF beta mean:", np.round(parts["mb"], 3), " sd", np.round(np.exp(parts["lb"]), 3))
print("  ELBO        : %.3f" % lm.elbo(pl))
