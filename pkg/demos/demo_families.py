"""Variational families: mean-field Gaussians and the inverse-Wishart factor.

Run: python demos/demo_families.py
"""

import numpy as np

from vpr.families import (InverseWishartFactor, MeanFieldGaussian, iw_expectations, iw_kl_to_prior,
                          mf_kl_to_gaussian_prior, mf_sample)

rng = np.random.default_rng(0)

# A mean-field Gaussian is a mean vector plus per-coordinate log scales.
q = MeanFieldGaussian(np.array([1.0, -2.0, 0.5]), np.log([0.3, 1.0, 2.0]))
draws = mf_sample(q, rng, 100_000)
print("MF Gaussian")
print("  sample mean ", np.round(draws.values.mean(0), 3), " target", q.mean)
print("  sample sd   ", np.round(draws.values.std(0), 3), " target", q.scale)
print("  KL to N(0, 4 I):", float(mf_kl_to_gaussian_prior(q, 4.0)))
print("  KL of N(0, I) to the N(0, I) prior:",
      float(mf_kl_to_gaussian_prior(MeanFieldGaussian(np.zeros(3), np.zeros(3)), 1.0)))

# The random-effect covariance D gets an inverse-Wishart factor. Its two
# expectations enter the mixed-model ELBO in closed form; check them by sampling.
scale = np.array([[2.0, 0.5, 0.0], [0.5, 1.5, 0.3], [0.0, 0.3, 1.0]])
qd = InverseWishartFactor.from_scale(8.0, scale)
ex = iw_expectations(qd)
D = qd.sample(rng, 20_000)
print("\nInverse-Wishart IW(8, S), r = 3")
print("  E[D^-1] closed form vs Monte Carlo, max abs diff:",
      float(np.abs(ex["mean_precision"] - np.linalg.inv(D).mean(0)).max()))
print("  E[log|D|] closed form %.4f, Monte Carlo %.4f" % (ex["mean_logdet"], np.linalg.slogdet(D)[1].mean()))
print("  KL to IW(r + 1, I):", iw_kl_to_prior(qd, 4.0, np.eye(3)))
print("  KL of the prior to itself:", iw_kl_to_prior(InverseWishartFactor.from_scale(4.0, np.eye(3)), 4.0, np.eye(3)))
