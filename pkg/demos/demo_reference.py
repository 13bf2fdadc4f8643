"""Reference posteriors: the limit law of ideal VPR and the MCMC baseline.

Run: python demos/demo_reference.py
"""

import numpy as np

from vpr.datagen import ToeplitzLogisticSpec, gen_toeplitz_logistic
from vpr.models import GaussianLocationModel, LogisticRegressionModel
from vpr.reference import (adaptive_rwm, exact_posterior_location, kld_gaussians, mf_location_kld, min_ess,
                           split_rhat, vpr_limit_law)

# KL to the exact posterior: MF-VI keeps a positive gap as n grows, the VPR
# limit law closes it at rate n^-2.
B = np.array([[2.0, 0.9, -0.5], [0.9, 1.5, 0.6], [-0.5, 0.6, 1.2]])
model = GaussianLocationModel(np.linalg.inv(B))
print("   n    KL(MF)      KL(VPR limit)")
ns, kv = [10, 20, 50, 100, 200, 500, 1000], []
for n in ns:
    zeros = np.zeros((n, 3))
    kv.append(kld_gaussians(vpr_limit_law(model, zeros), exact_posterior_location(model, zeros)))
    print(f"{n:5d}  {mf_location_kld(model.precision, n):.3e}   {kv[-1]:.3e}")
print("MF limit as n -> inf: %.4f" % mf_location_kld(model.precision, np.inf))
print("VPR log-log slope: %.2f" % np.polyfit(np.log(ns), np.log(kv), 1)[0])

# Adaptive random-walk Metropolis as the gold standard for logistic regression.
X, _, y = gen_toeplitz_logistic(ToeplitzLogisticSpec(15, 5, 0.99), np.random.default_rng(6))
logit = LogisticRegressionModel(X, y, 10.0)
chains = [adaptive_rwm(logit.log_joint, np.zeros(5), 5000, 2000, np.random.default_rng(s), thin=5)
          for s in range(2)]
draws = np.stack([c.draws for c in chains])
print("\nRWM on logistic n=15, d=5: acceptance %.3f, min ESS %.0f, max split-Rhat %.3f"
      % (chains[0].acceptance_rate, min_ess(chains[0].draws), np.max(split_rhat(draws))))
print("posterior corr(beta0, beta1) = %.3f" % np.corrcoef(chains[0].draws, rowvar=False)[0, 1])
