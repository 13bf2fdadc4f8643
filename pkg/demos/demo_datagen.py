"""Synthetic data generators and the CSV loader.

Run: python demos/demo_datagen.py
"""

import tempfile
from pathlib import Path

import numpy as np

from vpr.datagen import (LmreSpec, SpectrumDesignSpec, ToeplitzLogisticSpec, gen_lmre, gen_spectrum_design,
                         gen_spectrum_truth, gen_toeplitz_logistic, load_csv)

rng = np.random.default_rng(8)

# Linear regression designs with a prescribed Gram spectrum. The condition
# number grows like (d / d_ref)^alpha; beta* is held fixed across replicates.
for d in (5, 10, 20, 50):
    spec = SpectrumDesignSpec(n=3 * d, d=d)
    beta = gen_spectrum_truth(spec, np.random.default_rng(0))
    X, _, y = gen_spectrum_design(spec, rng, beta)
    ev = np.linalg.eigvalsh(X.T @ X)
    print(f"d={d:3d}  target kappa {spec.kappa:10.1f}  realised {ev[-1] / ev[0]:10.1f}  "
          f"Var(X beta*) {np.var(X @ beta):.2f}")

# Correlated logistic design: Toeplitz covariance rho^|i-j|.
X, beta, y = gen_toeplitz_logistic(ToeplitzLogisticSpec(15, 5, 0.99), rng)
print("\nToeplitz design, rho = 0.99: sample corr of columns 0 and 1 = %.3f, %d positive labels"
      % (np.corrcoef(X[:, 0], X[:, 1])[0, 1], int(y.sum())))

# Mixed-model data: group sizes 15, 25, 12, 30.
ds = gen_lmre(LmreSpec(), rng)
print("LMRE groups:", [len(g[2]) for g in ds.groups], " truth vector length", ds.truth.size)

# CSV loading with a train/test split and training-set standardisation.
with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "toy.csv"
    Z = rng.standard_normal((60, 3)) * [1.0, 5.0, 0.1] + [0.0, 10.0, -3.0]
    lab = (Z[:, 0] > 0).astype(int)
    path.write_text("a,b,c,label\n" + "\n".join(",".join(map(str, r)) + f",{t}" for r, t in zip(Z, lab)))
    train, test = load_csv(path, "label", standardize=True, split=(40, 0))
    print("CSV: train", train.X.shape, "test", test.X.shape, "train means", np.round(train.X.mean(0), 12),
          "features", train.feature_names)
