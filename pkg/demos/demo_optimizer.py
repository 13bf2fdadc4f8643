"""Adam and unbiased minibatches, the building blocks of the scalable engine.

Run: python demos/demo_optimizer.py
"""

import numpy as np

from vpr.datagen import ToeplitzLogisticSpec, gen_toeplitz_logistic
from vpr.models import Batch, LogisticRegressionModel
from vpr.optimizer import AdamState, InnerLoopConfig, adam_maximize, draw_minibatch, inner_update

rng = np.random.default_rng(2)
X, _, y = gen_toeplitz_logistic(ToeplitzLogisticSpec(15, 5, 0.99), rng)
model = LogisticRegressionModel(X, y)

# Full-batch Adam on the ELBO.
p = np.zeros(10)
for block in range(5):
    p, state = adam_maximize(model.elbo_gradient, p, 0.05, 1000, None if block == 0 else state)
    print(f"after {1000 * (block + 1):5d} steps  ELBO = {model.elbo(p):.6f}  |grad| = "
          f"{np.linalg.norm(model.elbo_gradient(p)):.2e}")

# Minibatches are drawn without replacement (Floyd's algorithm) and reweighted
# so the weighted log-likelihood sum is unbiased for the full-data sum.
full = model.full_batch()
target = float(np.sum(model.expected_loglik(p, full)))
u = rng.random((200_000, 6))
for newest in (False, True):
    sel, w, _ = draw_minibatch(u, 15, 6, include_newest=newest)
    ll = model.expected_loglik(p, full)[sel]
    est = np.sum(w * ll, axis=1)
    print(f"include_newest={newest!s:5}: mean weighted batch sum {est.mean():.4f} vs full {target:.4f} "
          f"(se {est.std() / np.sqrt(len(est)):.4f})")

# One resampling step's inner loop: S Adam steps on minibatches, warm-started.
adam = AdamState.zeros(p.shape, 0.05)
state = model.state(p)
cfg = InnerLoopConfig(steps=10, batch_size=6, include_newest=True)
new_state, adam = inner_update(state, adam, model, Batch(np.arange(15), model.labels), 14, cfg, rng)
print("\ninner update moved the mean by", np.round(new_state.mean - state.mean, 4))
