"""Adam ascent, minibatch scheduling and the warm-started inner loop.

Everything here broadcasts over leading path axes: ``params`` of shape
``(L, P)`` is L independent optimisation problems advanced in lockstep.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .models._common import Batch
from .models.lmre import lmre_rescale_weights


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, message, rows=()):
        super().__init__(message)
        self.rows = tuple(int(r) for r in rows)


@dataclass(frozen=True)
class AdamState:
    step_count: int
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_size: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.step_count < 0:
            raise ValueError("step_count must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")
        if self.epsilon <= 0 or self.step_size <= 0:
            raise ValueError("epsilon and step_size must be positive")
        if np.shape(self.first_moment) != np.shape(self.second_moment):
            raise ValueError("moment shapes differ")

    @classmethod
    def zeros(cls, shape, step_size: float, **kw) -> "AdamState":
        return cls(0, np.zeros(shape), np.zeros(shape), float(step_size), **kw)

    def reset(self) -> "AdamState":
        return replace(
            self, step_count=0,
            first_moment=np.zeros_like(self.first_moment),
            second_moment=np.zeros_like(self.second_moment),
        )

    def take(self, idx) -> "AdamState":
        """Sub-select paths along the leading axis."""
        return replace(self, first_moment=self.first_moment[idx], second_moment=self.second_moment[idx])


def adam_step(params, grad, state: AdamState):
    """One bias-corrected Adam step in the ascent direction."""
    params = np.asarray(params, dtype=float)
    grad = np.asarray(grad, dtype=float)
    if grad.shape != params.shape or grad.shape != state.first_moment.shape:
        raise ValueError(f"shape mismatch: params {params.shape}, grad {grad.shape}, "
                         f"moments {state.first_moment.shape}")
    finite = np.isfinite(grad)
    if not finite.all():
        bad = np.nonzero(~finite.reshape(-1, grad.shape[-1]).all(axis=-1))[0] if grad.ndim > 1 else [0]
        raise NonFiniteGradientError(f"non-finite gradient at step {state.step_count + 1}", bad)
    b1, b2 = state.beta1, state.beta2
    t = state.step_count + 1
    m = b1 * state.first_moment + (1 - b1) * grad
    v = b2 * state.second_moment + (1 - b2) * grad**2
    m_hat = m / (1 - b1**t)
    v_hat = v / (1 - b2**t)
    new = params + state.step_size * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return new, replace(state, step_count=t, first_moment=m, second_moment=v)


def adam_maximize(objective_grad, params, step_size: float, steps: int, state: AdamState | None = None):
    """Run ``steps`` deterministic Adam steps on a full-batch gradient."""
    params = np.asarray(params, dtype=float)
    state = AdamState.zeros(params.shape, step_size) if state is None else state
    for _ in range(steps):
        params, state = adam_step(params, objective_grad(params), state)
    return params, state


@dataclass(frozen=True)
class InnerLoopConfig:
    steps: int
    batch_size: int
    include_newest: bool = True
    reset_moments: bool = False

    def __post_init__(self):
        if int(self.steps) < 1:
            raise ValueError("steps must be >= 1")
        if int(self.batch_size) < 1:
            raise ValueError("batch_size must be >= 1")
        if self.include_newest and self.batch_size < 2:
            raise ValueError("include_newest needs batch_size >= 2")

    def uniforms_per_step(self) -> int:
        return self.steps * self.batch_size


def floyd_sample(u, population: int):
    """Distinct indices in ``[0, population)`` from uniforms ``u`` (..., k).

    Floyd's algorithm, vectorised over leading axes. Each row of ``u`` gives
    a uniformly random k-subset.
    """
    u = np.asarray(u, dtype=float)
    k = u.shape[-1]
    if k > population:
        raise ValueError("cannot draw more indices than the population size")
    out = np.empty(u.shape, dtype=np.int64)
    for j, top in enumerate(range(population - k, population)):
        t = np.minimum(np.floor(u[..., j] * (top + 1)).astype(np.int64), top)
        if j:
            clash = np.any(out[..., :j] == t[..., None], axis=-1)
            t = np.where(clash, top, t)
        out[..., j] = t
    return out


def draw_minibatch(u, available: int, batch_size: int, include_newest: bool, newest_index: int | None = None):
    """Minibatch indices and unbiasing likelihood weights.

    Returns ``(sel, weights, newest_mask)``. Without ``include_newest`` every
    selected datum has weight ``M / b``. With it, the newest datum is always
    present with weight 1 and the remaining ``b - 1`` are drawn from the other
    ``M - 1`` with weight ``(M - 1) / (b - 1)``; both make the weighted
    likelihood sum unbiased for the full-data sum.
    """
    u = np.asarray(u, dtype=float)
    lead = u.shape[:-1]
    M = int(available)
    if M < 1:
        raise ValueError("no data available")
    newest_index = M - 1 if newest_index is None else int(newest_index)
    if batch_size >= M:
        sel = np.broadcast_to(np.arange(M), lead + (M,)).copy()
        mask = np.broadcast_to(sel == newest_index, sel.shape).copy() if include_newest else np.zeros(sel.shape, bool)
        return sel, np.ones(sel.shape), mask
    if include_newest:
        k = batch_size - 1
        others = floyd_sample(u[..., :k], M - 1)
        others = others + (others >= newest_index)
        sel = np.concatenate([others, np.full(lead + (1,), newest_index)], axis=-1)
        w = np.concatenate([np.full(lead + (k,), (M - 1) / k), np.ones(lead + (1,))], axis=-1)
        mask = np.zeros(sel.shape, bool)
        mask[..., -1] = True
        return sel, w, mask
    sel = floyd_sample(u[..., :batch_size], M)
    return sel, np.full(sel.shape, M / batch_size), np.zeros(sel.shape, bool)


def inner_steps(model, params, adam: AdamState, cfg: InnerLoopConfig, available: int, take, uniforms,
                group_counts=None):
    """S warm-started Adam steps on random minibatches (vectorised over paths).

    ``take(sel)`` maps per-path indices into the available data to a
    :class:`Batch`. ``uniforms`` has shape ``(..., S, b)``. ``group_counts``
    (per-path counts of available data per group) switches on per-group
    reweighting for grouped models.
    """
    if cfg.reset_moments:
        adam = adam.reset()
    for s in range(cfg.steps):
        sel, w, newest = draw_minibatch(uniforms[..., s, :], available, cfg.batch_size, cfg.include_newest)
        batch = take(sel)
        if group_counts is not None:
            w = lmre_rescale_weights(
                model.group[batch.rows], group_counts, newest if cfg.include_newest else None
            )
        params, adam = adam_step(params, model.elbo_gradient(params, batch, w), adam)
    return params, adam


def inner_update(state, adam: AdamState, model, available_data: Batch, newest_index: int,
                 cfg: InnerLoopConfig, rng: np.random.Generator):
    """Single-path inner loop on explicit data; returns the new (state, adam).

    ``available_data`` holds every datum currently available (observed plus
    imputed); ``newest_index`` locates the most recent imputation in it.
    """
    M = len(available_data)
    if M < 1:
        raise ValueError("available_data is empty")
    if not 0 <= newest_index < M:
        raise ValueError("newest_index out of range")
    params = model.params(state)
    if cfg.reset_moments:
        adam = adam.reset()
    rows, y = available_data.rows, np.asarray(available_data.y)
    counts = None
    if hasattr(model, "group_sizes"):
        counts = np.bincount(model.group[rows], minlength=model.n_groups)
    for _ in range(cfg.steps):
        u = rng.random(cfg.batch_size)
        sel, w, newest = draw_minibatch(u, M, cfg.batch_size, cfg.include_newest, newest_index)
        batch = Batch(None if rows is None else rows[sel], y[sel])
        if counts is not None:
            w = lmre_rescale_weights(model.group[batch.rows], counts, newest if cfg.include_newest else None)
        params, adam = adam_step(params, model.elbo_gradient(params, batch, w), adam)
    return model.state(params), adam
