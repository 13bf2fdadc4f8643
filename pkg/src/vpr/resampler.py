"""Variational predictive resampling engines.

Two engines share the same path layout:

* ``ideal``: every re-fit is the exact ELBO maximiser, available in closed
  form for the conjugate models (location, linear regression). Updates are
  running sufficient statistics in information form.
* ``scalable``: every re-fit is S warm-started minibatch Adam steps.

Paths are processed in chunks that are vectorised along a leading axis.
Randomness comes from per-path keyed streams (:mod:`vpr.streams`) and
per-path arithmetic is chunk-independent, so the sample matrix is
bit-identical for any chunk size, worker count or execution order.
"""

from __future__ import annotations

import math
import time
import warnings
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ._accel import accelerated_inner
from .models._common import Batch
from .optimizer import AdamState, InnerLoopConfig, NonFiniteGradientError, adam_maximize, adam_step, inner_steps
from .samples import SampleMatrix
from .streams import PathNoise, covariate_table

TRAJECTORY_POINTS = 200


class PathFailure(RuntimeError):
    def __init__(self, path_ids, cause):
        ids = ", ".join(str(p) for p in path_ids[:8])
        if len(path_ids) > 8:
            ids += f", ... ({len(path_ids)} paths)"
        super().__init__(f"resampling failed on path(s) {ids}: {cause}")
        self.path_ids = tuple(path_ids)


@dataclass(frozen=True)
class CovariateRule:
    kind: str = "bootstrap"
    shared_stream: bool = True

    def __post_init__(self):
        if self.kind not in ("none", "bootstrap"):
            raise ValueError(f"unknown covariate rule {self.kind!r}")


@dataclass(frozen=True)
class ResamplingConfig:
    horizon: int
    paths: int
    inner: InnerLoopConfig | None = None
    step_size: float = 1e-2
    covariate_rule: CovariateRule = field(default_factory=CovariateRule)
    terminal: str = "variational_mean"
    seed: int = 0
    trajectory: bool = False
    chunk_size: int = 512
    accelerate: bool = True

    def __post_init__(self):
        # horizon 0 is allowed as a no-op run (terminal = initial fit)
        if int(self.horizon) < 0:
            raise ValueError("horizon must be >= 0")
        if int(self.paths) < 1:
            raise ValueError("paths must be >= 1")
        if self.terminal not in ("variational_mean", "mle_refit"):
            raise ValueError(f"unknown terminal rule {self.terminal!r}")
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if self.chunk_size < 1:
            raise ValueError("chunk_size must be >= 1")

    @property
    def thin(self) -> int:
        return max(1, math.ceil(self.horizon / TRAJECTORY_POINTS))


@dataclass
class PathResult:
    terminal_theta: np.ndarray
    terminal_state: object
    trajectory: np.ndarray | None = None
    trajectory_steps: np.ndarray | None = None


@dataclass
class EnsembleResult:
    samples: SampleMatrix
    throughput: dict
    params: np.ndarray
    path_ids: np.ndarray
    trajectories: np.ndarray | None = None
    trajectory_steps: np.ndarray | None = None

    def path(self, model, k: int) -> PathResult:
        traj = None if self.trajectories is None else self.trajectories[k]
        return PathResult(self.samples.values[k], model.state(self.params[k]), traj, self.trajectory_steps)


def observed_batch(model, data=None) -> Batch:
    """The observed data of ``model`` (or ``data`` in place of its responses)."""
    if not model.has_covariates:
        y = model.data if data is None else model._check_data(data)
        return Batch(None, y)
    if data is None:
        return model.full_batch()
    y = np.asarray(data, dtype=float)
    if y.shape != (model.n_obs,):
        raise ValueError(f"data must have shape ({model.n_obs},)")
    return Batch(np.arange(model.n_obs), y)


def propagate_covariate(observed_covariates, rule: CovariateRule, path_id: int, step_i: int, seed: int):
    """Covariate row fed to step ``step_i`` of path ``path_id``."""
    if rule.kind == "none":
        return None
    x = np.asarray(observed_covariates)
    if x.shape[0] < 1:
        raise ValueError("bootstrap propagation needs at least one observed row")
    table = covariate_table(seed, x.shape[0], step_i + 1, None if rule.shared_stream else path_id)
    return x[table[step_i]]


class _Covariates:
    def __init__(self, model, config: ResamplingConfig, path_ids):
        self.active = bool(model.has_covariates)
        if not self.active:
            return
        rule = config.covariate_rule
        if rule.kind == "none":
            raise ValueError("a regression model needs a covariate propagation rule")
        pool = model.covariate_pool()
        self.shared = rule.shared_stream
        if self.shared:
            self.table = covariate_table(config.seed, pool, config.horizon)
        else:
            self.table = np.stack([covariate_table(config.seed, pool, config.horizon, int(p)) for p in path_ids])

    def __call__(self, i):
        if not self.active:
            return None
        return self.table[i] if self.shared else self.table[:, i]


def _horizon_check(n: int, horizon: int):
    if horizon > 0 and horizon < math.ceil(n**1.1):
        warnings.warn(f"horizon {horizon} < n^1.1 = {math.ceil(n ** 1.1)}; the limit law may be poorly approximated",
                      stacklevel=3)


# ---------------------------------------------------------------------------
# ideal engine


def _supports_closed_form(model) -> bool:
    return hasattr(model, "linear_gaussian") and hasattr(model, "prior_precision")


def _ideal_chunk(model, obs: Batch, config: ResamplingConfig, path_ids):
    C = len(path_ids)
    N = config.horizon
    p = model.dim
    tn = model.theta_noise_dim()
    prior = model.prior_precision()
    info_m, info_v = model.information(obs)
    cov = _Covariates(model, config, path_ids)
    per_path = cov.active and not cov.shared

    P = prior + info_m
    if per_path:
        P = np.broadcast_to(P, (C, p, p)).copy()
    h = np.broadcast_to(info_v, (C, p)).copy()
    noise = PathNoise(config.seed, path_ids, tn + model.obs_noise_dim(), 0)

    def current(P, h):
        Pinv = np.linalg.inv(P)
        # einsum runs a fixed per-row loop (no BLAS), so rows do not depend on chunking
        mean = np.einsum("...ij,...j->...i", Pinv, h)
        log_scale = -0.5 * np.log(np.diagonal(P, axis1=-2, axis2=-1))
        return np.concatenate([mean, np.broadcast_to(log_scale, mean.shape)], axis=-1)

    params = current(P, h)
    traj, steps = ([params], [0]) if config.trajectory else (None, None)
    for i in range(N):
        rows = cov(i)
        z, _ = noise.step(i)
        y_new = model.predictive_from_noise(params, rows, z[:, :tn], z[:, tn:])
        H, Rinv = model.linear_gaussian(rows)
        HtR = np.swapaxes(H, -1, -2) @ Rinv
        P = P + HtR @ H
        h = h + np.sum(HtR * y_new.reshape(C, 1, -1), axis=-1)
        params = current(P, h)
        if config.trajectory and ((i + 1) % config.thin == 0 or i + 1 == N):
            traj.append(params)
            steps.append(i + 1)

    if config.terminal == "mle_refit":
        info = P - prior
        terminal = np.linalg.solve(info, h[..., None])[..., 0] if per_path else \
            np.linalg.solve(np.broadcast_to(info, (C, p, p)), h[..., None])[..., 0]
    else:
        terminal = model.terminal_mean(params)
    traj = None if traj is None else np.stack(traj, axis=1)
    return terminal, params, traj, steps


# ---------------------------------------------------------------------------
# scalable engine


def _scalable_chunk(model, obs: Batch, config: ResamplingConfig, path_ids, init_params, init_adam: AdamState):
    C = len(path_ids)
    N = config.horizon
    cfg = config.inner
    n = len(obs)
    cap = n + N
    tn = model.theta_noise_dim()
    cov = _Covariates(model, config, path_ids)

    y_obs = np.asarray(obs.y, dtype=float)
    ybuf = np.empty((C, cap) + y_obs.shape[1:])
    ybuf[:, :n] = y_obs
    rbuf = None
    if obs.rows is not None:
        rbuf = np.empty((C, cap), dtype=np.int64)
        rbuf[:, :n] = obs.rows

    params = np.broadcast_to(init_params, (C, init_params.shape[-1])).copy()
    adam = AdamState(
        init_adam.step_count,
        np.broadcast_to(init_adam.first_moment, params.shape).copy(),
        np.broadcast_to(init_adam.second_moment, params.shape).copy(),
        init_adam.step_size, init_adam.beta1, init_adam.beta2, init_adam.epsilon,
    )
    full = cfg.batch_size >= cap
    use_stats = full and hasattr(model, "stats_gradient")
    if use_stats:
        x = model.design[obs.rows]
        sxx = np.broadcast_to(x.T @ x, (C,) + (x.shape[1],) * 2).copy()
        sxy = np.broadcast_to(x.T @ y_obs, (C, x.shape[1])).copy()
    grouped = hasattr(model, "group_sizes")
    counts = None
    if grouped:
        counts = np.broadcast_to(np.bincount(model.group[obs.rows], minlength=model.n_groups),
                                 (C, model.n_groups)).astype(float).copy()
    width = 0 if full else cfg.steps * cfg.batch_size
    noise = PathNoise(config.seed, path_ids, tn + model.obs_noise_dim(), width)

    def take(sel):
        y = np.take_along_axis(ybuf, sel.reshape(sel.shape + (1,) * (ybuf.ndim - 2)), axis=1)
        return Batch(None if rbuf is None else np.take_along_axis(rbuf, sel, axis=1), y)

    traj, steps = ([params.copy()], [0]) if config.trajectory else (None, None)
    cidx = np.arange(C)
    for i in range(N):
        rows = cov(i)
        z, u = noise.step(i)
        y_new = model.predictive_from_noise(params, rows, z[:, :tn], z[:, tn:])
        ybuf[:, n + i] = y_new
        if rbuf is not None:
            rbuf[:, n + i] = rows
        if grouped:
            counts[cidx, model.group[rows]] += 1.0
        if use_stats:
            x_new = np.broadcast_to(model.design[rows], (C, model.dim))
            sxx += x_new[:, :, None] * x_new[:, None, :]
            sxy += x_new * y_new[:, None]
            if cfg.reset_moments:
                adam = adam.reset()
            for _ in range(cfg.steps):
                params, adam = adam_step(params, model.stats_gradient(params, sxx, sxy), adam)
        else:
            fused = None
            if config.accelerate and width:
                fused = accelerated_inner(model, params, adam, cfg, n + i + 1, rbuf, ybuf,
                                          u.reshape(C, cfg.steps, cfg.batch_size), counts)
            if fused is not None:
                params, adam, bad = fused
                if len(bad):
                    raise NonFiniteGradientError(f"non-finite gradient at resampling step {i + 1}", bad)
            else:
                params, adam = inner_steps(
                    model, params, adam, cfg, n + i + 1, take,
                    u.reshape(C, cfg.steps, cfg.batch_size) if width else np.zeros((C, cfg.steps, 0)),
                    counts,
                )
        if config.trajectory and ((i + 1) % config.thin == 0 or i + 1 == N):
            traj.append(params.copy())
            steps.append(i + 1)

    if config.terminal != "variational_mean":
        raise ValueError("the scalable engine only supports terminal=variational_mean")
    traj = None if traj is None else np.stack(traj, axis=1)
    return model.terminal_mean(params), params, traj, steps


# ---------------------------------------------------------------------------
# orchestration


def fit_mean_field(model, data=None, steps: int = 5000, step_size: float = 5e-2, init=None):
    """Initial MF-VI fit on the observed data: closed form where available,
    else full-batch Adam. Returns ``(params, adam_state)``."""
    obs = observed_batch(model, data)
    if _supports_closed_form(model):
        info_m, info_v = model.information(obs)
        P = model.prior_precision() + info_m
        mean = np.linalg.solve(P, info_v)
        return np.concatenate([mean, -0.5 * np.log(np.diag(P))]), AdamState.zeros(2 * model.dim, step_size)
    init = model.default_init() if init is None else np.asarray(init, dtype=float)
    return adam_maximize(lambda q: model.elbo_gradient(q, obs), init, step_size, steps)


def _run_chunk(args):
    method, model, obs, config, ids, init_params, init_adam = args
    try:
        if method == "ideal":
            return _ideal_chunk(model, obs, config, ids)
        return _scalable_chunk(model, obs, config, ids, init_params, init_adam)
    except NonFiniteGradientError as exc:
        bad = [int(ids[r]) for r in exc.rows] or [int(i) for i in ids]
        raise PathFailure(bad, exc) from exc
    except (FloatingPointError, np.linalg.LinAlgError, ValueError) as exc:
        raise PathFailure([int(i) for i in ids], exc) from exc


def run_ensemble(model, data=None, config: ResamplingConfig | None = None, method: str = "scalable",
                 initial_state=None, initial_adam: AdamState | None = None, path_ids=None,
                 workers: int = 1, executor: str = "thread") -> EnsembleResult:
    """Run ``config.paths`` resampling paths and collect terminal parameters.

    ``path_ids`` defaults to ``0..L-1``; disjoint id ranges under the same
    seed concatenate to the corresponding larger ensemble.
    """
    if config is None:
        raise ValueError("a ResamplingConfig is required")
    if method not in ("ideal", "scalable"):
        raise ValueError(f"unknown method {method!r}")
    obs = observed_batch(model, data)
    if method == "ideal" and not _supports_closed_form(model):
        raise ValueError(f"{type(model).__name__} has no closed-form variational update")
    if method == "scalable" and config.inner is None:
        raise ValueError("the scalable engine needs an InnerLoopConfig")
    _horizon_check(len(obs), config.horizon)

    ids = np.arange(config.paths) if path_ids is None else np.asarray(path_ids, dtype=np.int64)
    init_params = None
    if method == "scalable":
        if initial_state is None:
            init_params, _ = fit_mean_field(model, data)
        else:
            init_params = initial_state if isinstance(initial_state, np.ndarray) else model.params(initial_state)
        init_params = np.asarray(init_params, dtype=float)
        if initial_adam is None:
            initial_adam = AdamState.zeros(init_params.shape, config.step_size)

    chunks = [ids[k : k + config.chunk_size] for k in range(0, len(ids), config.chunk_size)]
    jobs = [(method, model, obs, config, c, init_params, initial_adam) for c in chunks]
    t0 = time.perf_counter()
    if workers > 1 and len(jobs) > 1:
        pool_cls = ProcessPoolExecutor if executor == "process" else ThreadPoolExecutor
        with pool_cls(max_workers=workers) as pool:
            out = list(pool.map(_run_chunk, jobs))
    else:
        out = [_run_chunk(j) for j in jobs]
    seconds = time.perf_counter() - t0

    terminal = np.concatenate([o[0] for o in out])
    params = np.concatenate([o[1] for o in out])
    traj = np.concatenate([o[2] for o in out]) if config.trajectory else None
    steps = np.asarray(out[0][3]) if config.trajectory else None
    names = list(model.names)[: terminal.shape[1]]
    report = {"paths": int(len(ids)), "seconds": seconds,
              "paths_per_second": len(ids) / seconds if seconds > 0 else float("inf")}
    return EnsembleResult(SampleMatrix(terminal, names), report, params, ids, traj, steps)


def run_path_ideal(model, data, config: ResamplingConfig, path_id: int) -> PathResult:
    res = run_ensemble(model, data, config, "ideal", path_ids=[path_id])
    return res.path(model, 0)


def run_path_scalable(model, data, config: ResamplingConfig, initial_state, initial_adam, path_id: int) -> PathResult:
    res = run_ensemble(model, data, config, "scalable", initial_state, initial_adam, path_ids=[path_id])
    return res.path(model, 0)
