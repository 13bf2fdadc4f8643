"""Config-driven experiment runner.

An experiment config is a flat ``key = value`` text file (``#`` starts a
comment). Keys are dotted (``data.d``, ``resampling.horizon``, ...); the full
list with types and defaults is :data:`SCHEMA`. Every experiment family has a
shipped preset with its hyperparameters filled in (:data:`PRESETS`).

Outputs of a run, under the output directory::

    manifest.json                      metrics for every replicate + 95% CIs
    summary.csv                        the same aggregates, one row per metric
    replicate_000/<method>_samples.csv posterior draws (header = parameter names)
    replicate_000/<method>_mean.csv    pair-plot summaries: means,
    replicate_000/<method>_cov.csv       covariances
    replicate_000/<method>_corr.csv      and Pearson correlations
    replicate_000/<method>_trajectory.csv   thinned variational-mean paths
    replicate_000/kld.csv              (location experiment) KLD curves

Wall-clock numbers live under ``timing`` keys only, so two runs with the
same config and seed produce identical manifests once those are dropped.
"""

from __future__ import annotations

import configparser
import csv
import io
import json
import math
import os
import tempfile
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np
from scipy import stats

from . import datagen
from .families import mf_sample
from .metrics import marginal_coverage, max_offdiag_gap, mmd_squared, nlpd, pearson_matrix
from .models import (GaussianLocationModel, LinearRegressionModel, LmreModel, LogisticRegressionModel,
                     linreg_closed_form, location_closed_form)
from .optimizer import InnerLoopConfig
from .reference import (GaussianPosterior, adaptive_rwm, effective_sample_size, exact_posterior_linreg,
                        exact_posterior_location, kld_gaussians, mf_location_kld, vpr_limit_covariance,
                        vpr_limit_law)
from .resampler import CovariateRule, ResamplingConfig, fit_mean_field, run_ensemble
from .samples import SampleMatrix
from .streams import keyed_generator

SCHEMA_VERSION = "1.0"
OUTPUT_ROOT_ENV = "VPR_OUTPUT_ROOT"

# stream tags for the experiment layer (kept apart from the engine's tags 0-3)
_DATA, _TRUTH, _DRAWS, _MCMC = 10, 11, 12, 13

EXPERIMENTS = ("gaussian_location_kld", "linreg_coverage", "logistic_sim", "logistic_real", "lmre")
METHODS = ("mf_vi", "vpr_ideal", "vpr_scalable", "mcmc", "exact")

ALLOWED_METHODS = {
    "gaussian_location_kld": {"exact", "mf_vi", "vpr_ideal", "vpr_scalable"},
    "linreg_coverage": {"exact", "mf_vi", "vpr_ideal", "vpr_scalable", "mcmc"},
    "logistic_sim": {"mf_vi", "vpr_scalable", "mcmc"},
    "logistic_real": {"mf_vi", "vpr_scalable", "mcmc"},
    "lmre": {"mf_vi", "vpr_scalable", "mcmc"},
}
ALLOWED_METRICS = {
    "gaussian_location_kld": {"kld", "limit_cov"},
    "linreg_coverage": {"coverage", "mmd", "throughput"},
    "logistic_sim": {"coverage", "mmd", "correlation", "throughput"},
    "logistic_real": {"nlpd", "mmd", "throughput"},
    "lmre": {"coverage", "mmd", "throughput"},
}


class ConfigError(ValueError):
    """Invalid experiment configuration; ``problems`` lists every issue found."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


# ---------------------------------------------------------------------------
# config schema


def _bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _list(conv):
    def parse(text):
        return tuple(conv(p.strip()) for p in text.split(",") if p.strip())
    return parse


def _int(text):
    v = float(text)
    if not v.is_integer():
        raise ValueError(f"not an integer: {text!r}")
    return int(v)


# key -> (parser, default, description). ``None`` default = experiment-dependent or unset.
SCHEMA = {
    "experiment": (str, None, "one of " + ", ".join(EXPERIMENTS)),
    "methods": (_list(str), None, "comma-separated subset of " + ", ".join(METHODS)),
    "metrics": (_list(str), None, "comma-separated metric names (default: all for the experiment)"),
    "replicates": (_int, 1, "number of independent replicates"),
    "seed": (_int, 0, "base seed; every random stream is keyed off it"),
    "output_dir": (str, "runs", f"output directory (relative paths resolve against ${OUTPUT_ROOT_ENV})"),
    "coverage.level": (float, 0.9, "nominal level of the marginal credible intervals"),
    "samples.count": (_int, 0, "draws for exact / MF-VI sample files (0 = resampling.paths)"),
    # data
    "data.dim": (_int, 3, "location: parameter dimension"),
    "data.n": (_int, 0, "observations (0 = experiment default, e.g. 3d for linreg)"),
    "data.ns": (_list(_int), (10, 20, 50, 100, 200, 500, 1000), "location: n grid for the KLD curves"),
    "data.eig_low": (float, 0.25, "location: smallest eigenvalue of A"),
    "data.eig_high": (float, 4.0, "location: largest eigenvalue of A"),
    "data.d": (_int, 5, "regression dimension"),
    "data.kappa_ref": (float, 350.0, "linreg: reference condition number"),
    "data.d_ref": (_int, 20, "linreg: reference dimension"),
    "data.alpha": (float, 1.5, "linreg: condition-number growth exponent"),
    "data.kappa_max": (float, 1e12, "linreg: condition-number cap"),
    "data.signal_var": (float, 4.0, "linreg: target signal variance"),
    "data.rho": (float, 0.99, "logistic_sim: Toeplitz correlation"),
    "data.r": (_int, 3, "lmre: random-effect dimension"),
    "data.G": (_int, 4, "lmre: number of groups"),
    "data.group_sizes": (_list(_int), (15, 25, 12, 30), "lmre: group sizes"),
    "data.design_corr": (float, 0.8, "lmre: exchangeable correlation of fixed-effect covariates"),
    "data.shared_design": (_bool, False, "lmre: Z_g = first r columns of X_g = [1, N(0,1), ...]"),
    "data.csv": (str, "", "logistic_real: path to a numeric CSV"),
    "data.label_column": (str, "", "logistic_real: name of the 0/1 label column"),
    "data.train_n": (_int, 100, "logistic_real: training rows per split"),
    "data.standardize": (_bool, True, "logistic_real: standardise features with training statistics"),
    # model
    "model.noise_var": (float, 1.0, "observation noise variance (linreg, lmre)"),
    "model.prior_scale": (float, 0.0, "prior sd of regression coefficients (0 = experiment default)"),
    "model.quad_nodes": (_int, 20, "logistic: Gauss-Hermite nodes"),
    # resampling
    "resampling.horizon": (_int, 1000, "N"),
    "resampling.paths": (_int, 1000, "L"),
    "resampling.steps": (_int, 10, "S, inner Adam steps per resampling step"),
    "resampling.batch_size": (_int, 15, "b"),
    "resampling.step_size": (float, 0.5, "Adam learning rate of the inner loop"),
    "resampling.include_newest": (_bool, True, "always put the newest imputed point in the batch"),
    "resampling.reset_moments": (_bool, False, "reset Adam moments at every resampling step"),
    "resampling.shared_stream": (_bool, True, "one bootstrap covariate stream for all paths"),
    "resampling.terminal": (str, "variational_mean", "variational_mean or mle_refit"),
    "resampling.trajectory": (_bool, False, "store thinned trajectories"),
    "resampling.chunk_size": (_int, 512, "paths per vectorised chunk"),
    "resampling.workers": (_int, 1, "parallel chunk workers (results do not depend on it)"),
    # MF-VI
    "mf.steps": (_int, 5000, "full-batch Adam steps for MF-VI (non-conjugate models)"),
    "mf.step_size": (float, 0.05, "MF-VI Adam learning rate"),
    # MCMC
    "mcmc.warmup": (_int, 5000, "adaptive random-walk Metropolis warmup iterations"),
    "mcmc.draws": (_int, 2000, "retained draws (after thinning) of the first run"),
    "mcmc.thin": (_int, 5, "thinning interval"),
    "mcmc.min_ess": (float, 1000.0, "double the draws until min ESS reaches this"),
    "mcmc.max_draws": (_int, 64000, "cap on retained draws"),
}

DEFAULT_PRIOR_SCALE = {"linreg_coverage": 1000.0, "logistic_sim": 10.0, "logistic_real": 10.0, "lmre": 1.0,
                       "gaussian_location_kld": 1.0}


@dataclass
class ExperimentConfig:
    experiment: str
    methods: tuple
    metrics: tuple
    replicates: int
    seed: int
    output_dir: str
    values: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.values[key]

    def resampling(self, seed: int, method: str) -> ResamplingConfig:
        v = self.values
        inner = None
        if method == "vpr_scalable":
            inner = InnerLoopConfig(v["resampling.steps"], v["resampling.batch_size"],
                                    v["resampling.include_newest"], v["resampling.reset_moments"])
        return ResamplingConfig(
            horizon=v["resampling.horizon"], paths=v["resampling.paths"], inner=inner,
            step_size=v["resampling.step_size"],
            covariate_rule=CovariateRule("bootstrap", v["resampling.shared_stream"]),
            terminal=v["resampling.terminal"], seed=seed, trajectory=v["resampling.trajectory"],
            chunk_size=v["resampling.chunk_size"],
        )

    def flat(self) -> dict:
        """JSON-friendly copy of every setting."""
        out = {}
        for k, val in sorted(self.values.items()):
            out[k] = list(val) if isinstance(val, tuple) else val
        return out


def parse_config_text(text: str) -> dict:
    """Raw ``key -> string`` mapping of a flat config file."""
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#",),
                                       inline_comment_prefixes=("#",), strict=True)
    parser.optionxform = str  # keep key case (data.G)
    try:
        parser.read_string("[config]\n" + text)
    except configparser.Error as exc:
        raise ConfigError([f"malformed config: {exc}".replace("\n", " ")]) from None
    return dict(parser["config"])


def load_config(source, overrides=()) -> ExperimentConfig:
    """Parse and validate a config from a file path, a preset name, or raw text.

    ``overrides`` is a sequence of ``"key=value"`` strings applied on top.
    """
    text = _config_source(source)
    raw = parse_config_text(text)
    for item in overrides:
        if "=" not in item:
            raise ConfigError([f"override {item!r} is not key=value"])
        k, v = item.split("=", 1)
        raw[k.strip()] = v.strip()
    return validate_config(raw)


def _config_source(source) -> str:
    if isinstance(source, Path) or (isinstance(source, str) and "\n" not in source and "=" not in source):
        path = Path(source)
        if path.is_file():
            return path.read_text(encoding="utf-8")
        if str(source) in PRESETS:
            return PRESETS[str(source)]
        raise ConfigError([f"no config file or preset named {str(source)!r}"])
    return str(source)


def validate_config(raw: dict) -> ExperimentConfig:
    problems = []
    values = {}
    for key in raw:
        if key not in SCHEMA:
            problems.append(f"unknown key {key!r}")
    for key, (conv, default, _) in SCHEMA.items():
        if key in raw:
            try:
                values[key] = conv(raw[key])
            except ValueError as exc:
                problems.append(f"{key}: {exc}")
        else:
            values[key] = default
    exp = values.get("experiment")
    if exp is None:
        problems.append("missing required key 'experiment'")
    elif exp not in EXPERIMENTS:
        problems.append(f"unknown experiment {exp!r} (choose from {', '.join(EXPERIMENTS)})")
    if values.get("methods") is None:
        problems.append("missing required key 'methods'")
    if problems:
        raise ConfigError(problems)

    methods = values["methods"]
    for m in methods:
        if m not in METHODS:
            problems.append(f"unknown method {m!r}")
        elif m not in ALLOWED_METHODS[exp]:
            problems.append(f"method {m!r} is not available for {exp}"
                            + (" (no closed form)" if m in ("vpr_ideal", "exact") else ""))
    if len(set(methods)) != len(methods) or not methods:
        problems.append("methods must be a non-empty list without duplicates")
    metrics = values["metrics"] if values["metrics"] is not None else tuple(sorted(ALLOWED_METRICS[exp]))
    for m in metrics:
        if m not in ALLOWED_METRICS[exp]:
            problems.append(f"metric {m!r} is not available for {exp}")
    reference = "exact" if exp == "linreg_coverage" else "mcmc"
    if "mmd" in metrics and reference not in methods and exp != "gaussian_location_kld":
        problems.append(f"metric 'mmd' needs the {reference!r} method as reference")
    if "correlation" in metrics and "mcmc" not in methods:
        problems.append("metric 'correlation' needs the 'mcmc' method as reference")
    if "nlpd" in metrics and exp == "logistic_real" and values["data.train_n"] < 1:
        problems.append("data.train_n must be >= 1")

    positive = ["replicates", "resampling.paths", "resampling.steps", "resampling.batch_size",
                "resampling.chunk_size", "resampling.workers", "mf.steps", "mcmc.draws", "mcmc.thin",
                "data.dim", "data.d", "model.quad_nodes", "mcmc.max_draws"]
    for key in positive:
        if values[key] < 1:
            problems.append(f"{key} must be >= 1")
    for key in ("resampling.step_size", "mf.step_size", "model.noise_var", "data.kappa_ref", "data.alpha",
                "data.kappa_max", "data.signal_var", "data.eig_low", "data.eig_high"):
        if not values[key] > 0:
            problems.append(f"{key} must be positive")
    if values["resampling.horizon"] < 0:
        problems.append("resampling.horizon must be >= 0")
    if values["mcmc.warmup"] < 1:
        problems.append("mcmc.warmup must be >= 1")
    if not 0 < values["coverage.level"] < 1:
        problems.append("coverage.level must lie in (0, 1)")
    if values["resampling.terminal"] not in ("variational_mean", "mle_refit"):
        problems.append("resampling.terminal must be variational_mean or mle_refit")
    elif values["resampling.terminal"] == "mle_refit" and "vpr_scalable" in methods:
        problems.append("terminal=mle_refit is only available for vpr_ideal")
    if "vpr_scalable" in methods and values["resampling.include_newest"] and values["resampling.batch_size"] < 2:
        problems.append("include_newest needs resampling.batch_size >= 2")
    if exp == "logistic_real":
        if not values["data.csv"]:
            problems.append("logistic_real needs data.csv")
        if not values["data.label_column"]:
            problems.append("logistic_real needs data.label_column")
    if exp == "logistic_sim" and not -1 < values["data.rho"] < 1:
        problems.append("data.rho must lie in (-1, 1)")
    if exp == "lmre" and len(values["data.group_sizes"]) != values["data.G"]:
        problems.append("data.group_sizes needs one entry per group (data.G)")
    if exp == "gaussian_location_kld" and (not values["data.ns"] or min(values["data.ns"]) < 1):
        problems.append("data.ns must be a non-empty list of positive integers")
    if values["model.prior_scale"] < 0:
        problems.append("model.prior_scale must be >= 0")
    if problems:
        raise ConfigError(problems)

    if values["model.prior_scale"] == 0:
        values["model.prior_scale"] = DEFAULT_PRIOR_SCALE[exp]
    values["metrics"] = tuple(metrics)
    return ExperimentConfig(exp, tuple(methods), tuple(metrics), values["replicates"], values["seed"],
                            values["output_dir"], values)


# ---------------------------------------------------------------------------
# presets

PRESETS = {
    "gaussian_location_kld": """\
# Gaussian location model: KLD of MF-VI and of the ideal-VPR limit law to the
# posterior as n grows, plus a jellyfish trajectory run at n = 10.
experiment = gaussian_location_kld
methods = exact, mf_vi, vpr_ideal
metrics = kld, limit_cov
replicates = 1
seed = 0
output_dir = gaussian_location_kld
data.dim = 3
data.n = 10
data.ns = 10, 20, 50, 100, 200, 500, 1000
data.eig_low = 0.25
data.eig_high = 4.0
resampling.horizon = 2000
resampling.paths = 1000
resampling.trajectory = true
""",
    "linreg_coverage": """\
# Conjugate linear regression with a prescribed Gram spectrum, n = 3d.
experiment = linreg_coverage
methods = exact, mf_vi, vpr_ideal, mcmc
metrics = coverage, mmd, throughput
replicates = 100
seed = 0
output_dir = linreg_coverage
data.d = 10
data.n = 30
data.kappa_ref = 350
data.d_ref = 20
data.alpha = 1.5
data.kappa_max = 1e12
data.signal_var = 4.0
model.noise_var = 1.0
model.prior_scale = 1000
resampling.horizon = 12000
resampling.paths = 2000
resampling.shared_stream = true
mcmc.warmup = 5000
mcmc.draws = 2000
mcmc.thin = 10
mcmc.min_ess = 2000
""",
    "logistic_sim": """\
# Logistic regression with a strongly correlated Toeplitz design.
experiment = logistic_sim
methods = mf_vi, vpr_scalable, mcmc
metrics = coverage, mmd, correlation, throughput
replicates = 1
seed = 0
output_dir = logistic_sim
data.n = 15
data.d = 5
data.rho = 0.99
model.prior_scale = 10
model.quad_nodes = 20
mf.steps = 5000
mf.step_size = 0.05
resampling.horizon = 5000
resampling.paths = 1000
resampling.steps = 10
resampling.batch_size = 15
resampling.step_size = 0.5
resampling.include_newest = true
resampling.trajectory = true
mcmc.warmup = 5000
mcmc.draws = 4000
mcmc.thin = 5
mcmc.min_ess = 1000
""",
    "logistic_real": """\
# Logistic regression on a user-supplied CSV; set data.csv and data.label_column.
experiment = logistic_real
methods = mf_vi, vpr_scalable, mcmc
metrics = nlpd, mmd, throughput
replicates = 100
seed = 0
output_dir = logistic_real
data.csv = data.csv
data.label_column = label
data.train_n = 100
data.standardize = true
model.prior_scale = 10
model.quad_nodes = 20
mf.steps = 2000
mf.step_size = 0.05
resampling.horizon = 1000
resampling.paths = 1000
resampling.steps = 10
resampling.batch_size = 100
resampling.step_size = 0.05
resampling.include_newest = true
mcmc.warmup = 5000
mcmc.draws = 4000
mcmc.thin = 5
mcmc.min_ess = 1000
""",
    "lmre": """\
# Linear mixed random-effects model, d = r = 3, G = 4, n = 82.
experiment = lmre
methods = mf_vi, vpr_scalable, mcmc
metrics = coverage, mmd, throughput
replicates = 100
seed = 0
output_dir = lmre
data.d = 3
data.r = 3
data.G = 4
data.group_sizes = 15, 25, 12, 30
data.design_corr = 0.8
model.noise_var = 1.0
model.prior_scale = 1
mf.steps = 5000
mf.step_size = 0.01
resampling.horizon = 1000
resampling.paths = 2000
resampling.steps = 10
resampling.batch_size = 50
resampling.step_size = 0.01
resampling.include_newest = false
mcmc.warmup = 20000
mcmc.draws = 2000
mcmc.thin = 50
mcmc.min_ess = 400
mcmc.max_draws = 16000
""",
}

PRESET_DESCRIPTIONS = {
    "gaussian_location_kld": "location model: MF-VI vs VPR-limit KLD curves and jellyfish trajectories",
    "linreg_coverage": "linear regression coverage vs exact posterior (d=10, n=30)",
    "logistic_sim": "correlated logistic simulation: MMD and correlations vs MCMC",
    "logistic_real": "logistic regression on a CSV dataset: NLPD and MMD vs MCMC",
    "lmre": "linear mixed random effects: beta / u coverage",
}


# ---------------------------------------------------------------------------
# per-replicate work


@dataclass
class MethodOutput:
    samples: SampleMatrix | None = None
    metrics: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)
    trajectory: tuple | None = None  # (steps, (L, T, p) variational means)


@dataclass
class ReplicateResult:
    index: int
    methods: dict
    tables: dict = field(default_factory=dict)  # name -> (header, rows)


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    replicates: list
    manifest: dict


def _replicate_seed(seed: int, k: int) -> int:
    return int(np.random.SeedSequence((int(seed), int(k))).generate_state(1, np.uint32)[0])


def _gaussian_coverage(mean, sd, truth, level):
    z = stats.norm.ppf(0.5 + level / 2)
    covered = np.abs(np.asarray(truth) - mean) <= z * sd
    return float(covered.mean())


def _mf_gaussian_samples(mean, sd, names, rng, count):
    return SampleMatrix(mean + sd * rng.standard_normal((count, len(mean))), names)


def _run_mcmc(log_target, init, cfg: ExperimentConfig, rng_key, cols=None):
    """Adaptive RWM; the draw budget doubles until the minimum ESS target is met."""
    draws = cfg["mcmc.draws"]
    total = 0.0
    while True:
        t0 = time.perf_counter()
        chain = adaptive_rwm(log_target, init, cfg["mcmc.warmup"], draws, keyed_generator(*rng_key),
                             thin=cfg["mcmc.thin"])
        total += time.perf_counter() - t0
        sub = chain.draws if cols is None else chain.draws[:, cols]
        ess = min(effective_sample_size(sub[:, j]) for j in range(sub.shape[1]))
        if ess >= cfg["mcmc.min_ess"] or 2 * draws > cfg["mcmc.max_draws"]:
            break
        draws *= 2
    return chain, ess, total


def _vpr(model, cfg: ExperimentConfig, method: str, seed: int, initial=None):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # short desk-scale horizons trip the n^1.1 check
        res = run_ensemble(model, None, cfg.resampling(seed, method),
                           "ideal" if method == "vpr_ideal" else "scalable",
                           initial_state=initial, workers=cfg["resampling.workers"])
    out = MethodOutput(res.samples, timing={"seconds": res.throughput["seconds"],
                                            "paths_per_second": res.throughput["paths_per_second"]})
    if res.trajectories is not None:
        out.trajectory = (np.asarray(res.trajectory_steps), model.terminal_mean(res.trajectories))
    return out


def _sample_count(cfg):
    return cfg["samples.count"] or cfg["resampling.paths"]


def _add_reference_metrics(cfg, outputs, reference_key, truth=None, coverage_cols=None, groups=None):
    """MMD / correlation / coverage computed from samples (shared by several experiments)."""
    ref = outputs.get(reference_key)
    level = cfg["coverage.level"]
    for name, out in outputs.items():
        if out.samples is None:
            continue
        x = out.samples.values
        if "coverage" in cfg.metrics and truth is not None:
            for label, cols in (groups or {"coverage": slice(None)}).items():
                if label not in out.metrics:
                    out.metrics[label] = marginal_coverage(x[:, cols], np.asarray(truth)[cols], level)[1]
        if ref is not None and name != reference_key:
            r = ref.samples.values
            if "mmd" in cfg.metrics:
                out.metrics["mmd"] = mmd_squared(x, r, whitening_reference=r, seed=cfg.seed)
            if "correlation" in cfg.metrics:
                pc = pearson_matrix(x)
                out.metrics["corr_gap"] = max_offdiag_gap(pc, pearson_matrix(r))
                out.metrics["corr_max_abs"] = max_offdiag_gap(pc, np.eye(pc.shape[0]))


def _throughput(cfg, outputs):
    for out in outputs.values():
        if "throughput" not in cfg.metrics:
            out.timing.pop("paths_per_second", None)
            out.timing.pop("ess_per_second", None)


def _location(cfg: ExperimentConfig, k: int) -> ReplicateResult:
    spec = datagen.LocationSpec(cfg["data.dim"], cfg["data.n"] or 10, cfg["data.eig_low"], cfg["data.eig_high"])
    A, theta, y = datagen.gen_location(spec, keyed_generator(cfg.seed, _DATA, k))
    model = GaussianLocationModel(A, y)
    exact = exact_posterior_location(model)
    rseed = _replicate_seed(cfg.seed, k)
    L = _sample_count(cfg)
    outputs, tables = {}, {}
    for method in cfg.methods:
        rng = keyed_generator(cfg.seed, _DRAWS, k, METHODS.index(method))
        if method == "exact":
            t0 = time.perf_counter()
            outputs[method] = MethodOutput(SampleMatrix(exact.sample(rng, L), model.names))
            outputs[method].timing["seconds"] = time.perf_counter() - t0
        elif method == "mf_vi":
            t0 = time.perf_counter()
            state = location_closed_form(model, y)
            outputs[method] = MethodOutput(mf_sample(state, rng, L, model.names))
            outputs[method].timing["seconds"] = time.perf_counter() - t0
        else:
            outputs[method] = _vpr(model, cfg, method, rseed)

    if "kld" in cfg.metrics:
        rows = []
        for n in cfg["data.ns"]:
            zeros = np.zeros((n, spec.dim))
            post = exact_posterior_location(model, zeros)
            mf = location_closed_form(model, zeros)
            k_mf = kld_gaussians(GaussianPosterior(mf.mean, np.diag(mf.variance)), post)
            k_vpr = kld_gaussians(vpr_limit_law(model, zeros), post)
            rows.append([n, k_mf, mf_location_kld(model.precision, n), k_vpr])
        limit = mf_location_kld(model.precision, np.inf)
        tables["kld"] = (["n", "kld_mf", "kld_mf_formula", "kld_vpr_limit"], rows)
        arr = np.array(rows)
        slope = float(np.polyfit(np.log(arr[:, 0]), np.log(arr[:, 3]), 1)[0])
        mf_metrics = {f"kld_n{int(r[0])}": float(r[1]) for r in rows}
        mf_metrics["kld_limit"] = limit
        vpr_metrics = {f"kld_n{int(r[0])}": float(r[3]) for r in rows}
        vpr_metrics["kld_loglog_slope"] = slope
        for name, met in (("mf_vi", mf_metrics), ("vpr_ideal", vpr_metrics)):
            outputs.setdefault(name, MethodOutput()).metrics.update(met)
    if "limit_cov" in cfg.metrics and cfg["resampling.horizon"] > 0:
        n = y.shape[0]
        V = vpr_limit_covariance(model, n, cfg["resampling.horizon"])["V_partial"]
        for name in ("vpr_ideal", "vpr_scalable"):
            if name in outputs and outputs[name].samples is not None:
                x = outputs[name].samples.values
                outputs[name].metrics["cov_frobenius_error"] = float(np.linalg.norm(np.cov(x, rowvar=False) - V))
                se = np.sqrt(np.diag(V) / x.shape[0])
                outputs[name].metrics["mean_max_z"] = float(np.max(np.abs(x.mean(0) - exact.mean) / se))
    _throughput(cfg, outputs)
    return ReplicateResult(k, outputs, tables)


def _linreg(cfg: ExperimentConfig, k: int) -> ReplicateResult:
    d = cfg["data.d"]
    spec = datagen.SpectrumDesignSpec(cfg["data.n"] or 3 * d, d, cfg["data.kappa_ref"], cfg["data.d_ref"],
                                      cfg["data.alpha"], cfg["data.kappa_max"], cfg["data.signal_var"],
                                      cfg["model.noise_var"])
    beta_star = datagen.gen_spectrum_truth(spec, keyed_generator(cfg.seed, _TRUTH))
    X, _, y = datagen.gen_spectrum_design(spec, keyed_generator(cfg.seed, _DATA, k), beta_star)
    model = LinearRegressionModel(X, cfg["model.noise_var"], cfg["model.prior_scale"], y)
    exact = exact_posterior_linreg(model)
    level = cfg["coverage.level"]
    L = _sample_count(cfg)
    rseed = _replicate_seed(cfg.seed, k)
    outputs = {}
    for method in cfg.methods:
        rng = keyed_generator(cfg.seed, _DRAWS, k, METHODS.index(method))
        if method == "exact":
            t0 = time.perf_counter()
            out = MethodOutput(SampleMatrix(exact.sample(rng, L), model.names))
            out.timing["seconds"] = time.perf_counter() - t0
            out.metrics["coverage"] = _gaussian_coverage(exact.mean, np.sqrt(np.diag(exact.cov)), beta_star, level)
        elif method == "mf_vi":
            t0 = time.perf_counter()
            state = linreg_closed_form(model, y)
            out = MethodOutput(mf_sample(state, rng, L, model.names))
            out.timing["seconds"] = time.perf_counter() - t0
            out.metrics["coverage"] = _gaussian_coverage(state.mean, state.scale, beta_star, level)
        elif method == "mcmc":
            chain, ess, secs = _run_mcmc(exact.log_density, exact.mean, cfg, (cfg.seed, _MCMC, k))
            out = MethodOutput(SampleMatrix(chain.draws, model.names),
                               timing={"seconds": secs, "ess_per_second": ess / secs})
            out.metrics.update({"min_ess": ess, "acceptance_rate": chain.acceptance_rate})
        else:
            out = _vpr(model, cfg, method, rseed)
        outputs[method] = out
    _add_reference_metrics(cfg, outputs, "exact", beta_star)
    _throughput(cfg, outputs)
    return ReplicateResult(k, outputs)


def _logistic_common(cfg, k, model, truth, test_set=None):
    rseed = _replicate_seed(cfg.seed, k)
    L = _sample_count(cfg)
    names = model.names
    t0 = time.perf_counter()
    p0, _ = fit_mean_field(model, steps=cfg["mf.steps"], step_size=cfg["mf.step_size"])
    mf_seconds = time.perf_counter() - t0
    d = model.dim
    outputs = {}
    for method in cfg.methods:
        rng = keyed_generator(cfg.seed, _DRAWS, k, METHODS.index(method))
        if method == "mf_vi":
            out = MethodOutput(_mf_gaussian_samples(p0[:d], np.exp(p0[d:]), names, rng, L),
                               timing={"seconds": mf_seconds})
            if truth is not None and "coverage" in cfg.metrics:
                out.metrics["coverage"] = _gaussian_coverage(p0[:d], np.exp(p0[d:]), truth, cfg["coverage.level"])
        elif method == "mcmc":
            chain, ess, secs = _run_mcmc(model.log_joint, p0[:d], cfg, (cfg.seed, _MCMC, k))
            out = MethodOutput(SampleMatrix(chain.draws, names),
                               timing={"seconds": secs, "ess_per_second": ess / secs})
            out.metrics.update({"min_ess": ess, "acceptance_rate": chain.acceptance_rate})
        else:
            out = _vpr(model, cfg, method, rseed, initial=p0)
        outputs[method] = out
    _add_reference_metrics(cfg, outputs, "mcmc", truth)
    if test_set is not None and "nlpd" in cfg.metrics:
        for out in outputs.values():
            out.metrics["nlpd"] = nlpd(out.samples, model, test_set)
        if "mcmc" in outputs:
            base = outputs["mcmc"].metrics["nlpd"]
            for name, out in outputs.items():
                if name != "mcmc":
                    out.metrics["nlpd_ratio"] = out.metrics["nlpd"] / base
    _throughput(cfg, outputs)
    return ReplicateResult(k, outputs)


def _logistic_sim(cfg: ExperimentConfig, k: int) -> ReplicateResult:
    spec = datagen.ToeplitzLogisticSpec(cfg["data.n"] or 15, cfg["data.d"], cfg["data.rho"])
    X, beta, y = datagen.gen_toeplitz_logistic(spec, keyed_generator(cfg.seed, _DATA, k))
    model = LogisticRegressionModel(X, y, cfg["model.prior_scale"], cfg["model.quad_nodes"])
    return _logistic_common(cfg, k, model, beta)


def _logistic_real(cfg: ExperimentConfig, k: int) -> ReplicateResult:
    path = Path(cfg["data.csv"])
    train, test = datagen.load_csv(path, cfg["data.label_column"], cfg["data.standardize"],
                                   (cfg["data.train_n"], _replicate_seed(cfg.seed, k)))
    for part in (train.y, test.y):
        if not np.all((part == 0) | (part == 1)):
            raise ValueError(f"{path}: label column {cfg['data.label_column']!r} must be 0/1")
    model = LogisticRegressionModel(train.X, train.y, cfg["model.prior_scale"], cfg["model.quad_nodes"])
    model.names = list(train.feature_names)
    test_set = list(zip(test.X, test.y)) if len(test.y) else None
    return _logistic_common(cfg, k, model, None, test_set)


def _lmre(cfg: ExperimentConfig, k: int) -> ReplicateResult:
    G, r, d = cfg["data.G"], cfg["data.r"], cfg["data.d"]
    spec = datagen.LmreSpec(d=d, r=r, G=G, group_sizes=cfg["data.group_sizes"], noise_var=cfg["model.noise_var"],
                            design_corr=cfg["data.design_corr"], shared_design=cfg["data.shared_design"])
    ds = datagen.gen_lmre(spec, keyed_generator(cfg.seed, _DATA, k))
    model = LmreModel(ds.groups, cfg["model.noise_var"], cfg["model.prior_scale"])
    truth = ds.truth
    L = _sample_count(cfg)
    rseed = _replicate_seed(cfg.seed, k)
    t0 = time.perf_counter()
    p0, _ = fit_mean_field(model, steps=cfg["mf.steps"], step_size=cfg["mf.step_size"])
    mf_seconds = time.perf_counter() - t0
    parts = model.unpack(p0)
    mf_mean = np.concatenate([parts["mb"], parts["mu"].ravel()])
    mf_sd = np.exp(np.concatenate([parts["lb"], parts["lu"].ravel()]))
    beta_cols = np.arange(d)
    outputs = {}
    for method in cfg.methods:
        rng = keyed_generator(cfg.seed, _DRAWS, k, METHODS.index(method))
        if method == "mf_vi":
            out = MethodOutput(_mf_gaussian_samples(mf_mean, mf_sd, model.names, rng, L),
                               timing={"seconds": mf_seconds})
            level = cfg["coverage.level"]
            out.metrics["coverage_beta"] = _gaussian_coverage(mf_mean[:d], mf_sd[:d], truth[:d], level)
            out.metrics["coverage_u"] = _gaussian_coverage(mf_mean[d:], mf_sd[d:], truth[d:], level)
        elif method == "mcmc":
            D0 = model.unpack(p0)["chol"]
            D0 = D0 @ D0.T / max(float(parts["dof"]) + r + 1, 1.0)
            chol0 = np.linalg.cholesky(D0)
            entries = chol0[np.tril_indices(r)].copy()
            entries[model._diag_pos] = np.log(entries[model._diag_pos])
            z0 = np.concatenate([mf_mean, entries])
            chain, ess, secs = _run_mcmc(model.log_joint_unconstrained, z0, cfg, (cfg.seed, _MCMC, k),
                                         cols=beta_cols)
            out = MethodOutput(SampleMatrix(chain.draws[:, : model.dim], model.names),
                               timing={"seconds": secs, "ess_per_second": ess / secs})
            out.metrics.update({"min_ess": ess, "acceptance_rate": chain.acceptance_rate})
        else:
            out = _vpr(model, cfg, method, rseed, initial=p0)
        outputs[method] = out
    groups = {"coverage_beta": slice(0, d), "coverage_u": slice(d, None)}
    _add_reference_metrics(cfg, outputs, "mcmc", truth, groups=groups)
    _throughput(cfg, outputs)
    return ReplicateResult(k, outputs)


_RUNNERS = {
    "gaussian_location_kld": _location,
    "linreg_coverage": _linreg,
    "logistic_sim": _logistic_sim,
    "logistic_real": _logistic_real,
    "lmre": _lmre,
}


def run_replicate(config: ExperimentConfig, k: int) -> ReplicateResult:
    return _RUNNERS[config.experiment](config, k)


# ---------------------------------------------------------------------------
# aggregation and manifest


def _clean(v):
    if v is None:
        return None
    v = float(v)
    return v if math.isfinite(v) else None


def confidence_interval(values):
    """mean +- 1.96 sd / sqrt(R) over replicates (sd with ddof = 1)."""
    x = np.asarray([v for v in values if v is not None and math.isfinite(v)], dtype=float)
    if x.size == 0:
        return {"mean": None, "sd": None, "ci_low": None, "ci_high": None, "n": 0}
    mean = float(x.mean())
    if x.size < 2:
        return {"mean": mean, "sd": None, "ci_low": None, "ci_high": None, "n": int(x.size)}
    sd = float(x.std(ddof=1))
    half = 1.96 * sd / math.sqrt(x.size)
    return {"mean": mean, "sd": sd, "ci_low": mean - half, "ci_high": mean + half, "n": int(x.size)}


def _summarise(reps, key):
    out = {}
    for rep in reps:
        for method, vals in rep[key].items():
            for name, v in vals.items():
                out.setdefault(method, {}).setdefault(name, []).append(v)
    return {m: {name: confidence_interval(vs) for name, vs in sorted(d.items())} for m, d in sorted(out.items())}


def build_manifest(config: ExperimentConfig, replicate_records: list) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "experiment": config.experiment,
        "seed": config.seed,
        "methods": list(config.methods),
        "config": config.flat(),
        "replicates": replicate_records,
        "summary": _summarise(replicate_records, "metrics"),
        "timing_summary": _summarise(replicate_records, "timing"),
    }


def _record(rep: ReplicateResult) -> dict:
    return {
        "replicate": rep.index,
        "metrics": {m: {k: _clean(v) for k, v in sorted(o.metrics.items())} for m, o in sorted(rep.methods.items())},
        "timing": {m: {k: _clean(v) for k, v in sorted(o.timing.items())} for m, o in sorted(rep.methods.items())},
    }


_STAT = {"type": "object", "required": ["mean", "sd", "ci_low", "ci_high", "n"],
         "properties": {"mean": {"type": ["number", "null"]}, "sd": {"type": ["number", "null"]},
                        "ci_low": {"type": ["number", "null"]}, "ci_high": {"type": ["number", "null"]},
                        "n": {"type": "integer", "minimum": 0}},
         "additionalProperties": False}
_NUM_MAP = {"type": "object", "additionalProperties": {"type": ["number", "null"]}}
_PER_METHOD = {"type": "object", "propertyNames": {"enum": list(METHODS)}, "additionalProperties": _NUM_MAP}
_SUMMARY = {"type": "object", "propertyNames": {"enum": list(METHODS)},
            "additionalProperties": {"type": "object", "additionalProperties": _STAT}}

MANIFEST_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "vpr experiment manifest",
    "type": "object",
    "required": ["schema_version", "experiment", "seed", "methods", "config", "replicates", "summary",
                 "timing_summary"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "experiment": {"enum": list(EXPERIMENTS)},
        "seed": {"type": "integer"},
        "methods": {"type": "array", "items": {"enum": list(METHODS)}, "minItems": 1},
        "config": {"type": "object"},
        "replicates": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["replicate", "metrics", "timing"],
                "properties": {"replicate": {"type": "integer", "minimum": 0},
                               "metrics": _PER_METHOD, "timing": _PER_METHOD},
                "additionalProperties": False,
            },
        },
        "summary": _SUMMARY,
        "timing_summary": _SUMMARY,
    },
    "additionalProperties": False,
}


def validate_manifest(manifest: dict) -> None:
    jsonschema.validate(manifest, MANIFEST_SCHEMA)


def without_timing(manifest: dict) -> dict:
    """Copy of a manifest with every wall-clock field removed."""
    out = {k: v for k, v in manifest.items() if k != "timing_summary"}
    out["replicates"] = [{k: v for k, v in r.items() if k != "timing"} for r in manifest["replicates"]]
    return out


# ---------------------------------------------------------------------------
# writers


def _atomic_write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv_text(header, rows, fmt="%.17g"):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt % v if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


def write_matrix_csv(path: Path, header, matrix, fmt="%.17g"):
    _atomic_write(Path(path), _csv_text(header, np.asarray(matrix, dtype=float).tolist(), fmt))


def read_matrix_csv(path):
    """(header, matrix) of a CSV written by this module."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return rows[0], np.array([[float(c) for c in r] for r in rows[1:]], dtype=float).reshape(len(rows) - 1, -1)


def emit_replicate(rep: ReplicateResult, out_dir) -> list:
    """Write sample, pair-summary, trajectory and table CSVs of one replicate."""
    d = Path(out_dir) / f"replicate_{rep.index:03d}"
    written = []
    for method, out in sorted(rep.methods.items()):
        if out.samples is not None:
            s = out.samples
            x = s.values
            paths = {
                "samples": (s.names, x),
                "mean": (s.names, x.mean(axis=0)[None, :]),
                "cov": (s.names, np.atleast_2d(np.cov(x, rowvar=False))),
                "corr": (s.names, pearson_matrix(s)),
            }
            for kind, (header, mat) in paths.items():
                p = d / f"{method}_{kind}.csv"
                write_matrix_csv(p, header, mat)
                written.append(p)
        if out.trajectory is not None:
            steps, traj = out.trajectory
            L, T, p_dim = traj.shape
            names = out.samples.names if out.samples is not None else [f"theta[{j}]" for j in range(p_dim)]
            block = np.column_stack([np.repeat(np.arange(L), T), np.tile(steps, L), traj.reshape(L * T, p_dim)])
            p = d / f"{method}_trajectory.csv"
            lines = [",".join(["path", "step"] + list(names))]
            lines += [f"{int(r[0])},{int(r[1])}," + ",".join("%.10g" % v for v in r[2:]) for r in block]
            _atomic_write(p, "\n".join(lines) + "\n")
            written.append(p)
    for name, (header, rows) in rep.tables.items():
        p = d / f"{name}.csv"
        _atomic_write(p, _csv_text(header, rows))
        written.append(p)
    return written


def emit_manifest(manifest: dict, out_dir) -> list:
    validate_manifest(manifest)
    out_dir = Path(out_dir)
    p = out_dir / "manifest.json"
    _atomic_write(p, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    rows = []
    for block in ("summary", "timing_summary"):
        for method, metrics in manifest[block].items():
            for name, st in metrics.items():
                rows.append([method, name, st["mean"], st["ci_low"], st["ci_high"], st["n"]])
    s = out_dir / "summary.csv"
    _atomic_write(s, _csv_text(["method", "metric", "mean", "ci_low", "ci_high", "replicates"],
                               [[("" if v is None else v) for v in r] for r in rows]))
    return [p, s]


def emit_outputs(results: ExperimentResult, out_dir=None) -> list:
    """Write every file of an in-memory :class:`ExperimentResult`."""
    out_dir = resolve_output_dir(results.config) if out_dir is None else Path(out_dir)
    written = []
    for rep in results.replicates:
        written += emit_replicate(rep, out_dir)
    return written + emit_manifest(results.manifest, out_dir)


def resolve_output_dir(config: ExperimentConfig, output_root=None) -> Path:
    out = Path(config.output_dir)
    if out.is_absolute():
        return out
    root = output_root if output_root is not None else os.environ.get(OUTPUT_ROOT_ENV, "")
    return Path(root) / out if root else out


def run_experiment(config: ExperimentConfig, output_dir=None, write: bool = True, keep_samples: bool = False,
                   progress=None) -> ExperimentResult:
    """Run every replicate, write outputs as they complete, return the manifest.

    Replicates are written one at a time so memory stays bounded; pass
    ``keep_samples=True`` to also keep every replicate's samples in memory.
    """
    out_dir = resolve_output_dir(config) if output_dir is None else Path(output_dir)
    if write:
        try:
            out_dir.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise OSError(f"cannot create output directory {out_dir}: {exc}") from exc
        if not os.access(out_dir, os.W_OK):
            raise OSError(f"output directory {out_dir} is not writable")
    records, kept = [], []
    for k in range(config.replicates):
        rep = run_replicate(config, k)
        records.append(_record(rep))
        if write:
            emit_replicate(rep, out_dir)
        if keep_samples:
            kept.append(rep)
        if progress is not None:
            progress(k, rep)
    manifest = build_manifest(config, records)
    if write:
        emit_manifest(manifest, out_dir)
    else:
        validate_manifest(manifest)
    return ExperimentResult(config, kept, manifest)
