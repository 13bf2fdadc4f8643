"""Experiment runner, output files and the command-line interface."""

import json
import math

import jsonschema
import numpy as np
import pytest

from vpr import cli
from vpr.experiments import (EXPERIMENTS, MANIFEST_SCHEMA, OUTPUT_ROOT_ENV, PRESETS, ConfigError,
                             confidence_interval, load_config, parse_config_text, read_matrix_csv,
                             resolve_output_dir, run_experiment, validate_manifest, without_timing)
from vpr.metrics import pearson_matrix

TINY_LINREG = """\
experiment = linreg_coverage
methods = exact, mf_vi, vpr_ideal
replicates = 1
seed = 3
data.d = 4
resampling.horizon = 150
resampling.paths = 120
"""


def tiny(extra=""):
    return load_config(TINY_LINREG, [ln for ln in extra.splitlines() if ln.strip()])


# -- config parsing ----------------------------------------------------------------------

def test_every_experiment_has_a_valid_preset():
    assert set(PRESETS) == set(EXPERIMENTS)
    for name in PRESETS:
        cfg = load_config(name)
        assert cfg.experiment == name


def test_parse_keeps_key_case_and_strips_comments():
    raw = parse_config_text("data.G = 4  # groups\n# a comment\nexperiment = lmre\n")
    assert raw == {"data.G": "4", "experiment": "lmre"}


def test_overrides_apply_on_top_of_preset():
    cfg = load_config("linreg_coverage", ["replicates=3", "data.d=5"])
    assert cfg.replicates == 3 and cfg["data.d"] == 5
    assert cfg["model.prior_scale"] == 1000


@pytest.mark.parametrize("text, fragment", [
    ("methods = exact\n", "missing required key 'experiment'"),
    ("experiment = linreg_coverage\n", "missing required key 'methods'"),
    ("experiment = nope\nmethods = exact\n", "unknown experiment"),
    ("experiment = linreg_coverage\nmethods = exact\nbogus.key = 1\n", "unknown key"),
    ("experiment = logistic_sim\nmethods = vpr_ideal, mcmc\n", "not available for logistic_sim"),
    ("experiment = lmre\nmethods = exact, mcmc\n", "not available for lmre"),
    ("experiment = linreg_coverage\nmethods = mf_vi\nmetrics = mmd\n", "needs the 'exact' method"),
    ("experiment = linreg_coverage\nmethods = exact\nresampling.paths = 0\n", "resampling.paths must be >= 1"),
    ("experiment = linreg_coverage\nmethods = exact\nreplicates = 1.5\n", "not an integer"),
    ("experiment = linreg_coverage\nmethods = exact\ncoverage.level = 1.2\n", "coverage.level"),
    ("experiment = lmre\nmethods = mf_vi\ndata.G = 3\n", "one entry per group"),
    ("experiment = logistic_real\nmethods = mf_vi\n", "needs data.csv"),
    ("experiment = linreg_coverage\nmethods = vpr_scalable\nresampling.terminal = mle_refit\n",
     "only available for vpr_ideal"),
])
def test_invalid_configs_are_rejected(text, fragment):
    with pytest.raises(ConfigError) as exc:
        load_config(text)
    assert any(fragment in p for p in exc.value.problems), exc.value.problems


def test_duplicate_keys_are_rejected():
    with pytest.raises(ConfigError, match="already exists"):
        load_config(TINY_LINREG + "seed = 4\n")


def test_all_problems_are_reported_together():
    with pytest.raises(ConfigError) as exc:
        load_config("experiment = linreg_coverage\nmethods = exact\nresampling.paths = 0\nmf.steps = 0\n")
    assert len(exc.value.problems) == 2


def test_horizon_zero_is_valid():
    assert tiny("resampling.horizon = 0\n")["resampling.horizon"] == 0


def test_output_root_env(monkeypatch, tmp_path):
    cfg = tiny("output_dir = sub\n")
    monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path))
    assert resolve_output_dir(cfg) == tmp_path / "sub"
    monkeypatch.delenv(OUTPUT_ROOT_ENV)
    assert str(resolve_output_dir(cfg)) == "sub"
    absolute = tiny(f"output_dir = {tmp_path / 'abs'}\n")
    assert resolve_output_dir(absolute, output_root="/elsewhere") == tmp_path / "abs"


# -- run_experiment ----------------------------------------------------------------------

def test_exact_only_run_reports_exact_coverage_only(tmp_path):
    cfg = tiny("methods = exact\n")
    res = run_experiment(cfg, output_dir=tmp_path)
    assert set(res.manifest["summary"]) == {"exact"}
    assert set(res.manifest["summary"]["exact"]) == {"coverage"}
    cov = res.manifest["replicates"][0]["metrics"]["exact"]["coverage"]
    assert 0 <= cov <= 1 and (cov * 4) == int(cov * 4)  # d = 4 coordinates


def test_linreg_preset_mf_undercovers(tmp_path):
    # d = 10, n = 30 as in the preset, with a reduced replicate count and path budget
    cfg = load_config("linreg_coverage", ["replicates=6", "methods=exact,mf_vi,vpr_ideal",
                                          "resampling.paths=300", "resampling.horizon=1500"])
    assert cfg["data.d"] == 10 and cfg["data.n"] == 30
    summary = run_experiment(cfg, output_dir=tmp_path).manifest["summary"]
    for method in ("exact", "mf_vi", "vpr_ideal"):
        assert summary[method]["coverage"]["n"] == 6
    assert summary["mf_vi"]["coverage"]["mean"] < summary["exact"]["coverage"]["mean"]
    assert summary["mf_vi"]["coverage"]["mean"] < summary["vpr_ideal"]["coverage"]["mean"]


def test_location_preset_writes_kld_and_trajectory_files(tmp_path):
    cfg = load_config("gaussian_location_kld", ["resampling.paths=50", "resampling.horizon=200"])
    res = run_experiment(cfg, output_dir=tmp_path)
    rep = tmp_path / "replicate_000"
    header, table = read_matrix_csv(rep / "kld.csv")
    assert header == ["n", "kld_mf", "kld_mf_formula", "kld_vpr_limit"]
    assert list(table[:, 0]) == [10, 20, 50, 100, 200, 500, 1000]
    assert np.allclose(table[:, 1], table[:, 2], rtol=1e-9, atol=1e-13)
    # MF tends to a positive constant, the VPR limit law decays
    assert table[-1, 1] > 10 * table[-1, 3]
    slope = res.manifest["summary"]["vpr_ideal"]["kld_loglog_slope"]["mean"]
    assert -2.3 <= slope <= -1.7
    lines = (rep / "vpr_ideal_trajectory.csv").read_text().splitlines()
    assert lines[0].split(",")[:2] == ["path", "step"]
    assert len({ln.split(",")[0] for ln in lines[1:]}) == 50
    assert "cov_frobenius_error" in res.manifest["summary"]["vpr_ideal"]


def test_logistic_real_runs_on_a_csv(tmp_path, rng):
    n, d = 40, 3
    X = rng.standard_normal((n, d))
    y = (X @ np.array([1.0, -1.0, 0.5]) + rng.logistic(size=n) > 0).astype(int)
    path = tmp_path / "data.csv"
    path.write_text("a,b,c,label\n" + "\n".join(f"{r[0]},{r[1]},{r[2]},{t}" for r, t in zip(X, y)) + "\n")
    cfg = load_config("logistic_real", [f"data.csv={path}", "replicates=1", "data.train_n=30",
                                        "resampling.paths=40", "resampling.horizon=60", "mf.steps=300",
                                        "mcmc.warmup=500", "mcmc.draws=400", "mcmc.min_ess=10",
                                        "resampling.batch_size=10"])
    res = run_experiment(cfg, output_dir=tmp_path / "out")
    summary = res.manifest["summary"]
    for method in ("mf_vi", "vpr_scalable", "mcmc"):
        assert math.isfinite(summary[method]["nlpd"]["mean"])
    header, _ = read_matrix_csv(tmp_path / "out" / "replicate_000" / "mcmc_samples.csv")
    assert header == ["a", "b", "c"]


# -- outputs -----------------------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny")
    cfg = tiny("replicates = 3\nmethods = exact, mf_vi, vpr_ideal, vpr_scalable\n"
               "resampling.trajectory = true\n")
    return cfg, out, run_experiment(cfg, output_dir=out)


def test_manifest_round_trips_through_schema(tiny_run):
    _, out, res = tiny_run
    loaded = json.loads((out / "manifest.json").read_text())
    validate_manifest(loaded)
    assert loaded == json.loads(json.dumps(res.manifest))
    broken = dict(loaded, schema_version="0.0")
    with pytest.raises(jsonschema.ValidationError):
        jsonschema.validate(broken, MANIFEST_SCHEMA)


def test_sample_csv_has_one_row_per_path(tiny_run):
    cfg, out, _ = tiny_run
    for method in cfg.methods:
        header, x = read_matrix_csv(out / "replicate_001" / f"{method}_samples.csv")
        assert header == [f"beta[{j}]" for j in range(4)]
        assert x.shape == (cfg["resampling.paths"], 4)


def test_pair_summary_csvs_match_samples(tiny_run):
    cfg, out, _ = tiny_run
    rep = out / "replicate_002"
    for method in cfg.methods:
        _, x = read_matrix_csv(rep / f"{method}_samples.csv")
        _, corr = read_matrix_csv(rep / f"{method}_corr.csv")
        _, cov = read_matrix_csv(rep / f"{method}_cov.csv")
        _, mean = read_matrix_csv(rep / f"{method}_mean.csv")
        assert np.max(np.abs(corr - pearson_matrix(x))) <= 1e-12
        assert np.allclose(cov, np.cov(x, rowvar=False), rtol=1e-12, atol=1e-15)
        assert np.allclose(mean[0], x.mean(axis=0), rtol=1e-12, atol=1e-15)


def test_trajectory_csv_written_for_vpr_only(tiny_run):
    cfg, out, _ = tiny_run
    rep = out / "replicate_000"
    assert (rep / "vpr_ideal_trajectory.csv").exists()
    assert (rep / "vpr_scalable_trajectory.csv").exists()
    assert not (rep / "exact_trajectory.csv").exists()


def test_ci_formula_by_hand(tiny_run):
    _, _, res = tiny_run
    vals = [r["metrics"]["mf_vi"]["coverage"] for r in res.manifest["replicates"]]
    assert len(vals) == 3
    m = sum(vals) / 3
    sd = math.sqrt(sum((v - m) ** 2 for v in vals) / 2)
    st = res.manifest["summary"]["mf_vi"]["coverage"]
    assert st["n"] == 3
    assert st["mean"] == pytest.approx(m, abs=1e-15)
    assert st["ci_low"] == pytest.approx(m - 1.96 * sd / math.sqrt(3), abs=1e-14)
    assert st["ci_high"] == pytest.approx(m + 1.96 * sd / math.sqrt(3), abs=1e-14)


def test_ci_edge_cases():
    assert confidence_interval([])["mean"] is None
    one = confidence_interval([0.5])
    assert one["mean"] == 0.5 and one["ci_low"] is None and one["n"] == 1
    assert confidence_interval([1.0, float("nan"), 3.0])["n"] == 2


def test_same_seed_same_metrics(tiny_run, tmp_path):
    cfg, _, res = tiny_run
    again = run_experiment(cfg, output_dir=tmp_path)
    assert without_timing(again.manifest) == without_timing(res.manifest)
    other = run_experiment(tiny("replicates = 3\nmethods = exact, mf_vi, vpr_ideal, vpr_scalable\n"
                                "resampling.trajectory = true\nseed = 4\n"), write=False)
    assert without_timing(other.manifest) != without_timing(res.manifest)


def test_timing_recorded_for_sampling_methods(tiny_run):
    _, _, res = tiny_run
    timing = res.manifest["replicates"][0]["timing"]
    assert timing["vpr_ideal"]["seconds"] > 0
    assert timing["vpr_scalable"]["paths_per_second"] > 0


def test_unwritable_output_dir_fails(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        run_experiment(tiny("methods = exact\n"), output_dir=blocker / "sub")


# -- CLI ---------------------------------------------------------------------------------

def test_cli_presets_list(capsys):
    assert cli.main(["presets", "list"]) == cli.EXIT_OK
    names = [line.split()[0] for line in capsys.readouterr().out.splitlines()]
    assert names == list(PRESETS)


def test_cli_presets_show(capsys):
    assert cli.main(["presets", "show", "logistic_sim"]) == 0
    assert capsys.readouterr().out == PRESETS["logistic_sim"]
    assert cli.main(["presets", "show", "nope"]) == cli.EXIT_USAGE
    assert "no preset named" in capsys.readouterr().err


def test_cli_validate(capsys, tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text(TINY_LINREG)
    assert cli.main(["validate", str(path)]) == cli.EXIT_OK
    assert capsys.readouterr().out.startswith("ok: linreg_coverage")
    path.write_text("experiment = linreg_coverage\nmethods = mcmc, banana\n")
    assert cli.main(["validate", str(path)]) == cli.EXIT_USAGE
    assert "vpr: config error: unknown method 'banana'" in capsys.readouterr().err
    assert cli.main(["validate", str(tmp_path / "missing.cfg")]) == cli.EXIT_USAGE


def test_cli_run_writes_under_output_root(monkeypatch, tmp_path, capsys):
    path = tmp_path / "c.cfg"
    path.write_text(TINY_LINREG + "output_dir = rel\n")
    monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path / "root"))
    assert cli.main(["run", str(path), "--quiet"]) == cli.EXIT_OK
    assert (tmp_path / "root" / "rel" / "manifest.json").exists()
    assert (tmp_path / "root" / "rel" / "summary.csv").exists()
    assert "wrote" in capsys.readouterr().out


def test_cli_run_failure_exit_code(tmp_path, capsys):
    bad_csv = tmp_path / "d.csv"
    bad_csv.write_text("a,label\n1,2\n3,5\n4,0\n")
    code = cli.main(["run", "logistic_real", "--quiet", "--set", f"data.csv={bad_csv}",
                     "--set", "data.train_n=2", "--output-dir", str(tmp_path / "o")])
    assert code == cli.EXIT_FAILURE
    assert capsys.readouterr().err.startswith("vpr: error:")


def test_cli_bad_override_is_usage_error(capsys):
    assert cli.main(["validate", "linreg_coverage", "--set", "replicates"]) == cli.EXIT_USAGE
    assert cli.main(["validate", "linreg_coverage", "--set", "replicates=-1"]) == cli.EXIT_USAGE


def test_cli_usage_error_from_argparse():
    with pytest.raises(SystemExit) as exc:
        cli.main(["frobnicate"])
    assert exc.value.code == cli.EXIT_USAGE
