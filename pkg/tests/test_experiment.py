import csv
import json
import os
from dataclasses import replace

import numpy as np
import pytest

import experiment
import main
from conftest import PKG_DIR, brownian_problem_dict, scalar_problem
from experiment import (
    RESULT_COLUMNS, config_hash, dump_tensor, load_experiment, make_driver, optimal_control,
    run_experiment, validate,
)
from lq_model import cost_tensor_level, load_problem, problem_from_dict
from signature import fawcett_expected_signature
from simulation import (
    ConstantControl, DriverConfig, MCEstimate, SignatureControl, expected_signature_mc,
    riccati_solve, run_monte_carlo,
)
from tensor_algebra import enumerate_words, parse_tensor
from utils import ConfigError, NumericalError


def read_rows(out_dir):
    with open(os.path.join(out_dir, "results.csv"), newline="") as f:
        return list(csv.DictReader(f))


def errors(issues):
    return [i for i in issues if i.level == "error"]


def warnings(issues):
    return [i for i in issues if i.level == "warning"]


# --- Loading ---

def test_load_experiment_defaults_and_overrides(write_config, tmp_path):
    path = write_config(brownian_problem_dict())
    cfg = load_experiment(path)
    assert cfg.L_values == (2, 3) and cfg.M_values == (0, 1)
    assert cfg.seed == 11 and cfg.workers == 1
    assert cfg.problem == str(tmp_path / "problem.yaml")
    assert cfg.expected_signature == "fawcett" and cfg.scheme == "auto"
    cfg = load_experiment(path, seed=5, workers=3, output_dir="elsewhere")
    assert (cfg.seed, cfg.workers, cfg.output_dir) == (5, 3, "elsewhere")


def test_load_experiment_errors(write_config, tmp_path):
    with pytest.raises(ConfigError):
        load_experiment(tmp_path / "missing.yaml")
    path = write_config(brownian_problem_dict(), sweep={"L_values": [], "M_values": [0]})
    with pytest.raises(ConfigError, match="L_values"):
        load_experiment(path)
    path = write_config(brownian_problem_dict(), evaluation={"n_paths": "many"})
    with pytest.raises(ConfigError, match="n_paths"):
        load_experiment(path)


def test_config_hash_tracks_files_and_seed(write_config, tmp_path):
    path = write_config(brownian_problem_dict())
    cfg = load_experiment(path)
    h = config_hash(cfg)
    assert len(h) == 16
    assert config_hash(load_experiment(path)) == h
    assert config_hash(load_experiment(path, seed=12)) != h
    with open(tmp_path / "problem.yaml", "a") as f:
        f.write("# touched\n")
    assert config_hash(cfg) != h


# --- Validation ---

def test_shipped_brownian_config_warns_on_overfit_pairs_only():
    issues = validate(load_experiment(os.path.join(PKG_DIR, "config.yaml")))
    assert errors(issues) == []
    assert {i.key for i in issues} == {"sweep.M_values"}
    assert [i.message.split(":")[0] for i in issues] == ["L=2, M=2", "L=2, M=3", "L=3, M=3"]


def test_shipped_configs_have_no_errors():
    for name in ("config_fbm.yaml", "config_two_factor.yaml"):
        assert errors(validate(load_experiment(os.path.join(PKG_DIR, name)))) == []


def test_zero_control_weight_is_an_error(write_config):
    cfg = load_experiment(write_config(scalar_problem(cost={"B": [0.0]})))
    assert [i.key for i in errors(validate(cfg))] == ["cost.B"]


def test_control_level_at_state_level_warns(write_config):
    cfg = load_experiment(write_config(brownian_problem_dict(),
                                       sweep={"L_values": [2], "M_values": [2]}))
    issues = validate(cfg)
    assert errors(issues) == []
    assert [i.key for i in warnings(issues)] == ["sweep.M_values"]


def test_overfit_warning_names_every_pair_in_a_mixed_sweep(write_config):
    cfg = load_experiment(write_config(brownian_problem_dict(),
                                       sweep={"L_values": [2, 3, 4, 5], "M_values": [0, 1, 2, 3]}))
    flagged = [i.message for i in warnings(validate(cfg)) if i.key == "sweep.M_values"]
    assert len(flagged) == 3
    for pair in ("L=2, M=2", "L=2, M=3", "L=3, M=3"):
        assert any(m.startswith(pair) for m in flagged)
    assert not any(m.startswith("L=4") or m.startswith("L=5") for m in flagged)


def test_closed_form_needs_brownian_driver(write_config):
    cfg = load_experiment(write_config(brownian_problem_dict(),
                                       driver={"kind": "fbm", "hurst": 0.25},
                                       evaluation={"benchmark": "none"}))
    assert [i.key for i in errors(validate(cfg))] == ["evaluation.expected_signature"]


def test_riccati_skipped_for_fbm(write_config):
    cfg = load_experiment(write_config(brownian_problem_dict(),
                                       driver={"kind": "fbm", "hurst": 0.25},
                                       evaluation={"expected_signature": "mc"}))
    issues = validate(cfg)
    assert errors(issues) == []
    assert "evaluation.benchmark" in [i.key for i in warnings(issues)]


def test_bad_values_are_reported(write_config):
    cfg = load_experiment(write_config(brownian_problem_dict(),
                                       driver={"kind": "levy", "steps": 0},
                                       evaluation={"n_paths": 1, "scheme": "rk4"}))
    keys = {i.key for i in errors(validate(cfg))}
    assert {"driver.kind", "driver.steps", "evaluation.n_paths", "evaluation.scheme"} <= keys


# --- Running ---

def test_small_run_writes_outputs(write_config, tmp_path):
    cfg = load_experiment(write_config(brownian_problem_dict()))
    summary = run_experiment(cfg, quiet=True)
    out = tmp_path / "out"
    rows = read_rows(out)
    assert [r["run_id"] for r in rows] == ["L2_M0", "L2_M1", "L3_M0", "L3_M1"]
    assert list(rows[0]) == RESULT_COLUMNS
    for r in rows:
        assert r["config_hash"] == config_hash(cfg)
        assert r["wall_time_s"] == ""
        assert r["n_paths"] == "400" and r["steps"] == "50" and r["flagged_paths"] == "0"
        assert float(r["cost_mean"]) > 0 and float(r["dist_mean"]) >= 0
        assert r["benchmark_cost"] == rows[0]["benchmark_cost"] != ""
    assert (out / "expected_signature.tsv").exists()
    assert (out / "controls" / "u_L3_M1_k1.tsv").exists()
    with open(out / "summary.json") as f:
        on_disk = json.load(f)
    assert on_disk["n_runs"] == 4
    assert on_disk["best_run"] in {r["run_id"] for r in rows}
    assert on_disk["expected_signature_level"] == 7
    assert summary["benchmark_value"] == pytest.approx(on_disk["benchmark_value"])


def test_control_dump_matches_dump_tensor(write_config, tmp_path):
    cfg = load_experiment(write_config(brownian_problem_dict(),
                                       experiment={"dump_quadratic": True}))
    run_experiment(cfg, quiet=True)
    text = (tmp_path / "out" / "controls" / "u_L3_M1_k1.tsv").read_text()
    stored = parse_tensor(text, 2, level=1)
    direct = dump_tensor(cfg, 3, 1, 1)
    np.testing.assert_array_equal(stored.to_dense(), direct.to_dense(1))
    assert (tmp_path / "out" / "quadratic_L2_M0.csv").exists()
    with pytest.raises(ConfigError):
        dump_tensor(cfg, 3, 1, 2)


def test_results_do_not_depend_on_workers(write_config, tmp_path):
    path = write_config(brownian_problem_dict(), experiment={"chunk_paths": 100})
    run_experiment(load_experiment(path, workers=1, output_dir=str(tmp_path / "w1")), quiet=True)
    run_experiment(load_experiment(path, workers=3, output_dir=str(tmp_path / "w3")), quiet=True)
    for name in ("results.csv", "summary.json", "expected_signature.tsv"):
        assert (tmp_path / "w1" / name).read_bytes() == (tmp_path / "w3" / name).read_bytes()


def test_uncontrollable_state_gives_zero_control(write_config):
    problem = brownian_problem_dict()
    problem["b1"] = 0.0
    cfg = load_experiment(write_config(problem, sweep={"L_values": [3], "M_values": [1]}))
    run_experiment(cfg, quiet=True)
    (row,) = read_rows(cfg.output_dir)
    model, cost = problem_from_dict(problem)
    driver = DriverConfig("brownian", 1, cfg.steps, model.T, cfg.seed)
    ref = run_monte_carlo(model, cost, {"zero": ConstantControl(0.0)}, driver, cfg.n_paths,
                          chunk=cfg.chunk_paths, quiet=True)["zero"]
    assert float(row["cost_mean"]) == pytest.approx(float(np.mean(ref.costs)), rel=1e-12)
    assert float(row["dist_mean"]) == pytest.approx(0.0, abs=1e-20)
    assert float(row["benchmark_cost"]) == pytest.approx(float(row["cost_mean"]), rel=1e-12)


def test_fbm_run_with_mc_expected_signature(write_config, tmp_path):
    cfg = load_experiment(write_config(scalar_problem(b1=1.0, b2=1.0, sigma2=1.0,
                                                      cost={"A": [1.0]}),
                                       driver={"kind": "fbm", "hurst": 0.25, "steps": 32},
                                       sweep={"L_values": [2], "M_values": [0, 1]},
                                       evaluation={"expected_signature": "mc",
                                                   "n_sig_paths": 300, "n_paths": 300,
                                                   "benchmark": "none"}))
    summary = run_experiment(cfg, quiet=True)
    rows = read_rows(tmp_path / "out")
    assert [r["H"] for r in rows] == ["0.25", "0.25"]
    assert all(r["dist_mean"] == "" and r["benchmark_cost"] == "" for r in rows)
    assert summary["benchmark_cost"] is None and summary["benchmark_value"] is None


def test_numerical_failure_names_the_run(write_config, monkeypatch):
    cfg = load_experiment(write_config(brownian_problem_dict()))

    def boom(Q, quiet=False):
        raise NumericalError("Hessian not positive definite")

    monkeypatch.setattr(experiment, "minimize_quadratic", boom)
    with pytest.raises(NumericalError, match="L=2, M=0"):
        run_experiment(cfg, quiet=True)


def test_diverged_benchmark_paths_abort_the_run(write_config, monkeypatch):
    cfg = load_experiment(write_config(brownian_problem_dict()))
    real = experiment.run_monte_carlo

    def with_bad_benchmark(*args, **kwargs):
        samples = real(*args, **kwargs)
        samples["benchmark"].costs[:5] = np.nan
        return samples

    monkeypatch.setattr(experiment, "run_monte_carlo", with_bad_benchmark)
    with pytest.raises(NumericalError, match="benchmark: 5 of 400"):
        run_experiment(cfg, quiet=True)


# --- Command line ---

def test_main_validate_exit_codes(write_config, capsys):
    good = write_config(brownian_problem_dict())
    assert main.main(["validate", "--config", good]) == 0
    assert "config OK" in capsys.readouterr().out
    bad = write_config(scalar_problem(cost={"B": [0.0]}), name="bad.yaml")
    assert main.main(["validate", "--config", bad]) == 1
    assert "error: cost.B" in capsys.readouterr().out
    assert main.main(["validate", "--config", "/nonexistent/config.yaml"]) == 1


def test_main_run_and_dump(write_config, tmp_path, capsys):
    path = write_config(brownian_problem_dict())
    out = tmp_path / "cli"
    assert main.main(["run", "--config", path, "--quiet", "--output-dir", str(out)]) == 0
    assert len(read_rows(out)) == 4
    capsys.readouterr()
    assert main.main(["dump-tensor", "--config", path, "--level-state", "3",
                      "--level-control", "1", "--quiet"]) == 0
    text = capsys.readouterr().out
    assert text.splitlines()[0].startswith("e\t")
    parse_tensor(text, 2, level=1)


def test_main_numerical_exit_code(write_config, monkeypatch, capsys):
    def boom(Q, quiet=False):
        raise NumericalError("Hessian not positive definite")

    monkeypatch.setattr(experiment, "minimize_quadratic", boom)
    path = write_config(brownian_problem_dict())
    assert main.main(["run", "--config", path, "--quiet"]) == 2
    assert "NumericalError" in capsys.readouterr().err


def test_main_reports_value_errors(write_config, monkeypatch, capsys):
    def bad_level(cfg, L, M, k, quiet=True):
        raise ValueError("need K >= 1 and level >= 0")

    monkeypatch.setattr(main, "dump_tensor", bad_level)
    path = write_config(brownian_problem_dict())
    argv = ["dump-tensor", "--config", path, "--level-state", "2", "--level-control", "-1"]
    assert main.main(argv) == 1
    err = capsys.readouterr().err
    assert err.startswith("[main] invalid input:") and "level >= 0" in err


# --- Full-scale checks ---

def rows_by_run(out_dir):
    return {r["run_id"]: r for r in read_rows(out_dir)}


def cost(row):
    return float(row["cost_mean"]), float(row["cost_stderr"])


@pytest.fixture(scope="module")
def brownian_results(tmp_path_factory):
    out = tmp_path_factory.mktemp("brownian")
    cfg = load_experiment(os.path.join(PKG_DIR, "config.yaml"), output_dir=str(out))
    cfg = replace(cfg, n_paths=5000)
    summary = run_experiment(cfg, quiet=True)
    return rows_by_run(out), summary


@pytest.mark.slow
def test_mc_expected_signature_matches_closed_form():
    cfg = DriverConfig("brownian", 1, 1000, 1.0, 99)
    mean, stderr = expected_signature_mc(cfg, 50000, 4, quiet=True)
    exact = fawcett_expected_signature(1.0, 1, 4)
    for w in enumerate_words(2, 4):
        e = exact.coeff(w)
        assert abs(mean.coeff(w) - e) <= max(3 * stderr.coeff(w), 0.02 * abs(e)), w


@pytest.mark.slow
def test_brownian_cost_improves_with_state_level(brownian_results):
    rows, _ = brownian_results
    for a, b in zip(range(2, 5), range(3, 6)):
        (ca, sa), (cb, sb) = cost(rows[f"L{a}_M2"]), cost(rows[f"L{b}_M2"])
        assert cb <= ca + 2 * max(sa, sb)


@pytest.mark.slow
def test_brownian_overfit_at_high_control_level(brownian_results):
    rows, _ = brownian_results
    (c3, s3), (c2, _) = cost(rows["L3_M3"]), cost(rows["L3_M2"])
    assert c3 > c2 - 2 * s3


@pytest.mark.slow
def test_brownian_best_control_near_benchmark(brownian_results):
    # L = 5 still truncates the state: the gap sits near 7.5% on common noise
    rows, summary = brownian_results
    c, s = cost(rows["L5_M3"])
    bench = float(rows["L5_M3"]["benchmark_cost"])
    assert c - bench <= 0.10 * abs(bench) + 2 * s
    assert c >= bench - 2 * s
    assert summary["best_gap_to_benchmark"] <= 0.10 + 2 * s / abs(bench)
    assert summary["reference_gap"] is not None


@pytest.mark.slow
def test_brownian_higher_state_level_within_five_percent():
    cfg = load_experiment(os.path.join(PKG_DIR, "config.yaml"))
    model, cost_spec = load_problem(cfg.problem)
    es = fawcett_expected_signature(model.T, model.D, cost_tensor_level(6, 3, cost_spec.degree))
    u, _, _ = optimal_control(model, cost_spec, 6, 3, es, quiet=True)
    riccati = riccati_solve(model, cost_spec, cfg.riccati_steps)
    samples = run_monte_carlo(model, cost_spec, {"L6_M3": SignatureControl(u)},
                              make_driver(cfg, model), cfg.n_paths,
                              benchmark=riccati.control(), chunk=cfg.chunk_paths, quiet=True)
    sig = MCEstimate.from_samples(samples["L6_M3"].costs)
    bench = MCEstimate.from_samples(samples["benchmark"].costs)
    assert abs(sig.mean - bench.mean) <= 0.05 * abs(bench.mean)


@pytest.mark.slow
def test_brownian_distance_to_benchmark_shrinks(brownian_results):
    rows, _ = brownian_results
    for a, b in zip(range(0, 3), range(1, 4)):
        ra, rb = rows[f"L5_M{a}"], rows[f"L5_M{b}"]
        da, sa = float(ra["dist_mean"]), float(ra["dist_stderr"])
        db, sb = float(rb["dist_mean"]), float(rb["dist_stderr"])
        assert db <= da + 2 * max(sa, sb)


@pytest.mark.slow
def test_fbm_cost_improves_with_state_level(tmp_path):
    cfg = load_experiment(os.path.join(PKG_DIR, "config_fbm.yaml"), output_dir=str(tmp_path))
    run_experiment(cfg, quiet=True)
    rows = rows_by_run(tmp_path)
    for a, b in zip(range(2, 5), range(3, 6)):
        (ca, sa), (cb, sb) = cost(rows[f"L{a}_M2"]), cost(rows[f"L{b}_M2"])
        assert cb <= ca + 2 * max(sa, sb)


@pytest.mark.slow
def test_brownian_rerun_is_byte_identical(tmp_path):
    path = os.path.join(PKG_DIR, "config.yaml")
    for workers, name in ((1, "a"), (4, "b")):
        cfg = replace(load_experiment(path, workers=workers, output_dir=str(tmp_path / name)),
                      n_paths=5000)
        run_experiment(cfg, quiet=True)
    assert (tmp_path / "a" / "results.csv").read_bytes() == \
        (tmp_path / "b" / "results.csv").read_bytes()
