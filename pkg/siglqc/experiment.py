"""Experiment runner: sweep (L, M), optimize signature controls, evaluate them by Monte-Carlo."""

import csv
import json
import os
from dataclasses import dataclass, replace

import yaml

from lq_model import (
    check_cost_definiteness, cost_tensor_level, load_problem, make_evaluator,
)
from optimizer import (
    ControlBasis, dump_quadratic_csv, extract_quadratic, minimize_quadratic, to_control_tensor,
)
from signature import fawcett_expected_signature
from simulation import (
    DriverConfig, MCEstimate, SignatureControl, default_scheme, expected_signature_mc,
    riccati_solve, run_monte_carlo,
)
from tensor_algebra import DENSE_LIMIT, word_count, write_tensor
from utils import ConfigError, NumericalError, ProgressPrinter, Stopwatch, content_hash

RESULT_COLUMNS = [
    "run_id", "driver", "H", "T", "L", "M", "n_paths", "steps",
    "cost_mean", "cost_stderr", "dist_mean", "dist_stderr",
    "benchmark_cost", "flagged_paths", "wall_time_s", "config_hash",
]


@dataclass(frozen=True)
class ExperimentConfig:
    config_path: str
    problem: str
    L_values: tuple
    M_values: tuple
    output_dir: str = "results"
    seed: int = 0
    workers: int = 1
    chunk_paths: int = 1000
    record_wall_time: bool = False
    dump_quadratic: bool = False
    reference_value: float = None
    driver: str = "brownian"
    hurst: float = 0.5
    steps: int = 1000
    n_paths: int = 20000
    expected_signature: str = "fawcett"
    n_sig_paths: int = 10000
    benchmark: str = "riccati"
    riccati_steps: int = 10000
    max_flagged_fraction: float = 0.001
    scheme: str = "auto"


@dataclass(frozen=True)
class Issue:
    level: str      # "error" or "warning"
    key: str
    message: str

    def __str__(self):
        return f"{self.level}: {self.key}: {self.message}"


# --- Loading ---

def _section(raw, name):
    sec = raw.get(name, {}) or {}
    if not isinstance(sec, dict):
        raise ConfigError(f"{name}: expected a mapping")
    return sec


def _typed(sec, key, kind, default, where):
    value = sec.get(key, default)
    if value is None:
        return None
    try:
        if kind is bool:
            if not isinstance(value, bool):
                raise TypeError
            return value
        return kind(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{where}.{key}: expected {kind.__name__}, got {value!r}") from None


def _int_list(sec, key, where):
    value = sec.get(key)
    if not isinstance(value, list) or not value:
        raise ConfigError(f"{where}.{key}: expected a non-empty list of integers")
    try:
        return tuple(int(v) for v in value)
    except (TypeError, ValueError):
        raise ConfigError(f"{where}.{key}: expected integers, got {value!r}") from None


def load_experiment(path, seed=None, workers=None, output_dir=None):
    """Read an experiment YAML file and apply command-line overrides."""
    try:
        with open(path) as f:
            raw = yaml.safe_load(f) or {}
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    except yaml.YAMLError as e:
        raise ConfigError(f"config {path} is not valid YAML: {e}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path}: expected a mapping at top level")

    exp = _section(raw, "experiment")
    drv = _section(raw, "driver")
    sweep = _section(raw, "sweep")
    ev = _section(raw, "evaluation")
    if "problem" not in exp:
        raise ConfigError("experiment.problem: required")
    base = os.path.dirname(os.path.abspath(path))
    problem = os.path.join(base, str(exp["problem"]))

    cfg = ExperimentConfig(
        config_path=os.path.abspath(path),
        problem=problem,
        L_values=_int_list(sweep, "L_values", "sweep"),
        M_values=_int_list(sweep, "M_values", "sweep"),
        output_dir=_typed(exp, "output_dir", str, "results", "experiment"),
        seed=_typed(exp, "seed", int, 0, "experiment"),
        workers=_typed(exp, "workers", int, 1, "experiment"),
        chunk_paths=_typed(exp, "chunk_paths", int, 1000, "experiment"),
        record_wall_time=_typed(exp, "record_wall_time", bool, False, "experiment"),
        dump_quadratic=_typed(exp, "dump_quadratic", bool, False, "experiment"),
        reference_value=_typed(exp, "reference_value", float, None, "experiment"),
        driver=_typed(drv, "kind", str, "brownian", "driver"),
        hurst=_typed(drv, "hurst", float, 0.5, "driver"),
        steps=_typed(drv, "steps", int, 1000, "driver"),
        n_paths=_typed(ev, "n_paths", int, 20000, "evaluation"),
        expected_signature=_typed(ev, "expected_signature", str, "fawcett", "evaluation"),
        n_sig_paths=_typed(ev, "n_sig_paths", int, 10000, "evaluation"),
        benchmark=_typed(ev, "benchmark", str, "riccati", "evaluation"),
        riccati_steps=_typed(ev, "riccati_steps", int, 10000, "evaluation"),
        max_flagged_fraction=_typed(ev, "max_flagged_fraction", float, 0.001, "evaluation"),
        scheme=_typed(ev, "scheme", str, "auto", "evaluation"),
    )
    overrides = {}
    if seed is not None:
        overrides["seed"] = int(seed)
    if workers is not None:
        overrides["workers"] = int(workers)
    if output_dir is not None:
        overrides["output_dir"] = output_dir
    return replace(cfg, **overrides)


def config_hash(cfg):
    """Hash of the config and problem files plus the effective seed."""
    return content_hash([cfg.config_path, cfg.problem], extra=f"seed={cfg.seed}")[:16]


# --- Validation ---

def validate(cfg):
    """List of Issue: errors make the config unusable, warnings do not."""
    issues = []

    def err(key, msg):
        issues.append(Issue("error", key, msg))

    def warn(key, msg):
        issues.append(Issue("warning", key, msg))

    try:
        model, cost = load_problem(cfg.problem)
    except ConfigError as e:
        err("experiment.problem", str(e))
        model = cost = None

    if any(L < 0 for L in cfg.L_values):
        err("sweep.L_values", "levels must be >= 0")
    if any(M < 0 for M in cfg.M_values):
        err("sweep.M_values", "levels must be >= 0")
    if cfg.driver not in ("brownian", "fbm"):
        err("driver.kind", f"expected brownian or fbm, got {cfg.driver!r}")
    if cfg.driver == "fbm" and not 0.0 < cfg.hurst < 1.0:
        err("driver.hurst", f"must lie in (0, 1), got {cfg.hurst}")
    if cfg.steps < 1:
        err("driver.steps", "must be >= 1")
    if cfg.n_paths < 2:
        err("evaluation.n_paths", "need at least 2 paths")
    if cfg.workers < 1:
        err("experiment.workers", "must be >= 1")
    if cfg.chunk_paths < 1:
        err("experiment.chunk_paths", "must be >= 1")
    if not 0.0 <= cfg.max_flagged_fraction < 1.0:
        err("evaluation.max_flagged_fraction", "must lie in [0, 1)")
    if cfg.scheme not in ("auto", "euler", "linear_flow"):
        err("evaluation.scheme", f"expected auto, euler or linear_flow, got {cfg.scheme!r}")
    if cfg.expected_signature not in ("fawcett", "mc"):
        err("evaluation.expected_signature", f"expected fawcett or mc, got {cfg.expected_signature!r}")
    elif cfg.expected_signature == "fawcett" and cfg.driver == "fbm":
        err("evaluation.expected_signature", "the closed form only holds for Brownian drivers")
    elif cfg.expected_signature == "mc" and cfg.n_sig_paths < 2:
        err("evaluation.n_sig_paths", "need at least 2 paths")
    if cfg.benchmark not in ("riccati", "none"):
        err("evaluation.benchmark", f"expected riccati or none, got {cfg.benchmark!r}")
    elif cfg.benchmark == "riccati" and model is not None and not riccati_applies(cfg, model):
        warn("evaluation.benchmark", "Riccati benchmark needs N = K = D = 1 and a Brownian "
                                     "driver; it will be skipped")
    if cfg.scheme == "euler" and cfg.driver == "fbm":
        warn("evaluation.scheme", "Ito correction assumes a Brownian driver")

    for L in cfg.L_values:
        for M in cfg.M_values:
            if M >= L:
                warn("sweep.M_values", f"L={L}, M={M}: control level reaches the state "
                                       f"level; the control overfits the truncated cost")

    if model is not None and cost is not None:
        for key, msg in check_cost_definiteness(cost, model.T):
            err(key, msg)
        level = cost_tensor_level(max(cfg.L_values), max(cfg.M_values), cost.degree)
        if cfg.expected_signature == "mc" and \
                word_count(model.alphabet_size, level) > DENSE_LIMIT:
            err("sweep", f"Monte-Carlo expected signature at level {level} is too large "
                         f"for alphabet {model.alphabet_size}")
    return issues


def riccati_applies(cfg, model):
    return cfg.driver == "brownian" and (model.N, model.K, model.D) == (1, 1, 1)


# --- Running ---

def expected_signature_for(cfg, model, level, quiet=False):
    driver = make_driver(cfg, model)
    if cfg.expected_signature == "fawcett":
        return fawcett_expected_signature(model.T, model.D, level)
    mean, _ = expected_signature_mc(driver, cfg.n_sig_paths, level,
                                    workers=cfg.workers, quiet=quiet)
    return mean


def make_driver(cfg, model):
    return DriverConfig(kind=cfg.driver, D=model.D, steps=cfg.steps, T=model.T,
                        seed=cfg.seed, hurst=cfg.hurst)


def optimal_control(model, cost, L, M, expected_signature, workers=1, quiet=False):
    """(ControlTensor, QuadraticForm, optimal value) of the level-(L, M) problem."""
    basis = ControlBasis(model.K, model.alphabet_size, M)
    evaluator = make_evaluator(model, cost, L, expected_signature)
    Q = extract_quadratic(evaluator, basis, workers=workers)
    try:
        v, value = minimize_quadratic(Q, quiet=quiet)
    except NumericalError as e:
        raise NumericalError(f"L={L}, M={M}: {e}") from None
    return to_control_tensor(v, basis), Q, value


def _check_errors(cfg, log):
    issues = validate(cfg)
    for issue in issues:
        if issue.level == "warning":
            log.say(f"warning: {issue.key}: {issue.message}")
    errors = [i for i in issues if i.level == "error"]
    if errors:
        raise ConfigError("; ".join(f"{i.key}: {i.message}" for i in errors))
    return [str(i) for i in issues]


def _check_flagged(cfg, run_id, samples):
    if samples.flagged > cfg.max_flagged_fraction * cfg.n_paths:
        raise NumericalError(f"{run_id}: {samples.flagged} of {cfg.n_paths} paths "
                             f"diverged (limit {cfg.max_flagged_fraction:.2%})")


def _fmt(x):
    return "" if x is None else repr(float(x))


def run_experiment(cfg, quiet=False):
    """Run the full (L, M) sweep and write results.csv, summary.json and tensor dumps."""
    log = ProgressPrinter("experiment", quiet=quiet)
    warnings = _check_errors(cfg, log)
    model, cost = load_problem(cfg.problem)
    chash = config_hash(cfg)
    out = cfg.output_dir
    os.makedirs(os.path.join(out, "controls"), exist_ok=True)

    level = cost_tensor_level(max(cfg.L_values), max(cfg.M_values), cost.degree)
    log.say(f"expected signature ({cfg.expected_signature}) at level {level}")
    es = expected_signature_for(cfg, model, level, quiet=quiet)
    write_tensor(os.path.join(out, "expected_signature.tsv"), es)

    bench_control = riccati = None
    if cfg.benchmark == "riccati" and riccati_applies(cfg, model):
        riccati = riccati_solve(model, cost, cfg.riccati_steps)
        bench_control = riccati.control()
        log.say(f"Riccati benchmark V(0, x0) = {float(riccati.value(0.0, model.x0[0])):.6g}")

    runs = []
    controls = {}
    for L in cfg.L_values:
        for M in cfg.M_values:
            run_id = f"L{L}_M{M}"
            watch = Stopwatch()
            u, Q, value = optimal_control(model, cost, L, M, es, cfg.workers, quiet)
            elapsed = watch.elapsed()
            log.say(f"{run_id}: surrogate cost {value:.6g} ({Q.size} coefficients)")
            for k, coord in enumerate(u.coords, 1):
                write_tensor(os.path.join(out, "controls", f"u_{run_id}_k{k}.tsv"), coord)
            if cfg.dump_quadratic:
                dump_quadratic_csv(os.path.join(out, f"quadratic_{run_id}.csv"), Q)
            controls[run_id] = SignatureControl(u)
            runs.append((run_id, L, M, value, elapsed))

    scheme = default_scheme(cfg.driver) if cfg.scheme == "auto" else cfg.scheme
    log.say(f"Monte-Carlo evaluation: {cfg.n_paths} paths x {cfg.steps} steps, scheme {scheme}")
    samples = run_monte_carlo(model, cost, controls, make_driver(cfg, model), cfg.n_paths,
                              benchmark=bench_control, workers=cfg.workers,
                              chunk=cfg.chunk_paths, scheme=scheme, quiet=quiet)

    bench_est = None
    if bench_control is not None:
        _check_flagged(cfg, "benchmark", samples["benchmark"])
        bench_est = MCEstimate.from_samples(samples["benchmark"].costs)
    rows = []
    for run_id, L, M, value, elapsed in runs:
        s = samples[run_id]
        _check_flagged(cfg, run_id, s)
        est = MCEstimate.from_samples(s.costs)
        dist = MCEstimate.from_samples(s.distances) if s.distances is not None else None
        rows.append({
            "run_id": run_id,
            "driver": cfg.driver,
            "H": _fmt(cfg.hurst if cfg.driver == "fbm" else 0.5),
            "T": _fmt(model.T),
            "L": L,
            "M": M,
            "n_paths": est.n_paths,
            "steps": cfg.steps,
            "cost_mean": _fmt(est.mean),
            "cost_stderr": _fmt(est.stderr),
            "dist_mean": _fmt(dist.mean if dist else None),
            "dist_stderr": _fmt(dist.stderr if dist else None),
            "benchmark_cost": _fmt(bench_est.mean if bench_est else None),
            "flagged_paths": s.flagged,
            "wall_time_s": _fmt(elapsed) if cfg.record_wall_time else "",
            "config_hash": chash,
            "_surrogate": value,
            "_cost": est.mean,
        })

    with open(os.path.join(out, "results.csv"), "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=RESULT_COLUMNS, extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)

    summary = _summary(cfg, model, rows, riccati, bench_est, level, chash, warnings)
    with open(os.path.join(out, "summary.json"), "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
    log.say(f"wrote {len(rows)} rows to {os.path.join(out, 'results.csv')}")
    return summary


def _summary(cfg, model, rows, riccati, bench_est, level, chash, warnings):
    best = min(rows, key=lambda r: r["_cost"])
    summary = {
        "config_hash": chash,
        "driver": cfg.driver,
        "expected_signature": cfg.expected_signature,
        "expected_signature_level": level,
        "n_runs": len(rows),
        "best_run": best["run_id"],
        "best_cost": best["_cost"],
        "surrogate_costs": {r["run_id"]: r["_surrogate"] for r in rows},
        "benchmark_cost": bench_est.mean if bench_est else None,
        "benchmark_value": None,
        "reference_value": cfg.reference_value,
        "reference_gap": None,
        "warnings": warnings,
    }
    if riccati is not None:
        v0 = float(riccati.value(0.0, model.x0[0]))
        summary["benchmark_value"] = v0
        if bench_est is not None:
            summary["best_gap_to_benchmark"] = (best["_cost"] - bench_est.mean) / abs(bench_est.mean)
        if cfg.reference_value:
            summary["reference_gap"] = (v0 - cfg.reference_value) / abs(cfg.reference_value)
    return summary


def dump_tensor(cfg, L, M, k, quiet=True):
    """Optimal control coordinate k (1-based) of the level-(L, M) problem."""
    for issue in validate(cfg):
        if issue.level == "error":
            raise ConfigError(f"{issue.key}: {issue.message}")
    model, cost = load_problem(cfg.problem)
    if not 1 <= k <= model.K:
        raise ConfigError(f"--coord must lie in 1..{model.K}, got {k}")
    level = cost_tensor_level(L, M, cost.degree)
    es = expected_signature_for(cfg, model, level, quiet=quiet)
    u, _, _ = optimal_control(model, cost, L, M, es, cfg.workers, quiet)
    return u.coords[k - 1]
