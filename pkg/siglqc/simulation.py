"""Driver paths, SDE integration under a control, Monte-Carlo costs and the Riccati benchmark."""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.integrate import trapezoid
from scipy.linalg import LinAlgError, cholesky, expm, toeplitz

from signature import (
    BatchSignature, SampledPath, moments_to_tensors, reduce_moments, signature_moments,
)
from utils import ConfigError, NumericalError, ProgressPrinter, chunk_ranges

EVAL_STREAM = 0
SIGNATURE_STREAM = 1
DEFAULT_CHUNK = 1000
Z95 = 1.96


# --- Driver paths ---

@dataclass(frozen=True)
class DriverConfig:
    kind: str       # "brownian" or "fbm"
    D: int
    steps: int
    T: float
    seed: int
    hurst: float = 0.5

    def __post_init__(self):
        if self.kind not in ("brownian", "fbm"):
            raise ConfigError(f"driver.kind must be brownian or fbm, got {self.kind!r}")
        if self.steps < 1:
            raise ConfigError("driver.steps must be >= 1")
        if self.D < 0:
            raise ConfigError("driver dimension D must be >= 0")
        if not self.T > 0:
            raise ConfigError("horizon T must be positive")
        if self.kind == "fbm" and not 0.0 < self.hurst < 1.0:
            raise ConfigError(f"driver.hurst must lie in (0, 1), got {self.hurst}")

    @property
    def times(self):
        return np.linspace(0.0, self.T, self.steps + 1)

    @property
    def dt(self):
        return self.T / self.steps


def path_rng(seed, stream, index):
    """Independent generator for path `index` of `stream`, whatever the chunking."""
    return np.random.default_rng(np.random.SeedSequence([seed, stream, index]))


@lru_cache(maxsize=8)
def _fgn_autocov(n, hurst):
    k = np.arange(n + 1, dtype=np.float64)
    return 0.5 * ((k + 1) ** (2 * hurst) - 2 * k ** (2 * hurst) + np.abs(k - 1) ** (2 * hurst))


@lru_cache(maxsize=8)
def _circulant_sqrt(n, hurst):
    """sqrt(eigenvalues / 2n) of the circulant embedding, or None if it is not PSD."""
    r = _fgn_autocov(n, hurst)
    row = np.concatenate([r, r[-2:0:-1]])
    lam = np.real(np.fft.fft(row))
    if lam.min() < -1e-10 * lam.max():
        return None
    return np.sqrt(np.maximum(lam, 0.0) / (2 * n))


@lru_cache(maxsize=8)
def _fgn_cholesky(n, hurst):
    r = _fgn_autocov(n, hurst)[:n]
    try:
        return cholesky(toeplitz(r), lower=True)
    except LinAlgError:
        return None


def _fgn_increments(rng, n, hurst, D):
    """(n, D) fractional Gaussian noise with unit step."""
    root = _circulant_sqrt(n, hurst)
    if root is not None:
        z = rng.standard_normal((D, 2, 2 * n))
        w = np.fft.fft(root * (z[:, 0] + 1j * z[:, 1]), axis=-1)
        return np.real(w[:, :n]).T
    chol = _fgn_cholesky(n, hurst)
    if chol is None:
        raise NumericalError(f"fBm generation failed for H={hurst}, n={n}: "
                             f"embedding and Cholesky both not PSD")
    return chol @ rng.standard_normal((n, D))


def generate_increments(cfg, start, stop, stream=EVAL_STREAM):
    """(times, increments) for paths start..stop-1; increments has shape (P, steps, D)."""
    n = cfg.steps
    out = np.empty((stop - start, n, cfg.D))
    if cfg.kind == "fbm" and _circulant_sqrt(n, cfg.hurst) is None:
        print(f"[simulation] circulant embedding not PSD for H={cfg.hurst}, using Cholesky")
    scale = math.sqrt(cfg.dt) if cfg.kind == "brownian" else cfg.dt ** cfg.hurst
    for i in range(start, stop):
        rng = path_rng(cfg.seed, stream, i)
        if cfg.kind == "brownian":
            out[i - start] = rng.standard_normal((n, cfg.D)) * scale
        else:
            out[i - start] = _fgn_increments(rng, n, cfg.hurst, cfg.D) * scale
    return cfg.times, out


def generate_paths(cfg, n, stream=EVAL_STREAM):
    if n < 1:
        raise ValueError("n must be >= 1")
    times, inc = generate_increments(cfg, 0, n, stream)
    return [SampledPath.from_increments(times, inc[i]) for i in range(n)]


# --- Controls ---

class SignatureControl:
    """u_t^k = <ell^(k), S_t>, read from the streaming signature."""

    def __init__(self, control):
        self.control = control
        self.signature_level = control.level

    def __call__(self, t, sig, X):
        return np.column_stack([sig.pair(c) for c in self.control.coords])


class FeedbackControl:
    """u = fn(t, X) with X of shape (P, N); fn returns (P, K)."""

    signature_level = None

    def __init__(self, fn):
        self.fn = fn

    def __call__(self, t, sig, X):
        return np.asarray(self.fn(t, X), dtype=np.float64).reshape(X.shape[0], -1)


class ConstantControl(FeedbackControl):
    def __init__(self, values):
        values = np.atleast_1d(np.asarray(values, dtype=np.float64))
        super().__init__(lambda t, X: np.broadcast_to(values, (X.shape[0], values.size)))


# --- SDE integration ---

def strat_to_ito_drift(model):
    """(b0', b2') with the +1/2 sum_d sigma_d' sigma_d correction of the linear diffusion."""
    s0, s2 = model.sigma0, model.sigma2
    b0 = model.b0 + 0.5 * np.einsum("ndm,md->n", s2, s0)
    b2 = model.b2 + 0.5 * np.einsum("ndm,mdk->nk", s2, s2)
    return b0, b2


@dataclass
class Trajectory:
    times: np.ndarray
    X: np.ndarray        # (P, steps+1, N)
    U: np.ndarray        # (P, steps+1, K)
    flagged: np.ndarray  # (P,) bool


def default_scheme(kind):
    return "euler" if kind == "brownian" else "linear_flow"


def simulate_batch(model, control, times, increments, scheme="euler"):
    """Integrate the controlled state on every path of a batch.

    The control at t_i sees the signature and state up to t_i only; the
    signature takes the step's increment after the state does.
    "euler": Euler-Maruyama on the Ito-corrected drift (Brownian drivers).
    "linear_flow": exact flow of the linear ODE along each linear segment
    of the driver (Stratonovich for any piecewise-linear lift).
    """
    if scheme not in ("euler", "linear_flow"):
        raise ValueError(f"unknown scheme {scheme!r}")
    increments = np.asarray(increments, dtype=np.float64)
    P, steps, D = increments.shape
    if D != model.D:
        raise ValueError(f"driver has {D} components, model expects D={model.D}")
    dts = np.diff(times)
    N, K = model.N, model.K
    X = np.empty((P, steps + 1, N))
    U = np.empty((P, steps + 1, K))
    X[:, 0] = model.x0
    sig = None
    if control.signature_level is not None:
        sig = BatchSignature(P, D, control.signature_level)
    if scheme == "euler":
        b0, b2 = strat_to_ito_drift(model)
    else:
        b0, b2 = model.b0, model.b2
    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(steps):
            x = X[:, i]
            u = control(times[i], sig, x)
            U[:, i] = u
            dw = increments[:, i, :]
            if scheme == "euler":
                drift = b0 + u @ model.b1.T + x @ b2.T
                noise = dw @ model.sigma0.T + np.einsum("pm,ndm,pd->pn", x, model.sigma2, dw)
                X[:, i + 1] = x + drift * dts[i] + noise
            else:
                X[:, i + 1] = _linear_flow(model, x, u, dts[i], dw)
            if sig is not None:
                sig.step(dts[i], dw)
        U[:, steps] = control(times[steps], sig, X[:, steps])
        flagged = ~(np.all(np.isfinite(X), axis=(1, 2)) & np.all(np.isfinite(U), axis=(1, 2)))
    return Trajectory(times, X, U, flagged)


def _linear_flow(model, x, u, dt, dw):
    """exp of [[M, f], [0, 0]] applied to (x, 1) with M, f frozen over the segment."""
    P, N = x.shape
    Z = np.zeros((P, N + 1, N + 1))
    Z[:, :N, :N] = model.b2 * dt + np.einsum("ndm,pd->pnm", model.sigma2, dw)
    Z[:, :N, N] = (model.b0 + u @ model.b1.T) * dt + dw @ model.sigma0.T
    y = np.concatenate([x, np.ones((P, 1))], axis=1)
    return np.einsum("pij,pj->pi", expm(Z), y)[:, :N]


def simulate_state(model, control, path, scheme="euler"):
    """Trajectory of a single path."""
    _, dws = path.increments()
    return simulate_batch(model, control, path.times, dws[None], scheme)


# --- Cost integrands ---

def _cost_on_grid(cost, times):
    A, B, C, D = zip(*(cost.at(t) for t in times))
    return np.array(A), np.array(B), np.array(C), np.array(D)


def path_costs(model, cost, traj):
    """Per-path trapezoid running cost plus terminal cost; NaN on flagged paths."""
    A, B, C, D = _cost_on_grid(cost, traj.times)
    X, U = traj.X, traj.U
    with np.errstate(over="ignore", invalid="ignore"):
        running = (np.einsum("psi,sij,psj->ps", X, A, X)
                   + np.einsum("psi,sij,psj->ps", U, B, U)
                   + 2.0 * np.einsum("psi,si->ps", X, C)
                   + 2.0 * np.einsum("psi,si->ps", U, D))
        xT = X[:, -1]
        terminal = np.einsum("pi,ij,pj->p", xT, cost.E, xT) + 2.0 * xT @ cost.G
        out = trapezoid(running, traj.times, axis=1) + terminal
    out[traj.flagged] = np.nan
    return out


def path_distances(traj_a, traj_b):
    """Per-path int_0^T |u_a - u_b|^2 dt; NaN where either path is flagged."""
    with np.errstate(over="ignore", invalid="ignore"):
        sq = np.sum((traj_a.U - traj_b.U) ** 2, axis=2)
        out = trapezoid(sq, traj_a.times, axis=1)
    out[traj_a.flagged | traj_b.flagged] = np.nan
    return out


@dataclass(frozen=True)
class MCEstimate:
    mean: float
    stderr: float
    n_paths: int
    ci95: tuple

    @classmethod
    def from_samples(cls, samples):
        """Mean and standard error over the finite samples."""
        samples = np.asarray(samples, dtype=np.float64)
        samples = samples[np.isfinite(samples)]
        n = samples.size
        if n == 0:
            raise NumericalError("every Monte-Carlo path was flagged non-finite")
        mean = float(samples.mean())
        stderr = float(samples.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
        return cls(mean, stderr, n, (mean - Z95 * stderr, mean + Z95 * stderr))


def _paths_batch(paths):
    if len(paths) < 1:
        raise ValueError("need at least one path")
    times = paths[0].times
    for p in paths[1:]:
        if not np.array_equal(p.times, times):
            raise ValueError("paths must share one time grid")
    return times, np.stack([np.diff(p.values, axis=0) for p in paths])


def estimate_cost(model, cost, control, paths, scheme="euler"):
    if len(paths) < 2:
        raise ValueError("need at least 2 paths")
    times, inc = _paths_batch(paths)
    return MCEstimate.from_samples(path_costs(model, cost,
                                              simulate_batch(model, control, times, inc, scheme)))


def estimate_control_distance(control_a, control_b, model, paths, scheme="euler"):
    """E int |u_a - u_b|^2 dt, each control driving its own state on the same noise."""
    times, inc = _paths_batch(paths)
    a = simulate_batch(model, control_a, times, inc, scheme)
    b = simulate_batch(model, control_b, times, inc, scheme)
    return MCEstimate.from_samples(path_distances(a, b))


# --- Chunked Monte-Carlo over many controls ---

@dataclass
class ControlSamples:
    costs: np.ndarray
    distances: np.ndarray = None

    @property
    def flagged(self):
        return int(np.count_nonzero(~np.isfinite(self.costs)))


def run_monte_carlo(model, cost, controls, driver, n_paths, benchmark=None, workers=1,
                    chunk=DEFAULT_CHUNK, scheme=None, quiet=False):
    """Cost (and distance to benchmark) samples for every control on common noise.

    controls: dict name -> control. The benchmark, when given, is simulated
    on the same increments and reported under the name "benchmark".
    Per-path samples are written by path index, so they do not depend on
    `workers`.
    """
    scheme = scheme or default_scheme(driver.kind)
    names = list(controls)
    costs = {name: np.empty(n_paths) for name in names}
    dists = {name: np.empty(n_paths) for name in names}
    if benchmark is not None:
        costs["benchmark"] = np.empty(n_paths)
    blocks = chunk_ranges(n_paths, chunk)
    progress = ProgressPrinter("simulation", quiet=quiet)

    def job(block):
        s, e = block
        times, inc = generate_increments(driver, s, e, EVAL_STREAM)
        bench = None
        if benchmark is not None:
            bench = simulate_batch(model, benchmark, times, inc, scheme)
            costs["benchmark"][s:e] = path_costs(model, cost, bench)
        for name in names:
            traj = simulate_batch(model, controls[name], times, inc, scheme)
            costs[name][s:e] = path_costs(model, cost, traj)
            if bench is not None:
                dists[name][s:e] = path_distances(traj, bench)
        return e

    if workers > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for done, _ in enumerate(pool.map(job, blocks), 1):
                progress.tick(f"{done}/{len(blocks)} chunks")
    else:
        for done, block in enumerate(blocks, 1):
            job(block)
            progress.tick(f"{done}/{len(blocks)} chunks")
    out = {name: ControlSamples(costs[name], dists[name] if benchmark is not None else None)
           for name in names}
    if benchmark is not None:
        out["benchmark"] = ControlSamples(costs["benchmark"])
    return out


def expected_signature_mc(cfg, n, level, workers=1, chunk=500, quiet=False):
    """(mean, stderr) of the level-`level` signature over n stream-1 paths."""
    if n < 2:
        raise ValueError("need at least 2 paths")
    blocks = chunk_ranges(n, chunk)
    progress = ProgressPrinter("signature", quiet=quiet)

    def job(block):
        times, inc = generate_increments(cfg, block[0], block[1], SIGNATURE_STREAM)
        return signature_moments(times, inc, level)

    if workers > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(job, blocks))
    else:
        parts = []
        for i, block in enumerate(blocks, 1):
            parts.append(job(block))
            progress.tick(f"expected signature {i}/{len(blocks)} chunks")
    return moments_to_tensors(reduce_moments(parts), cfg.D, level)


# --- Riccati benchmark (N = K = D = 1) ---

@dataclass(frozen=True)
class RiccatiSolution:
    grid: np.ndarray
    P: np.ndarray
    psi: np.ndarray
    chi: np.ndarray
    b1: float
    cost: object

    def value(self, t, x):
        """V(t, x) = P x^2 + 2 psi x + chi."""
        P = np.interp(t, self.grid, self.P)
        psi = np.interp(t, self.grid, self.psi)
        chi = np.interp(t, self.grid, self.chi)
        return P * x * x + 2.0 * psi * x + chi

    def feedback(self, t, x):
        """u*(t, x) = -(b1 (P x + psi) + D(t)) / B(t)."""
        _, B, _, D = self.cost.at(t)
        P = np.interp(t, self.grid, self.P)
        psi = np.interp(t, self.grid, self.psi)
        return -(self.b1 * (P * x + psi) + D[0]) / B[0, 0]

    def control(self):
        return FeedbackControl(self.feedback)


def riccati_solve(model, cost, grid_steps=10000):
    """Backward RK4 for (P, psi, chi) of the scalar HJB equation."""
    if (model.N, model.K, model.D) != (1, 1, 1):
        raise ValueError("the Riccati benchmark needs N = K = D = 1")
    b0, b2 = (a.item() for a in strat_to_ito_drift(model))
    b1 = model.b1.item()
    s0, s2 = model.sigma0.item(), model.sigma2.item()

    def rhs(t, y):
        P, psi, _ = y
        A, B, C, D = cost.at(t)
        A, B, C, D = A.item(), B.item(), C.item(), D.item()
        lin = b1 * psi + D
        return np.array([
            -(2 * b2 * P + s2 * s2 * P + A - b1 * b1 * P * P / B),
            -(b0 * P + b2 * psi + s0 * s2 * P + C - b1 * P * lin / B),
            -(2 * b0 * psi + s0 * s0 * P - lin * lin / B),
        ])

    grid = np.linspace(0.0, model.T, grid_steps + 1)
    for t in grid:
        if cost.at(t)[1].item() <= 0.0:
            raise ConfigError(f"B(t) not positive at t={t:.4g}")
    y = np.zeros((grid_steps + 1, 3))
    y[-1] = [cost.E.item(), cost.G.item(), 0.0]
    for i in range(grid_steps, 0, -1):
        t, h = grid[i], grid[i - 1] - grid[i]
        k1 = rhs(t, y[i])
        k2 = rhs(t + h / 2, y[i] + h / 2 * k1)
        k3 = rhs(t + h / 2, y[i] + h / 2 * k2)
        k4 = rhs(t + h, y[i] + h * k3)
        y[i - 1] = y[i] + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    return RiccatiSolution(grid, y[:, 0], y[:, 1], y[:, 2], b1, cost)
