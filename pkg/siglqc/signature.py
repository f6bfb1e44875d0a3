"""Truncated signatures of time-augmented sampled paths.

Paths are lifted piecewise-linearly, so a segment contributes the tensor
exponential of its increment (dt, dw_1, ..., dw_D) and signatures are
composed by Chen's identity. Letter 1 is time, letter d+1 is W^(d).
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from tensor_algebra import (
    TruncatedTensor, concat, exp_level_one, tensor_exp,
)
from utils import chunk_ranges, tree_reduce

DEFAULT_CHUNK = 500


@dataclass(frozen=True)
class SampledPath:
    """A driver path: times[i] and values[i] in R^D, starting at t = 0."""

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=np.float64)
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim == 1:
            values = values[:, None]
        if times.ndim != 1 or len(times) != len(values):
            raise ValueError("times and values must have equal lengths")
        if len(times) and times[0] != 0.0:
            raise ValueError("times must start at 0")
        if np.any(np.diff(times) <= 0):
            raise ValueError("times must be strictly increasing")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)

    @property
    def dim(self):
        return self.values.shape[1]

    @property
    def horizon(self):
        return float(self.times[-1])

    def increments(self):
        return np.diff(self.times), np.diff(self.values, axis=0)

    @classmethod
    def from_increments(cls, times, increments):
        increments = np.asarray(increments, dtype=np.float64)
        if increments.ndim == 1:
            increments = increments[:, None]
        start = np.zeros((1, increments.shape[1]))
        return cls(times, np.vstack([start, np.cumsum(increments, axis=0)]))


@dataclass(frozen=True)
class SignatureState:
    """Group-like truncated signature of a path up to current_time."""

    level: int
    tensor: TruncatedTensor
    current_time: float = 0.0

    @classmethod
    def start(cls, dim, level):
        return cls(level, TruncatedTensor.unit(dim + 1, level), 0.0)


def chen_step(state, dt, dw):
    """Extend the signature by one linear segment with increment (dt, dw)."""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    n = state.tensor.alphabet_size
    delta = np.concatenate([[dt], np.atleast_1d(np.asarray(dw, dtype=np.float64))])
    if delta.size != n:
        raise ValueError(f"increment has {delta.size - 1} components, expected {n - 1}")
    seg = TruncatedTensor.from_levels(n, exp_level_one(delta, state.level))
    return SignatureState(state.level, concat(state.tensor, seg, state.level),
                          state.current_time + dt)


class BatchSignature:
    """Dense signatures of a batch of paths sharing one time grid.

    levels[m] has shape (n_paths, n**m). step() applies Chen's identity in
    Horner form, level m from the top down, so lower levels are still the
    old values when level m reads them.
    """

    def __init__(self, n_paths, dim, level):
        self.n_paths = n_paths
        self.dim = dim
        self.level = level
        n = dim + 1
        self.levels = [np.ones((n_paths, 1))]
        self.levels += [np.zeros((n_paths, n ** m)) for m in range(1, level + 1)]
        self.current_time = 0.0

    def step(self, dt, dw):
        """dt: scalar grid step, dw: (n_paths, dim) driver increments."""
        if not dt > 0:
            raise ValueError(f"dt must be positive, got {dt}")
        dw = np.asarray(dw, dtype=np.float64).reshape(self.n_paths, self.dim)
        delta = np.empty((self.n_paths, self.dim + 1))
        delta[:, 0] = dt
        delta[:, 1:] = dw
        S = self.levels
        P = self.n_paths
        for m in range(self.level, 0, -1):
            acc = S[0] * (delta / m)
            for j in range(1, m):
                acc = ((acc + S[j])[:, :, None] * (delta[:, None, :] / (m - j))).reshape(P, -1)
            S[m] = acc + S[m]
        self.current_time += dt

    def pair(self, ell):
        """<ell, S> for every path in the batch."""
        if ell.alphabet_size != self.dim + 1:
            raise ValueError("alphabet mismatch")
        if ell.max_length() > self.level:
            raise ValueError(f"tensor reaches level {ell.max_length()} > {self.level}")
        out = np.zeros(self.n_paths)
        for m, coeffs in enumerate(ell.levels(self.level)):
            if np.any(coeffs):
                out += self.levels[m] @ coeffs
        return out

    def flat(self):
        """(n_paths, word_count) array in canonical word order."""
        return np.hstack(self.levels)

    def tensor(self, i):
        return TruncatedTensor.from_dense(self.dim + 1, self.level, self.flat()[i])

    def state(self, i):
        return SignatureState(self.level, self.tensor(i), self.current_time)


def run_batch(times, increments, level):
    """Terminal signatures of a batch: increments has shape (P, steps, D)."""
    increments = np.asarray(increments, dtype=np.float64)
    P, steps, dim = increments.shape
    dts = np.diff(times)
    if len(dts) != steps:
        raise ValueError("time grid does not match increments")
    sig = BatchSignature(P, dim, level)
    for i in range(steps):
        sig.step(dts[i], increments[:, i, :])
    return sig


def signature_of_path(path, level):
    """Signature of the whole path: the fold of Chen steps over its segments."""
    if len(path.times) < 2:
        raise ValueError("a path needs at least 2 samples")
    dts, dws = path.increments()
    sig = run_batch(path.times, dws[None, :, :], level)
    return SignatureState(level, sig.tensor(0), float(path.times[-1]))


def signature_stream(path, level):
    """Yield the SignatureState at every grid point, t = 0 included."""
    dts, dws = path.increments()
    sig = BatchSignature(1, path.dim, level)
    yield sig.state(0)
    for i in range(len(dts)):
        sig.step(dts[i], dws[i][None, :])
        yield sig.state(0)


def pair_along_path(path, ell):
    """<ell, S_t> at every grid point of path (level = ell.level)."""
    dts, dws = path.increments()
    sig = BatchSignature(1, path.dim, ell.level)
    out = np.empty(len(path.times))
    out[0] = sig.pair(ell)[0]
    for i in range(len(dts)):
        sig.step(dts[i], dws[i][None, :])
        out[i + 1] = sig.pair(ell)[0]
    return out


def fawcett_expected_signature(T, D, level):
    """E[S_T] for Brownian W: exp(T * (1 + 1/2 sum_d (d+1)(d+1))) truncated."""
    if not T > 0:
        raise ValueError(f"T must be positive, got {T}")
    n = D + 1
    words = {(1,): 1.0}
    for d in range(1, D + 1):
        words[(d + 1, d + 1)] = 0.5
    generator = TruncatedTensor.from_words(n, 2, words) * T
    return tensor_exp(generator, level)


# --- Monte-Carlo expected signatures ---

@dataclass(frozen=True)
class Moments:
    """Count, mean and summed squared deviations of flattened signatures."""

    count: int
    mean: np.ndarray
    m2: np.ndarray


def signature_moments(times, increments, level):
    flat = run_batch(times, increments, level).flat()
    mean = flat.mean(axis=0)
    return Moments(flat.shape[0], mean, ((flat - mean) ** 2).sum(axis=0))


def merge_moments(a, b):
    """Pairwise (Chan) merge of two moment summaries."""
    n = a.count + b.count
    delta = b.mean - a.mean
    mean = a.mean + delta * (b.count / n)
    m2 = a.m2 + b.m2 + delta ** 2 * (a.count * b.count / n)
    return Moments(n, mean, m2)


def moments_to_tensors(moments, dim, level):
    """(mean, stderr) tensors from merged moments."""
    n = moments.count
    var = np.maximum(moments.m2, 0.0) / (n - 1)
    stderr = np.sqrt(var / n)
    return (TruncatedTensor.from_dense(dim + 1, level, moments.mean),
            TruncatedTensor.from_dense(dim + 1, level, stderr))


def reduce_moments(parts):
    """Merge chunk moments in fixed index order."""
    return tree_reduce(parts, merge_moments)


def mc_expected_signature(paths, level, workers=1, chunk=DEFAULT_CHUNK):
    """Sample mean and standard error of the signatures of paths.

    Chunks are fixed by `chunk` alone and merged by an indexed tree, so the
    result does not depend on `workers`.
    """
    if len(paths) < 2:
        raise ValueError("need at least 2 paths")
    times = paths[0].times
    dim = paths[0].dim
    for p in paths[1:]:
        if p.dim != dim or not np.array_equal(p.times, times):
            raise ValueError("paths must share one time grid and dimension")
    increments = np.stack([np.diff(p.values, axis=0) for p in paths])
    blocks = chunk_ranges(len(paths), chunk)

    def job(block):
        s, e = block
        return signature_moments(times, increments[s:e], level)

    if workers > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(job, blocks))
    else:
        parts = [job(b) for b in blocks]
    return moments_to_tensors(reduce_moments(parts), dim, level)


# --- CSV I/O ---

def write_path_csv(path_file, path):
    header = ",".join(["t"] + [f"w{d + 1}" for d in range(path.dim)])
    data = np.column_stack([path.times, path.values])
    np.savetxt(path_file, data, delimiter=",", header=header, comments="", fmt="%.17g")


def read_path_csv(path_file):
    data = np.loadtxt(path_file, delimiter=",", skiprows=1, ndmin=2)
    return SampledPath(data[:, 0], data[:, 1:])
