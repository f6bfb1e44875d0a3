"""Reduce the truncated cost to a quadratic form in the control coefficients and minimize it."""

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve, eigvalsh, lstsq, norm

from lq_model import (
    ControlTensor, StateTensor, cost_linear_part, cost_quadratic_part,
    cost_tensor_level, evaluate_cost, state_for,
)
from tensor_algebra import TruncatedTensor, enumerate_words, word_count
from utils import NumericalError

PD_RTOL = 1e-10
FALLBACK_FACTOR = 10.0


class ControlBasis:
    """Coordinate-major basis (k, word) of level-M control tensors.

    Index of (k, w) is (k - 1) * W + key(w), W = number of words of length <= M.
    """

    def __init__(self, K, alphabet_size, level):
        if K < 1 or level < 0:
            raise ValueError("need K >= 1 and level >= 0")
        self.K = K
        self.alphabet_size = alphabet_size
        self.level = level
        self.words_per_coord = word_count(alphabet_size, level)

    @property
    def size(self):
        return self.K * self.words_per_coord

    def entries(self):
        """(k, word) pairs in index order, k counted from 1."""
        words = enumerate_words(self.alphabet_size, self.level)
        return [(k + 1, w) for k in range(self.K) for w in words]

    def unit(self, i):
        v = np.zeros(self.size)
        v[i] = 1.0
        return v


def to_control_tensor(v, basis):
    v = np.asarray(v, dtype=np.float64).ravel()
    if v.size != basis.size:
        raise ValueError(f"coefficient vector has length {v.size}, basis has {basis.size}")
    rows = v.reshape(basis.K, basis.words_per_coord)
    return ControlTensor(tuple(TruncatedTensor.from_dense(basis.alphabet_size, basis.level, r)
                               for r in rows))


def flatten(control, basis):
    """Inverse of to_control_tensor; words beyond the basis level must be absent."""
    if control.K != basis.K or control.alphabet_size != basis.alphabet_size:
        raise ValueError("control does not match the basis")
    out = []
    for c in control.coords:
        if c.max_length() > basis.level:
            raise ValueError(f"control reaches level {c.max_length()} > basis level {basis.level}")
        out.append(c.to_dense(basis.level))
    return np.concatenate(out)


@dataclass(frozen=True)
class QuadraticForm:
    """value(v) = v'Hv + g'v + c0 with H stored symmetrized."""

    H: np.ndarray
    g: np.ndarray
    c0: float

    def __post_init__(self):
        H = np.asarray(self.H, dtype=np.float64)
        object.__setattr__(self, "H", 0.5 * (H + H.T))
        object.__setattr__(self, "g", np.asarray(self.g, dtype=np.float64).ravel())
        object.__setattr__(self, "c0", float(self.c0))

    @property
    def size(self):
        return self.g.size

    def value(self, v):
        v = np.asarray(v, dtype=np.float64)
        return float(v @ self.H @ v + self.g @ v + self.c0)

    def gradient(self, v):
        return 2.0 * self.H @ np.asarray(v, dtype=np.float64) + self.g


# --- Extraction ---

def probe_points(basis):
    """Probe vectors in evaluation order: 0, +e_i, -e_i, e_i + e_j (i < j)."""
    P = basis.size
    points = [np.zeros(P)]
    points += [basis.unit(i) for i in range(P)]
    points += [-basis.unit(i) for i in range(P)]
    for i in range(P):
        for j in range(i + 1, P):
            points.append(basis.unit(i) + basis.unit(j))
    return points


def extract_quadratic(evaluator, basis, workers=1):
    """Recover H, g, c0 of an exactly quadratic evaluator from 1 + 2P + P(P-1)/2 calls.

    Values are placed by probe index, so the form does not depend on the
    order in which the pool finishes.
    """
    points = probe_points(basis)

    def job(v):
        return float(evaluator(to_control_tensor(v, basis)))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            values = np.array(list(pool.map(job, points)))
    else:
        values = np.array([job(v) for v in points])

    P = basis.size
    c0 = values[0]
    plus, minus = values[1:P + 1], values[P + 1:2 * P + 1]
    diag = 0.5 * (plus + minus) - c0
    g = 0.5 * (plus - minus)
    H = np.diag(diag)
    idx = 2 * P + 1
    for i in range(P):
        for j in range(i + 1, P):
            cross = 0.5 * (values[idx] - diag[i] - diag[j] - c0 - g[i] - g[j])
            H[i, j] = H[j, i] = cross
            idx += 1
    return QuadraticForm(H, g, c0)


def assemble_quadratic(model, cost, L, expected_signature, basis):
    """Direct assembly of H, g, c0 from the affine map u -> x^u.

    With z_0 = (x^0, 0) and z_i = (x^{e_i} - x^0, e_i):
        c0 = Q(z_0, z_0) + lin(z_0), g_i = Q(z_0, z_i) + Q(z_i, z_0) + lin(z_i),
        H_ij = Q(z_i, z_j).
    """
    level = cost_tensor_level(L, basis.level, cost.degree)
    u0 = to_control_tensor(np.zeros(basis.size), basis)
    x0 = state_for(model, u0, L)
    dirs = []
    for i in range(basis.size):
        ui = to_control_tensor(basis.unit(i), basis)
        xi = state_for(model, ui, L)
        dx = StateTensor(tuple(a - b for a, b in zip(xi.coords, x0.coords)))
        dirs.append((dx, ui))

    def bilinear(za, zb):
        J = cost_quadratic_part(cost, za[0], za[1], zb[0], zb[1], level)
        return evaluate_cost(J.truncate(level), expected_signature)

    def linear(z):
        return evaluate_cost(cost_linear_part(cost, z[0], z[1], level).truncate(level),
                             expected_signature)

    z0 = (x0, u0)
    P = basis.size
    c0 = bilinear(z0, z0) + linear(z0)
    g = np.array([bilinear(z0, z) + bilinear(z, z0) + linear(z) for z in dirs])
    H = np.zeros((P, P))
    for i in range(P):
        for j in range(i, P):
            H[i, j] = bilinear(dirs[i], dirs[j])
            if j != i:
                H[j, i] = bilinear(dirs[j], dirs[i])
    return QuadraticForm(H, g, c0)


# --- Convexity and solve ---

def pd_threshold(H):
    return PD_RTOL * (1.0 + norm(H, 2))


def check_strict_convexity(Q):
    """(H is PD beyond the threshold, smallest eigenvalue)."""
    min_eig = float(eigvalsh(Q.H).min())
    return min_eig > pd_threshold(Q.H), min_eig


def minimize_quadratic(Q, quiet=False):
    """Solve 2Hv = -g. Cholesky, or least squares when H is close to singular."""
    ok, min_eig = check_strict_convexity(Q)
    tau = pd_threshold(Q.H)
    if not ok:
        raise NumericalError(f"Hessian not positive definite: min eigenvalue {min_eig:.3e} "
                             f"(threshold {tau:.3e})")
    if min_eig < FALLBACK_FACTOR * tau:
        if not quiet:
            print(f"[optimizer] near-singular Hessian (min eigenvalue {min_eig:.3e}), "
                  f"using least squares")
        v = lstsq(2.0 * Q.H, -Q.g)[0]
    else:
        try:
            v = cho_solve(cho_factor(2.0 * Q.H), -Q.g)
        except LinAlgError:
            if not quiet:
                print("[optimizer] Cholesky failed, using least squares")
            v = lstsq(2.0 * Q.H, -Q.g)[0]
    return v, Q.value(v)


def dump_quadratic_csv(path, Q):
    """Rows "H,i,..." for each Hessian row, then "g,,..." and "c0,,value"."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        for i, row in enumerate(Q.H):
            w.writerow(["H", i] + [repr(float(x)) for x in row])
        w.writerow(["g", ""] + [repr(float(x)) for x in Q.g])
        w.writerow(["c0", "", repr(Q.c0)])
