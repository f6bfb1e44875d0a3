"""LQ problem definition and its tensor representation.

Dynamics (Stratonovich), n = 1..N:
    dX^n = [b0^n + sum_k b1^{n,k} u^k + sum_n' b2^{n,n'} X^n'] dt
           + sum_d [sigma0^{n,d} + sum_n' sigma2^{n,d,n'} X^n'] o dW^d
Cost:
    E[ int_0^T X'A(t)X + u'B(t)u + 2C(t)'X + 2D(t)'u dt + X_T'E X_T + 2G'X_T ]
with A(t) = sum_m t^m/m! A_m and likewise for B, C, D.
"""

import math
from dataclasses import dataclass

import numpy as np
import yaml
from scipy.linalg import eigvalsh

from tensor_algebra import (
    TruncatedTensor, concat, pair, right_concat_letter, shuffle, time_power,
)
from utils import ConfigError

TIME = 1


# --- Problem types ---

@dataclass(frozen=True)
class LQModel:
    x0: np.ndarray        # (N,)
    b0: np.ndarray        # (N,)
    b1: np.ndarray        # (N, K)
    b2: np.ndarray        # (N, N)
    sigma0: np.ndarray    # (N, D)
    sigma2: np.ndarray    # (N, D, N)
    T: float

    def __post_init__(self):
        x0 = np.atleast_1d(np.asarray(self.x0, dtype=np.float64))
        N = x0.shape[0]
        b1 = np.asarray(self.b1, dtype=np.float64)
        sigma0 = np.asarray(self.sigma0, dtype=np.float64)
        if b1.ndim != 2 or b1.shape[0] != N:
            raise ConfigError(f"b1 must have shape (N, K) with N={N}, got {b1.shape}")
        if sigma0.ndim != 2 or sigma0.shape[0] != N:
            raise ConfigError(f"sigma0 must have shape (N, D) with N={N}, got {sigma0.shape}")
        K, D = b1.shape[1], sigma0.shape[1]
        shapes = {"b0": (N,), "b2": (N, N), "sigma2": (N, D, N)}
        fields = {"x0": x0, "b1": b1, "sigma0": sigma0}
        for name, shape in shapes.items():
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != shape:
                raise ConfigError(f"{name} must have shape {shape}, got {arr.shape}")
            fields[name] = arr
        for name, arr in fields.items():
            if not np.all(np.isfinite(arr)):
                raise ConfigError(f"{name} has non-finite entries")
            object.__setattr__(self, name, arr)
        if not (np.isfinite(self.T) and self.T > 0):
            raise ConfigError(f"horizon T must be positive, got {self.T}")
        object.__setattr__(self, "T", float(self.T))
        if K < 1:
            raise ConfigError("the control needs at least one coordinate (K >= 1)")

    @property
    def N(self):
        return self.x0.shape[0]

    @property
    def K(self):
        return self.b1.shape[1]

    @property
    def D(self):
        return self.sigma0.shape[1]

    @property
    def alphabet_size(self):
        return self.D + 1


@dataclass(frozen=True)
class CostSpec:
    A: np.ndarray   # (M+1, N, N)
    B: np.ndarray   # (M+1, K, K)
    C: np.ndarray   # (M+1, N)
    D: np.ndarray   # (M+1, K)
    E: np.ndarray   # (N, N)
    G: np.ndarray   # (N,)

    def __post_init__(self):
        for name in ("A", "B", "C", "D", "E", "G"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise ConfigError(f"cost.{name} has non-finite entries")
            object.__setattr__(self, name, arr)
        degrees = {self.A.shape[0], self.B.shape[0], self.C.shape[0], self.D.shape[0]}
        if len(degrees) != 1:
            raise ConfigError("cost.A, B, C, D must list the same number of terms")

    @property
    def degree(self):
        return self.A.shape[0] - 1

    def check_shapes(self, model):
        N, K = model.N, model.K
        expected = {"A": (self.degree + 1, N, N), "B": (self.degree + 1, K, K),
                    "C": (self.degree + 1, N), "D": (self.degree + 1, K),
                    "E": (N, N), "G": (N,)}
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ConfigError(f"cost.{name} must have shape {shape}, "
                                  f"got {getattr(self, name).shape}")

    def at(self, t):
        """(A(t), B(t), C(t), D(t)) in the t^m/m! basis."""
        w = np.array([t ** m / math.factorial(m) for m in range(self.degree + 1)])
        return (np.tensordot(w, self.A, 1), np.tensordot(w, self.B, 1),
                w @ self.C, w @ self.D)


@dataclass(frozen=True)
class ControlTensor:
    """Per-coordinate control tensors u^(k), common alphabet and level."""

    coords: tuple

    def __post_init__(self):
        coords = tuple(self.coords)
        if not coords:
            raise ValueError("a control needs at least one coordinate")
        n, level = coords[0].alphabet_size, coords[0].level
        for c in coords:
            if c.alphabet_size != n or c.level != level:
                raise ValueError("control coordinates must share alphabet and level")
        object.__setattr__(self, "coords", coords)

    @classmethod
    def zero(cls, K, alphabet_size, level):
        return cls(tuple(TruncatedTensor.zero(alphabet_size, level) for _ in range(K)))

    @property
    def K(self):
        return len(self.coords)

    @property
    def level(self):
        return self.coords[0].level

    @property
    def alphabet_size(self):
        return self.coords[0].alphabet_size


@dataclass(frozen=True)
class StateTensor:
    """Per-coordinate state tensors x^(n), truncated at a common level."""

    coords: tuple

    @property
    def N(self):
        return len(self.coords)

    @property
    def level(self):
        return self.coords[0].level


# --- Problem files ---

def _array(section, key, shape, where, default=0.0):
    value = section.get(key, default)
    arr = np.asarray(value, dtype=np.float64)
    if arr.size == 1 and arr.shape != shape:
        arr = np.full(shape, float(arr.ravel()[0]))
    try:
        return arr.reshape(shape)
    except ValueError:
        raise ConfigError(f"{where}.{key}: expected {int(np.prod(shape))} entries "
                          f"for shape {shape}, got {arr.size}") from None


def problem_from_dict(data, source="problem"):
    """Build (LQModel, CostSpec) from a parsed problem file."""
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: expected a mapping at top level")
    dims = data.get("dimensions", {})
    try:
        N, K, D = int(dims["N"]), int(dims["K"]), int(dims["D"])
    except (KeyError, TypeError, ValueError):
        raise ConfigError(f"{source}: dimensions must give integers N, K, D") from None
    if N < 1 or K < 1 or D < 0 or D > 8:
        raise ConfigError(f"{source}: need N >= 1, K >= 1, 0 <= D <= 8")
    if "horizon" not in data:
        raise ConfigError(f"{source}: horizon is required")
    model = LQModel(
        x0=_array(data, "x0", (N,), source),
        b0=_array(data, "b0", (N,), source),
        b1=_array(data, "b1", (N, K), source),
        b2=_array(data, "b2", (N, N), source),
        sigma0=_array(data, "sigma0", (N, D), source),
        sigma2=_array(data, "sigma2", (N, D, N), source),
        T=float(data["horizon"]),
    )
    c = data.get("cost", {}) or {}
    deg = int(c.get("degree", 0))
    if deg < 0:
        raise ConfigError(f"{source}.cost.degree must be >= 0")
    where = f"{source}.cost"
    cost = CostSpec(
        A=_array(c, "A", (deg + 1, N, N), where),
        B=_array(c, "B", (deg + 1, K, K), where),
        C=_array(c, "C", (deg + 1, N), where),
        D=_array(c, "D", (deg + 1, K), where),
        E=_array(c, "E", (N, N), where),
        G=_array(c, "G", (N,), where),
    )
    cost.check_shapes(model)
    return model, cost


def load_problem(path):
    """Read a YAML (or JSON) problem file."""
    try:
        with open(path) as f:
            data = yaml.safe_load(f)
    except OSError as e:
        raise ConfigError(f"cannot read problem file {path}: {e}") from None
    except yaml.YAMLError as e:
        raise ConfigError(f"problem file {path} is not valid YAML/JSON: {e}") from None
    return problem_from_dict(data, source=str(path))


def check_cost_definiteness(cost, T, points=101, tol=1e-12):
    """Return (key, message) problems: A(t) PSD, B(t) PD on a grid, E PSD, symmetry."""
    problems = []
    for name in ("A", "B"):
        mats = getattr(cost, name)
        if not np.allclose(mats, np.swapaxes(mats, 1, 2)):
            problems.append((f"cost.{name}", f"{name}_m must be symmetric"))
    if not np.allclose(cost.E, cost.E.T):
        problems.append(("cost.E", "E must be symmetric"))
    elif cost.E.size and eigvalsh(cost.E).min() < -tol:
        problems.append(("cost.E", "E not positive semi-definite"))
    a_bad = b_bad = None
    for t in np.linspace(0.0, T, points):
        A, B, _, _ = cost.at(t)
        if a_bad is None and eigvalsh(0.5 * (A + A.T)).min() < -tol:
            a_bad = t
        if b_bad is None and eigvalsh(0.5 * (B + B.T)).min() <= tol:
            b_bad = t
    if a_bad is not None:
        problems.append(("cost.A", f"A(t) not positive semi-definite at t={a_bad:.4g}"))
    if b_bad is not None:
        problems.append(("cost.B", f"B(t) not positive definite at t={b_bad:.4g}"))
    return problems


# --- State tensor ---

def build_pq(model, u):
    """Tensors p^(n) (level M+1) and q^(n,n') (pure level 1) of the state equation."""
    if u.K != model.K:
        raise ValueError(f"control has {u.K} coordinates, model expects K={model.K}")
    n = model.alphabet_size
    if u.alphabet_size != n:
        raise ValueError(f"control alphabet {u.alphabet_size} != D+1 = {n}")
    level = u.level + 1
    p = []
    for i in range(model.N):
        drift = TruncatedTensor.unit(n, u.level, model.b0[i])
        for k in range(model.K):
            if model.b1[i, k] != 0.0:
                drift = drift + u.coords[k] * model.b1[i, k]
        words = {(): model.x0[i]}
        for d in range(model.D):
            words[(d + 2,)] = model.sigma0[i, d]
        p.append(TruncatedTensor.from_words(n, level, words)
                 + right_concat_letter(drift, TIME, level))
    q = []
    for i in range(model.N):
        row = []
        for j in range(model.N):
            words = {(TIME,): model.b2[i, j]}
            for d in range(model.D):
                words[(d + 2,)] = model.sigma2[i, d, j]
            row.append(TruncatedTensor.from_words(n, 1, words))
        q.append(row)
    return p, q


def solve_state_tensor(p, q, level):
    """Unique x with x^(n) = p^(n) + sum_n' x^(n') (x) q^(n,n'), words up to level.

    Built level by level: level m only reads levels < m because q has no
    empty-word coefficient.
    """
    N = len(p)
    n = p[0].alphabet_size
    q_level = 0
    for row in q:
        for t in row:
            if t.coeff(()) != 0.0:
                raise ValueError("q must have a zero empty-word coefficient")
            q_level = max(q_level, t.max_length())
    q_level = min(q_level, level)
    p_levels = [t.levels(level) for t in p]
    q_levels = [[t.levels(q_level) for t in row] for row in q]
    P = [np.stack([p_levels[i][m] for i in range(N)]) for m in range(level + 1)]
    Q = {k: np.array([[q_levels[i][j][k] for j in range(N)] for i in range(N)])
         for k in range(1, q_level + 1)}
    X = [P[0].copy()]
    for m in range(1, level + 1):
        lvl = P[m].copy()
        for k in range(1, min(m, q_level) + 1):
            lvl += np.einsum("ja,ijb->iab", X[m - k], Q[k]).reshape(N, -1)
        X.append(lvl)
    return StateTensor(tuple(TruncatedTensor.from_levels(n, [X[m][i] for m in range(level + 1)])
                             for i in range(N)))


def state_residual(x, p, q):
    """Largest |x - p - sum x (x) q| coefficient over words up to x's level."""
    L = x.level
    worst = 0.0
    for i in range(x.N):
        r = x.coords[i] - p[i].truncate(L)
        for j in range(x.N):
            r = r - concat(x.coords[j], q[i][j], L)
        worst = max(worst, r.norm_max())
    return worst


def growth_constant(x, p, q):
    """C = max(C1, max row sum of |q|), C1 from words up to p's top level."""
    top = max(1, max(t.max_length() for t in p))
    c1 = 0.0
    for t in x.coords:
        for m, v in zip(t.word_lengths(), np.abs(t.values)):
            if 1 <= m <= top:
                c1 = max(c1, float(v) ** (1.0 / m))
    n = p[0].alphabet_size
    rows = 0.0
    for letter in range(1, n + 1):
        for row in q:
            rows = max(rows, sum(abs(t.coeff((letter,))) for t in row))
    return max(c1, rows)


def growth_bound_check(x, p, q, rtol=1e-12):
    """True iff |x^v| <= C^|v| for every stored nonempty word v."""
    C = growth_constant(x, p, q)
    for t in x.coords:
        for m, v in zip(t.word_lengths(), np.abs(t.values)):
            if m >= 1 and v > C ** m * (1.0 + rtol):
                return False
    return True


# --- Cost tensor ---

def cost_tensor_level(L, M, degree):
    """Depth that loses nothing: 2 max(L, M) shuffles, 1^degree, then (x) 1."""
    return 2 * max(L, M) + degree + 1


def _running(n, level, terms):
    """{sum_m 1^m sh terms[m]} (x) 1, truncated at level."""
    inner = level - 1
    if inner < 0:
        return TruncatedTensor.zero(n, level)
    acc = TruncatedTensor.zero(n, inner)
    for m, t in enumerate(terms):
        if t.is_zero() or m > inner:
            continue
        if m == 0:
            acc = acc + t.truncate(inner)
        else:
            acc = acc + shuffle(time_power(n, m), t, inner)
    return right_concat_letter(acc, TIME, level)


def _combine(tensors, weights, n, level):
    out = TruncatedTensor.zero(n, level)
    for t, w in zip(tensors, weights):
        if w != 0.0:
            out = out + t * w
    return out


def cost_quadratic_part(cost, xa, ua, xb, ub, level):
    """Bilinear part of the cost tensor in the pairs (xa, ua), (xb, ub)."""
    n = ua.alphabet_size
    N, K = len(xa.coords), len(ua.coords)
    need_x = np.any(cost.A != 0) or np.any(cost.E != 0)
    need_u = np.any(cost.B != 0)
    xx = {}
    if need_x:
        for i in range(N):
            for j in range(N):
                if np.any(cost.A[:, i, j] != 0) or cost.E[i, j] != 0:
                    xx[i, j] = shuffle(xa.coords[i], xb.coords[j], level)
    uu = {}
    if need_u:
        for i in range(K):
            for j in range(K):
                if np.any(cost.B[:, i, j] != 0):
                    uu[i, j] = shuffle(ua.coords[i], ub.coords[j], level)
    terms = []
    for m in range(cost.degree + 1):
        t = _combine([xx[k] for k in xx], [cost.A[m][k] for k in xx], n, level)
        t = t + _combine([uu[k] for k in uu], [cost.B[m][k] for k in uu], n, level)
        terms.append(t)
    out = _running(n, level, terms)
    terminal = _combine([xx[k] for k in xx], [cost.E[k] for k in xx], n, level)
    return out + terminal


def cost_linear_part(cost, x, u, level):
    """Linear part: {2 sum_m 1^m sh (C_m'x + D_m'u)} (x) 1 + 2 G'x."""
    n = u.alphabet_size
    terms = []
    for m in range(cost.degree + 1):
        t = _combine(x.coords, 2.0 * cost.C[m], n, level)
        t = t + _combine(u.coords, 2.0 * cost.D[m], n, level)
        terms.append(t)
    out = _running(n, level, terms)
    return out + _combine(x.coords, 2.0 * cost.G, n, level)


def build_cost_tensor(model, cost, u, x, level):
    """Truncated cost tensor J^L(u), words up to `level`."""
    cost.check_shapes(model)
    if u.K != model.K or x.N != model.N:
        raise ValueError("control/state dimensions do not match the model")
    if u.alphabet_size != model.alphabet_size:
        raise ValueError("control alphabet does not match the model")
    return (cost_quadratic_part(cost, x, u, x, u, level)
            + cost_linear_part(cost, x, u, level)).truncate(level)


def evaluate_cost(J, expected_signature):
    """<J^L(u), E[S_T]>."""
    if J.alphabet_size != expected_signature.alphabet_size:
        raise ValueError("alphabet mismatch between cost tensor and expected signature")
    if J.max_length() > expected_signature.level:
        raise ValueError(f"expected signature level {expected_signature.level} is below "
                         f"the cost tensor's {J.max_length()}")
    return pair(J, expected_signature)


def state_for(model, u, L):
    p, q = build_pq(model, u)
    return solve_state_tensor(p, q, L)


def make_evaluator(model, cost, L, expected_signature):
    """F(u) = <J^L(u), E[S_T]> as a plain callable on ControlTensor."""
    def evaluate(u):
        level = cost_tensor_level(L, u.level, cost.degree)
        J = build_cost_tensor(model, cost, u, state_for(model, u, L), level)
        return evaluate_cost(J, expected_signature)
    return evaluate
