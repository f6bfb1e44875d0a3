import numpy as np
import pytest
from scipy.optimize import minimize_scalar

from conftest import scalar_problem
from lq_model import ControlTensor, cost_tensor_level, make_evaluator, problem_from_dict
from optimizer import (
    ControlBasis, QuadraticForm, assemble_quadratic, check_strict_convexity,
    dump_quadratic_csv, extract_quadratic, flatten, minimize_quadratic, probe_points,
    to_control_tensor,
)
from signature import fawcett_expected_signature
from tensor_algebra import TruncatedTensor
from utils import NumericalError


def brownian_setup(L, M):
    model, cost = problem_from_dict(scalar_problem(x0=10.0, b0=1.0, b1=1.0, b2=1.0,
                                                   sigma0=1.0, sigma2=1.0,
                                                   cost={"B": [1.0], "E": 1.0}))
    es = fawcett_expected_signature(model.T, 1, cost_tensor_level(L, M, cost.degree))
    basis = ControlBasis(model.K, model.alphabet_size, M)
    return model, cost, es, basis


class CountingEvaluator:
    def __init__(self, fn):
        self.fn = fn
        self.calls = 0

    def __call__(self, u):
        self.calls += 1
        return self.fn(u)


# --- Basis ---

def test_basis_layout():
    basis = ControlBasis(2, 2, 1)
    assert basis.size == 6
    assert basis.entries()[:4] == [(1, ()), (1, (1,)), (1, (2,)), (2, ())]


def test_to_control_tensor_and_flatten(rng):
    basis = ControlBasis(2, 3, 2)
    v = rng.standard_normal(basis.size)
    u = to_control_tensor(v, basis)
    assert u.K == 2 and u.level == 2
    assert u.coords[1].coeff("") == v[13]
    np.testing.assert_array_equal(flatten(u, basis), v)
    with pytest.raises(ValueError):
        to_control_tensor(v[:-1], basis)
    deep = ControlTensor((TruncatedTensor.from_words(3, 3, {"111": 1.0}),) * 2)
    with pytest.raises(ValueError):
        flatten(deep, basis)


def test_probe_point_count():
    basis = ControlBasis(1, 2, 1)
    assert len(probe_points(basis)) == 1 + 2 * 3 + 3


# --- Extraction ---

def test_constant_evaluator():
    basis = ControlBasis(1, 2, 1)
    Q = extract_quadratic(lambda u: 7.0, basis)
    np.testing.assert_array_equal(Q.H, np.zeros((3, 3)))
    np.testing.assert_array_equal(Q.g, np.zeros(3))
    assert Q.c0 == 7.0


def test_recovers_synthetic_quadratic(rng):
    basis = ControlBasis(2, 2, 1)
    P = basis.size
    R = rng.standard_normal((P, P))
    H = R @ R.T + np.eye(P)
    g = rng.standard_normal(P)
    truth = QuadraticForm(H, g, 3.25)
    evaluator = CountingEvaluator(lambda u: truth.value(flatten(u, basis)))
    Q = extract_quadratic(evaluator, basis)
    assert evaluator.calls == 1 + 2 * P + P * (P - 1) // 2
    np.testing.assert_allclose(Q.H, H, rtol=1e-10, atol=1e-10)
    np.testing.assert_allclose(Q.g, g, rtol=1e-10, atol=1e-10)
    assert Q.c0 == pytest.approx(3.25)


def test_extraction_matches_direct_assembly():
    model, cost, es, basis = brownian_setup(3, 1)
    evaluator = make_evaluator(model, cost, 3, es)
    probed = extract_quadratic(evaluator, basis)
    direct = assemble_quadratic(model, cost, 3, es, basis)
    scale = 1.0 + np.abs(direct.H).max()
    np.testing.assert_allclose(probed.H, direct.H, atol=1e-9 * scale)
    np.testing.assert_allclose(probed.g, direct.g, atol=1e-9 * (1 + np.abs(direct.g).max()))
    assert probed.c0 == pytest.approx(direct.c0, rel=1e-12)


def test_extraction_is_independent_of_workers():
    model, cost, es, basis = brownian_setup(2, 1)
    evaluator = make_evaluator(model, cost, 2, es)
    one = extract_quadratic(evaluator, basis, workers=1)
    four = extract_quadratic(evaluator, basis, workers=4)
    np.testing.assert_array_equal(one.H, four.H)
    np.testing.assert_array_equal(one.g, four.g)
    assert one.c0 == four.c0


@pytest.mark.parametrize("build", ["extract", "assemble"])
def test_quadratic_form_reproduces_evaluator(rng, build):
    model, cost, es, basis = brownian_setup(4, 2)
    evaluator = make_evaluator(model, cost, 4, es)
    if build == "extract":
        Q = extract_quadratic(evaluator, basis)
    else:
        Q = assemble_quadratic(model, cost, 4, es, basis)
    worst = 0.0
    for _ in range(100):
        v = rng.standard_normal(basis.size)
        exact = evaluator(to_control_tensor(v, basis))
        worst = max(worst, abs(Q.value(v) - exact) / (1.0 + abs(exact)))
    assert worst <= 1e-8


# --- Convexity and solve ---

def test_strict_convexity():
    ok, min_eig = check_strict_convexity(QuadraticForm(np.eye(3), np.zeros(3), 0.0))
    assert ok and min_eig == pytest.approx(1.0)
    ok, min_eig = check_strict_convexity(QuadraticForm(np.zeros((3, 3)), np.zeros(3), 0.0))
    assert not ok and min_eig == 0.0
    model, cost, es, basis = brownian_setup(5, 2)
    ok, min_eig = check_strict_convexity(assemble_quadratic(model, cost, 5, es, basis))
    assert ok and min_eig > 0


def test_minimize_examples():
    v, value = minimize_quadratic(QuadraticForm(np.eye(2), [2.0, -4.0], 1.0))
    np.testing.assert_allclose(v, [-1.0, 2.0])
    assert value == pytest.approx(1.0 - 5.0)
    v, value = minimize_quadratic(QuadraticForm([[2.0]], [0.0], 5.0))
    assert v[0] == 0.0 and value == 5.0


def test_minimize_rejects_indefinite():
    with pytest.raises(NumericalError):
        minimize_quadratic(QuadraticForm(np.diag([1.0, -1.0]), np.zeros(2), 0.0))
    with pytest.raises(NumericalError):
        minimize_quadratic(QuadraticForm(np.zeros((2, 2)), np.ones(2), 0.0))


def test_near_singular_falls_back_to_least_squares(capsys):
    H = np.diag([1.0, 5e-10])
    v, _ = minimize_quadratic(QuadraticForm(H, [2.0, 0.0], 0.0))
    np.testing.assert_allclose(v, [-1.0, 0.0], atol=1e-12)
    assert "near-singular" in capsys.readouterr().out


def test_constant_control_matches_line_search():
    model, cost, es, basis = brownian_setup(4, 0)
    evaluator = make_evaluator(model, cost, 4, es)
    v, value = minimize_quadratic(extract_quadratic(evaluator, basis), quiet=True)
    res = minimize_scalar(lambda c: evaluator(to_control_tensor([c], basis)),
                          bracket=(-1.0, 1.0), method="golden", tol=1e-10)
    assert v[0] == pytest.approx(res.x, abs=1e-6 * (1 + abs(res.x)))
    assert value == pytest.approx(res.fun, rel=1e-9)


def test_minimizer_beats_probes():
    model, cost, es, basis = brownian_setup(3, 1)
    evaluator = make_evaluator(model, cost, 3, es)
    v, value = minimize_quadratic(extract_quadratic(evaluator, basis), quiet=True)
    assert value == pytest.approx(evaluator(to_control_tensor(v, basis)), rel=1e-9)
    for p in probe_points(basis):
        assert value <= evaluator(to_control_tensor(v + p, basis)) + 1e-9 * abs(value)


def test_optimal_value_improves_with_control_level():
    values = []
    for M in range(3):
        model, cost, es, basis = brownian_setup(5, M)
        Q = assemble_quadratic(model, cost, 5, es, basis)
        values.append(minimize_quadratic(Q, quiet=True)[1])
    tol = 1e-9 * abs(values[0])
    assert values[1] <= values[0] + tol
    assert values[2] <= values[1] + tol


# --- Dumps ---

def test_dump_quadratic_csv(tmp_path):
    Q = QuadraticForm(np.array([[2.0, 0.5], [0.5, 1.0]]), [1.0, -1.0], 0.25)
    dump_quadratic_csv(tmp_path / "q.csv", Q)
    lines = (tmp_path / "q.csv").read_text().splitlines()
    assert lines == ["H,0,2.0,0.5", "H,1,0.5,1.0", "g,,1.0,-1.0", "c0,,0.25"]
