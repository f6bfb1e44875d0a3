import os
import sys

import numpy as np
import pytest
import yaml

PKG_DIR = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "siglqc")
sys.path.insert(0, PKG_DIR)

from lq_model import problem_from_dict  # noqa: E402


def scalar_problem(**overrides):
    """N = K = D = 1 problem dict; every coefficient 0 unless overridden, B = 1."""
    data = {
        "dimensions": {"N": 1, "K": 1, "D": 1},
        "horizon": 1.0,
        "x0": 0.0, "b0": 0.0, "b1": 0.0, "b2": 0.0, "sigma0": 0.0, "sigma2": 0.0,
        "cost": {"degree": 0, "A": [0.0], "B": [1.0], "C": [0.0], "D": [0.0],
                 "E": 0.0, "G": 0.0},
    }
    cost = overrides.pop("cost", {})
    data.update(overrides)
    data["cost"].update(cost)
    return data


def brownian_problem_dict():
    return scalar_problem(x0=10.0, b0=1.0, b1=1.0, b2=1.0, sigma0=1.0, sigma2=1.0,
                          cost={"B": [1.0], "E": 1.0})


@pytest.fixture
def brownian_problem():
    """x0 = 10, dynamics coefficients 1, cost int u^2 + X_T^2."""
    return problem_from_dict(brownian_problem_dict())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def write_config(tmp_path):
    """Write a problem file and an experiment config into tmp_path; return the config path."""

    def write(problem, experiment=None, driver=None, sweep=None, evaluation=None,
              name="config.yaml"):
        with open(tmp_path / "problem.yaml", "w") as f:
            yaml.safe_dump(problem, f)
        cfg = {
            "experiment": {"problem": "problem.yaml", "output_dir": str(tmp_path / "out"),
                           "seed": 11, **(experiment or {})},
            "driver": {"kind": "brownian", "steps": 50, **(driver or {})},
            "sweep": sweep or {"L_values": [2, 3], "M_values": [0, 1]},
            "evaluation": {"n_paths": 400, "riccati_steps": 1000, **(evaluation or {})},
        }
        path = tmp_path / name
        with open(path, "w") as f:
            yaml.safe_dump(cfg, f)
        return str(path)

    return write
