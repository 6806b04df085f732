"""
Shared pytest fixtures for regdiag tests.
"""
import os

import pytest

from problem_model import load_problem, problem_from_dict
from settings import DEFAULT_TOLERANCES


@pytest.fixture
def tol():
    """Default tolerances."""
    return DEFAULT_TOLERANCES


@pytest.fixture
def corpus():
    """Factory fixture loading corpus problems by id."""
    return load_problem


@pytest.fixture
def interval_dict():
    """Problem file for min (y - x)^2 s.t. y <= 1, -y <= 0 over x in [-1, 2]."""
    return {
        "name": "interval_projection",
        "description": "projection of x onto [0, 1]",
        "n": 1,
        "m": 1,
        "k": 2,
        "x_domain": [[-1.0, 2.0]],
        "y_box": [[-1.0, 2.0]],
        "g": {"smoothness": "C2", "pieces": [{"terms": [
            {"powers": [0, 2], "coeff": 1.0},
            {"powers": [1, 1], "coeff": -2.0},
            {"powers": [2, 0], "coeff": 1.0},
        ]}]},
        "h": [
            {"smoothness": "C2", "pieces": [{"terms": [
                {"powers": [0, 1], "coeff": 1.0},
                {"powers": [0, 0], "coeff": -1.0},
            ]}]},
            {"smoothness": "C2", "pieces": [{"terms": [
                {"powers": [0, 1], "coeff": -1.0},
            ]}]},
        ],
    }


@pytest.fixture
def interval_problem(interval_dict):
    """The interval projection problem, parsed."""
    return problem_from_dict(interval_dict)


@pytest.fixture
def clean_env(monkeypatch, tmp_path):
    """Run in an empty directory with no REGDIAG_* variables set."""
    for key in list(os.environ):
        if key.startswith("REGDIAG_"):
            monkeypatch.delenv(key)
    monkeypatch.chdir(tmp_path)
    return tmp_path
