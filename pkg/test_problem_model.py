"""
Tests for problem parsing, evaluation and the corpus registry
"""
import copy
import json
from dataclasses import replace

import numpy as np
import pytest

from corpus import CORPUS, corpus_path
from errors import DomainError, NonFiniteError, ParseError, SeamError
from problem_model import (
    check_seams,
    evaluate,
    evaluate_batch,
    evaluate_upper,
    fd_check,
    feasible_box,
    list_corpus,
    load_problem,
    problem_from_dict,
    problem_hash,
    problem_to_dict,
    save_problem,
    scale_constraint,
    slater_check,
    slater_point,
    y_grid,
)


# =============================================================================
# Parsing
# =============================================================================

class TestProblemFromDict:
    """Tests for building problems from parsed files"""

    def test_dimensions(self, interval_problem):
        assert (interval_problem.n, interval_problem.m, interval_problem.k) == (1, 1, 2)
        assert interval_problem.x_domain.tolist() == [[-1.0, 2.0]]
        assert interval_problem.slater_margin is None
        assert interval_problem.f is None

    def test_missing_field(self, interval_dict):
        del interval_dict["g"]
        with pytest.raises(ParseError) as exc:
            problem_from_dict(interval_dict)
        assert exc.value.field == "g"

    def test_wrong_power_count(self, interval_dict):
        interval_dict["g"]["pieces"][0]["terms"][0]["powers"] = [0, 2, 0]
        with pytest.raises(ParseError) as exc:
            problem_from_dict(interval_dict)
        assert exc.value.field == "g.pieces[0].terms[0].powers"

    def test_negative_power_in_y(self, interval_dict):
        interval_dict["h"][1]["pieces"][0]["terms"][0]["powers"] = [0, -1]
        with pytest.raises(ParseError, match="negative powers"):
            problem_from_dict(interval_dict)

    def test_h_count_must_match_k(self, interval_dict):
        interval_dict["k"] = 3
        with pytest.raises(ParseError) as exc:
            problem_from_dict(interval_dict)
        assert exc.value.field == "h"

    def test_piece_gap(self, interval_dict):
        terms = interval_dict["g"]["pieces"][0]["terms"]
        interval_dict["g"]["pieces"] = [
            {"x_lo": -1.0, "x_hi": 0.0, "terms": terms},
            {"x_lo": 0.5, "x_hi": 2.0, "terms": terms},
        ]
        with pytest.raises(ParseError, match="gap"):
            problem_from_dict(interval_dict)

    def test_bad_slater_margin(self, interval_dict):
        interval_dict["slater_margin"] = -1.0
        with pytest.raises(ParseError):
            problem_from_dict(interval_dict)

    def test_default_y_box(self, interval_dict):
        del interval_dict["y_box"]
        problem = problem_from_dict(interval_dict)
        assert problem.y_box.shape == (1, 2)
        assert problem.y_box[0, 0] < 0 < problem.y_box[0, 1]


def test_json_syntax_error_reports_line(tmp_path):
    """Malformed JSON carries the line of the error"""
    path = tmp_path / "broken.json"
    path.write_text('{\n  "name": \n}')
    with pytest.raises(ParseError) as exc:
        load_problem(str(path))
    assert exc.value.line == 3


def test_field_error_reports_line(tmp_path, interval_dict):
    """Field errors in a file carry the line of their top-level key"""
    interval_dict["slater_margin"] = -1.0
    text = json.dumps(interval_dict, indent=2)
    path = tmp_path / "bad_margin.json"
    path.write_text(text)
    expected = next(i for i, line in enumerate(text.splitlines(), 1) if '"slater_margin"' in line)
    with pytest.raises(ParseError) as exc:
        load_problem(str(path))
    assert exc.value.field == "slater_margin"
    assert exc.value.line == expected
    assert f"line {expected}" in str(exc.value)


def test_nested_field_error_reports_line(tmp_path, interval_dict):
    interval_dict["h"][0]["pieces"][0]["terms"][0]["powers"] = [0]
    text = json.dumps(interval_dict, indent=2)
    path = tmp_path / "bad_powers.json"
    path.write_text(text)
    with pytest.raises(ParseError) as exc:
        load_problem(str(path))
    assert exc.value.field.startswith("h[0]")
    assert exc.value.line == next(i for i, line in enumerate(text.splitlines(), 1) if '"h"' in line)


def test_unknown_source():
    """Neither a corpus id nor a file"""
    with pytest.raises(ParseError):
        load_problem("no_such_problem")


# =============================================================================
# Evaluation
# =============================================================================

class TestEvaluate:
    """Tests for evaluate and evaluate_batch"""

    def test_values_and_derivatives(self, interval_problem):
        rec = evaluate(interval_problem, 0.5, [0.2])
        assert rec.g == pytest.approx(0.09)
        assert rec.grad_y_g == pytest.approx([-0.6])
        assert rec.hess_yy_g == pytest.approx(np.array([[2.0]]))
        assert rec.hess_xy_g == pytest.approx(np.array([[-2.0]]))
        assert rec.h == pytest.approx([-0.8, -0.2])
        assert rec.jac_y_h[:, 0] == pytest.approx([1.0, -1.0])
        assert rec.jac_x_h == pytest.approx(np.zeros((2, 1)))
        assert rec.hess_yy_h == pytest.approx(np.zeros((2, 1, 1)))

    def test_outside_domain(self, interval_problem):
        with pytest.raises(DomainError):
            evaluate(interval_problem, 5.0, [0.0])

    def test_within_slack_is_clamped(self, interval_problem):
        rec = evaluate(interval_problem, 2.0 + 1e-12, [0.0])
        assert rec.g == pytest.approx(4.0)

    def test_non_finite_y(self, interval_problem):
        with pytest.raises(NonFiniteError):
            evaluate(interval_problem, 0.0, [np.nan])

    def test_laurent_pole(self, interval_dict):
        interval_dict["x_domain"] = [[0.0, 1.0]]
        interval_dict["g"]["pieces"][0]["terms"].append({"powers": [-1, 0], "coeff": 1.0})
        problem = problem_from_dict(interval_dict)
        assert evaluate(problem, 0.5, [0.0]).g == pytest.approx(0.25 + 2.0)
        with pytest.raises(NonFiniteError):
            evaluate(problem, 0.0, [0.0])

    def test_batch_broadcasts_x(self, interval_problem):
        batch = evaluate_batch(interval_problem, 1.0, np.array([[0.0], [1.0], [2.0]]), order=1)
        assert batch.g == pytest.approx([1.0, 0.0, 1.0])
        assert batch.grad_y_g[:, 0] == pytest.approx([-2.0, 0.0, 2.0])
        assert batch.hess_yy_g is None

    def test_shifts(self, interval_problem):
        shifted = replace(interval_problem, a_shift=np.array([0.1, 0.2]), b_shift=np.array([0.3]))
        base = evaluate(interval_problem, 0.5, [0.2])
        rec = evaluate(shifted, 0.5, [0.2])
        assert rec.h == pytest.approx(base.h + [0.1, 0.2])
        assert rec.g == pytest.approx(base.g + 0.3 * 0.2)
        assert rec.grad_y_g == pytest.approx(base.grad_y_g + 0.3)

    def test_upper_objective(self, corpus):
        f, fx, fy = evaluate_upper(corpus("ex_scsc_kink"), 0.5, [0.2])
        assert f == pytest.approx(0.325)
        assert fx == pytest.approx([0.5])
        assert fy == pytest.approx([1.0])

    def test_upper_objective_missing(self, interval_problem):
        with pytest.raises(ValueError):
            evaluate_upper(interval_problem, 0.5, [0.2])


def test_fd_check_polynomial(interval_problem, corpus):
    """Central differences agree with exact derivatives"""
    assert fd_check(interval_problem, 0.5, [0.2], 1e-5) < 1e-6
    assert fd_check(corpus("ce_licq_tangent"), 1.3, [0.2, 0.3], 1e-5) < 1e-5
    with pytest.raises(ValueError):
        fd_check(interval_problem, 0.5, [0.2], 0.0)


@pytest.mark.parametrize("c", [0.5, 2.0, 3.0])
def test_scale_constraint(interval_problem, c):
    """Scaling multiplies one constraint and leaves the rest"""
    scaled = scale_constraint(interval_problem, 0, c)
    rec = evaluate(scaled, 0.5, [0.2])
    assert rec.h == pytest.approx([-0.8 * c, -0.2])
    assert rec.jac_y_h[:, 0] == pytest.approx([c, -1.0])
    with pytest.raises(ValueError):
        scale_constraint(interval_problem, 0, 0.0)


@pytest.mark.parametrize("corpus_id", sorted(CORPUS))
def test_fd_check_random_points(corpus_id, corpus):
    """Derivatives match central differences at random points of every corpus problem"""
    problem = corpus(corpus_id)
    rng = np.random.default_rng(2024)
    for _ in range(100):
        x = rng.uniform(problem.x_lo, problem.x_hi)
        y = rng.uniform(problem.y_box[:, 0], problem.y_box[:, 1])
        assert fd_check(problem, x, y, 1e-5) < 1e-5


@pytest.mark.parametrize("corpus_id", sorted(CORPUS))
def test_corpus_slater_margin_holds(corpus_id, corpus):
    assert slater_check(corpus(corpus_id), n_x=33)


# =============================================================================
# Grids and feasibility
# =============================================================================

def test_y_grid_ordering():
    """ij ordering: the last axis varies fastest"""
    Y = y_grid([[0.0, 1.0], [0.0, 2.0]], 3)
    assert Y.shape == (9, 2)
    assert Y[0].tolist() == [0.0, 0.0]
    assert Y[1].tolist() == [0.0, 1.0]
    assert Y[-1].tolist() == [1.0, 2.0]


def test_slater_point(interval_problem):
    """The deepest point of [0, 1] is its midpoint"""
    y, depth = slater_point(interval_problem, 0.0)
    assert y[0] == pytest.approx(0.5)
    assert depth == pytest.approx(0.5)


def test_feasible_box_covers_feasible_set(interval_problem):
    box = feasible_box(interval_problem, 0.0)
    assert box[0, 0] < 0.0
    assert box[0, 1] > 1.0
    assert box[0, 1] - box[0, 0] < 1.2


# =============================================================================
# Files, hashing and seams
# =============================================================================

def test_save_and_load(interval_problem, tmp_path):
    """A saved problem loads back with the same hash"""
    path = tmp_path / "interval.json"
    save_problem(interval_problem, str(path))
    loaded = load_problem(str(path))
    assert loaded.name == "interval_projection"
    assert problem_hash(loaded) == problem_hash(interval_problem)
    assert loaded.source == str(path)


def test_problem_hash_format(interval_problem):
    digest = problem_hash(interval_problem)
    assert digest.startswith("sha256:")
    assert len(digest) == len("sha256:") + 64


def test_hash_changes_with_shift(interval_problem):
    """Shifts are folded into the file structure and so into the hash"""
    shifted = replace(interval_problem, a_shift=np.array([0.1, 0.0]))
    assert problem_hash(shifted) != problem_hash(interval_problem)


def test_folded_shifts_evaluate_the_same(interval_problem):
    shifted = replace(interval_problem, a_shift=np.array([0.1, 0.2]), b_shift=np.array([0.3]))
    rebuilt = problem_from_dict(problem_to_dict(shifted))
    assert rebuilt.a_shift is None
    assert evaluate(rebuilt, 0.7, [0.4]).g == pytest.approx(evaluate(shifted, 0.7, [0.4]).g)
    assert evaluate(rebuilt, 0.7, [0.4]).h == pytest.approx(evaluate(shifted, 0.7, [0.4]).h)


class TestSeams:
    """Tests for breakpoint continuity checks"""

    @pytest.fixture
    def kinked_dict(self, interval_dict):
        data = copy.deepcopy(interval_dict)
        terms = data["g"]["pieces"][0]["terms"]
        data["g"]["pieces"] = [
            {"x_lo": -1.0, "x_hi": 0.0, "terms": terms},
            {"x_lo": 0.0, "x_hi": 2.0, "terms": terms + [{"powers": [1, 0], "coeff": 1.0}]},
        ]
        return data

    def test_declared_c1_jump(self, kinked_dict):
        kinked_dict["g"]["smoothness"] = "C1"
        with pytest.raises(SeamError):
            check_seams(problem_from_dict(kinked_dict))

    def test_c0_allows_kink(self, kinked_dict):
        kinked_dict["g"]["smoothness"] = "C0"
        check_seams(problem_from_dict(kinked_dict))

    def test_corpus_breakpoints_are_c2(self, corpus):
        check_seams(corpus("ex_scsc_prev"))


# =============================================================================
# Corpus
# =============================================================================

def test_list_corpus():
    """Every registered id has a description and tags"""
    entries = list_corpus()
    assert len(entries) == 11
    for cid, description, tags in entries:
        assert description
        assert any(tag.startswith("condition=") for tag in tags)


@pytest.mark.parametrize("corpus_id", sorted(CORPUS))
def test_corpus_problem_loads(corpus_id, corpus):
    """Corpus files parse, pass seam checks and name themselves"""
    problem = corpus(corpus_id)
    assert problem.name == corpus_id
    with open(corpus_path(corpus_id)) as f:
        assert json.load(f)["name"] == corpus_id
