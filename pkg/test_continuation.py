"""
Tests for branch tracing, event location and the branch-based screens
"""
import numpy as np
import pytest

from continuation import (
    ACTIVATION,
    DOMAIN_BOUNDARY,
    FOLD,
    PATH_END,
    SADDLE_DEGENERATION,
    SCSC_LOSS,
    TraceOptions,
    active_set_history,
    branch_migration_screen,
    count_minimizers_per_stratum,
    kink_slopes,
    minimizer_count_screen,
    quadratic_growth_estimate,
    resolve_on_branch,
    trace_branch,
    uniform_sosc_profile,
)
from errors import NoStart
from kkt_core import enumerate_kkt_points, global_minimizer, local_minimizers, solve_reduced_kkt
from problem_model import load_problem
from stratification import CONSISTENT, OBSTRUCTED


def _minimizer_near(problem, x, target):
    mins = local_minimizers(problem, enumerate_kkt_points(problem, x))
    return min(mins, key=lambda p: float(np.linalg.norm(p.y - np.asarray(target))))


@pytest.fixture(scope="module")
def kink_branch():
    problem = load_problem("ex_scsc_kink")
    return problem, trace_branch(problem, -1.0, 1.0, global_minimizer(problem, -1.0))


@pytest.fixture(scope="module")
def disk_branch():
    problem = load_problem("ce_scsc_disk")
    return problem, trace_branch(problem, 0.0, 2.0, global_minimizer(problem, 0.0))


class TestKinkedBranch:
    """Tracing min y^2 s.t. y <= x through the loss of strict complementarity"""

    def test_single_scsc_loss_at_zero(self, kink_branch):
        _, branch = kink_branch
        losses = [e for e in branch.events if e.kind == SCSC_LOSS]
        assert len(losses) == 1
        assert losses[0].x_star == pytest.approx(0.0, abs=1e-6)
        assert losses[0].index == 0
        assert losses[0].bracket_width <= 1e-6

    def test_reaches_the_end(self, kink_branch):
        _, branch = kink_branch
        assert branch.termination == PATH_END
        assert branch.termination_x == pytest.approx(1.0)

    def test_resolved_points_follow_min_zero_x(self, kink_branch):
        problem, branch = kink_branch
        for x in (-0.75, -0.2, 0.3, 0.9):
            assert resolve_on_branch(problem, branch, x).y[0] == pytest.approx(min(0.0, x), abs=1e-8)

    def test_one_sided_slopes(self, kink_branch):
        problem, branch = kink_branch
        left, right = kink_slopes(problem, branch, 0.0)
        assert left == pytest.approx([1.0], abs=1e-6)
        assert right == pytest.approx([0.0], abs=1e-6)

    def test_active_set_history(self, kink_branch):
        _, branch = kink_branch
        history = active_set_history(branch)
        assert [J for _, J in history] == [(0,), ()]
        (a, b), _ = history[0]
        assert a == pytest.approx(-1.0)
        assert b == pytest.approx(0.0, abs=1e-6)

    def test_resolve_outside_range(self, kink_branch):
        problem, branch = kink_branch
        with pytest.raises(ValueError):
            resolve_on_branch(problem, branch, 1.5)

    def test_frame(self, kink_branch):
        _, branch = kink_branch
        frame = branch.to_frame()
        assert list(frame.columns) == ["x", "y[0]", "lambda[0]", "J", "licq_margin", "scsc_margin",
                                       "sosc_modulus", "kkt_sigma_min"]
        assert len(frame) == len(branch.samples)
        assert frame["J"].iloc[0] == 1
        assert frame["J"].iloc[-1] == 0

    def test_to_dict(self, kink_branch):
        _, branch = kink_branch
        data = branch.to_dict()
        assert data["problem"] == "ex_scsc_kink"
        assert data["termination"] == PATH_END
        assert [e["kind"] for e in data["events"]] == [SCSC_LOSS]
        assert data["active_set_history"][1]["J"] == []


class TestDiskBranch:
    """The projection onto the unit disk activates the constraint at x = 1"""

    def test_activation(self, disk_branch):
        _, branch = disk_branch
        activations = [e for e in branch.events if e.kind == ACTIVATION]
        assert len(activations) == 1
        assert activations[0].x_star == pytest.approx(1.0, abs=1e-6)
        assert [J for _, J in active_set_history(branch)] == [(), (0,)]

    def test_boundary_point(self, disk_branch):
        problem, branch = disk_branch
        assert resolve_on_branch(problem, branch, 1.5).y == pytest.approx([1.0, 0.0], abs=1e-8)

    def test_uniform_sosc(self, disk_branch):
        _, branch = disk_branch
        profile = uniform_sosc_profile(branch)
        assert profile.infimum == pytest.approx(2.0)
        assert profile.uniform
        assert len(profile.to_dict()["samples"]) == len(branch.samples)

    def test_domain_boundary_event(self):
        problem = load_problem("ce_scsc_disk")
        branch = trace_branch(problem, 1.5, 3.0, global_minimizer(problem, 1.5))
        assert [e.kind for e in branch.events] == [DOMAIN_BOUNDARY]
        assert branch.events[0].x_star == pytest.approx(2.0)
        assert branch.termination == PATH_END


class TestTerminations:
    """Branches that end before the path does"""

    def test_saddle_degeneration(self):
        problem = load_problem("ex_scsc_saddle")
        branch = trace_branch(problem, 1.0, -1.0, _minimizer_near(problem, 1.0, (0.0, 0.0)))
        assert branch.termination == SADDLE_DEGENERATION
        assert branch.termination_x == pytest.approx(0.0, abs=1e-6)

    def test_fold(self):
        problem = load_problem("ex_sosc_fold")
        branch = trace_branch(problem, 1.0, -1.0, _minimizer_near(problem, 1.0, (0.0, 1.0)))
        assert branch.termination == FOLD
        assert branch.termination_x == pytest.approx(0.0, abs=1e-6)
        assert [e.kind for e in branch.events][-1] == FOLD
        assert not uniform_sosc_profile(branch).uniform

    def test_upper_branch_keeps_curvature(self):
        problem = load_problem("ex_scsc_saddle")
        branch = trace_branch(problem, 1.0, -1.0, _minimizer_near(problem, 1.0, (0.0, 1.0)))
        assert branch.termination == PATH_END
        assert all(s.report.sosc_modulus == pytest.approx(1.0) for s in branch.samples)

    def test_non_minimizer_start_rejected(self):
        problem = load_problem("ex_sosc_fold")
        maximizer = solve_reduced_kkt(problem, 1.0, (0,), [0.0, -1.0])
        with pytest.raises(NoStart):
            trace_branch(problem, 1.0, 0.25, maximizer)

    def test_non_minimizer_start_allowed(self):
        problem = load_problem("ex_sosc_fold")
        maximizer = solve_reduced_kkt(problem, 1.0, (0,), [0.0, -1.0])
        branch = trace_branch(problem, 1.0, 0.25, maximizer, opts=TraceOptions(allow_non_min=True))
        assert branch.termination == PATH_END
        assert branch.samples[-1].kkt.y == pytest.approx([0.0, -0.5], abs=1e-8)

    def test_maximizer_branch_meets_the_fold(self):
        problem = load_problem("ex_sosc_fold")
        lower = trace_branch(problem, 1.0, -1.0, _minimizer_near(problem, 1.0, (0.0, 1.0)))
        maximizer = solve_reduced_kkt(problem, 1.0, (0,), [0.0, -1.0])
        upper = trace_branch(problem, 1.0, -1.0, maximizer, opts=TraceOptions(allow_non_min=True))
        assert upper.termination == FOLD
        assert upper.termination_x == pytest.approx(lower.termination_x, abs=1e-6)

    def test_coinciding_endpoints(self, corpus):
        problem = corpus("ce_scsc_disk")
        with pytest.raises(ValueError):
            trace_branch(problem, 0.5, 0.5, global_minimizer(problem, 0.5))


class TestScreens:
    """Tests for the minimizer-count and migration screens"""

    def test_counts_per_stratum(self, corpus):
        problem = corpus("ce_sosc_count")
        assert count_minimizers_per_stratum(problem, 0.0) == {(0,): 1}
        assert count_minimizers_per_stratum(problem, 1.0) == {(0,): 2}

    def test_count_screen_obstructed(self, corpus):
        result = minimizer_count_screen(corpus("ce_sosc_count"), [0.0, 1.0])
        assert result.verdict == OBSTRUCTED
        assert result.witness == (0.0, 1.0)
        assert result.difference == "stratum [0]: 1 vs 2 minimizer(s)"

    def test_migration_obstructed(self, corpus):
        result = branch_migration_screen(corpus("ce_scsc_disk"), 0.0, 2.0)
        assert result.verdict == OBSTRUCTED
        assert result.difference.startswith("active set [] -> [0]")

    def test_migration_consistent_inside_the_disk(self, corpus):
        assert branch_migration_screen(corpus("ce_scsc_disk"), 0.0, 0.8).verdict == CONSISTENT


class TestQuadraticGrowth:
    """Tests for the sampled growth constant"""

    def test_unit_growth_of_a_distance(self, corpus):
        problem = corpus("ce_scsc_disk")
        estimate = quadratic_growth_estimate(problem, global_minimizer(problem, 0.5), 0.05, seed=3)
        assert estimate.c_hat == pytest.approx(1.0, abs=1e-6)
        assert estimate.feasible_samples >= 10

    def test_same_seed_same_estimate(self, corpus):
        problem = corpus("ex_sosc_fold")
        kkt = _minimizer_near(problem, 0.25, (0.0, 0.5))
        a = quadratic_growth_estimate(problem, kkt, 0.05, seed=7)
        b = quadratic_growth_estimate(problem, kkt, 0.05, seed=7)
        assert a.c_hat == b.c_hat
        assert a.witness == b.witness

    def test_growth_vanishes_toward_the_fold(self, corpus):
        problem = corpus("ex_sosc_fold")
        far = quadratic_growth_estimate(problem, _minimizer_near(problem, 1.0, (0.0, 1.0)), 0.05)
        near = quadratic_growth_estimate(problem, _minimizer_near(problem, 0.001, (0.0, 0.0316)), 0.05)
        assert near.c_hat < far.c_hat
        assert near.c_hat < 0.02

    def test_bad_delta(self, corpus):
        problem = corpus("ce_scsc_disk")
        with pytest.raises(ValueError):
            quadratic_growth_estimate(problem, global_minimizer(problem, 0.5), 0.0)
