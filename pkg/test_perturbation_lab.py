"""
Tests for perturbation draws, failure-set estimates and prevalence experiments
"""
import numpy as np
import pytest

from corpus import CORPUS
from perturbation_lab import (
    LICQ,
    SCSC,
    FailureSetEstimate,
    PerturbationDraw,
    apply_perturbation,
    crossing_nodes,
    draw_perturbation,
    failure_set_estimate,
    non_prevalence_persistence,
    prevalence_experiment,
)
from problem_model import evaluate, fd_check, slater_point


class TestDraws:
    """Tests for draw_perturbation and apply_perturbation"""

    def test_reproducible(self):
        a = draw_perturbation(0.05, 11, 3, 2)
        b = draw_perturbation(0.05, 11, 3, 2)
        assert a.a.tolist() == b.a.tolist()
        assert a.b.tolist() == b.b.tolist()

    def test_ranges_and_sizes(self):
        draw = draw_perturbation(0.05, 0, 4, 2)
        assert draw.a.shape == (4,)
        assert draw.b.shape == (2,)
        assert np.all((draw.a >= 0.0) & (draw.a <= 0.05))
        assert np.all((draw.b >= 0.0) & (draw.b <= 0.05))

    def test_constraint_shifts_come_first(self):
        draw = draw_perturbation(1.0, 4, 2, 1)
        rng = np.random.Generator(np.random.Philox(4))
        assert draw.a.tolist() == rng.uniform(0.0, 1.0, size=2).tolist()
        assert draw.b.tolist() == rng.uniform(0.0, 1.0, size=1).tolist()

    def test_nu_positive(self):
        with pytest.raises(ValueError):
            draw_perturbation(0.0, 0, 1, 1)

    def test_apply(self, interval_problem):
        draw = PerturbationDraw(a=np.array([0.1, 0.2]), b=np.array([0.3]), nu=0.5, seed=9)
        perturbed = apply_perturbation(interval_problem, draw)
        assert perturbed.name == "interval_projection~9"
        base, rec = evaluate(interval_problem, 0.5, [0.2]), evaluate(perturbed, 0.5, [0.2])
        assert rec.h == pytest.approx(base.h + [0.1, 0.2])
        assert rec.g == pytest.approx(base.g + 0.06)

    def test_apply_accumulates(self, interval_problem):
        draw = PerturbationDraw(a=np.array([0.1, 0.2]), b=np.array([0.3]), nu=0.5, seed=1)
        twice = apply_perturbation(apply_perturbation(interval_problem, draw), draw)
        assert twice.a_shift == pytest.approx([0.2, 0.4])
        assert twice.b_shift == pytest.approx([0.6])

    @pytest.mark.parametrize("corpus_id", sorted(CORPUS))
    def test_shifted_derivatives_stay_exact(self, corpus_id, corpus):
        problem = corpus(corpus_id)
        perturbed = apply_perturbation(problem, draw_perturbation(0.2, 5, problem.k, problem.m))
        rng = np.random.default_rng(11)
        for _ in range(10):
            x = rng.uniform(problem.x_lo, problem.x_hi)
            y = rng.uniform(problem.y_box[:, 0], problem.y_box[:, 1])
            assert fd_check(perturbed, x, y, 1e-5) < 1e-5

    @pytest.mark.parametrize("corpus_id", sorted(CORPUS))
    def test_shifts_below_margin_keep_slater_points(self, corpus_id, corpus):
        problem = corpus(corpus_id)
        nu = 0.2
        perturbed = apply_perturbation(problem, draw_perturbation(nu, 9, problem.k, problem.m))
        for x in np.linspace(problem.x_lo[0], problem.x_hi[0], 9):
            _, depth = slater_point(perturbed, np.array([x]))
            assert depth >= problem.slater_margin - nu

    def test_apply_size_mismatch(self, interval_problem):
        with pytest.raises(ValueError):
            apply_perturbation(interval_problem, draw_perturbation(0.05, 0, 3, 1))


class TestCrossingNodes:
    """Tests for the between-node zero test"""

    def test_v_shape_between_nodes(self):
        xs = np.linspace(-1.0, 1.0, 21)
        flagged = crossing_nodes(np.abs(xs - 0.05))
        assert np.flatnonzero(flagged).tolist() == [10]

    def test_positive_minimum_not_flagged(self):
        xs = np.linspace(-1.0, 1.0, 21)
        assert not crossing_nodes(1.0 + xs ** 2).any()

    def test_non_finite_window_skipped(self):
        margin = np.array([3.0, 2.0, 1.0, np.inf, 1.0, 2.0, 3.0])
        assert not crossing_nodes(margin).any()


class TestFailureSetEstimate:
    """Tests for grid failure-set estimates"""

    def test_properties(self):
        estimate = FailureSetEstimate(SCSC, 0.0, 1.0, 11, failing_cells=[3, 4, 5],
                                      intervals=[(0.3, 0.5)], interval_cells=[3])
        assert estimate.fraction == pytest.approx(3 / 11)
        assert not estimate.empty
        assert not estimate.point_like
        frame = estimate.to_frame()
        assert frame["failing"].sum() == 3
        assert frame["margin"].isna().all()
        assert estimate.to_dict()["x_grid"] == {"lo": 0.0, "hi": 1.0, "res": 11}

    def test_kink_on_a_node(self, corpus):
        estimate = failure_set_estimate(corpus("ex_scsc_kink"), SCSC, 21)
        assert estimate.failing_cells == [10]
        assert estimate.intervals == [(0.0, 0.0)]
        assert estimate.point_like

    def test_kink_between_nodes(self, corpus):
        estimate = failure_set_estimate(corpus("ex_scsc_kink"), SCSC, 20)
        assert estimate.failing_cells == [10]
        assert estimate.point_like

    def test_disk_activation_point(self, corpus):
        estimate = failure_set_estimate(corpus("ce_scsc_disk"), SCSC, 21)
        assert estimate.failing_cells == [10]
        assert estimate.intervals == [(1.0, 1.0)]

    @pytest.mark.parametrize("coarse,fine", [(21, 41), (41, 81), (20, 40)])
    def test_point_measure_shrinks_with_grid(self, corpus, coarse, fine):
        problem = corpus("ex_scsc_kink")
        a = failure_set_estimate(problem, SCSC, coarse)
        b = failure_set_estimate(problem, SCSC, fine)
        assert b.fraction <= a.fraction

    @pytest.mark.slow
    def test_interval_measure_stable_with_grid(self, corpus):
        problem = corpus("ex_licq_prev")
        a = failure_set_estimate(problem, LICQ, 201)
        b = failure_set_estimate(problem, LICQ, 401)
        assert b.fraction == pytest.approx(a.fraction, abs=2 / 201)

    def test_unknown_condition(self, corpus):
        with pytest.raises(ValueError):
            failure_set_estimate(corpus("ex_scsc_kink"), "MFCQ", 21)

    def test_grid_too_small(self, corpus):
        with pytest.raises(ValueError):
            failure_set_estimate(corpus("ex_scsc_kink"), SCSC, 3)

    @pytest.mark.slow
    def test_licq_interval(self, corpus):
        estimate = failure_set_estimate(corpus("ex_licq_prev"), LICQ, 401)
        assert estimate.fraction == pytest.approx(0.5, abs=0.01)
        assert len(estimate.intervals) == 1


class TestPrevalenceExperiment:
    """Tests for prevalence_experiment"""

    def test_perturbed_kink_stays_point_like(self, corpus):
        report = prevalence_experiment(corpus("ex_scsc_kink"), SCSC, nu=0.05, trials=3, seed=5,
                                       x_grid_res=41, threads=1)
        assert [t.draw.seed for t in report.per_trial] == [5, 6, 7]
        summary = report.summary()
        assert summary["point_like"] == 3
        assert summary["empty"] == 0
        assert len(report.to_frame()) == 3
        assert report.to_dict()["trials"] == 3

    def test_reproducible(self, corpus):
        problem = corpus("ex_scsc_kink")
        a = prevalence_experiment(problem, SCSC, nu=0.05, trials=2, seed=1, x_grid_res=21, threads=1)
        b = prevalence_experiment(problem, SCSC, nu=0.05, trials=2, seed=1, x_grid_res=21, threads=1)
        assert a.to_dict() == b.to_dict()

    def test_nu_below_slater_margin(self, corpus):
        with pytest.raises(ValueError):
            prevalence_experiment(corpus("ex_scsc_kink"), SCSC, nu=0.5, trials=1)

    def test_needs_a_trial(self, corpus):
        with pytest.raises(ValueError):
            prevalence_experiment(corpus("ex_scsc_kink"), SCSC, trials=0)


class TestPersistence:
    """Tests for non_prevalence_persistence"""

    def test_unknown_corpus_id(self):
        with pytest.raises(ValueError):
            non_prevalence_persistence("ex_scsc_kink", trials=1)

    @pytest.mark.slow
    def test_migration_persists(self):
        report = non_prevalence_persistence("ce_scsc_disk", nu=0.01, trials=2, seed=0, threads=1)
        assert report.screen == "branch_migration"
        assert report.obstructed == 2
        assert report.to_dict()["verdicts"] == ["OBSTRUCTED", "OBSTRUCTED"]
