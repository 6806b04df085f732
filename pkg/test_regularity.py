"""
Tests for LICQ, SCSC and SOSC margins and the gradient margin scan
"""
import os
from dataclasses import replace

import numpy as np
import pytest

from errors import EmptyBandError, InfeasibleError
from kkt_core import KKTPoint, global_minimizer, solve_reduced_kkt
from problem_model import load_problem, scale_constraint
from regularity import (
    check_licq,
    check_scsc,
    check_sosc,
    full_report,
    gradient_margin_scan,
    kkt_matrix,
)


def _point(x, y, lam, h, active):
    return KKTPoint(x=np.atleast_1d(np.asarray(x, dtype=float)), y=np.asarray(y, dtype=float),
                    lam=np.asarray(lam, dtype=float), h=np.asarray(h, dtype=float),
                    active=tuple(active), residual=0.0)


class TestLICQ:
    """Tests for check_licq"""

    def test_single_active_gradient(self, corpus):
        margin, ok = check_licq(corpus("ex_mult_disc"), 0.5, [0.5])
        assert margin == pytest.approx(1.0)
        assert ok

    def test_more_active_than_dimension(self, corpus):
        assert check_licq(corpus("ex_mult_disc"), 1.0, [1.0]) == (0.0, False)

    def test_no_active_constraint(self, corpus):
        margin, ok = check_licq(corpus("ce_scsc_disk"), 0.5, [0.5, 0.0])
        assert margin == np.inf
        assert ok

    def test_infeasible_point(self, corpus):
        with pytest.raises(InfeasibleError):
            check_licq(corpus("ex_mult_disc"), 0.5, [1.5])

    def test_parallel_gradients_at_tangency(self, corpus):
        # circle and ellipse touch at (0, 1) with parallel normals when x = sqrt(2)
        margin, ok = check_licq(corpus("ce_licq_tangent"), np.sqrt(2.0), [0.0, 1.0])
        assert margin < 1e-6
        assert not ok


class TestSCSC:
    """Tests for check_scsc"""

    def test_inactive_slack(self):
        point = _point(0.5, [0.0], [0.0], [-0.5], ())
        assert check_scsc(point) == (pytest.approx(0.5), True)

    def test_weakly_active(self):
        point = _point(0.0, [0.0], [0.0], [0.0], (0,))
        margin, ok = check_scsc(point)
        assert margin == 0.0
        assert not ok

    def test_no_constraints(self):
        point = _point(0.0, [0.0], [], [], ())
        assert check_scsc(point)[0] == np.inf


class TestSOSC:
    """Tests for check_sosc"""

    def test_fold_branch_curvature(self, corpus):
        problem = corpus("ex_sosc_fold")
        kkt = solve_reduced_kkt(problem, 0.25, (0,), [0.0, 0.5])
        assert kkt.y == pytest.approx([0.0, 0.5], abs=1e-12)
        modulus, ok = check_sosc(problem, kkt)
        assert modulus == pytest.approx(1.0)
        assert ok

    def test_cone_reduced_to_origin(self, corpus):
        problem = corpus("ex_mult_disc")
        kkt = solve_reduced_kkt(problem, 1.5, (0,), [0.0])
        modulus, ok = check_sosc(problem, kkt)
        assert modulus == np.inf
        assert ok


class TestFullReport:
    """Tests for full_report and the KKT matrix"""

    def test_interior_minimizer(self, corpus):
        problem = corpus("ce_scsc_disk")
        report = full_report(problem, global_minimizer(problem, 0.5))
        assert report.all_hold
        assert report.scsc_margin == pytest.approx(0.75)
        assert report.sosc_modulus == pytest.approx(2.0)
        assert report.kkt_sigma_min == pytest.approx(2.0)

    def test_boundary_minimizer(self, corpus):
        problem = corpus("ce_scsc_disk")
        kkt = global_minimizer(problem, 2.0)
        report = full_report(problem, kkt)
        assert kkt.y == pytest.approx([1.0, 0.0], abs=1e-10)
        assert report.licq_margin == pytest.approx(2.0)
        assert report.scsc_margin == pytest.approx(1.0)
        assert report.sosc_modulus == pytest.approx(4.0)
        assert report.active == (0,)

    def test_to_dict(self, corpus):
        problem = corpus("ce_scsc_disk")
        data = full_report(problem, global_minimizer(problem, 0.5)).to_dict()
        assert data["verdicts"] == {"licq": True, "scsc": True, "sosc": True}
        assert data["active"] == []

    def test_kkt_matrix_is_bordered(self, corpus):
        problem = corpus("ce_scsc_disk")
        K = kkt_matrix(problem, global_minimizer(problem, 2.0))
        assert K.shape == (3, 3)
        assert K == pytest.approx(K.T)
        assert K[2, 2] == 0.0

    @pytest.mark.parametrize("c", [0.5, 2.0, 10.0])
    def test_verdicts_invariant_under_constraint_scaling(self, corpus, c):
        problem = corpus("ce_scsc_disk")
        scaled = scale_constraint(problem, 0, c)
        a = full_report(problem, global_minimizer(problem, 2.0))
        b = full_report(scaled, global_minimizer(scaled, 2.0))
        assert (a.licq, a.scsc, a.sosc) == (b.licq, b.scsc, b.sosc)
        assert b.licq_margin == pytest.approx(c * a.licq_margin)


class TestGradientMarginScan:
    """Tests for the near-activity scan"""

    def test_corner_degenerates(self, corpus):
        scan = gradient_margin_scan(corpus("ce_licq_corner"), 0.0)
        assert scan.sigma_star < 1e-4
        assert np.linalg.norm(scan.witness_y) <= 1e-3

    def test_regular_away_from_the_corner(self, corpus):
        scan = gradient_margin_scan(corpus("ce_scsc_disk"), 0.5)
        assert scan.sigma_star > 1.0
        assert scan.band_points > 0

    def test_rho_must_be_positive(self, corpus):
        with pytest.raises(ValueError):
            gradient_margin_scan(corpus("ce_scsc_disk"), 0.5, rho=0.0)

    def test_empty_band(self, interval_problem):
        shifted = replace(interval_problem, a_shift=np.array([5.0, 5.0]))
        with pytest.raises(EmptyBandError):
            gradient_margin_scan(shifted, 0.5)


class TestCornerMinimizerFile:
    """The corner-cut box with a linear objective, loaded from its problem file"""

    @pytest.fixture
    def problem(self):
        path = os.path.join(os.path.dirname(os.path.abspath(__file__)), "problems", "ce_licq_corner_min.json")
        return load_problem(path)

    def test_licq_holds_before_the_corner(self, problem):
        kkt = global_minimizer(problem, -0.5)
        assert kkt.y == pytest.approx([0.0, 0.0], abs=1e-10)
        assert full_report(problem, kkt).licq

    def test_licq_fails_at_the_corner(self, problem):
        kkt = global_minimizer(problem, 0.0)
        assert kkt.y == pytest.approx([0.0, 0.0], abs=1e-10)
        assert not check_licq(problem, 0.0, kkt.y)[1]
