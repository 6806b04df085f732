"""
Tests for the reduced and complementarity sensitivity systems
"""
import numpy as np
import pytest

from continuation import trace_branch
from errors import SingularSystem
from kkt_core import enumerate_kkt_points, global_minimizer
from sensitivity import (
    COMPLEMENTARITY,
    REDUCED,
    complementarity_matrices,
    conditioning_profile,
    hypergradient_candidates,
    hypergradient_complementarity,
    hypergradient_reduced,
    reduced_matrices,
    total_hypergradient,
    validate_against_fd,
)


class TestMultiplierJump:
    """min -y s.t. y <= 1, y <= x"""

    def test_follows_x_below_one(self, corpus):
        problem = corpus("ex_mult_disc")
        kkt = enumerate_kkt_points(problem, 0.5)[0]
        red = hypergradient_reduced(problem, kkt)
        comp = hypergradient_complementarity(problem, kkt)
        assert red.method == REDUCED
        assert comp.method == COMPLEMENTARITY
        assert red.dy_dx == pytest.approx(np.array([[1.0]]))
        assert comp.dy_dx == pytest.approx(np.array([[1.0]]))
        assert comp.det == pytest.approx(0.5)

    def test_flat_above_one(self, corpus):
        problem = corpus("ex_mult_disc")
        kkt = enumerate_kkt_points(problem, 1.5)[0]
        assert hypergradient_reduced(problem, kkt).dy_dx == pytest.approx(np.array([[0.0]]))
        assert abs(hypergradient_complementarity(problem, kkt).det) == pytest.approx(0.5)

    @pytest.mark.parametrize("x", [0.5, 0.9, 1.1, 1.5])
    def test_determinant_is_distance_to_one(self, corpus, x):
        problem = corpus("ex_mult_disc")
        kkt = enumerate_kkt_points(problem, x)[0]
        assert abs(hypergradient_complementarity(problem, kkt).det) == pytest.approx(abs(x - 1.0))

    def test_singular_at_one(self, corpus):
        problem = corpus("ex_mult_disc")
        for kkt in enumerate_kkt_points(problem, 1.0):
            with pytest.raises(SingularSystem) as exc:
                hypergradient_reduced(problem, kkt)
            assert exc.value.method == REDUCED
            with pytest.raises(SingularSystem) as exc:
                hypergradient_complementarity(problem, kkt)
            assert exc.value.method == COMPLEMENTARITY
            assert exc.value.sigma_min <= 1e-9


class TestKink:
    """min y^2 s.t. y <= x, with upper-level objective x^2/2 + y"""

    @pytest.mark.parametrize("x", [-0.5, -0.25, 0.25, 0.5])
    def test_determinant(self, corpus, x):
        problem = corpus("ex_scsc_kink")
        det = hypergradient_complementarity(problem, global_minimizer(problem, x)).det
        assert abs(det) == pytest.approx(2.0 * abs(x))

    def test_complementarity_singular_at_the_kink(self, corpus):
        problem = corpus("ex_scsc_kink")
        kkt = global_minimizer(problem, 0.0)
        assert hypergradient_reduced(problem, kkt).dy_dx == pytest.approx(np.array([[1.0]]))
        with pytest.raises(SingularSystem) as exc:
            hypergradient_complementarity(problem, kkt)
        assert exc.value.method == COMPLEMENTARITY

    def test_candidates_at_the_kink(self, corpus):
        problem = corpus("ex_scsc_kink")
        kkt = global_minimizer(problem, 0.0)
        candidates = hypergradient_candidates(problem, kkt)
        slopes = {tuple(c["active"]): float(c["result"].dy_dx[0, 0]) for c in candidates}
        assert slopes == {(): pytest.approx(0.0), (0,): pytest.approx(1.0)}

    def test_total_hypergradient(self, corpus):
        problem = corpus("ex_scsc_kink")
        for x in (-0.5, 0.5):
            kkt = global_minimizer(problem, x)
            total = total_hypergradient(problem, kkt, hypergradient_reduced(problem, kkt))
            assert total == pytest.approx([0.5])

    def test_methods_agree(self, corpus):
        problem = corpus("ex_scsc_kink")
        kkt = global_minimizer(problem, -0.5)
        red = hypergradient_reduced(problem, kkt)
        comp = hypergradient_complementarity(problem, kkt)
        assert red.dy_dx == pytest.approx(comp.dy_dx, abs=1e-10)
        assert red.dlambda_dx == pytest.approx(comp.dlambda_dx, abs=1e-10)


def test_matrix_shapes(corpus):
    """Bordered and complementarity systems have the documented shapes"""
    problem = corpus("ce_scsc_disk")
    kkt = global_minimizer(problem, 2.0)
    M, N = reduced_matrices(problem, kkt.x, kkt.y, kkt.lam, kkt.active)
    Gv, Gx = complementarity_matrices(problem, kkt.x, kkt.y, kkt.lam)
    assert M.shape == (3, 3) and N.shape == (3, 1)
    assert Gv.shape == (3, 3) and Gx.shape == (3, 1)


class TestAlongBranches:
    """Conditioning and finite-difference checks over traced branches"""

    @pytest.fixture
    def kink_branch(self, corpus):
        problem = corpus("ex_scsc_kink")
        return problem, trace_branch(problem, -1.0, 1.0, global_minimizer(problem, -1.0))

    def test_conditioning_profile(self, kink_branch):
        problem, branch = kink_branch
        profile = conditioning_profile(problem, branch)
        frame = profile.to_frame()
        assert len(frame) == len(branch.samples)
        assert list(frame.columns) == ["x", "sigma_min_reduced", "sigma_min_comp", "det_comp", "flags"]
        assert frame["det_comp"].iloc[0] == pytest.approx(-2.0)

    def test_fd_agreement(self, kink_branch):
        problem, branch = kink_branch
        check = validate_against_fd(problem, branch)
        assert check.checked > 0
        assert check.max_error < 1e-5

    def test_fd_step_positive(self, kink_branch):
        problem, branch = kink_branch
        with pytest.raises(ValueError):
            validate_against_fd(problem, branch, fd_step=0.0)
