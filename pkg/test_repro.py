"""
Tests for the reproduction suite runner
"""
import pytest

import repro
from errors import NoConverge
from repro import CRITERIA, ReproConfig, run_suite


def test_all_checks_registered():
    """Fourteen numbered checks, each registered once"""
    assert sorted(number for number, _, _ in CRITERIA) == list(range(1, 15))


class TestReproConfig:
    """Tests for quick and full settings"""

    def test_full(self):
        cfg = ReproConfig()
        assert (cfg.trials, cfg.grid_res, cfg.allowed_misses) == (100, 2001, 1)

    def test_quick(self):
        cfg = ReproConfig(quick=True)
        assert (cfg.trials, cfg.grid_res, cfg.allowed_misses) == (10, 401, 1)


class TestRunSuite:
    """Tests for run_suite"""

    def test_selected_checks_pass(self):
        report = run_suite(ReproConfig(quick=True), only=[1, 2, 6])
        assert [r.number for r in report.results] == [1, 2, 6]
        assert report.passed
        frame = report.to_frame()
        assert frame["status"].tolist() == ["PASS", "PASS", "PASS"]
        assert report.to_dict()["criteria"][0]["number"] == 1

    def test_raising_check_fails(self, monkeypatch):
        def broken(cfg):
            raise NoConverge("diverged")

        monkeypatch.setattr(repro, "CRITERIA", [(99, "broken", broken)])
        report = run_suite(ReproConfig(quick=True))
        assert not report.passed
        assert report.results[0].detail == "NoConverge: diverged"
        assert report.to_frame()["status"].tolist() == ["FAIL"]

    def test_empty_report_does_not_pass(self):
        assert not run_suite(ReproConfig(quick=True), only=[0]).passed

    @pytest.mark.slow
    def test_quick_suite(self):
        assert run_suite(ReproConfig(quick=True)).passed
