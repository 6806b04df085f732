"""
Tests for the regdiag command line
"""
import json
import os

import pytest

from cli import EXIT_ERROR, EXIT_FINDING, EXIT_OK, _vector, build_parser, main
from reports import load_manifest


def _run(out, *argv):
    return main(list(argv) + ["--out", str(out)])


def test_vector_parsing():
    """Comma-separated vectors parse to floats"""
    assert _vector("0.5") == [0.5]
    assert _vector("-1,0") == [-1.0, 0.0]


def test_usage_error_exits_with_one(capsys):
    """Unknown flags are usage errors, not findings"""
    with pytest.raises(SystemExit) as exc:
        build_parser().parse_args(["check", "ce_scsc_disk", "--bogus"])
    assert exc.value.code == EXIT_ERROR


class TestCheck:
    """Tests for the check subcommand"""

    def test_regular_point(self, clean_env, capsys):
        assert _run(clean_env, "check", "ce_scsc_disk", "--x", "2") == EXIT_OK
        doc = json.loads(capsys.readouterr().out)
        assert doc["all_hold"] is True
        assert os.path.exists(clean_env / "check.json")
        manifest = load_manifest(str(clean_env / "check.json"))
        assert manifest.subcommand == "check"
        assert manifest.problem_id == "ce_scsc_disk"

    def test_degenerate_point_is_a_finding(self, clean_env, capsys):
        assert _run(clean_env, "check", "ex_mult_disc", "--x", "1") == EXIT_FINDING
        assert json.loads(capsys.readouterr().out)["all_hold"] is False

    def test_outside_domain(self, clean_env, capsys):
        assert _run(clean_env, "check", "ex_mult_disc", "--x", "9") == EXIT_ERROR
        assert "outside the domain" in capsys.readouterr().err

    def test_unknown_problem(self, clean_env):
        assert _run(clean_env, "check", "no_such_problem", "--x", "0") == EXIT_ERROR

    def test_bad_tolerance_override(self, clean_env, capsys):
        assert _run(clean_env, "check", "ce_scsc_disk", "--x", "2", "--tol", "no_such_tol=1") == EXIT_ERROR
        assert "Unknown tolerance" in capsys.readouterr().err

    def test_csv_format(self, clean_env, capsys):
        _run(clean_env, "check", "ce_scsc_disk", "--x", "2", "--format", "csv")
        header = capsys.readouterr().out.splitlines()[0]
        assert header.startswith("y,lambda,active,label")


class TestOtherCommands:
    """Tests for trace, strata, sens, growth and corpus"""

    def test_corpus(self, clean_env, capsys):
        assert _run(clean_env, "corpus") == EXIT_OK
        ids = [row["id"] for row in json.loads(capsys.readouterr().out)]
        assert len(ids) == 11
        assert "ce_licq_corner" in ids

    def test_trace_with_event_is_a_finding(self, clean_env, capsys):
        assert _run(clean_env, "trace", "ex_scsc_kink", "--from=-1", "--to", "1") == EXIT_FINDING
        doc = json.loads(capsys.readouterr().out)
        assert [e["kind"] for e in doc["events"]] == ["SCSC_LOSS"]
        assert os.path.exists(clean_env / "branch.csv")
        assert os.path.exists(clean_env / "branch.csv.manifest.json")

    def test_trace_without_events(self, clean_env):
        assert _run(clean_env, "trace", "ce_scsc_disk", "--from", "0", "--to", "0.8") == EXIT_OK

    def test_strata_obstructed(self, clean_env, capsys):
        code = _run(clean_env, "strata", "ce_licq_corner", "--x=-1", "--x", "1")
        assert code == EXIT_FINDING
        assert json.loads(capsys.readouterr().out)["verdict"] == "OBSTRUCTED"

    def test_strata_needs_two_samples(self, clean_env):
        assert _run(clean_env, "strata", "ce_scsc_disk", "--x", "0.5") == EXIT_ERROR

    def test_growth(self, clean_env, capsys):
        assert _run(clean_env, "growth", "ce_scsc_disk", "--x", "0.5", "--samples", "200") == EXIT_OK
        assert json.loads(capsys.readouterr().out)["c_hat"] == pytest.approx(1.0, abs=1e-6)

    def test_sens_sidecars_share_one_manifest(self, clean_env, capsys):
        _run(clean_env, "sens", "ex_scsc_kink", "--x=-0.5", "--to", "0.5")
        profile = load_manifest(str(clean_env / "conditioning.csv"))
        sensitivity = load_manifest(str(clean_env / "sensitivity.json"))
        assert profile.finished is not None
        assert profile.finished == sensitivity.finished
        assert profile.started == sensitivity.started
