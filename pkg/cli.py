"""
regdiag command-line interface
"""
import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np
import pandas as pd
from dotenv import load_dotenv

from continuation import (
    DOMAIN_BOUNDARY, PATH_END, TraceOptions, branch_migration_screen, minimizer_count_screen,
    quadratic_growth_estimate, trace_branch, uniform_sosc_profile,
)
from errors import DomainError, NoConverge, NoStart, Rejected, RegdiagError, SingularJacobian, SingularSystem
from kkt_core import classify_kkt, enumerate_kkt_points, global_minimizer, local_minimizers, solve_reduced_kkt
from perturbation_lab import (
    CONDITIONS, DEFAULT_GRID_RES, DEFAULT_NU, FAILURE_SEEDS_PER_AXIS, failure_set_estimate,
    non_prevalence_persistence, prevalence_experiment,
)
from problem_model import ParametricProblem, list_corpus, load_problem
from regularity import full_report
from repro import ReproConfig, run_suite
from reports import RunManifest, to_jsonable, validate_document, write_artifact
from sensitivity import (
    conditioning_profile, hypergradient_candidates, hypergradient_complementarity, hypergradient_reduced,
    total_hypergradient, validate_against_fd,
)
from settings import Tolerances, load_settings, parse_overrides
from stratification import DEFAULT_GRID_RES as STRATA_GRID_RES
from stratification import OBSTRUCTED, bracket_transition, rigidity_screen

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_FINDING = 2

DEFAULT_OUT = "regdiag_out"
SCREENS = ("rigidity", "minimizer_count", "branch_migration")


class _Parser(argparse.ArgumentParser):
    """Usage errors exit with 1 so that 2 stays reserved for regularity findings."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


def _vector(text: str) -> List[float]:
    """Parse '0.5' or '0.5,1.0' into a list of floats."""
    try:
        return [float(part) for part in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got '{text}'")


@dataclass
class Run:
    """Resolved options of one invocation."""
    args: argparse.Namespace
    tol: Tolerances
    threads: int

    def options(self) -> Dict:
        return {k: v for k, v in vars(self.args).items() if k != "func"}

    def manifest(self, problem: Optional[ParametricProblem] = None) -> RunManifest:
        return RunManifest.for_run(self.args.command, self.options(), problem, self.args.seed, self.tol)

    def path(self, name: str) -> str:
        return os.path.join(self.args.out, name)

    def emit(self, doc, frame: Optional[pd.DataFrame] = None) -> None:
        if self.args.format == "csv" and frame is not None:
            print(frame.to_csv(index=False, na_rep="nan"), end="")
        else:
            print(json.dumps(to_jsonable(doc), indent=2))


def _problem(run: Run) -> ParametricProblem:
    return load_problem(run.args.problem, run.tol)


def _point(problem: ParametricProblem, values: List[float], tol: Tolerances) -> np.ndarray:
    """
    Validate a parameter against the problem's domain.

    Raises:
        DomainError: Wrong length or outside the box beyond domain_slack
    """
    x = np.asarray(values, dtype=float)
    if x.shape != (problem.n,):
        raise DomainError(f"x needs {problem.n} value(s), got {len(values)}")
    if np.any(x < problem.x_lo - tol.domain_slack) or np.any(x > problem.x_hi + tol.domain_slack):
        raise DomainError(f"x={x.tolist()} is outside the domain "
                          f"[{problem.x_lo.tolist()}, {problem.x_hi.tolist()}]")
    return x


# =============================================================================
# Subcommands
# =============================================================================

def cmd_check(run: Run) -> int:
    problem = _problem(run)
    x = _point(problem, run.args.x, run.tol)
    points = enumerate_kkt_points(problem, x, tol=run.tol)
    rows, table = [], []
    for p in points:
        label = classify_kkt(problem, p, run.tol)
        report = full_report(problem, p, run.tol)
        rows.append({"kkt": p, "classification": label, "report": report})
        table.append({
            "y": p.y.tolist(), "lambda": p.lam.tolist(), "active": list(p.active), "label": label.label,
            "licq_margin": report.licq_margin, "scsc_margin": report.scsc_margin,
            "sosc_modulus": report.sosc_modulus, "kkt_sigma_min": report.kkt_sigma_min,
            "licq": report.licq, "scsc": report.scsc, "sosc": report.sosc,
        })
    all_hold = bool(rows) and all(r["report"].all_hold for r in rows)
    doc = {"problem": problem.name, "x": x, "points": rows, "all_hold": all_hold,
           "enumeration": points.summary}
    frame = pd.DataFrame(table)

    manifest = run.manifest(problem).finish()
    write_artifact(doc, run.path("check.json"), manifest, "check")
    write_artifact(frame, run.path("check.csv"), manifest)
    run.emit(doc, frame)
    if not rows:
        logger.warning(f"No KKT points found at x={x.tolist()}")
    return EXIT_OK if all_hold else EXIT_FINDING


def _start_point(run: Run, problem: ParametricProblem, x_from: np.ndarray):
    if run.args.y is None:
        return global_minimizer(problem, x_from, run.tol)
    J = tuple(run.args.J or ())
    try:
        return solve_reduced_kkt(problem, x_from, J, np.asarray(run.args.y, dtype=float), tol=run.tol)
    except (NoConverge, SingularJacobian, Rejected) as e:
        raise NoStart(f"No KKT point near y={run.args.y} with J={list(J)}: {e}") from e


def cmd_trace(run: Run) -> int:
    problem = _problem(run)
    x_from = _point(problem, run.args.x_from, run.tol)
    x_to = np.asarray(run.args.x_to, dtype=float)
    start = _start_point(run, problem, x_from)
    opts = TraceOptions(allow_non_min=run.args.allow_non_min, initial_step=run.args.initial_step)
    branch = trace_branch(problem, x_from, x_to, start, opts, run.tol)

    doc = branch.to_dict()
    doc["sosc_profile"] = {k: v for k, v in uniform_sosc_profile(branch, run.tol).to_dict().items()
                           if k != "samples"}
    manifest = run.manifest(problem).finish()
    write_artifact(branch.to_frame(), run.path("branch.csv"), manifest)
    write_artifact(doc, run.path("events.json"), manifest, "events")
    run.emit(doc, branch.to_frame())

    finding = branch.termination != PATH_END or any(e.kind != DOMAIN_BOUNDARY for e in branch.events)
    return EXIT_FINDING if finding else EXIT_OK


def cmd_strata(run: Run) -> int:
    problem = _problem(run)
    xs = [_point(problem, x, run.tol) for x in run.args.x]
    if len(xs) < 2:
        raise RegdiagError("strata needs at least two --x values")
    screen_name = run.args.screen
    transition = None
    if screen_name == "rigidity":
        screen = rigidity_screen(problem, xs, run.args.grid_res, run.tol, run.threads)
        for detail in screen.details:
            validate_document(detail, "signature")
        if run.args.bracket and screen.witness is not None and problem.n == 1:
            try:
                a, b, ca, cb = bracket_transition(problem, *screen.witness, tol=run.tol)
                transition = {"lo": a, "hi": b, "count_lo": ca, "count_hi": cb}
            except ValueError as e:
                logger.info(f"No vertex-count change to bracket: {e}")
    elif screen_name == "minimizer_count":
        screen = minimizer_count_screen(problem, xs, run.tol, run.threads)
    else:
        screen = branch_migration_screen(problem, xs[0], xs[-1], run.tol)

    doc = {"problem": problem.name, "screen": screen_name, **screen.to_dict(), "transition": transition}
    manifest = run.manifest(problem).finish()
    write_artifact(doc, run.path("strata.json"), manifest, "screen")
    run.emit(doc)
    return EXIT_FINDING if screen.verdict == OBSTRUCTED else EXIT_OK


def cmd_perturb(run: Run) -> int:
    args = run.args
    if args.persistence:
        report = non_prevalence_persistence(args.problem, args.nu, args.trials, args.seed,
                                            tol=run.tol, threads=run.threads)
        manifest = run.manifest(load_problem(args.problem, run.tol)).finish()
        write_artifact(report, run.path("persistence.json"), manifest, "persistence")
        run.emit(report)
        return EXIT_OK

    problem = _problem(run)
    if args.unperturbed:
        estimate = failure_set_estimate(problem, args.condition, args.grid_res, args.seeds_per_axis, tol=run.tol)
        doc = {"problem": problem.name, **estimate.to_dict()}
        manifest = run.manifest(problem).finish()
        write_artifact(doc, run.path("failure_set.json"), manifest, "failure_set")
        write_artifact(estimate.to_frame(), run.path("margins.csv"), manifest)
        run.emit(doc, estimate.to_frame())
        return EXIT_OK if estimate.empty else EXIT_FINDING

    report = prevalence_experiment(problem, args.condition, args.nu, args.trials, args.seed, args.grid_res,
                                   args.seeds_per_axis, run.tol, run.threads)
    doc = {"problem": problem.name, **report.to_dict()}
    manifest = run.manifest(problem).finish()
    write_artifact(doc, run.path("experiment.json"), manifest, "experiment")
    write_artifact(report.to_frame(), run.path("trials.csv"), manifest)
    run.emit({"problem": problem.name, "condition": report.condition, "nu": report.nu,
              "trials": report.trials, "seed": report.seed, "summary": report.summary()},
             report.to_frame())
    return EXIT_OK


def _sensitivities(run: Run, problem: ParametricProblem, kkt) -> Dict:
    entry = {"kkt": kkt, "reduced": None, "complementarity": None, "total_hypergradient": None,
             "errors": {}, "candidates": hypergradient_candidates(problem, kkt, run.tol)}
    for key, solve in (("reduced", hypergradient_reduced), ("complementarity", hypergradient_complementarity)):
        try:
            entry[key] = solve(problem, kkt, tol=run.tol)
        except SingularSystem as e:
            entry["errors"][key] = str(e)
    if problem.f is not None and entry["reduced"] is not None:
        entry["total_hypergradient"] = total_hypergradient(problem, kkt, entry["reduced"], run.tol)
    return entry


def cmd_sens(run: Run) -> int:
    problem = _problem(run)
    x = _point(problem, run.args.x, run.tol)
    points = enumerate_kkt_points(problem, x, tol=run.tol)
    if run.args.minimizers_only:
        points = local_minimizers(problem, points, run.tol)
    entries = [_sensitivities(run, problem, p) for p in points]
    doc = {"problem": problem.name, "x": x, "points": entries}

    frame = None
    if run.args.x_to is not None:
        x_to = np.asarray(run.args.x_to, dtype=float)
        branch = trace_branch(problem, x, x_to, global_minimizer(problem, x, run.tol), tol=run.tol)
        frame = conditioning_profile(problem, branch, run.tol).to_frame()
        if run.args.fd:
            doc["fd_validation"] = validate_against_fd(problem, branch, run.args.fd_step, run.tol)

    manifest = run.manifest(problem).finish()
    if frame is not None:
        write_artifact(frame, run.path("conditioning.csv"), manifest)
    write_artifact(doc, run.path("sensitivity.json"), manifest, "sensitivity")
    run.emit(doc, frame)
    singular = any(e["errors"] for e in entries)
    return EXIT_FINDING if singular or not entries else EXIT_OK


def cmd_growth(run: Run) -> int:
    problem = _problem(run)
    x = _point(problem, run.args.x, run.tol)
    if run.args.y is None:
        kkt = global_minimizer(problem, x, run.tol)
    else:
        mins = local_minimizers(problem, enumerate_kkt_points(problem, x, tol=run.tol), run.tol)
        if not mins:
            raise NoStart(f"No strict local minimizer of '{problem.name}' at x={x.tolist()}")
        target = np.asarray(run.args.y, dtype=float)
        kkt = min(mins, key=lambda p: float(np.linalg.norm(p.y - target)))
    estimate = quadratic_growth_estimate(problem, kkt, run.args.delta, run.args.samples, run.args.seed, run.tol)
    doc = {"problem": problem.name, "x": x, "y": kkt.y, **estimate.to_dict()}
    write_artifact(doc, run.path("growth.json"), run.manifest(problem).finish(), "growth")
    run.emit(doc)
    return EXIT_OK if estimate.c_hat > run.tol.reg_tol else EXIT_FINDING


def cmd_corpus(run: Run) -> int:
    frame = pd.DataFrame([{"id": cid, "description": desc, "tags": ",".join(tags)}
                          for cid, desc, tags in list_corpus()])
    run.emit(frame.to_dict(orient="records"), frame)
    return EXIT_OK


def cmd_repro(run: Run) -> int:
    cfg = ReproConfig(quick=run.args.quick, seed=run.args.seed, tol=run.tol, threads=run.threads)
    report = run_suite(cfg, run.args.only)
    manifest = run.manifest().finish()
    write_artifact(report.to_frame(), run.path("repro.csv"), manifest)
    write_artifact(report, run.path("repro.json"), manifest, "repro")
    if run.args.format == "csv":
        run.emit(report, report.to_frame())
    else:
        print(report.to_frame()[["number", "status", "title", "detail"]].to_string(index=False))
    return EXIT_OK if report.passed else EXIT_FINDING


# =============================================================================
# Parser
# =============================================================================

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--out", default=DEFAULT_OUT, help="Directory for artifacts and manifests")
    common.add_argument("--seed", type=int, default=0, help="Base RNG seed")
    common.add_argument("--tol", action="append", default=[], metavar="NAME=VALUE",
                        help="Override a tolerance (repeatable)")
    common.add_argument("--format", choices=("json", "csv"), default="json", help="Stdout format")
    common.add_argument("--settings", default=None, help="Settings file (default regdiag_settings.json)")
    common.add_argument("--verbose", action="store_true", help="Debug logging")

    parser = _Parser(prog="regdiag", description="Regularity diagnostics for parametric lower-level problems")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("check", parents=[common], help="Regularity report at every KKT point")
    p.add_argument("problem", help="Corpus id or problem file")
    p.add_argument("--x", type=_vector, required=True)
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("trace", parents=[common], help="Trace a minimizer branch")
    p.add_argument("problem")
    p.add_argument("--from", dest="x_from", type=_vector, required=True)
    p.add_argument("--to", dest="x_to", type=_vector, required=True)
    p.add_argument("--start", choices=("global-min",), default="global-min",
                   help="Start at the global minimizer unless --y is given")
    p.add_argument("--y", type=_vector, default=None, help="Explicit start guess")
    p.add_argument("--J", type=int, nargs="*", default=None, help="Working set for an explicit start")
    p.add_argument("--allow-non-min", action="store_true")
    p.add_argument("--initial-step", type=float, default=None)
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("strata", parents=[common], help="Stratification and obstruction screens")
    p.add_argument("problem")
    p.add_argument("--x", type=_vector, action="append", required=True, help="Sample parameter (repeat)")
    p.add_argument("--screen", choices=SCREENS, default="rigidity")
    p.add_argument("--grid-res", type=int, default=STRATA_GRID_RES)
    p.add_argument("--bracket", action="store_true", help="Localize a vertex-count change")
    p.set_defaults(func=cmd_strata)

    p = sub.add_parser("perturb", parents=[common], help="Failure sets and prevalence experiments")
    p.add_argument("problem")
    p.add_argument("--condition", choices=CONDITIONS, default="LICQ")
    p.add_argument("--nu", type=float, default=DEFAULT_NU)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--grid-res", type=int, default=DEFAULT_GRID_RES)
    p.add_argument("--seeds-per-axis", type=int, default=FAILURE_SEEDS_PER_AXIS)
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--unperturbed", action="store_true", help="Failure set of the problem itself")
    mode.add_argument("--persistence", action="store_true", help="Obstruction persistence (corpus ids)")
    p.set_defaults(func=cmd_perturb)

    p = sub.add_parser("sens", parents=[common], help="Hypergradients and conditioning")
    p.add_argument("problem")
    p.add_argument("--x", type=_vector, required=True)
    p.add_argument("--to", dest="x_to", type=_vector, default=None, help="Also profile the branch to here")
    p.add_argument("--minimizers-only", action="store_true")
    p.add_argument("--fd", action="store_true", help="Check branch tangents by finite differences")
    p.add_argument("--fd-step", type=float, default=1e-5)
    p.set_defaults(func=cmd_sens)

    p = sub.add_parser("growth", parents=[common], help="Quadratic growth estimate")
    p.add_argument("problem")
    p.add_argument("--x", type=_vector, required=True)
    p.add_argument("--y", type=_vector, default=None, help="Pick the minimizer nearest this point")
    p.add_argument("--delta", type=float, default=0.05)
    p.add_argument("--samples", type=int, default=2000)
    p.set_defaults(func=cmd_growth)

    p = sub.add_parser("corpus", parents=[common], help="List built-in problems")
    p.set_defaults(func=cmd_corpus)

    p = sub.add_parser("repro", parents=[common], help="Run the reproduction suite")
    p.add_argument("--quick", action="store_true", help="Fewer trials and coarser grids")
    p.add_argument("--only", type=int, nargs="+", default=None, help="Criterion numbers")
    p.set_defaults(func=cmd_repro)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """
    Entry point.

    Returns:
        0 when every verdict holds, 2 on a regularity finding, 1 on error
    """
    load_dotenv()
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s"
    )
    try:
        settings = load_settings(settings_file=args.settings)
        tol = settings.tolerances.with_overrides(parse_overrides(args.tol))
        return args.func(Run(args=args, tol=tol, threads=settings.threads))
    except (RegdiagError, ValueError, OSError) as e:
        logger.debug("Command failed", exc_info=True)
        print(f"regdiag {args.command}: error: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
