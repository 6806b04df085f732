"""
Registry of the built-in problem corpus
"""
import os
from dataclasses import dataclass
from typing import Dict, Tuple

from errors import ParseError

CORPUS_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), "corpus")


@dataclass(frozen=True)
class CorpusEntry:
    file: str
    description: str
    tags: Tuple[str, ...]


CORPUS: Dict[str, CorpusEntry] = {
    "ce_licq_corner": CorpusEntry(
        "ce_licq_corner.json",
        "Box [-2,0]^2 cut by y1+y2+x <= 0; three constraints meet at the origin at x=0",
        ("condition=LICQ", "expects=OBSTRUCTED@x=-1,1", "expects=LICQ_FAIL@x=0"),
    ),
    "ce_licq_tangent": CorpusEntry(
        "ce_licq_tangent.json",
        "Unit disk intersected with the ellipse y1^2+(y2/x)^2 <= 1/2; tangency at x=sqrt(2)",
        ("condition=LICQ", "expects=OBSTRUCTED@x=1,2", "expects=TANGENCY@x=1.41421"),
    ),
    "ce_scsc_disk": CorpusEntry(
        "ce_scsc_disk.json",
        "Projection of (x,0) onto the unit disk; the minimizer reaches the boundary at x=1",
        ("condition=SCSC", "expects=ACTIVATION@x=1", "expects=MIGRATION@x=0,2"),
    ),
    "ce_sosc_count": CorpusEntry(
        "ce_sosc_count.json",
        "Quartic on the face y1=0 of a box; one boundary minimizer at x=0, two at x=1",
        ("condition=SOSC", "expects=OBSTRUCTED@x=0,1"),
    ),
    "ex_licq_prev": CorpusEntry(
        "ex_licq_prev.json",
        "y <= 0 and y <= phi(x) coincide on [0,1]; LICQ failure set is an interval",
        ("condition=LICQ", "expects=FAIL_SET@[0,1]", "expects=POINT_LIKE@perturbed"),
    ),
    "ex_scsc_prev": CorpusEntry(
        "ex_scsc_prev.json",
        "(y-phi(x))^2 on [-1,0]; SCSC fails on [0,1] and at a single point after perturbation",
        ("condition=SCSC", "expects=FAIL_SET@[0,1]", "expects=POINT_LIKE@perturbed"),
    ),
    "ex_sosc_prev": CorpusEntry(
        "ex_sosc_prev.json",
        "y2^4 + phi(x)^2 y2^2 on a box; SOSC fails on [0,1] and nowhere after perturbation",
        ("condition=SOSC", "expects=FAIL_SET@[0,1]", "expects=EMPTY@perturbed"),
    ),
    "ex_mult_disc": CorpusEntry(
        "ex_mult_disc.json",
        "min -y s.t. y <= 1, y <= x; multipliers jump and LICQ fails at x=1",
        ("condition=LICQ", "expects=LICQ_FAIL@x=1", "expects=SINGULAR@x=1"),
    ),
    "ex_scsc_kink": CorpusEntry(
        "ex_scsc_kink.json",
        "min y^2 s.t. y <= x; y*(x)=min(0,x) kinks where SCSC fails at x=0",
        ("condition=SCSC", "expects=SCSC_LOSS@x=0"),
    ),
    "ex_scsc_saddle": CorpusEntry(
        "ex_scsc_saddle.json",
        "Indefinite quadratic on a box; the minimizer at (0,0) degenerates into a saddle at x=0",
        ("condition=SCSC", "expects=SADDLE_DEGENERATION@x=0"),
    ),
    "ex_sosc_fold": CorpusEntry(
        "ex_sosc_fold.json",
        "Cubic on the face y1=0; minimizer and maximizer collide and annihilate at x=0",
        ("condition=SOSC", "expects=FOLD@x=0"),
    ),
}


def corpus_path(corpus_id: str) -> str:
    """Path of the JSON file behind a corpus id."""
    if corpus_id not in CORPUS:
        raise ParseError(f"Unknown corpus id '{corpus_id}'. Known: {', '.join(CORPUS)}")
    return os.path.join(CORPUS_DIR, CORPUS[corpus_id].file)
