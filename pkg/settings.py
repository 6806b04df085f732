"""
Tolerances and environment configuration
"""
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from typing import Callable, Dict, Iterable, List, Mapping, Optional

from errors import ConfigError

logger = logging.getLogger(__name__)

# Settings file for persisting CLI defaults
SETTINGS_FILE = "regdiag_settings.json"

THREADS_ENV = "REGDIAG_THREADS"
TOL_ENV_PREFIX = "REGDIAG_TOL_"


@dataclass(frozen=True)
class Tolerances:
    """Numeric tolerances shared by every diagnostic."""
    act_tol: float = 1e-8
    newton_tol: float = 1e-10
    dedup_tol: float = 1e-6
    class_tol: float = 1e-7
    reg_tol: float = 1e-6
    sing_tol: float = 1e-9
    event_tol: float = 1e-6
    max_newton: int = 50
    max_halvings: int = 20
    jac_sigma_tol: float = 1e-12
    probe_r: float = 1e-3
    probe_dirs: int = 64
    step_cap: float = 0.5
    fold_monitor: float = 1e-7
    fold_sigma: float = 1e-2
    seam_tol: float = 1e-9
    domain_slack: float = 1e-9
    failure_tol: float = 1e-12
    sosc_failure_tol: float = 1e-20
    uniform_sosc_tol: float = 1e-2
    licq_scan_rho: float = 0.05
    seeds_per_axis: int = 7

    def with_overrides(self, overrides: Mapping[str, object]) -> "Tolerances":
        """
        Return a copy with selected tolerances replaced.

        Args:
            overrides: Mapping of tolerance name to new value (strings are parsed)

        Returns:
            New Tolerances instance

        Raises:
            ConfigError: Unknown name or unparsable value
        """
        known = {f.name: f.type for f in fields(self)}
        changes = {}
        for name, value in overrides.items():
            if name not in known:
                raise ConfigError(f"Unknown tolerance '{name}'. Known: {', '.join(sorted(known))}")
            cast = int if known[name] in (int, "int") else float
            try:
                changes[name] = cast(value)
            except (TypeError, ValueError):
                raise ConfigError(f"Tolerance '{name}' expects {cast.__name__}, got {value!r}")
        return replace(self, **changes)

    def to_dict(self) -> Dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


DEFAULT_TOLERANCES = Tolerances()


@dataclass
class Settings:
    """Resolved runtime settings."""
    threads: int = 1
    tolerances: Tolerances = field(default_factory=Tolerances)


def parse_overrides(items) -> Dict[str, str]:
    """
    Parse NAME=VALUE strings from the command line.

    Args:
        items: Iterable of "name=value" strings

    Returns:
        Dictionary of raw overrides
    """
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"Expected NAME=VALUE, got '{item}'")
        name, value = item.split("=", 1)
        out[name.strip()] = value.strip()
    return out


def load_settings_file(path: Optional[str] = None) -> dict:
    """Load persisted defaults, returning {} when missing or malformed."""
    path = path or SETTINGS_FILE
    if not os.path.exists(path):
        return {}
    try:
        with open(path, "r") as f:
            data = json.load(f)
    except (json.JSONDecodeError, IOError) as e:
        logger.warning(f"Ignoring unreadable settings file {path}: {e}")
        return {}
    if not isinstance(data, dict):
        logger.warning(f"Ignoring settings file {path}: top level is not an object")
        return {}
    return data


def load_settings(environ: Optional[Mapping[str, str]] = None,
                  settings_file: Optional[str] = None) -> Settings:
    """
    Resolve settings from the settings file and the environment.

    Environment wins over the file. REGDIAG_THREADS caps worker processes;
    REGDIAG_TOL_<NAME> overrides a tolerance.

    Args:
        environ: Environment mapping (defaults to os.environ)
        settings_file: Optional path of the JSON settings file

    Returns:
        Settings record
    """
    environ = os.environ if environ is None else environ
    saved = load_settings_file(settings_file)

    threads = saved.get("threads", 1)
    source = f"'threads' in {settings_file or SETTINGS_FILE}"
    raw_threads = environ.get(THREADS_ENV)
    if raw_threads not in (None, ""):
        threads, source = raw_threads, THREADS_ENV
    try:
        threads = max(1, int(threads))
    except (TypeError, ValueError):
        raise ConfigError(f"{source} must be an integer, got {threads!r}")

    overrides = dict(saved.get("tolerances", {}) or {})
    for key, value in environ.items():
        if key.startswith(TOL_ENV_PREFIX):
            overrides[key[len(TOL_ENV_PREFIX):].lower()] = value

    return Settings(threads=threads, tolerances=DEFAULT_TOLERANCES.with_overrides(overrides))


def worker_count(environ: Optional[Mapping[str, str]] = None) -> int:
    """Worker cap from REGDIAG_THREADS (default 1)."""
    environ = os.environ if environ is None else environ
    try:
        return max(1, int(environ.get(THREADS_ENV, "1") or 1))
    except ValueError:
        return 1


def map_ordered(fn: Callable, items: Iterable, threads: Optional[int] = None) -> List:
    """
    Apply fn to every item, in worker processes when more than one is allowed.

    Results come back in input order whatever the scheduling. fn must be a
    picklable top-level callable (functools.partial is fine).

    Args:
        fn: Function of one argument
        items: Inputs
        threads: Worker cap (defaults to REGDIAG_THREADS)

    Returns:
        List of results in input order
    """
    items = list(items)
    threads = worker_count() if threads is None else max(1, int(threads))
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    logger.debug(f"Mapping {len(items)} item(s) over {min(threads, len(items))} worker(s)")
    with ProcessPoolExecutor(max_workers=min(threads, len(items))) as pool:
        return list(pool.map(fn, items))
