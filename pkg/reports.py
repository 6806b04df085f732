"""
JSON/CSV artifact writers, run manifests and schema validation
"""
import functools
import json
import logging
import math
import os
from dataclasses import dataclass, field
from datetime import datetime
from typing import Any, Dict, Optional

import jsonschema
import numpy as np
import pandas as pd

from errors import SchemaError
from problem_model import ParametricProblem, problem_hash
from settings import DEFAULT_TOLERANCES, Tolerances

logger = logging.getLogger(__name__)

TOOL_NAME = "regdiag"
TOOL_VERSION = "0.1.0"

SCHEMA_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), "schemas")
MANIFEST_SUFFIX = ".manifest.json"

NONFINITE = {"inf": math.inf, "-inf": -math.inf, "nan": math.nan}


# =============================================================================
# Encoding
# =============================================================================

def to_jsonable(obj: Any) -> Any:
    """
    Convert results into plain JSON values.

    Objects with a to_dict() are expanded, numpy values become Python
    values, tuples become lists and non-finite floats become "inf", "-inf"
    or "nan".
    """
    if hasattr(obj, "to_dict"):
        return to_jsonable(obj.to_dict())
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return to_jsonable(obj.item())
    if isinstance(obj, float):
        if math.isnan(obj):
            return "nan"
        if math.isinf(obj):
            return "inf" if obj > 0 else "-inf"
    return obj


def from_jsonable(obj: Any) -> Any:
    """Inverse of the non-finite encoding; everything else is returned as loaded."""
    if isinstance(obj, dict):
        return {k: from_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [from_jsonable(v) for v in obj]
    if isinstance(obj, str) and obj in NONFINITE:
        return NONFINITE[obj]
    return obj


def write_json(data: Any, path: str) -> str:
    """Write data as indented JSON, creating parent directories."""
    _ensure_parent(path)
    with open(path, "w") as f:
        json.dump(to_jsonable(data), f, indent=2, allow_nan=False)
    return path


def read_json(path: str) -> Any:
    with open(path, "r") as f:
        return from_jsonable(json.load(f))


def write_csv(frame: pd.DataFrame, path: str) -> str:
    """Write a table without its index; NaN is written as 'nan'."""
    _ensure_parent(path)
    frame.to_csv(path, index=False, na_rep="nan")
    return path


def _ensure_parent(path: str) -> None:
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


# =============================================================================
# Schemas
# =============================================================================

@functools.lru_cache(maxsize=None)
def load_schema(name: str) -> Dict:
    """
    Load a shipped JSON schema by document name.

    Raises:
        SchemaError: No schema with that name
    """
    path = os.path.join(SCHEMA_DIR, f"{name}.schema.json")
    if not os.path.exists(path):
        raise SchemaError(f"No schema named '{name}' in {SCHEMA_DIR}")
    with open(path, "r") as f:
        return json.load(f)


def validate_document(doc: Any, schema_name: str) -> Dict:
    """
    Validate a report document against its schema.

    Args:
        doc: Result object or plain document
        schema_name: Schema file stem, e.g. "manifest"

    Returns:
        The encoded document

    Raises:
        SchemaError: The document does not match
    """
    encoded = to_jsonable(doc)
    try:
        jsonschema.validate(instance=encoded, schema=load_schema(schema_name))
    except jsonschema.ValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise SchemaError(f"{schema_name} document invalid at {where}: {e.message}") from e
    return encoded


# =============================================================================
# Manifests
# =============================================================================

@dataclass
class RunManifest:
    """Everything needed to re-run a subcommand and reproduce its artifacts."""
    subcommand: str
    options: Dict = field(default_factory=dict)
    seed: Optional[int] = None
    problem_id: Optional[str] = None
    problem_hash: Optional[str] = None
    tolerances: Dict = field(default_factory=dict)
    tool_version: str = TOOL_VERSION
    started: str = field(default_factory=lambda: datetime.now().isoformat())
    finished: Optional[str] = None

    @classmethod
    def for_run(cls, subcommand: str, options: Dict, problem: Optional[ParametricProblem] = None,
                seed: Optional[int] = None, tol: Tolerances = DEFAULT_TOLERANCES) -> "RunManifest":
        return cls(
            subcommand=subcommand,
            options=dict(options),
            seed=seed,
            problem_id=problem.name if problem is not None else None,
            problem_hash=problem_hash(problem) if problem is not None else None,
            tolerances=tol.to_dict(),
        )

    def finish(self) -> "RunManifest":
        self.finished = datetime.now().isoformat()
        return self

    def to_dict(self) -> Dict:
        return {
            "tool": TOOL_NAME,
            "tool_version": self.tool_version,
            "subcommand": self.subcommand,
            "options": self.options,
            "seed": self.seed,
            "problem_id": self.problem_id,
            "problem_hash": self.problem_hash,
            "tolerances": self.tolerances,
            "timestamps": {"started": self.started, "finished": self.finished},
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "RunManifest":
        stamps = data.get("timestamps", {})
        return cls(
            subcommand=data["subcommand"],
            options=data.get("options", {}),
            seed=data.get("seed"),
            problem_id=data.get("problem_id"),
            problem_hash=data.get("problem_hash"),
            tolerances=data.get("tolerances", {}),
            tool_version=data.get("tool_version", TOOL_VERSION),
            started=stamps.get("started", ""),
            finished=stamps.get("finished"),
        )


def manifest_path(artifact_path: str) -> str:
    """Sidecar path: 'branch.csv' -> 'branch.csv.manifest.json'."""
    return artifact_path + MANIFEST_SUFFIX


def write_manifest(manifest: RunManifest, artifact_path: str) -> str:
    path = manifest_path(artifact_path)
    write_json(validate_document(manifest, "manifest"), path)
    return path


def load_manifest(artifact_path: str) -> Optional[RunManifest]:
    """Read the sidecar manifest of an artifact, or None when it is missing or unreadable."""
    path = manifest_path(artifact_path)
    if not os.path.exists(path):
        return None
    try:
        return RunManifest.from_dict(read_json(path))
    except (json.JSONDecodeError, IOError, KeyError) as e:
        logger.warning(f"Unreadable manifest {path}: {e}")
        return None


def write_artifact(data: Any, path: str, manifest: RunManifest,
                   schema_name: Optional[str] = None) -> str:
    """
    Write one artifact and its manifest sidecar.

    DataFrames go to CSV, everything else to JSON (validated first when a
    schema name is given).

    Returns:
        Path of the artifact
    """
    if isinstance(data, pd.DataFrame):
        write_csv(data, path)
    else:
        doc = validate_document(data, schema_name) if schema_name else to_jsonable(data)
        write_json(doc, path)
    write_manifest(manifest, path)
    logger.info(f"Wrote {path}")
    return path
