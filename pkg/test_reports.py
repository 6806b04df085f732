"""
Tests for artifact writers, manifests and schema validation
"""
import json
import math
import os

import numpy as np
import pandas as pd
import pytest

from errors import SchemaError
from reports import (
    RunManifest,
    from_jsonable,
    load_manifest,
    manifest_path,
    read_json,
    to_jsonable,
    validate_document,
    write_artifact,
    write_csv,
    write_json,
)
from stratification import StratSignature


class TestEncoding:
    """Tests for the JSON encoding of results"""

    def test_non_finite_sentinels(self):
        assert to_jsonable([math.inf, -math.inf, 1.5]) == ["inf", "-inf", 1.5]
        assert to_jsonable(float("nan")) == "nan"

    def test_numpy_values(self):
        data = to_jsonable({"a": np.array([1.0, 2.0]), "b": np.float64(3.0), "c": (1, 2)})
        assert data == {"a": [1.0, 2.0], "b": 3.0, "c": [1, 2]}
        assert type(data["b"]) is float

    def test_to_dict_objects(self):
        assert to_jsonable(StratSignature(0, 1, 1))["faces"] == 1

    def test_decoding(self):
        decoded = from_jsonable({"m": ["inf", "-inf", "name"]})
        assert decoded["m"][0] == math.inf
        assert decoded["m"][1] == -math.inf
        assert decoded["m"][2] == "name"

    def test_write_and_read(self, tmp_path):
        path = write_json({"sigma": math.inf, "x": [0.5]}, str(tmp_path / "out" / "doc.json"))
        with open(path) as f:
            assert json.load(f) == {"sigma": "inf", "x": [0.5]}
        assert read_json(path) == {"sigma": math.inf, "x": [0.5]}

    def test_write_csv(self, tmp_path):
        path = write_csv(pd.DataFrame({"x": [0.0, 1.0], "m": [np.nan, 2.0]}), str(tmp_path / "t.csv"))
        with open(path) as f:
            lines = f.read().splitlines()
        assert lines == ["x,m", "0.0,nan", "1.0,2.0"]


class TestValidation:
    """Tests for validate_document"""

    def test_valid_signature(self):
        doc = validate_document(StratSignature(4, 4, 1, per_pattern={(0,): 1}, x=(0.5,)), "signature")
        assert doc["per_pattern"] == {"[0]": 1}

    def test_invalid_document(self):
        with pytest.raises(SchemaError) as exc:
            validate_document({"x": None, "vertices": -1, "arcs": 0, "faces": 1, "per_pattern": {},
                               "degenerate": 0}, "signature")
        assert "vertices" in str(exc.value)

    def test_unknown_schema(self):
        with pytest.raises(SchemaError):
            validate_document({}, "no_such_document")


class TestManifest:
    """Tests for run manifests and sidecars"""

    def test_for_run(self, interval_problem):
        manifest = RunManifest.for_run("check", {"x": [0.5]}, interval_problem, seed=3)
        assert manifest.problem_id == "interval_projection"
        assert manifest.problem_hash.startswith("sha256:")
        assert manifest.seed == 3
        assert "failure_tol" in manifest.tolerances

    def test_round_trip(self, interval_problem):
        manifest = RunManifest.for_run("trace", {"from": -1.0}, interval_problem).finish()
        restored = RunManifest.from_dict(manifest.to_dict())
        assert restored == manifest

    def test_sidecar_path(self):
        assert manifest_path("out/branch.csv") == "out/branch.csv.manifest.json"

    def test_write_artifact(self, tmp_path, interval_problem):
        manifest = RunManifest.for_run("signature", {}, interval_problem).finish()
        path = write_artifact(StratSignature(2, 0, 1, x=(0.5,)), str(tmp_path / "sig.json"),
                              manifest, schema_name="signature")
        assert os.path.exists(path)
        loaded = load_manifest(path)
        assert loaded.subcommand == "signature"
        assert loaded.problem_hash == manifest.problem_hash

    def test_write_frame_artifact(self, tmp_path):
        manifest = RunManifest.for_run("profile", {})
        path = write_artifact(pd.DataFrame({"x": [0.0]}), str(tmp_path / "p.csv"), manifest)
        assert os.path.exists(manifest_path(path))
        assert load_manifest(path).problem_id is None

    def test_missing_manifest(self, tmp_path):
        assert load_manifest(str(tmp_path / "nothing.json")) is None

    def test_unreadable_manifest(self, tmp_path):
        artifact = str(tmp_path / "a.json")
        with open(manifest_path(artifact), "w") as f:
            f.write("{not json")
        assert load_manifest(artifact) is None
