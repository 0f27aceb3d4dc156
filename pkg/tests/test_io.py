import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from stackelberg_heat.io import read_csv, sha256_file, to_jsonable, write_csv, write_json


def test_csv_header_and_line_endings(tmp_path):
    path = write_csv(tmp_path / "a.csv", ["k", "value"], [(0, 0.1), (1, np.float64(1 / 3))], "abc123")
    raw = path.read_bytes()
    assert raw.startswith(b"# config_hash=abc123\n")
    assert b"\r" not in raw
    lines = raw.decode().splitlines()
    assert lines[1] == "k,value"
    assert lines[3] == "1,0.33333333333333331"


@given(st.lists(st.floats(allow_nan=False, allow_infinity=False, width=64), min_size=1, max_size=20))
def test_csv_float_round_trip(values):
    import tempfile
    from pathlib import Path

    with tempfile.TemporaryDirectory() as d:
        path = write_csv(Path(d) / "v.csv", ["i", "x"], list(enumerate(values)), "h")
        h, header, rows = read_csv(path)
    assert h == "h" and header == ["i", "x"]
    assert [float(r[1]) for r in rows] == values


def test_csv_booleans_and_nan(tmp_path):
    path = write_csv(tmp_path / "b.csv", ["flag", "x"], [(True, float("nan")), (np.bool_(False), 2)], "h")
    _, _, rows = read_csv(path)
    assert rows == [["true", "nan"], ["false", "2"]]


def test_read_csv_requires_hash_line(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("a,b\n1,2\n")
    with pytest.raises(ValueError):
        read_csv(path)


def test_json_is_sorted_and_nan_safe(tmp_path):
    path = write_json(tmp_path / "r.json", {"b": np.float64("nan"), "a": np.arange(3), "c": {"z": np.inf, "y": True}})
    text = path.read_text()
    assert text.endswith("\n")
    data = json.loads(text)
    assert list(data) == ["a", "b", "c"]
    assert data == {"a": [0, 1, 2], "b": None, "c": {"y": True, "z": None}}


def test_to_jsonable_types():
    out = to_jsonable({1: (np.int64(3), np.float32(0.5), np.bool_(True))})
    assert out == {"1": [3, 0.5, True]}
    assert isinstance(out["1"][0], int)
    assert to_jsonable(-math.inf) is None


def test_json_deterministic_bytes(tmp_path):
    obj = {"x": [1.0, 2.5e-17], "y": {"b": 1, "a": 2}}
    a = write_json(tmp_path / "a.json", obj)
    b = write_json(tmp_path / "b.json", dict(reversed(list(obj.items()))))
    assert sha256_file(a) == sha256_file(b)
