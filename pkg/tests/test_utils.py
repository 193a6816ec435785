"""Unit tests for the artifact helpers in cf_utils.utils."""

import json

import numpy as np
import polars as pl
import pytest

from cf_utils.errors import ArtifactError, SchemaError
from cf_utils.utils import decode_array, encode_array, fmt, load_json, save_json, write_csv


class TestArrayEncoding:
    def test_bit_exact(self):
        a = np.array([[0.1, -2.5e-300], [np.pi, 1e308]])
        out = decode_array(encode_array(a))
        assert out.shape == (2, 2)
        assert np.array_equal(out, a)

    def test_little_endian_hex(self):
        assert encode_array([1.0])["hex"] == "000000000000f03f"

    def test_wrong_dtype(self):
        rec = encode_array([1.0])
        rec["dtype"] = ">f4"
        with pytest.raises(SchemaError):
            decode_array(rec)

    def test_missing_field(self):
        with pytest.raises(SchemaError):
            decode_array({"shape": [1]})

    def test_shape_mismatch(self):
        rec = encode_array([1.0, 2.0])
        rec["shape"] = [3]
        with pytest.raises(SchemaError):
            decode_array(rec)


class TestFmt:
    def test_none_is_empty(self):
        assert fmt(None) == ""

    def test_bools_are_digits(self):
        assert fmt(True) == "1"
        assert fmt(np.bool_(False)) == "0"

    def test_ints(self):
        assert fmt(np.int64(7)) == "7"

    def test_floats_round_trip(self):
        assert float(fmt(0.1)) == 0.1
        assert fmt(0.1) == "0.10000000000000001"

    def test_strings_pass_through(self):
        assert fmt("age") == "age"


class TestJson:
    def test_round_trip_creates_parents(self, tmp_path):
        path = tmp_path / "a" / "b.json"
        save_json(str(path), {"x": [1, 2]})
        assert load_json(str(path)) == {"x": [1, 2]}
        assert not (tmp_path / "a" / "b.json.tmp").exists()

    def test_missing_file(self, tmp_path):
        with pytest.raises(ArtifactError) as err:
            load_json(str(tmp_path / "nope.json"), "prior")
        assert "prior" in str(err.value)

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        with pytest.raises(SchemaError):
            load_json(str(path))

    def test_sorted_keys(self, tmp_path):
        path = tmp_path / "k.json"
        save_json(str(path), {"b": 1, "a": 2})
        assert list(json.loads(path.read_text())) == ["a", "b"]


class TestWriteCsv:
    def test_cells_formatted(self, tmp_path):
        path = tmp_path / "out.csv"
        write_csv(str(path), ["i", "v", "ok", "note"], [[0, 0.1, True, None], [1, 2.0, False, "x"]])
        assert path.read_text().splitlines() == [
            "i,v,ok,note",
            "0,0.10000000000000001,1,",
            "1,2,0,x",
        ]

    def test_readable_by_polars(self, tmp_path):
        path = tmp_path / "out.csv"
        write_csv(str(path), ["x", "y"], [[1.5, -2.0], [0.25, 3.0]])
        df = pl.read_csv(path)
        assert df["x"].to_list() == [1.5, 0.25]
