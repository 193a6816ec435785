"""Helpers for persisting arrays and JSON artifacts, and for exact number formatting."""

import csv
import json
import os
from typing import Any

import numpy as np

from cf_utils.errors import ArtifactError, SchemaError


def encode_array(arr) -> dict:
    """Shape-tagged little-endian float64 array as base-16 text."""
    a = np.asarray(arr, dtype=float)
    return {"shape": list(a.shape), "dtype": "<f8", "hex": a.astype("<f8").tobytes().hex()}


def decode_array(obj: dict) -> np.ndarray:
    try:
        if obj["dtype"] != "<f8":
            raise SchemaError(f"unsupported array dtype {obj['dtype']!r}")
        a = np.frombuffer(bytes.fromhex(obj["hex"]), dtype="<f8")
        return a.reshape(obj["shape"]).astype(float)
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, SchemaError):
            raise
        raise SchemaError(f"malformed array record: {e}") from None


def save_json(path: str, payload: Any) -> None:
    """Write JSON atomically (write-temp + os.replace) so a crash mid-write
    never leaves a truncated artifact behind."""
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        json.dump(payload, f, indent=1, sort_keys=True)
        f.write("\n")
    os.replace(tmp, path)


def load_json(path: str, what: str = "artifact") -> Any:
    if not os.path.isfile(path):
        raise ArtifactError(f"{what} not found at {path}")
    with open(path) as f:
        try:
            return json.load(f)
        except json.JSONDecodeError as e:
            raise SchemaError(f"{what} at {path} is not valid JSON: {e}") from None


def fmt(v) -> str:
    """Round-trip decimal (17 significant digits); empty for missing values."""
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def write_csv(path: str, header, rows) -> None:
    """Header plus rows, every cell through fmt(); replaced atomically like save_json."""
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    tmp = path + ".tmp"
    with open(tmp, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        writer.writerows([fmt(v) for v in row] for row in rows)
    os.replace(tmp, path)
