"""
Dataset ingestion: CSV (+ schema) or the synthetic two-blob generator, turned
into the latent matrix every model and generator works on.

Input:  dataset CSV with a header row, schema JSON (see cf_utils.codec)
Output: Dataset(table, schema, rows, labels, classes)
"""

import logging
from dataclasses import dataclass
from typing import List

import numpy as np
import polars as pl

from cf_utils.codec import FeatureSchema, encode_table, fit_schema
from cf_utils.errors import SchemaError
from cf_utils.gaussian import rng_stream
from cf_utils.utils import load_json
from run_utils.config import RunConfig, SyntheticSpec

_logger = logging.getLogger(__name__)

LABEL = "y"
NOISE_STREAM = 1  # task id of the data-noise draw; 0 is the synthetic generator


@dataclass(frozen=True, eq=False)
class Dataset:
    table: pl.DataFrame
    schema: FeatureSchema
    rows: np.ndarray      # latent, (m, n)
    labels: np.ndarray    # class index per row
    classes: List[str]    # raw label value of each class index

    @property
    def class_count(self) -> int:
        return len(self.classes)


def two_blob(spec: SyntheticSpec, seed: int) -> pl.DataFrame:
    """Balanced two-class data; both classes share one rotated, stretched covariance."""
    rng = rng_stream(seed)
    c, s = np.cos(spec.angle), np.sin(spec.angle)
    rot = np.eye(spec.dim)
    rot[:2, :2] = [[c, -s], [s, c]]
    scale = np.ones(spec.dim)
    scale[0] = np.sqrt(spec.stretch)
    root = rot * scale
    labels = np.arange(spec.n) % 2
    centre = np.zeros((spec.n, spec.dim))
    centre[:, 0] = np.where(labels == 1, 0.5, -0.5) * spec.separation
    x = centre + rng.standard_normal((spec.n, spec.dim)) @ root.T
    cols = {f"x{j + 1}": x[:, j] for j in range(spec.dim)}
    cols[LABEL] = labels
    return pl.DataFrame(cols)


def two_blob_hints(dim: int) -> dict:
    return {f"x{j + 1}": {"kind": "continuous"} for j in range(dim)}


def _labels(table: pl.DataFrame, label: str):
    if label not in table.columns:
        raise SchemaError(f"label column {label!r} is not in the dataset ({table.columns})")
    raw = table.get_column(label)
    if raw.null_count():
        raise SchemaError(f"label column {label!r} has {raw.null_count()} missing values")
    keys = [str(int(v)) if isinstance(v, float) and v.is_integer() else str(v) for v in raw.to_list()]
    numeric = all(k.lstrip("-").isdigit() for k in keys)
    classes = sorted(set(keys), key=int) if numeric else sorted(set(keys))
    if len(classes) < 2:
        raise SchemaError(f"label column {label!r} has a single class {classes}")
    pos = {k: i for i, k in enumerate(classes)}
    return np.array([pos[k] for k in keys], dtype=int), classes


def load_table(path: str) -> pl.DataFrame:
    try:
        return pl.read_csv(path)
    except (pl.exceptions.ComputeError, pl.exceptions.NoDataError) as e:
        raise SchemaError(f"cannot read dataset {path}: {e}") from None


def schema_hints(schema_obj: dict):
    """Feature hints and label name from a schema file."""
    try:
        return {f["name"]: f for f in schema_obj["features"]}, schema_obj.get("label") or LABEL, schema_obj.get("scm")
    except (KeyError, TypeError) as e:
        raise SchemaError(f"malformed schema file: {e}") from None


def build_dataset(table: pl.DataFrame, hints: dict, label: str, scm=None, *,
                  noise: float = 0.0, seed: int = 0) -> Dataset:
    schema = fit_schema(table, hints, label, scm)
    rows = encode_table(schema, table)
    if noise > 0:
        rows = rows + noise * rng_stream(seed, NOISE_STREAM).standard_normal(rows.shape)
    labels, classes = _labels(table, label)
    _logger.info("dataset: %d rows, %d features, %d latent columns, %d classes",
                 rows.shape[0], len(schema.features), rows.shape[1], len(classes))
    return Dataset(table, schema, rows, labels, classes)


def load_dataset(cfg: RunConfig) -> Dataset:
    if cfg.synthetic is not None:
        table = two_blob(cfg.synthetic, cfg.seed)
        return build_dataset(table, two_blob_hints(cfg.synthetic.dim), LABEL,
                             noise=cfg.data_noise, seed=cfg.seed)
    hints, label, scm = schema_hints(load_json(str(cfg.schema_file), "schema"))
    table = load_table(str(cfg.dataset))
    return build_dataset(table, hints, label, scm, noise=cfg.data_noise, seed=cfg.seed)
