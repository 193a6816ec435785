"""
Feature codec: raw rows <-> the Gaussian modelling space.

    continuous      x                      -> x
    log_continuous  x > 0                  -> log x
    pixel_logit     x in [0, 1], eps       -> log(u / (1 − u)),  u = |x − eps|
    binary          one of two levels      -> 1 latent column
    categorical     one of K levels        -> K latent columns

Discrete kinds follow the "independent Gaussian per level" reading: level k
has latent mean m_k = logit(p_k) with unit variance, where p_k is the level's
proportion in the training table. A level that is present encodes to the mean
of N(m_k, 1) truncated to (0, ∞), an absent level to the mean truncated to
(−∞, 0). Decoding is argmax (categorical) or the sign (binary), so discrete
round trips are exact; soft weights are softmax(z / temperature).

Pixel decoding returns eps + sigmoid(z) clipped to [0, 1]. That inverts the
encoding for x >= eps; values below eps come back mirrored to 2·eps − x.
"""

import enum
import logging
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import polars as pl
from scipy.special import expit, log_ndtr, logit, softmax
from scipy.stats import norm

from cf_utils.actionability import FeatureClass, FeaturePolicy
from cf_utils.errors import SchemaError
from cf_utils.prior import DataPrior, PriorSource
from cf_utils.utils import load_json, save_json

_logger = logging.getLogger(__name__)

PIXEL_EPS = 0.01
TEMPERATURE = 0.01
LOGIT_CLIP = 1e-12


class FeatureKind(str, enum.Enum):
    CONTINUOUS = "continuous"
    LOG_CONTINUOUS = "log_continuous"
    PIXEL_LOGIT = "pixel_logit"
    CATEGORICAL = "categorical"
    BINARY = "binary"


DISCRETE = (FeatureKind.CATEGORICAL, FeatureKind.BINARY)


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    kind: FeatureKind = FeatureKind.CONTINUOUS
    policy: FeatureClass = FeatureClass.MUTABLE
    eps: float = PIXEL_EPS
    levels: Tuple[str, ...] = ()
    temperature: float = TEMPERATURE
    ancestors: Tuple[str, ...] = ()
    proportions: Tuple[float, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "kind", FeatureKind(self.kind))
        object.__setattr__(self, "policy", FeatureClass(self.policy))
        object.__setattr__(self, "levels", tuple(_level_key(v) for v in self.levels))
        object.__setattr__(self, "ancestors", tuple(self.ancestors))
        object.__setattr__(self, "proportions", tuple(float(p) for p in self.proportions))
        if not 0.0 < self.eps < 0.5:
            raise SchemaError(f"{self.name}: pixel eps must lie in (0, 0.5), got {self.eps}")
        if self.temperature <= 0:
            raise SchemaError(f"{self.name}: temperature must be > 0, got {self.temperature}")
        if self.kind is FeatureKind.BINARY and self.levels and len(self.levels) != 2:
            raise SchemaError(f"{self.name}: a binary feature has exactly 2 levels, got {self.levels}")
        if len(set(self.levels)) != len(self.levels):
            raise SchemaError(f"{self.name}: duplicate levels {self.levels}")
        if self.proportions and len(self.proportions) != len(self.levels):
            raise SchemaError(f"{self.name}: {len(self.proportions)} proportions for {len(self.levels)} levels")

    @property
    def immutable(self) -> bool:
        return self.policy is FeatureClass.IMMUTABLE

    @property
    def width(self) -> int:
        return len(self.levels) if self.kind is FeatureKind.CATEGORICAL else 1

    @property
    def level_means(self) -> np.ndarray:
        """logit of each level's proportion (binary: of the second level)."""
        p = np.asarray(self.proportions, dtype=float)
        if self.kind is FeatureKind.BINARY:
            p = p[1:]
        return logit(p)


def _level_key(v: Any) -> str:
    if isinstance(v, (float, np.floating)) and float(v).is_integer():
        v = int(v)
    if isinstance(v, (bool, np.bool_)):
        v = int(v)
    return str(v)


@dataclass(frozen=True)
class FeatureSchema:
    features: Tuple[FeatureSpec, ...]
    label: Optional[str] = None
    scm: Optional[Mapping] = field(default=None, compare=False, hash=False)

    def __post_init__(self):
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            raise SchemaError(f"feature names must be unique, got {names}")
        if self.label is not None and self.label in names:
            raise SchemaError(f"label column {self.label!r} is also listed as a feature")
        known = set(names)
        for f in self.features:
            for a in f.ancestors:
                if a not in known:
                    raise SchemaError(f"{f.name}: unknown ancestor {a!r}")
        object.__setattr__(self, "features", tuple(self.features))

    @property
    def names(self) -> List[str]:
        return [f.name for f in self.features]

    @property
    def latent_dim(self) -> int:
        return sum(f.width for f in self.features)

    @property
    def slices(self) -> Dict[str, slice]:
        out, start = {}, 0
        for f in self.features:
            out[f.name] = slice(start, start + f.width)
            start += f.width
        return out

    @property
    def latent_names(self) -> List[str]:
        out = []
        for f in self.features:
            if f.kind is FeatureKind.CATEGORICAL:
                out.extend(f"{f.name}={lvl}" for lvl in f.levels)
            else:
                out.append(f.name)
        return out

    def latent_policy(self) -> FeaturePolicy:
        """Per-feature policy expanded to latent columns."""
        sl = self.slices
        classes: List[FeatureClass] = []
        ancestors: Dict[int, Tuple[int, ...]] = {}
        for f in self.features:
            cols = range(sl[f.name].start, sl[f.name].stop)
            classes.extend([f.policy] * len(cols))
            if f.policy is FeatureClass.NONACTIONABLE:
                parents = tuple(i for a in f.ancestors for i in range(sl[a].start, sl[a].stop))
                for c in cols:
                    ancestors[c] = parents
        try:
            return FeaturePolicy(tuple(classes), ancestors)
        except ValueError as e:
            raise SchemaError(f"invalid feature policy: {e}") from None

    @property
    def immutable_mask(self) -> np.ndarray:
        return self.latent_policy().immutable_mask

    def to_json(self) -> dict:
        feats = []
        for f in self.features:
            rec = {"name": f.name, "kind": f.kind.value, "policy": f.policy.value,
                   "immutable": f.immutable}
            if f.kind is FeatureKind.PIXEL_LOGIT:
                rec["eps"] = f.eps
            if f.kind in DISCRETE:
                rec["levels"] = list(f.levels)
                rec["proportions"] = list(f.proportions)
            if f.kind is FeatureKind.CATEGORICAL:
                rec["temperature"] = f.temperature
            if f.ancestors:
                rec["ancestors"] = list(f.ancestors)
            feats.append(rec)
        out = {"label": self.label, "features": feats}
        if self.scm:
            out["scm"] = self.scm
        return out

    @classmethod
    def from_json(cls, obj: Mapping) -> "FeatureSchema":
        try:
            feats = tuple(spec_from_hint(h["name"], h) for h in obj["features"])
        except (KeyError, TypeError) as e:
            raise SchemaError(f"malformed schema: {e}") from None
        return cls(feats, obj.get("label"), obj.get("scm"))


def spec_from_hint(name: str, hint: Mapping) -> FeatureSpec:
    """Build a FeatureSpec from a schema-file record.

    `"immutable": true` and `"policy": "immutable"` mean the same thing;
    contradicting them is an error.
    """
    policy = hint.get("policy")
    imm = hint.get("immutable")
    if policy is None:
        policy = FeatureClass.IMMUTABLE if imm else FeatureClass.MUTABLE
    try:
        policy = FeatureClass(policy)
        kind = FeatureKind(hint.get("kind", "continuous"))
    except ValueError as e:
        raise SchemaError(f"{name}: {e}") from None
    if imm is not None and bool(imm) != (policy is FeatureClass.IMMUTABLE):
        raise SchemaError(f"{name}: immutable={imm} contradicts policy {policy.value!r}")
    return FeatureSpec(
        name=name,
        kind=kind,
        policy=policy,
        eps=float(hint.get("eps", PIXEL_EPS)),
        levels=tuple(hint.get("levels", ())),
        temperature=float(hint.get("temperature", TEMPERATURE)),
        ancestors=tuple(hint.get("ancestors", ())),
        proportions=tuple(hint.get("proportions", ())),
    )


def _proportions(col: pl.Series, levels: Tuple[str, ...], name: str) -> Tuple[float, ...]:
    keys = [_level_key(v) for v in col.to_list()]
    unknown = sorted(set(keys) - set(levels))
    if unknown:
        raise SchemaError(f"{name}: values {unknown} are not among the declared levels {list(levels)}")
    counts = np.array([keys.count(lvl) for lvl in levels], dtype=float)
    if np.any(counts == 0):
        _logger.info("%s: add-one smoothing for unseen levels", name)
        counts = counts + 1.0
    return tuple(counts / counts.sum())


def fit_schema(table: pl.DataFrame, hints: Mapping[str, Mapping], label: Optional[str] = None,
               scm: Optional[Mapping] = None) -> FeatureSchema:
    """Record level proportions and validate domains against the table.

    `hints` maps feature name -> schema record (kind, policy, levels, ...);
    features are taken in the order of `hints`.
    """
    if table.height == 0:
        raise SchemaError("cannot fit a schema on an empty table")
    specs = []
    for name, hint in hints.items():
        if name not in table.columns:
            raise SchemaError(f"feature {name!r} is not a column of the dataset ({table.columns})")
        spec = spec_from_hint(name, hint)
        col = table.get_column(name)
        if col.null_count():
            raise SchemaError(f"{name}: {col.null_count()} missing values")
        if spec.kind in DISCRETE:
            levels = spec.levels
            if not levels:
                seen = sorted({_level_key(v) for v in col.to_list()})
                levels = ("0", "1") if spec.kind is FeatureKind.BINARY and len(seen) <= 2 and set(seen) <= {"0", "1"} else tuple(seen)
            spec = replace(spec, levels=levels, proportions=_proportions(col, levels, name))
        else:
            values = col.cast(pl.Float64).to_numpy()
            _check_domain(spec, values, 0)
        specs.append(spec)
    return FeatureSchema(tuple(specs), label, scm)


def _check_domain(spec: FeatureSpec, values: np.ndarray, row_offset: int) -> None:
    if not np.all(np.isfinite(values)):
        row = int(np.flatnonzero(~np.isfinite(values))[0]) + row_offset
        raise SchemaError(f"{spec.name}: non-finite value in row {row}")
    if spec.kind is FeatureKind.LOG_CONTINUOUS and np.any(values <= 0):
        row = int(np.flatnonzero(values <= 0)[0]) + row_offset
        raise SchemaError(f"{spec.name}: log feature needs positive values, row {row} has {values[row - row_offset]}")
    if spec.kind is FeatureKind.PIXEL_LOGIT and np.any((values < 0) | (values > 1)):
        row = int(np.flatnonzero((values < 0) | (values > 1))[0]) + row_offset
        raise SchemaError(f"{spec.name}: pixel value outside [0, 1] in row {row}: {values[row - row_offset]}")


def _truncated_means(m: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """(E[Z | Z > 0], E[Z | Z < 0]) for Z ~ N(m, 1)."""
    on = m + np.exp(norm.logpdf(m) - log_ndtr(m))
    off = m - np.exp(norm.logpdf(m) - log_ndtr(-m))
    return on, off


def _encode_feature(spec: FeatureSpec, values: np.ndarray) -> np.ndarray:
    """Column(s) for one feature; `values` is a 1-D array of raw values."""
    if spec.kind is FeatureKind.CONTINUOUS:
        return values.astype(float)[:, None]
    if spec.kind is FeatureKind.LOG_CONTINUOUS:
        return np.log(values.astype(float))[:, None]
    if spec.kind is FeatureKind.PIXEL_LOGIT:
        u = np.clip(np.abs(values.astype(float) - spec.eps), LOGIT_CLIP, 1.0 - LOGIT_CLIP)
        return np.log(u / (1.0 - u))[:, None]
    keys = np.array([_level_key(v) for v in values], dtype=object)
    on, off = _truncated_means(spec.level_means)
    if spec.kind is FeatureKind.BINARY:
        present = keys == spec.levels[1]
        unknown = ~(present | (keys == spec.levels[0]))
        if unknown.any():
            raise SchemaError(f"{spec.name}: value {keys[unknown][0]!r} is not a declared level")
        return np.where(present, on[0], off[0])[:, None]
    pos = {lvl: k for k, lvl in enumerate(spec.levels)}
    out = np.tile(off, (keys.shape[0], 1))
    for r, key in enumerate(keys):
        if key not in pos:
            raise SchemaError(f"{spec.name}: value {key!r} in row {r} is not a declared level")
        out[r, pos[key]] = on[pos[key]]
    return out


def encode_table(schema: FeatureSchema, table: pl.DataFrame) -> np.ndarray:
    """Latent matrix (rows × latent_dim) for every row of the table."""
    missing = [n for n in schema.names if n not in table.columns]
    if missing:
        raise SchemaError(f"dataset is missing schema columns {missing}")
    blocks = []
    for spec in schema.features:
        col = table.get_column(spec.name)
        if spec.kind in DISCRETE:
            values = np.array(col.to_list(), dtype=object)
        else:
            values = col.cast(pl.Float64).to_numpy()
            _check_domain(spec, values, 0)
        blocks.append(_encode_feature(spec, values))
    return np.hstack(blocks) if blocks else np.zeros((table.height, 0))


def encode_row(schema: FeatureSchema, row: Sequence) -> np.ndarray:
    """One raw row (values in schema feature order) -> latent vector."""
    if len(row) != len(schema.features):
        raise SchemaError(f"row has {len(row)} values, schema has {len(schema.features)} features")
    parts = []
    for spec, v in zip(schema.features, row):
        if spec.kind in DISCRETE:
            values = np.array([v], dtype=object)
        else:
            values = np.array([float(v)])
            _check_domain(spec, values, 0)
        parts.append(_encode_feature(spec, values)[0])
    return np.concatenate(parts)


def decode_row(schema: FeatureSchema, z) -> List[Any]:
    """Latent vector -> raw values (hard argmax / threshold for discrete kinds)."""
    z = np.asarray(z, dtype=float).reshape(-1)
    if z.shape[0] != schema.latent_dim:
        raise SchemaError(f"latent vector has {z.shape[0]} entries, schema needs {schema.latent_dim}")
    out: List[Any] = []
    for spec, sl in zip(schema.features, schema.slices.values()):
        block = z[sl]
        if spec.kind is FeatureKind.CONTINUOUS:
            out.append(float(block[0]))
        elif spec.kind is FeatureKind.LOG_CONTINUOUS:
            out.append(float(np.exp(block[0])))
        elif spec.kind is FeatureKind.PIXEL_LOGIT:
            out.append(float(np.clip(spec.eps + expit(block[0]), 0.0, 1.0)))
        elif spec.kind is FeatureKind.BINARY:
            out.append(spec.levels[1] if block[0] > 0 else spec.levels[0])
        else:
            out.append(spec.levels[int(np.argmax(block))])
    return out


def decode_soft(schema: FeatureSchema, z) -> Dict[str, np.ndarray]:
    """Per discrete feature, the level weights at the feature's temperature."""
    z = np.asarray(z, dtype=float).reshape(-1)
    out = {}
    for spec, sl in zip(schema.features, schema.slices.values()):
        if spec.kind is FeatureKind.CATEGORICAL:
            out[spec.name] = softmax(z[sl] / spec.temperature)
        elif spec.kind is FeatureKind.BINARY:
            p = expit(z[sl][0] / spec.temperature)
            out[spec.name] = np.array([1.0 - p, p])
    return out


def schema_prior(schema: FeatureSchema, latent: np.ndarray, jitter: float) -> DataPrior:
    """Independent latent prior: unit-variance logit means for discrete kinds,
    fitted moments for the rest."""
    mean = np.zeros(schema.latent_dim)
    var = np.ones(schema.latent_dim)
    for spec, sl in zip(schema.features, schema.slices.values()):
        if spec.kind in DISCRETE:
            mean[sl] = spec.level_means
        else:
            col = latent[:, sl.start]
            mean[sl] = col.mean()
            var[sl] = col.var(ddof=1) if latent.shape[0] > 1 else 0.0
    return DataPrior(mean, np.diag(var + jitter), PriorSource.FITTED)


def save_schema(schema: FeatureSchema, path: str) -> None:
    save_json(path, schema.to_json())


def load_schema(path: str) -> FeatureSchema:
    return FeatureSchema.from_json(load_json(path, "schema"))
