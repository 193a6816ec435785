"""
Mutable-but-non-actionable features.

A feature like a credit score can change, but only as a consequence of the
features it depends on. Given a posterior over x′ we:

  1. marginalize the nonactionable block e′ away, keeping p(c′ | x, y′);
  2. fit e = A·c + b + z, z ~ N(0, Λz⁻¹), by least squares on TRAINING rows;
  3. recompose p(x′) = p(e′ | c′)·p(c′ | x, y′) and re-interleave coordinates.

Immutable features are handled by the joint prior (perfect correlation) and
sit in the c block untouched.
"""

import enum
import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence, Tuple

import numpy as np
import scipy.linalg as sla

from cf_utils.errors import InsufficientDataError, RankDeficientError, SchemaError
from cf_utils.gaussian import DEFAULT_JITTER, Gaussian, marginalize

_logger = logging.getLogger(__name__)

RANK_RTOL = 1e-10


class FeatureClass(str, enum.Enum):
    MUTABLE = "mutable"
    IMMUTABLE = "immutable"
    NONACTIONABLE = "nonactionable"


@dataclass(frozen=True)
class FeaturePolicy:
    classes: Tuple[FeatureClass, ...]
    ancestors: Mapping[int, Tuple[int, ...]] = field(default_factory=dict)

    def __post_init__(self):
        classes = tuple(FeatureClass(c) for c in self.classes)
        anc = {int(k): tuple(int(i) for i in v) for k, v in dict(self.ancestors).items()}
        n = len(classes)
        for i, cls in enumerate(classes):
            if cls is FeatureClass.NONACTIONABLE and not anc.get(i):
                raise SchemaError(f"nonactionable feature {i} needs at least one ancestor")
        for i, parents in anc.items():
            if classes[i] is not FeatureClass.NONACTIONABLE:
                raise SchemaError(f"feature {i} lists ancestors but is {classes[i].value}")
            for p in parents:
                if not 0 <= p < n:
                    raise SchemaError(f"ancestor {p} of feature {i} is out of range")
                if classes[p] is FeatureClass.NONACTIONABLE:
                    raise SchemaError(f"ancestor {p} of feature {i} is itself nonactionable")
        object.__setattr__(self, "classes", classes)
        object.__setattr__(self, "ancestors", anc)

    @classmethod
    def all_mutable(cls, n: int) -> "FeaturePolicy":
        return cls(tuple([FeatureClass.MUTABLE] * n))

    @property
    def dim(self) -> int:
        return len(self.classes)

    @property
    def immutable_mask(self) -> np.ndarray:
        return np.array([c is FeatureClass.IMMUTABLE for c in self.classes], dtype=bool)

    @property
    def actionable(self) -> Tuple[int, ...]:
        return tuple(i for i, c in enumerate(self.classes) if c is not FeatureClass.NONACTIONABLE)

    @property
    def nonactionable(self) -> Tuple[int, ...]:
        return tuple(i for i, c in enumerate(self.classes) if c is FeatureClass.NONACTIONABLE)


@dataclass(frozen=True)
class PolicyMaps:
    c_idx: Tuple[int, ...]
    e_idx: Tuple[int, ...]
    dim: int


@dataclass(frozen=True, eq=False)
class LinearConditional:
    """e = A·c + b + z with z ~ N(0, cov)."""
    a: np.ndarray
    b: np.ndarray
    cov: np.ndarray


def split_posterior(post: Gaussian, policy: FeaturePolicy) -> Tuple[Gaussian, PolicyMaps]:
    if policy.dim != post.dim:
        raise SchemaError(f"policy covers {policy.dim} features, posterior has {post.dim}")
    maps = PolicyMaps(policy.actionable, policy.nonactionable, post.dim)
    if not maps.e_idx:
        return post, maps
    return marginalize(post, maps.c_idx), maps


def _design(rows: np.ndarray, cols: Sequence[int]) -> np.ndarray:
    return np.hstack([rows[:, list(cols)], np.ones((rows.shape[0], 1))])


def _ols(design: np.ndarray, target: np.ndarray, labels: Sequence) -> np.ndarray:
    _, r, piv = sla.qr(design, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    rank = int(np.count_nonzero(diag > RANK_RTOL * max(diag.max(initial=0.0), 1.0)))
    if rank < design.shape[1]:
        bad = [labels[j] for j in sorted(piv[rank:])]
        raise RankDeficientError(f"regression design is rank deficient in columns {bad}", bad)
    coef, *_ = np.linalg.lstsq(design, target, rcond=None)
    return coef


def fit_conditional(rows, c_idx: Sequence[int], e_idx: Sequence[int],
                    jitter: float = DEFAULT_JITTER) -> LinearConditional:
    """OLS of every e column on all c columns plus an intercept."""
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    c_idx, e_idx = list(c_idx), list(e_idx)
    if rows.shape[0] < len(c_idx) + 2:
        raise InsufficientDataError(f"need at least {len(c_idx) + 2} rows, got {rows.shape[0]}",
                                    len(c_idx) + 2, rows.shape[0])
    design = _design(rows, c_idx)
    coef = _ols(design, rows[:, e_idx], [*c_idx, "intercept"])
    a = coef[:-1].T
    b = coef[-1]
    resid = rows[:, e_idx] - design @ coef
    cov = resid.T @ resid / (rows.shape[0] - len(c_idx) - 1) + jitter * np.eye(len(e_idx))
    return LinearConditional(np.atleast_2d(a), np.atleast_1d(b), np.atleast_2d(cov))


def fit_policy_conditional(rows, policy: FeaturePolicy,
                           jitter: float = DEFAULT_JITTER) -> LinearConditional:
    """Each nonactionable feature regressed on its own ancestors only; the
    coefficients are laid out over the full actionable block."""
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    c_idx, e_idx = policy.actionable, policy.nonactionable
    pos = {c: j for j, c in enumerate(c_idx)}
    a = np.zeros((len(e_idx), len(c_idx)))
    b = np.zeros(len(e_idx))
    resid = np.zeros((rows.shape[0], len(e_idx)))
    dof = rows.shape[0] - 1
    for k, e in enumerate(e_idx):
        parents = list(policy.ancestors[e])
        if rows.shape[0] < len(parents) + 2:
            raise InsufficientDataError(f"need at least {len(parents) + 2} rows to fit feature {e}",
                                        len(parents) + 2, rows.shape[0])
        design = _design(rows, parents)
        coef = _ols(design, rows[:, e], [*parents, "intercept"])
        for p, w in zip(parents, coef[:-1]):
            a[k, pos[p]] = w
        b[k] = coef[-1]
        resid[:, k] = rows[:, e] - design @ coef
        dof = min(dof, rows.shape[0] - len(parents) - 1)
    cov = resid.T @ resid / dof + jitter * np.eye(len(e_idx))
    return LinearConditional(a, b, cov)


def recompose(marginal: Gaussian, cond: LinearConditional, maps: PolicyMaps) -> Gaussian:
    """Joint over (c′, e′) from p(c′) and e′ | c′, back in original order."""
    if not maps.e_idx:
        return marginal
    mc, sc = marginal.mean, marginal.cov
    a = cond.a
    me = a @ mc + cond.b
    cross = a @ sc
    cov_block = np.block([[sc, cross.T], [cross, cond.cov + cross @ a.T]])
    order = np.array([*maps.c_idx, *maps.e_idx])
    inv = np.empty_like(order)
    inv[order] = np.arange(order.size)
    mean = np.concatenate([mc, me])[inv]
    cov = cov_block[np.ix_(inv, inv)]
    return Gaussian(mean, 0.5 * (cov + cov.T))


def apply_policy(post: Gaussian, policy: FeaturePolicy, rows,
                 jitter: float = DEFAULT_JITTER) -> Gaussian:
    """split → fit on training rows → recompose. No-op without nonactionable features."""
    marginal, maps = split_posterior(post, policy)
    if not maps.e_idx:
        return post
    cond = fit_policy_conditional(rows, policy, jitter)
    _logger.debug("recomposing %d nonactionable features", len(maps.e_idx))
    return recompose(marginal, cond, maps)
