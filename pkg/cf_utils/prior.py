"""
Data prior, joint counterfactual prior and linear-SCM priors.

The joint prior couples a reference x and its counterfactual x′:

    (x, x′) ~ N([μ, μ], [[Σ, W], [Wᵀ, Σ]])

Both marginals are the data distribution N(μ, Σ); the cross-covariance W sets
how close x′ stays to x. Without an immutability mask W = α·Σ. With a mask σ
(σ_i = 0 for immutable features) W = σσᵀ ⊙ (α − 1)·Σ + Σ, which makes every
immutable x′_i perfectly correlated with x_i.

Linear SCMs are turned into a DataPrior by walking the DAG in topological
order and appending each node's mean and covariance blocks.
"""

import enum
import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import networkx as nx
import numpy as np

from cf_utils.errors import ConfigError, InsufficientDataError, JointPriorError, NotPSDError, ScmError, SchemaError
from cf_utils.gaussian import DEFAULT_JITTER, Gaussian, condition, index_set, rng_stream
from cf_utils.utils import decode_array, encode_array

_logger = logging.getLogger(__name__)


class PriorSource(str, enum.Enum):
    FITTED = "fitted-from-data"
    USER = "user-supplied"
    SCM = "scm-derived"


@dataclass(frozen=True, eq=False)
class DataPrior:
    mu: np.ndarray
    sigma: np.ndarray
    source: PriorSource = PriorSource.USER
    _gaussian: Gaussian = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mu, dtype=float))
        g = Gaussian(mu, self.sigma)
        object.__setattr__(self, "mu", g.mean)
        object.__setattr__(self, "sigma", g.cov)
        object.__setattr__(self, "source", PriorSource(self.source))
        object.__setattr__(self, "_gaussian", g)

    @property
    def dim(self) -> int:
        return self.mu.shape[0]

    @property
    def gaussian(self) -> Gaussian:
        return self._gaussian

    @cached_property
    def precision(self) -> np.ndarray:
        """Λ: the (pseudo-)inverse of the data covariance."""
        return self._gaussian.precision()

    def to_json(self) -> dict:
        return {"mu": encode_array(self.mu), "sigma": encode_array(self.sigma),
                "source": self.source.value}

    @classmethod
    def from_json(cls, obj: dict) -> "DataPrior":
        return cls(decode_array(obj["mu"]), decode_array(obj["sigma"]), PriorSource(obj["source"]))


def fit_data_prior(rows, jitter: float = DEFAULT_JITTER) -> DataPrior:
    """Sample mean and (m − 1)-denominator covariance plus jitter·I."""
    x = np.asarray(rows, dtype=float)
    if x.ndim != 2:
        raise SchemaError(f"rows must be an m×n matrix, got shape {x.shape}")
    if x.shape[0] < 2:
        raise InsufficientDataError(f"need at least 2 rows to fit a covariance, got {x.shape[0]}", 2, x.shape[0])
    bad = np.flatnonzero(~np.all(np.isfinite(x), axis=0))
    if bad.size:
        raise SchemaError(f"columns {bad.tolist()} contain non-finite values")
    if jitter < 0:
        raise ValueError(f"jitter must be >= 0, got {jitter}")
    mu = x.mean(axis=0)
    sigma = np.atleast_2d(np.cov(x, rowvar=False, ddof=1)) + jitter * np.eye(x.shape[1])
    _logger.info("fitted data prior on %d rows × %d features", x.shape[0], x.shape[1])
    return DataPrior(mu, sigma, PriorSource.FITTED)


@dataclass(frozen=True, eq=False)
class JointCfPrior:
    data: DataPrior
    alpha: float
    w: np.ndarray
    immutable_mask: np.ndarray
    gaussian: Gaussian = field(repr=False, compare=False)

    @property
    def dim(self) -> int:
        return self.data.dim

    @property
    def x_block(self) -> Tuple[int, ...]:
        return tuple(range(self.dim))

    @property
    def cf_block(self) -> Tuple[int, ...]:
        return tuple(range(self.dim, 2 * self.dim))

    @property
    def conditional_gain(self) -> np.ndarray:
        """B = WΛ, the slope of E[x | x′] in x′."""
        return self.w @ self.data.precision

    @property
    def conditional_cov(self) -> np.ndarray:
        """Σ − WΛWᵀ, the covariance of x | x′."""
        return self.data.sigma - self.w @ self.data.precision @ self.w.T


def _mask_vector(mask, n: int) -> np.ndarray:
    if mask is None:
        return np.zeros(n, dtype=bool)
    m = np.asarray(mask, dtype=bool).reshape(-1)
    if m.shape[0] != n:
        raise SchemaError(f"mask length {m.shape[0]} does not match dimension {n}")
    return m


def build_joint(prior: DataPrior, alpha: float, mask=None) -> JointCfPrior:
    """Assemble the 2n-dimensional (x, x′) prior; mask True = immutable."""
    alpha = float(alpha)
    if not 0.0 <= alpha < 1.0:
        raise ConfigError(f"alpha must lie in [0, 1), got {alpha} (use 0.995 for near-copies)")
    n = prior.dim
    imm = _mask_vector(mask, n)
    sigma = prior.sigma
    if not imm.any():
        w = alpha * sigma
    else:
        s = (~imm).astype(float)
        # entries where both features are mutable scale by alpha, all others keep Σ
        w = np.where(np.outer(s, s) == 1.0, alpha * sigma, sigma)
    cov = np.block([[sigma, w], [w.T, sigma]])
    mean = np.concatenate([prior.mu, prior.mu])
    try:
        g = Gaussian(mean, cov)
    except NotPSDError as e:
        raise JointPriorError(
            f"joint prior with alpha={alpha} and {int(imm.sum())} immutable features is not PSD "
            f"(min eigenvalue {e.min_eigenvalue:.3e}); raise alpha or whiten the features first",
            e.min_eigenvalue,
        ) from None
    imm.setflags(write=False)
    w.setflags(write=False)
    return JointCfPrior(prior, alpha, w, imm, g)


def conditional_reference_given_cf(joint: JointCfPrior, x_prime) -> Gaussian:
    """p(x | x′) = N(μ + WΛ(x′ − μ), Σ − WΛWᵀ)."""
    xp = np.asarray(x_prime, dtype=float)
    mu = joint.data.mu
    return Gaussian(mu + joint.conditional_gain @ (xp - mu), joint.conditional_cov)


def conditional_cf_given_reference(joint: JointCfPrior, x) -> Gaussian:
    """p(x′ | x) by conditioning the assembled joint on the reference block."""
    n = joint.dim
    return condition(joint.gaussian, index_set(range(n), 2 * n), np.asarray(x, dtype=float))


@dataclass(frozen=True)
class ScmNode:
    """E := Σ weight·parent + intercept + N(0, noise_variance).

    A root node has no parents; its (intercept, noise_variance) is its own
    (mean, variance).
    """
    name: str
    parents: Tuple[Tuple[str, float], ...] = ()
    intercept: float = 0.0
    noise_variance: float = 1.0


@dataclass(frozen=True)
class LinearScm:
    nodes: Tuple[ScmNode, ...]
    order: Tuple[int, ...] = field(init=False)

    def __post_init__(self):
        names = [n.name for n in self.nodes]
        if len(set(names)) != len(names):
            raise ScmError(f"duplicate node names in {names}")
        pos = {name: i for i, name in enumerate(names)}
        g = nx.DiGraph()
        g.add_nodes_from(names)
        for node in self.nodes:
            if node.noise_variance < 0:
                raise ScmError(f"node {node.name!r} has negative noise variance {node.noise_variance}")
            for parent, _ in node.parents:
                if parent not in pos:
                    raise ScmError(f"node {node.name!r} lists unknown parent {parent!r}")
                g.add_edge(parent, node.name)
        try:
            order = list(nx.lexicographical_topological_sort(g, key=lambda v: pos[v]))
        except nx.NetworkXUnfeasible:
            cycle = nx.find_cycle(g)
            raise ScmError(f"SCM graph has a cycle: {cycle}") from None
        object.__setattr__(self, "order", tuple(pos[v] for v in order))

    @property
    def names(self) -> List[str]:
        return [n.name for n in self.nodes]

    def _parent_arrays(self, node: ScmNode) -> Tuple[np.ndarray, np.ndarray]:
        pos = {name: i for i, name in enumerate(self.names)}
        idx = np.array([pos[p] for p, _ in node.parents], dtype=int)
        w = np.array([float(wt) for _, wt in node.parents], dtype=float)
        return idx, w


def scm_from_config(cfg: Mapping) -> LinearScm:
    """{"nodes": [{"name", "parents": [[name, weight], ...], "intercept", "noise_variance"}]}"""
    try:
        nodes = tuple(
            ScmNode(
                name=str(n["name"]),
                parents=tuple((str(p), float(w)) for p, w in n.get("parents", [])),
                intercept=float(n.get("intercept", 0.0)),
                noise_variance=float(n.get("noise_variance", 1.0)),
            )
            for n in cfg["nodes"]
        )
    except (KeyError, TypeError, ValueError) as e:
        raise ScmError(f"malformed SCM config: {e}") from None
    return LinearScm(nodes)


def scm_to_gaussian(scm: LinearScm) -> DataPrior:
    """Entailed N(μ̂, Σ̂), reported in the SCM's declared node order."""
    n = len(scm.nodes)
    mean = np.zeros(n)
    cov = np.zeros((n, n))
    done: List[int] = []
    for i in scm.order:
        node = scm.nodes[i]
        idx, w = scm._parent_arrays(node)
        if idx.size:
            mean[i] = w @ mean[idx] + node.intercept
            if done:
                cross = w @ cov[np.ix_(idx, done)]
                cov[i, done] = cross
                cov[done, i] = cross
            cov[i, i] = w @ cov[np.ix_(idx, idx)] @ w + node.noise_variance
        else:
            mean[i] = node.intercept
            cov[i, i] = node.noise_variance
        done.append(i)
    return DataPrior(mean, cov, PriorSource.SCM)


def ancestral_sample(scm: LinearScm, n: int, seed: int, task_id: int = 0) -> np.ndarray:
    """n rows drawn by walking the DAG; columns in declared node order."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    k = len(scm.nodes)
    z = rng_stream(seed, task_id).standard_normal((n, k))
    out = np.zeros((n, k))
    for i in scm.order:
        node = scm.nodes[i]
        idx, w = scm._parent_arrays(node)
        base = out[:, idx] @ w if idx.size else 0.0
        out[:, i] = base + node.intercept + np.sqrt(node.noise_variance) * z[:, i]
    return out


def prior_from_schema_scm(cfg: Optional[Mapping], names: Sequence[str]) -> Optional[DataPrior]:
    """SCM prior reordered to match `names` (the dataset's feature order)."""
    if not cfg:
        return None
    scm = scm_from_config(cfg)
    prior = scm_to_gaussian(scm)
    pos: Dict[str, int] = {name: i for i, name in enumerate(scm.names)}
    missing = [nm for nm in names if nm not in pos]
    if missing or len(names) != len(pos):
        raise ScmError(f"SCM nodes {scm.names} do not match the features {list(names)}")
    perm = np.array([pos[nm] for nm in names])
    return DataPrior(prior.mu[perm], prior.sigma[np.ix_(perm, perm)], PriorSource.SCM)
