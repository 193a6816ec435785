"""
Counterfactual generators behind one request/result interface.

    posterior         sample the PGM2 (linear) or Laplace posterior, then
                      recompose nonactionable features
    wachter / ours /
    regularized       Adam on the matching objective, optionally jointly with
                      a diversity bonus over `count` counterfactuals
    growing_spheres   sample shells of growing radius around the reference
                      until one lands across the decision boundary
    face              walk a mutual-kNN graph over the training rows to the
                      nearest node the classifier assigns to the target

Distances go through `Metric`: euclidean, or mahalanobis with
M = Λ / (1 − α²) centred at the reference. Its `transform` whitens points, so
every metric computation is a euclidean one on transformed coordinates.

All randomness is drawn from rng_stream(req.seed, req.task_id); a request
fully determines its result.
"""

import logging
import threading
import time
from dataclasses import dataclass, field, fields
from typing import Any, Dict, Mapping, Optional, Union

import networkx as nx
import numpy as np
import scipy.linalg as sla
from scipy.spatial.distance import cdist

from cf_utils.actionability import FeaturePolicy, apply_policy
from cf_utils.errors import (
    ConfigError,
    InsufficientDataError,
    NoCounterfactualError,
    SchemaError,
    UnreachableError,
)
from cf_utils.gaussian import cholesky_psd, rng_stream, sample
from cf_utils.models import LinearLikelihood, SplitClassifier, forward, predict
from cf_utils.objective import ObjectiveConfig, adam_minimize, make_loss
from cf_utils.optim import LR, STEPS
from cf_utils.posterior import (
    LaplaceClassPrior,
    LaplaceConfig,
    laplace_class_prior,
    posterior_laplace,
    posterior_pgm2,
)
from cf_utils.prior import DataPrior, build_joint, JointCfPrior

_logger = logging.getLogger(__name__)

METHODS = ("posterior", "wachter", "ours", "regularized", "growing_spheres", "face")
OPTIMIZERS = ("wachter", "ours", "regularized")
METRICS = ("euclidean", "mahalanobis")

VALIDITY = 0.5
GS_R0 = 0.1
GS_GROWTH = 1.3
GS_PER_SHELL = 200
GS_MAX_SHELLS = 50
FACE_K = 20
START_NOISE = 1e-3


@dataclass(frozen=True)
class MethodParams:
    alpha: float = 0.5
    gamma: float = 1.0
    gamma_reg: float = 1.0
    fid_weight: float = 1.0
    lambda_div: float = 0.0
    lr: float = LR
    steps: int = STEPS
    gs_r0: float = GS_R0
    gs_growth: float = GS_GROWTH
    gs_per_shell: int = GS_PER_SHELL
    gs_max_shells: int = GS_MAX_SHELLS
    face_k: int = FACE_K
    metric: str = "euclidean"
    validity: float = VALIDITY

    def __post_init__(self):
        if not 0.0 <= self.alpha < 1.0:
            raise ConfigError(f"alpha must lie in [0, 1), got {self.alpha}")
        if self.metric not in METRICS:
            raise ConfigError(f"metric must be one of {METRICS}, got {self.metric!r}")
        if self.gs_r0 <= 0 or self.gs_growth <= 1.0:
            raise ConfigError("growing spheres needs gs_r0 > 0 and gs_growth > 1")
        if min(self.gs_per_shell, self.gs_max_shells, self.face_k) < 1:
            raise ConfigError("gs_per_shell, gs_max_shells and face_k must be >= 1")
        if not 0.0 <= self.validity <= 1.0:
            raise ConfigError(f"validity threshold must lie in [0, 1], got {self.validity}")
        self.objective("wachter")  # validates the objective weights

    @classmethod
    def from_mapping(cls, params: Optional[Mapping[str, Any]]) -> "MethodParams":
        params = dict(params or {})
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(params) - known)
        if unknown:
            raise ConfigError(f"unknown method parameters {unknown}; known: {sorted(known)}")
        try:
            return cls(**params)
        except (TypeError, ValueError) as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(str(e)) from None

    def objective(self, variant: str) -> ObjectiveConfig:
        return ObjectiveConfig(gamma=self.gamma, alpha=self.alpha, lambda_div=self.lambda_div,
                               variant=variant, gamma_reg=self.gamma_reg, fid_weight=self.fid_weight)


@dataclass(frozen=True, eq=False)
class GenRequest:
    reference: np.ndarray
    target: int
    method: str
    count: int = 1
    seed: int = 0
    params: MethodParams = field(default_factory=MethodParams)
    task_id: int = 0
    y_prime: Optional[np.ndarray] = None  # regression target for linear likelihoods

    def __post_init__(self):
        ref = np.asarray(self.reference, dtype=float).reshape(-1)
        if not np.all(np.isfinite(ref)):
            raise SchemaError("reference must be finite")
        if self.count < 1:
            raise ConfigError(f"count must be >= 1, got {self.count}")
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        object.__setattr__(self, "reference", ref)
        if self.y_prime is not None:
            object.__setattr__(self, "y_prime", np.atleast_1d(np.asarray(self.y_prime, dtype=float)))


@dataclass(frozen=True, eq=False)
class GenResult:
    counterfactuals: np.ndarray  # (count, n)
    target_probs: np.ndarray     # (count,), nan when unscored
    valid: np.ndarray            # (count,) bool
    seconds: float
    method: str
    meta: Dict[str, Any] = field(default_factory=dict)

    @property
    def success_rate(self) -> float:
        return float(np.mean(self.valid)) if self.valid.size else 0.0


class Metric:
    """Quadratic distance d(a, b)² = (a − b)ᵀ M (a − b), centred at `center`."""

    def __init__(self, center, weight=None):
        self.center = np.asarray(center, dtype=float).reshape(-1)
        n = self.center.shape[0]
        self.weight = np.eye(n) if weight is None else np.asarray(weight, dtype=float)
        self.root, _ = cholesky_psd(self.weight)  # M = root·rootᵀ

    @classmethod
    def euclidean(cls, center) -> "Metric":
        return cls(center)

    @classmethod
    def mahalanobis(cls, center, prior: DataPrior, alpha: float) -> "Metric":
        return cls(center, prior.precision / (1.0 - alpha * alpha))

    def transform(self, points) -> np.ndarray:
        return (np.asarray(points, dtype=float) - self.center) @ self.root

    def untransform(self, whitened) -> np.ndarray:
        w = np.atleast_2d(np.asarray(whitened, dtype=float))
        return self.center + sla.solve_triangular(self.root, w.T, lower=True, trans="T").T

    def distance(self, points, other=None) -> np.ndarray:
        t = self.transform(points)
        if other is not None:
            t = t - self.transform(other)
        return np.sqrt(np.sum(np.atleast_2d(t) ** 2, axis=1))

    def restrict(self, keep: np.ndarray) -> "Metric":
        keep = np.asarray(keep, dtype=bool)
        return Metric(self.center[keep], self.weight[np.ix_(keep, keep)])


def make_metric(name: str, center, prior: Optional[DataPrior] = None, alpha: float = 0.0) -> Metric:
    if name == "euclidean":
        return Metric.euclidean(center)
    if name == "mahalanobis":
        if prior is None:
            raise ConfigError("the mahalanobis metric needs a data prior")
        return Metric.mahalanobis(center, prior, alpha)
    raise ConfigError(f"metric must be one of {METRICS}, got {name!r}")


def _score(clf: Optional[SplitClassifier], points: np.ndarray, target: int, threshold: float):
    if clf is None:
        return np.full(points.shape[0], np.nan), np.ones(points.shape[0], dtype=bool)
    probs = forward(clf, points)[:, target]
    return probs, probs >= threshold


def _mask(mask, n: int) -> np.ndarray:
    return np.zeros(n, dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(-1)


def gen_posterior_sample(req: GenRequest, joint: JointCfPrior,
                         model: Union[LinearLikelihood, LaplaceClassPrior], *,
                         clf: Optional[SplitClassifier] = None,
                         policy: Optional[FeaturePolicy] = None,
                         rows=None) -> GenResult:
    """Draw req.count samples from the posterior of x′ given the reference."""
    t0 = time.perf_counter()
    x = req.reference
    if isinstance(model, LinearLikelihood):
        if req.y_prime is None:
            raise ConfigError("a linear likelihood needs req.y_prime")
        post = posterior_pgm2(model, joint, x, req.y_prime)
    elif isinstance(model, LaplaceClassPrior):
        post = posterior_laplace(model, joint, x)
        clf = clf if clf is not None else model.classifier
    else:
        raise TypeError(f"cannot build a posterior from {type(model).__name__}")
    if policy is not None and policy.nonactionable:
        if rows is None:
            raise ConfigError("nonactionable features need the training rows")
        post = apply_policy(post, policy, rows)
    pts = sample(post, req.count, req.seed, req.task_id)
    probs, valid = _score(clf, pts, req.target, req.params.validity)
    return GenResult(pts, probs, valid, time.perf_counter() - t0, "posterior",
                     {"posterior_mean": post.mean, "scored": clf is not None})


def _diversity_term(z: np.ndarray, metric: Metric):
    """Mean pairwise metric distance of the rows of z and its gradient."""
    t = z @ metric.root
    k = z.shape[0]
    pairs = k * (k - 1) / 2.0
    value = 0.0
    grad_t = np.zeros_like(t)
    for i in range(k):
        for j in range(i + 1, k):
            diff = t[i] - t[j]
            d = float(np.sqrt(diff @ diff))
            value += d
            if d > 0:
                grad_t[i] += diff / d
                grad_t[j] -= diff / d
    return value / pairs, (grad_t / pairs) @ metric.root.T


def gen_optimize(req: GenRequest, clf: Union[SplitClassifier, LinearLikelihood],
                 prior: Optional[DataPrior], *, mask=None) -> GenResult:
    """Adam on the wachter / ours / regularized objective from the reference."""
    if req.method not in OPTIMIZERS:
        raise ConfigError(f"gen_optimize handles {OPTIMIZERS}, got {req.method!r}")
    t0 = time.perf_counter()
    p = req.params
    cfg = p.objective(req.method)
    x = req.reference
    frozen = _mask(mask, x.shape[0])
    is_clf = isinstance(clf, SplitClassifier)
    target = req.target if is_clf else req.y_prime
    if target is None:
        raise ConfigError("a linear likelihood needs req.y_prime")
    loss_one = make_loss(cfg, x, target, clf, prior)

    if req.count == 1:
        sol, trace = adam_minimize(loss_one, x, steps=p.steps, lr=p.lr, mask=frozen)
        pts = sol[None, :]
    else:
        starts = x + START_NOISE * rng_stream(req.seed, req.task_id).standard_normal((req.count, x.shape[0]))
        starts[:, frozen] = x[frozen]
        if cfg.lambda_div > 0:
            metric = (Metric.mahalanobis(x, prior, cfg.alpha)
                      if req.method == "ours" and prior is not None else Metric.euclidean(x))

            def joint_loss(z):
                value, grad = 0.0, np.zeros_like(z)
                for i in range(z.shape[0]):
                    v, g = loss_one(z[i])
                    value += v
                    grad[i] = g
                div, div_grad = _diversity_term(z, metric)
                return value - cfg.lambda_div * div, grad - cfg.lambda_div * div_grad

            pts, trace = adam_minimize(joint_loss, starts, steps=p.steps, lr=p.lr, mask=frozen)
        else:
            sols = [adam_minimize(loss_one, s, steps=p.steps, lr=p.lr, mask=frozen) for s in starts]
            pts = np.vstack([s for s, _ in sols])
            trace = sols[0][1]
    probs, valid = _score(clf if is_clf else None, pts, req.target, p.validity)
    return GenResult(pts, probs, valid, time.perf_counter() - t0, req.method,
                     {"final_loss": trace[-1], "steps": len(trace) - 1})


def gen_growing_spheres(req: GenRequest, clf: SplitClassifier, metric: Metric, *,
                        mask=None) -> GenResult:
    """Volume-uniform draws in shells [r₀gᵏ⁻¹, r₀gᵏ] of the mutable subspace,
    stopping at the first shell that yields req.count crossings."""
    t0 = time.perf_counter()
    p = req.params
    x = req.reference
    n = x.shape[0]
    prob0 = float(forward(clf, x)[req.target])
    if prob0 >= p.validity:
        pts = np.tile(x, (req.count, 1))
        return GenResult(pts, np.full(req.count, prob0), np.ones(req.count, dtype=bool),
                         time.perf_counter() - t0, "growing_spheres", {"radius": 0.0, "shells": 0})
    free = ~_mask(mask, n)
    k = int(free.sum())
    if k == 0:
        raise NoCounterfactualError("every feature is immutable; nothing to search", 0.0)
    sub = metric.restrict(free)
    rng = rng_stream(req.seed, req.task_id)
    found, found_d = [], []
    hi = 0.0
    for shell in range(p.gs_max_shells):
        lo = 0.0 if shell == 0 else p.gs_r0 * p.gs_growth ** (shell - 1)
        hi = p.gs_r0 * p.gs_growth ** shell
        u = rng.standard_normal((p.gs_per_shell, k))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        r = (lo ** k + (hi ** k - lo ** k) * rng.uniform(size=(p.gs_per_shell, 1))) ** (1.0 / k)
        cand = np.tile(x, (p.gs_per_shell, 1))
        cand[:, free] = sub.untransform(r * u)
        probs = forward(clf, cand)[:, req.target]
        hit = probs >= p.validity
        if hit.any():
            found.append(cand[hit])
            found_d.append(sub.distance(cand[hit][:, free]))
        if sum(len(f) for f in found) >= req.count:
            pts = np.vstack(found)
            order = np.argsort(np.concatenate(found_d), kind="stable")[: req.count]
            pts = pts[order]
            probs, valid = _score(clf, pts, req.target, p.validity)
            return GenResult(pts, probs, valid, time.perf_counter() - t0, "growing_spheres",
                             {"radius": hi, "shells": shell + 1})
    raise NoCounterfactualError(
        f"no counterfactual within {p.gs_max_shells} shells (last radius {hi:.4g})", hi
    )


def _mutual_knn_graph(whitened: np.ndarray, k: int) -> nx.Graph:
    dist = cdist(whitened, whitened)
    n = dist.shape[0]
    nbrs = []
    for i in range(n):
        order = [j for j in np.argsort(dist[i], kind="stable") if j != i]
        nbrs.append(set(order[:k]))
    g = nx.Graph()
    g.add_nodes_from(range(n))
    for i in range(n):
        for j in nbrs[i]:
            if j > i and i in nbrs[j]:
                g.add_edge(i, int(j), weight=float(dist[i, j]))
    return g


def gen_face(req: GenRequest, clf: SplitClassifier, rows, metric: Metric, k: int = FACE_K, *,
             preds=None, mask=None) -> GenResult:
    """Shortest-path walk over the mutual-kNN graph to target-class nodes.

    Only training rows that match the reference on immutable features count as
    destinations. Returned points are always training rows.
    """
    t0 = time.perf_counter()
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    if rows.shape[0] < k + 1:
        raise InsufficientDataError(
            f"FACE with k={k} needs at least {k + 1} training rows, got {rows.shape[0]}", k + 1, rows.shape[0]
        )
    x = req.reference
    labels = predict(clf, rows) if preds is None else np.asarray(preds)
    frozen = _mask(mask, x.shape[0])
    whitened = metric.transform(rows)
    start = int(np.argmin(metric.distance(rows)))
    graph = _mutual_knn_graph(whitened, k)
    lengths = nx.single_source_dijkstra_path_length(graph, start, weight="weight")
    ok = np.all(np.abs(rows[:, frozen] - x[frozen]) <= 1e-9, axis=1)
    dest = sorted((d, i) for i, d in lengths.items() if labels[i] == req.target and ok[i])
    if not dest:
        raise UnreachableError(
            f"no training row predicted as class {req.target} is reachable from node {start}"
        )
    chosen = [i for _, i in dest[: req.count]]
    pts = rows[chosen]
    probs, valid = _score(clf, pts, req.target, req.params.validity)
    return GenResult(pts, probs, valid, time.perf_counter() - t0, "face",
                     {"nodes": chosen, "path_lengths": [d for d, _ in dest[: req.count]],
                      "start": start})


@dataclass(eq=False)
class GenContext:
    """Everything a request may need, shared by all requests of a run."""
    clf: SplitClassifier
    prior: DataPrior
    rows: np.ndarray
    preds: np.ndarray
    policy: FeaturePolicy
    laplace: LaplaceConfig = field(default_factory=LaplaceConfig)
    likelihood: Optional[LinearLikelihood] = None
    _class_priors: Dict[int, LaplaceClassPrior] = field(default_factory=dict, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def class_prior(self, target: int) -> LaplaceClassPrior:
        with self._lock:
            if target not in self._class_priors:
                self._class_priors[target] = laplace_class_prior(
                    self.clf, self.rows, self.prior, target, self.laplace
                )
            return self._class_priors[target]

    def joint(self, alpha: float) -> JointCfPrior:
        return build_joint(self.prior, alpha, self.policy.immutable_mask)


def generate(req: GenRequest, ctx: GenContext) -> GenResult:
    """Route a request to its generator."""
    p = req.params
    mask = ctx.policy.immutable_mask
    if req.method == "posterior":
        model = ctx.likelihood if ctx.likelihood is not None else ctx.class_prior(req.target)
        clf = None if ctx.likelihood is not None else ctx.clf
        return gen_posterior_sample(req, ctx.joint(p.alpha), model, clf=clf,
                                    policy=ctx.policy, rows=ctx.rows)
    if req.method in OPTIMIZERS:
        model = ctx.likelihood if ctx.likelihood is not None else ctx.clf
        return gen_optimize(req, model, ctx.prior, mask=mask)
    metric = make_metric(p.metric, req.reference, ctx.prior, p.alpha)
    if req.method == "growing_spheres":
        return gen_growing_spheres(req, ctx.clf, metric, mask=mask)
    return gen_face(req, ctx.clf, ctx.rows, metric, p.face_k, preds=ctx.preds, mask=mask)
