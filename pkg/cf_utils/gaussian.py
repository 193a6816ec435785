"""
Dense multivariate-Gaussian algebra.

Every distribution the engine produces (data prior, joint counterfactual prior,
PGM posteriors, Laplace class priors) is a `Gaussian`: a mean vector plus a
covariance matrix. Covariances are stored, never precisions, because the
immutability construction yields rank-deficient covariances that have no finite
precision. Anything that needs a precision goes through the pseudo-inverse.

    Input : mean (d,), cov (d, d) symmetric PSD
    Output: conditionals, marginals, seeded samples, log densities,
            Mahalanobis distances

All random draws in the repository come from `rng_stream(seed, task_id)`, a
counter-based Philox stream, so a task's output depends on (seed, task_id) only
and never on which worker thread ran it or in what order.
"""

import logging
import threading
from dataclasses import dataclass
from typing import Iterable, Sequence, Tuple, Union

import numpy as np
import scipy.linalg as sla

from cf_utils.errors import ConditioningError, FactorizationError, NotPSDError

_logger = logging.getLogger(__name__)

SYM_TOL = 1e-9           # asymmetry allowed before construction fails
EIG_TOL = 1e-9           # eigenvalues down to -EIG_TOL*scale are clamped to 0
DEFAULT_JITTER = 1e-9
MAX_JITTER_FACTOR = 1e6  # cholesky_psd gives up past jitter * 1e6
PINV_RTOL = 1e-10        # pseudo-inverse cutoff, relative to the trace
CONDITION_TOL = 1e-6     # allowed deviation along a zero-variance direction
FACTOR_TOL = 1e-7


def rng_stream(seed: int, task_id: int = 0) -> np.random.Generator:
    """Counter-based stream keyed by (seed, task_id)."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(task_id),))
    return np.random.Generator(np.random.Philox(ss))


def _scale(m: np.ndarray) -> float:
    return max(1.0, float(np.abs(m).max())) if m.size else 1.0


def _symmetrize(m: np.ndarray, what: str = "matrix") -> np.ndarray:
    m = np.atleast_2d(np.asarray(m, dtype=float))
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"{what} must be square, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{what} has non-finite entries")
    asym = float(np.abs(m - m.T).max()) if m.size else 0.0
    if asym > SYM_TOL * _scale(m):
        raise ValueError(f"{what} is not symmetric (max |M - Mᵀ| = {asym:.3e})")
    return 0.5 * (m + m.T)


def cholesky_psd(m, jitter: float = DEFAULT_JITTER) -> Tuple[np.ndarray, float]:
    """Lower Cholesky factor of M + c·I for the smallest c in
    {0, jitter, 10·jitter, ...} that factorizes; returns (L, c)."""
    if jitter < 0:
        raise ValueError(f"jitter must be >= 0, got {jitter}")
    m = _symmetrize(m)
    eye = np.eye(m.shape[0])
    try:
        return sla.cholesky(m, lower=True), 0.0
    except np.linalg.LinAlgError:
        if jitter == 0:
            raise FactorizationError("matrix is singular or indefinite and jitter is 0", 0.0)
    for k in range(int(round(np.log10(MAX_JITTER_FACTOR))) + 1):
        c = jitter * 10.0**k
        try:
            L = sla.cholesky(m + c * eye, lower=True)
            _logger.debug("cholesky_psd: added jitter %.3e", c)
            return L, c
        except np.linalg.LinAlgError:
            continue
    raise FactorizationError(
        f"matrix is not PSD even with jitter {jitter * MAX_JITTER_FACTOR:.3e}",
        jitter * MAX_JITTER_FACTOR,
    )


@dataclass(frozen=True)
class IndexSet:
    indices: Tuple[int, ...]
    dim: int

    def __post_init__(self):
        idx = self.indices
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError(f"indices must be strictly increasing, got {idx}")
        if idx and (idx[0] < 0 or idx[-1] >= self.dim):
            raise ValueError(f"indices {idx} out of range for dimension {self.dim}")

    def __len__(self) -> int:
        return len(self.indices)

    def complement(self) -> "IndexSet":
        taken = set(self.indices)
        return IndexSet(tuple(i for i in range(self.dim) if i not in taken), self.dim)

    def array(self) -> np.ndarray:
        return np.asarray(self.indices, dtype=int)


def index_set(indices: Iterable[int], dim: int) -> IndexSet:
    return IndexSet(tuple(int(i) for i in indices), int(dim))


def _as_index_set(idx: Union[IndexSet, Sequence[int]], dim: int) -> IndexSet:
    if isinstance(idx, IndexSet):
        if idx.dim != dim:
            raise ValueError(f"IndexSet built for dimension {idx.dim}, Gaussian has {dim}")
        return idx
    return index_set(idx, dim)


class Gaussian:
    """Immutable N(mean, cov). Rank-deficient covariances are legal."""

    def __init__(self, mean, cov):
        mean = np.atleast_1d(np.asarray(mean, dtype=float)).copy()
        if mean.ndim != 1:
            raise ValueError(f"mean must be a vector, got shape {mean.shape}")
        cov = _symmetrize(cov, "cov")
        if cov.shape[0] != mean.shape[0]:
            raise ValueError(f"cov shape {cov.shape} does not match mean length {mean.shape[0]}")
        if not np.all(np.isfinite(mean)):
            raise ValueError("mean has non-finite entries")
        evals, evecs = sla.eigh(cov)
        tol = EIG_TOL * _scale(cov)
        if evals.size and evals[0] < -tol:
            raise NotPSDError(
                f"covariance has eigenvalue {evals[0]:.3e} below -{tol:.1e}", float(evals[0])
            )
        mean.setflags(write=False)
        cov.setflags(write=False)
        self._mean = mean
        self._cov = cov
        self._evals = np.clip(evals, 0.0, None)
        self._evecs = evecs
        self._factor = None
        self._lock = threading.Lock()

    def __repr__(self) -> str:
        return f"Gaussian(dim={self.dim}, rank={self.rank})"

    @property
    def dim(self) -> int:
        return self._mean.shape[0]

    @property
    def mean(self) -> np.ndarray:
        return self._mean

    @property
    def cov(self) -> np.ndarray:
        return self._cov

    @property
    def eigenvalues(self) -> np.ndarray:
        return self._evals

    @property
    def rank(self) -> int:
        cutoff = PINV_RTOL * max(float(np.trace(self._cov)), 0.0)
        return int(np.count_nonzero(self._evals > cutoff))

    @property
    def factor(self) -> np.ndarray:
        """Lower-triangular F with F·Fᵀ = cov (computed once)."""
        if self._factor is None:
            with self._lock:
                if self._factor is None:
                    f = self._compute_factor()
                    f.setflags(write=False)
                    self._factor = f
        return self._factor

    def _compute_factor(self) -> np.ndarray:
        try:
            return sla.cholesky(self._cov, lower=True)
        except np.linalg.LinAlgError:
            pass
        # rank-deficient: triangularize the spectral root, root·rootᵀ = cov
        root = self._evecs * np.sqrt(self._evals)
        (r,) = sla.qr(root.T, mode="r")
        return r.T

    def precision(self) -> np.ndarray:
        """Pseudo-inverse of cov (eigenvalue cutoff PINV_RTOL·trace)."""
        return _pinv_from_eigh(self._evals, self._evecs, float(np.trace(self._cov)))


def _pinv_from_eigh(evals: np.ndarray, evecs: np.ndarray, trace: float) -> np.ndarray:
    keep = evals > PINV_RTOL * max(trace, 0.0)
    v = evecs[:, keep]
    return (v / evals[keep]) @ v.T


def pseudo_inverse(m) -> np.ndarray:
    m = _symmetrize(m)
    evals, evecs = sla.eigh(m)
    return _pinv_from_eigh(evals, evecs, float(np.trace(m)))


def condition(g: Gaussian, observed, values) -> Gaussian:
    """Gaussian over the free coordinates given coords `observed` == `values`.

    Uses the pseudo-inverse of the observed block so zero-variance observed
    directions (perfect correlation) are honoured exactly instead of blowing up.
    """
    obs = _as_index_set(observed, g.dim)
    values = np.atleast_1d(np.asarray(values, dtype=float))
    if len(obs) == 0 or len(obs) >= g.dim:
        raise ValueError(f"must observe between 1 and {g.dim - 1} coordinates, got {len(obs)}")
    if values.shape != (len(obs),):
        raise ValueError(f"values shape {values.shape} does not match {len(obs)} observed indices")
    o = obs.array()
    f = obs.complement().array()
    cov = g.cov
    s_oo = cov[np.ix_(o, o)]
    s_fo = cov[np.ix_(f, o)]
    evals, evecs = sla.eigh(s_oo)
    keep = evals > PINV_RTOL * max(float(np.trace(s_oo)), 0.0)
    resid = values - g.mean[o]
    null = evecs[:, ~keep]
    if null.size:
        off = float(np.abs(null.T @ resid).max())
        if off > CONDITION_TOL:
            raise ConditioningError(
                f"observed values deviate by {off:.3e} along a zero-variance direction"
            )
    v = evecs[:, keep]
    inv = (v / evals[keep]) @ v.T
    gain = s_fo @ inv
    mean = g.mean[f] + gain @ resid
    cov_f = cov[np.ix_(f, f)] - gain @ s_fo.T
    return Gaussian(mean, cov_f)


def marginalize(g: Gaussian, keep) -> Gaussian:
    k = _as_index_set(keep, g.dim)
    if len(k) == 0:
        raise ValueError("keep must be nonempty")
    idx = k.array()
    return Gaussian(g.mean[idx], g.cov[np.ix_(idx, idx)])


def sample(g: Gaussian, n: int, seed: int, task_id: int = 0) -> np.ndarray:
    """n i.i.d. rows mean + factor·z, deterministic in (seed, task_id)."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    z = rng_stream(seed, task_id).standard_normal((n, g.dim))
    return g.mean + z @ g.factor.T


def _rows(x, d: int) -> Tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != d:
        raise ValueError(f"points have dimension {x.shape[1]}, Gaussian has {d}")
    return x, single


def log_pdf(g: Gaussian, x, jitter: float = 0.0):
    """Log density at x (a point or rows of points). Fails on singular cov."""
    pts, single = _rows(x, g.dim)
    if jitter > 0:
        L, _ = cholesky_psd(g.cov, jitter)
    else:
        try:
            L = sla.cholesky(g.cov, lower=True)
        except np.linalg.LinAlgError:
            raise FactorizationError("log_pdf needs a positive-definite covariance") from None
    z = sla.solve_triangular(L, (pts - g.mean).T, lower=True)
    maha = np.sum(z * z, axis=0)
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    out = -0.5 * (g.dim * np.log(2.0 * np.pi) + logdet + maha)
    return float(out[0]) if single else out


def mahalanobis_sq(g: Gaussian, x):
    """(x − μ)ᵀ Σ⁺ (x − μ) for a point or rows of points."""
    pts, single = _rows(x, g.dim)
    diff = pts - g.mean
    out = np.einsum("ij,jk,ik->i", diff, g.precision(), diff)
    out = np.maximum(out, 0.0)
    return float(out[0]) if single else out
