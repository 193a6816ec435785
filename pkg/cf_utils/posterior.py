"""
Counterfactual posteriors p(x′ | x, y′).

Linear-Gaussian decision models have closed forms under each of the three
graphical models:

  PGM1  x′ lives in a ball around x:            Λ_cf = W + AᵀLA
  PGM2  (x, x′) share the joint data prior:      Λ_cf = AᵀLA + BᵀKB + Λ,  B = WΛ, K = (Σ − WΛWᵀ)⁻¹
  PGM3  PGM1 plus a Gaussian data regularizer:  Λ_cf = AᵀLA + W + γ₂Λ

`posterior_via_joint` assembles the exact (x, x′, y′) Gaussian and conditions
on (x, y′). It is the ground truth: the PGM2 closed form is checked against it
on every call and loses on disagreement.

Nonlinear classifiers go through a two-stage Laplace pipeline
(`laplace_class_prior`) that yields a Gaussian class-conditional prior over
x′, which `posterior_laplace` then combines with the joint prior.
"""

import dataclasses
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
import scipy.linalg as sla
from scipy.optimize import minimize
from scipy.special import log_softmax, softmax

from cf_utils.errors import ConfigError, FactorizationError, LaplaceError, OptimizationError, SchemaError
from cf_utils.gaussian import (
    EIG_TOL,
    Gaussian,
    cholesky_psd,
    condition,
    index_set,
    sample,
)
from cf_utils.models import (
    LinearLikelihood,
    SplitClassifier,
    forward,
    grad_input,
    logit_jacobian,
    nll_and_grad,
    representation,
)
from cf_utils.optim import LR, STEPS, adam_minimize
from cf_utils.prior import DataPrior, JointCfPrior, conditional_cf_given_reference

_logger = logging.getLogger(__name__)

ORACLE_TOL = 1e-6
RESTARTS = 8
MIN_TARGET_PROB = 0.5
FD_STEP = 1e-4
HESSIAN_JITTER = 1e-6
WEIGHT_PRIOR_VAR = 1.0

__all__ = [
    "LinearLikelihood",
    "LaplaceClassPrior",
    "LaplaceConfig",
    "laplace_class_prior",
    "posterior_laplace",
    "posterior_pgm1",
    "posterior_pgm2",
    "posterior_pgm3",
    "posterior_via_joint",
]


def _gaussian_from_information(prec: np.ndarray, eta: np.ndarray) -> Gaussian:
    """N(Λ⁻¹η, Λ⁻¹) from a precision matrix and a linear term."""
    prec = 0.5 * (prec + prec.T)
    L, _ = cholesky_psd(prec, 0.0)
    cov = sla.cho_solve((L, True), np.eye(prec.shape[0]))
    mean = sla.cho_solve((L, True), eta)
    return Gaussian(mean, 0.5 * (cov + cov.T))


def _data_terms(lik: LinearLikelihood, x, y_prime) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=float).reshape(-1)
    y = np.atleast_1d(np.asarray(y_prime, dtype=float)).reshape(-1)
    if x.shape[0] != lik.n_in or y.shape[0] != lik.n_out:
        raise SchemaError(f"x has {x.shape[0]} / y′ has {y.shape[0]} entries, model is {lik.a.shape}")
    atl = lik.a.T @ lik.l
    return x, atl @ lik.a, atl @ (y - lik.b)


def posterior_pgm1(lik: LinearLikelihood, x, y_prime, w_prec) -> Gaussian:
    x, ata, aty = _data_terms(lik, x, y_prime)
    w = np.atleast_2d(np.asarray(w_prec, dtype=float))
    return _gaussian_from_information(w + ata, aty + w @ x)


def posterior_pgm3(lik: LinearLikelihood, prior: DataPrior, x, y_prime, w_prec,
                   reg_weight: float = 1.0) -> Gaussian:
    """PGM1 plus reg_weight·Λ around μ; reg_weight = 0 is PGM1 exactly."""
    x, ata, aty = _data_terms(lik, x, y_prime)
    w = np.atleast_2d(np.asarray(w_prec, dtype=float))
    prec = ata + w
    eta = aty + w @ x
    if reg_weight:
        lam = reg_weight * prior.precision
        prec = prec + lam
        eta = eta + lam @ prior.mu
    return _gaussian_from_information(prec, eta)


def _projected_likelihood(lik: LinearLikelihood):
    """Rows of A, b restricted to the directions where L > 0, with their precisions."""
    evals, evecs = np.linalg.eigh(lik.l)
    keep = evals > EIG_TOL * max(1.0, float(np.abs(evals).max()))
    u = evecs[:, keep]
    return u, evals[keep]


def posterior_via_joint(lik: LinearLikelihood, joint: JointCfPrior, x, y_prime) -> Gaussian:
    """Exact posterior by assembling (x, x′, ỹ) and conditioning on (x, ỹ).

    ỹ = Uᵀy′ keeps only the directions where L is positive; along the null
    directions of L the likelihood is flat, so dropping them is exact.
    """
    x, _, _ = _data_terms(lik, x, y_prime)
    y = np.atleast_1d(np.asarray(y_prime, dtype=float)).reshape(-1)
    n = joint.dim
    u, lam = _projected_likelihood(lik)
    if lam.size == 0:
        return conditional_cf_given_reference(joint, x)
    sigma, w, mu = joint.data.sigma, joint.w, joint.data.mu
    a = u.T @ lik.a
    b = u.T @ lik.b
    k = lam.size
    cov = np.block([
        [sigma, w, w @ a.T],
        [w.T, sigma, sigma @ a.T],
        [a @ w.T, a @ sigma, a @ sigma @ a.T + np.diag(1.0 / lam)],
    ])
    mean = np.concatenate([mu, mu, a @ mu + b])
    full = Gaussian(mean, 0.5 * (cov + cov.T))
    observed = index_set([*range(n), *range(2 * n, 2 * n + k)], 2 * n + k)
    return condition(full, observed, np.concatenate([x, u.T @ y]))


def _agree(p: Gaussian, q: Gaussian, tol: float = ORACLE_TOL) -> bool:
    scale = max(1.0, float(np.abs(q.cov).max()), float(np.abs(q.mean).max()))
    return (float(np.abs(p.mean - q.mean).max()) <= tol * scale
            and float(np.abs(p.cov - q.cov).max()) <= tol * scale)


def posterior_pgm2(lik: LinearLikelihood, joint: JointCfPrior, x, y_prime) -> Gaussian:
    """Closed form under the joint prior, verified against posterior_via_joint.

    Masked or rank-deficient joints skip the closed form (Σ − WΛWᵀ is singular
    there) and return the oracle directly.
    """
    oracle = posterior_via_joint(lik, joint, x, y_prime)
    if joint.immutable_mask.any() or joint.data.gaussian.rank < joint.dim:
        return oracle
    x, ata, aty = _data_terms(lik, x, y_prime)
    lam = joint.data.precision
    mu = joint.data.mu
    b = joint.conditional_gain
    try:
        ck, _ = cholesky_psd(joint.conditional_cov, 0.0)
        closed = _gaussian_from_information(
            ata + b.T @ sla.cho_solve((ck, True), b) + lam,
            aty + b.T @ sla.cho_solve((ck, True), x - mu + b @ mu) + lam @ mu,
        )
    except FactorizationError:
        return oracle
    if not _agree(closed, oracle):
        _logger.warning("PGM2 closed form disagrees with the joint-conditioning result; using the latter")
        return oracle
    return closed


@dataclass(frozen=True)
class LaplaceConfig:
    restarts: int = RESTARTS
    lr: float = LR
    steps: int = STEPS
    min_target_prob: float = MIN_TARGET_PROB
    fd_step: float = FD_STEP
    jitter: float = HESSIAN_JITTER
    weight_prior_var: float = WEIGHT_PRIOR_VAR
    seed: int = 0
    workers: int = 1


@dataclass(frozen=True, eq=False)
class LaplaceClassPrior:
    """Gaussian g(x′ | y′ = target_label) from the two-stage Laplace pipeline.

    `classifier` is the plug-in model (MAP head) the x′-space mode was found
    with; `approximation` records that weights were plugged in, not averaged.
    """
    target_label: int
    g: Gaussian
    weight_map: np.ndarray
    weight_cov: np.ndarray
    classifier: SplitClassifier
    mode_prob: float
    approximation: str = "map-plugin"


def _head_map(clf: SplitClassifier, rows: np.ndarray, var: float) -> Tuple[np.ndarray, np.ndarray]:
    """MAP of softmax regression on [r(φ), 1] against the model's own outputs,
    N(0, var·I) weight prior; returns (weights m×(h+1), weight covariance)."""
    feats = np.hstack([representation(clf, rows), np.ones((rows.shape[0], 1))])
    targets = forward(clf, rows)
    m, h1 = clf.class_count, feats.shape[1]

    def objective(theta):
        wm = theta.reshape(m, h1)
        lg = feats @ wm.T
        value = -np.sum(targets * log_softmax(lg, axis=1)) + 0.5 * theta @ theta / var
        grad = ((softmax(lg, axis=1) - targets).T @ feats).ravel() + theta / var
        return value, grad

    init = np.hstack([clf.head_weight, clf.head_bias[:, None]]).ravel()
    res = minimize(objective, init, jac=True, method="L-BFGS-B")
    wm = res.x.reshape(m, h1)
    p = softmax(feats @ wm.T, axis=1)
    s = p[:, :, None] * np.eye(m)[None] - p[:, :, None] * p[:, None, :]
    hess = np.einsum("iab,ic,id->acbd", s, feats, feats, optimize=True).reshape(m * h1, m * h1)
    hess += np.eye(m * h1) / var
    hl, _ = cholesky_psd(hess, HESSIAN_JITTER)
    return wm, sla.cho_solve((hl, True), np.eye(m * h1))


def _fd_hessian(grad_fn, z: np.ndarray, step: float) -> np.ndarray:
    n = z.shape[0]
    hess = np.zeros((n, n))
    for j in range(n):
        h = step * (1.0 + abs(z[j]))
        e = np.zeros(n)
        e[j] = h
        hess[:, j] = (grad_fn(z + e) - grad_fn(z - e)) / (2.0 * h)
    return 0.5 * (hess + hess.T)


def laplace_class_prior(clf: SplitClassifier, rows, prior: DataPrior, target: int,
                        cfg: LaplaceConfig = LaplaceConfig()) -> LaplaceClassPrior:
    """Gaussian approximation of p̂(y′ = target | x′)·p(x′).

    Stage 1 fits the last-layer weights by MAP against the classifier's own
    predictions on `rows` and plugs them in. Stage 2 searches the mode of the
    unnormalized density with seeded Adam restarts from prior samples, polishes
    each with L-BFGS, and takes the covariance from a finite-difference
    Hessian at the best mode (Gauss–Newton when that is not PD).
    """
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    if not 0 <= target < clf.class_count:
        raise ConfigError(f"target must lie in [0, {clf.class_count}), got {target}")
    if rows.shape[1] != prior.dim or prior.dim != clf.n_in:
        raise SchemaError("rows, prior and classifier disagree on the feature count")
    wm, wcov = _head_map(clf, rows, cfg.weight_prior_var)
    h = clf.hidden_dim
    plug = dataclasses.replace(clf, head_weight=wm[:, :h], head_bias=wm[:, h])
    lam, mu = prior.precision, prior.mu

    def energy(z):
        value, g = nll_and_grad(plug, z, target)
        d = z - mu
        return value + 0.5 * d @ lam @ d, g + lam @ d

    def energy_grad(z):
        return grad_input(plug, z, target) + lam @ (z - mu)

    starts = sample(prior.gaussian, cfg.restarts, cfg.seed, task_id=target)

    def _search(start):
        try:
            z, _ = adam_minimize(energy, start, steps=cfg.steps, lr=cfg.lr)
        except OptimizationError as e:
            _logger.debug("laplace restart aborted: %s", e)
            return None
        res = minimize(energy, z, jac=True, method="L-BFGS-B", options={"gtol": 1e-10, "ftol": 1e-15})
        return res.x if res.fun <= energy(z)[0] else z

    with ThreadPoolExecutor(max_workers=max(1, cfg.workers)) as ex:
        modes: List[Optional[np.ndarray]] = list(ex.map(_search, starts))

    best, best_value, best_prob = None, np.inf, 0.0
    for i, z in enumerate(modes):
        if z is None:
            continue
        prob = float(forward(plug, z)[target])
        value = energy(z)[0]
        _logger.debug("laplace restart %d: energy %.6g, p(target) %.4f", i, value, prob)
        if prob >= cfg.min_target_prob and value < best_value:
            best, best_value, best_prob = z, value, prob
    if best is None:
        raise LaplaceError(
            f"no restart reached p(target={target}) >= {cfg.min_target_prob} at its mode"
        )

    hess = _fd_hessian(energy_grad, best, cfg.fd_step)
    factor = None
    for c in (0.0, cfg.jitter):
        try:
            factor = sla.cholesky(hess + c * np.eye(hess.shape[0]), lower=True)
            break
        except np.linalg.LinAlgError:
            continue
    if factor is None:
        _logger.warning("finite-difference Hessian is not PD; using the Gauss–Newton Hessian")
        jac = logit_jacobian(plug, best)
        p = forward(plug, best)
        gn = jac.T @ (np.diag(p) - np.outer(p, p)) @ jac + lam
        factor, _ = cholesky_psd(gn, cfg.jitter)
    cov = sla.cho_solve((factor, True), np.eye(hess.shape[0]))
    g = Gaussian(best, 0.5 * (cov + cov.T))
    return LaplaceClassPrior(int(target), g, wm, wcov, plug, best_prob)


def posterior_laplace(class_prior: LaplaceClassPrior, joint: JointCfPrior, x) -> Gaussian:
    """g(x′ | x) ∝ p(x | x′)·g(x′): assemble (x′, x) and condition on x."""
    x = np.asarray(x, dtype=float).reshape(-1)
    n = joint.dim
    m, g_cov = class_prior.g.mean, class_prior.g.cov
    mu = joint.data.mu
    b = joint.conditional_gain
    c = joint.conditional_cov
    cross = b @ g_cov
    cov = np.block([[g_cov, cross.T], [cross, cross @ b.T + c]])
    mean = np.concatenate([m, mu + b @ (m - mu)])
    full = Gaussian(mean, 0.5 * (cov + cov.T))
    post = condition(full, index_set(range(n, 2 * n), 2 * n), x)
    _check_precision_form(class_prior, joint, x, post)
    return post


def _check_precision_form(class_prior: LaplaceClassPrior, joint: JointCfPrior, x: np.ndarray,
                          post: Gaussian) -> None:
    """Block-precision route: Λ_post = G⁻¹ + BᵀC⁻¹B. Only logs on disagreement."""
    try:
        gl = sla.cholesky(class_prior.g.cov, lower=True)
        cl = sla.cholesky(joint.conditional_cov, lower=True)
    except np.linalg.LinAlgError:
        return
    b = joint.conditional_gain
    mu = joint.data.mu
    prec = sla.cho_solve((gl, True), np.eye(joint.dim)) + b.T @ sla.cho_solve((cl, True), b)
    eta = (sla.cho_solve((gl, True), class_prior.g.mean)
           + b.T @ sla.cho_solve((cl, True), x - mu + b @ mu))
    try:
        alt = _gaussian_from_information(prec, eta)
    except FactorizationError:
        return
    if not _agree(alt, post):
        _logger.warning("Laplace posterior: precision-form cross-check disagrees; keeping the conditioned result")
