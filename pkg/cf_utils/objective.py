"""
Counterfactual objectives, each returning (value, gradient) in x̃.

  wachter      fid(x̃) + γ‖x − x̃‖²
  ours         x̃ᵀΛx̃ − 2x̃ᵀΛ((1 − α)μ + αx) + γ·fid(x̃)
  regularized  γ₁·fid(x̃) + γ‖x − x̃‖² + γ₂(x̃ − μ)ᵀ diag(Λ) (x̃ − μ)

fid is the negative log-likelihood of the target class for a SplitClassifier
and the squared error (y′ − Ax̃ − b)ᵀL(y′ − Ax̃ − b) for a LinearLikelihood
(the target is then y′ itself). With the squared error the minimizers are the
posterior means of the linear-Gaussian models:

  wachter      = PGM1 mean with W = γI
  ours         = PGM2 mean with L replaced by γL / (1 − α²)
  regularized  = PGM3 mean with W = γI, γ₁L in place of L and γ₂·diag(Λ) as
                 the regularizer (identical to PGM3 for diagonal Λ)
"""

from dataclasses import dataclass
from functools import singledispatch
from typing import Callable, Tuple

import numpy as np

from cf_utils.errors import ConfigError
from cf_utils.models import LinearLikelihood, SplitClassifier, nll_and_grad
from cf_utils.optim import adam_minimize
from cf_utils.prior import DataPrior

VARIANTS = ("wachter", "ours", "regularized")

__all__ = [
    "ObjectiveConfig",
    "adam_minimize",
    "fidelity",
    "make_loss",
    "ours_loss",
    "regularized_loss",
    "wachter_loss",
]


@dataclass(frozen=True)
class ObjectiveConfig:
    gamma: float = 1.0
    alpha: float = 0.5
    lambda_div: float = 0.0
    variant: str = "ours"
    gamma_reg: float = 1.0   # γ₂
    fid_weight: float = 1.0  # γ₁, regularized variant only

    def __post_init__(self):
        for name in ("gamma", "lambda_div", "gamma_reg", "fid_weight"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ConfigError(f"{name} must be a finite value >= 0, got {v}")
        if not 0.0 <= self.alpha < 1.0:
            raise ConfigError(f"alpha must lie in [0, 1), got {self.alpha}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")


@singledispatch
def fidelity(model, x_tilde, target) -> Tuple[float, np.ndarray]:
    raise TypeError(f"no fidelity term for {type(model).__name__}")


@fidelity.register
def _(model: SplitClassifier, x_tilde, target):
    return nll_and_grad(model, x_tilde, int(target))


@fidelity.register
def _(model: LinearLikelihood, x_tilde, target):
    r = np.atleast_1d(np.asarray(target, dtype=float)) - model.a @ x_tilde - model.b
    lr = model.l @ r
    return float(r @ lr), -2.0 * model.a.T @ lr


def wachter_loss(x_tilde, x, target, clf, cfg: ObjectiveConfig):
    f, g = fidelity(clf, x_tilde, target)
    d = x_tilde - x
    return f + cfg.gamma * float(d @ d), g + 2.0 * cfg.gamma * d


def ours_loss(x_tilde, x, target, clf, prior: DataPrior, cfg: ObjectiveConfig):
    lam = prior.precision
    centre = (1.0 - cfg.alpha) * prior.mu + cfg.alpha * np.asarray(x, dtype=float)
    lx = lam @ x_tilde
    lc = lam @ centre
    value = float(x_tilde @ lx) - 2.0 * float(x_tilde @ lc)
    grad = 2.0 * (lx - lc)
    if cfg.gamma:
        f, g = fidelity(clf, x_tilde, target)
        value += cfg.gamma * f
        grad = grad + cfg.gamma * g
    return value, grad


def regularized_loss(x_tilde, x, target, clf, prior: DataPrior, cfg: ObjectiveConfig):
    """Wachter plus γ_reg·Σᵢ Λᵢᵢ(x̃ᵢ − μᵢ)².

    Only the diagonal of Λ enters, so the minimizer equals the PGM3 mean only
    when Λ is diagonal; a correlated prior gives a different point.
    """
    d = x_tilde - x
    value = cfg.gamma * float(d @ d)
    grad = 2.0 * cfg.gamma * d
    if cfg.fid_weight:
        f, g = fidelity(clf, x_tilde, target)
        value += cfg.fid_weight * f
        grad = grad + cfg.fid_weight * g
    if cfg.gamma_reg:
        diag = cfg.gamma_reg * np.diag(prior.precision)
        r = x_tilde - prior.mu
        value += float(r @ (diag * r))
        grad = grad + 2.0 * diag * r
    return value, grad


def make_loss(cfg: ObjectiveConfig, x, target, model, prior: DataPrior = None) -> Callable:
    """Bind everything but x̃, giving the loss_fn adam_minimize expects."""
    x = np.asarray(x, dtype=float)
    if cfg.variant == "wachter":
        return lambda z: wachter_loss(z, x, target, model, cfg)
    if prior is None:
        raise ConfigError(f"the {cfg.variant} objective needs a data prior")
    if cfg.variant == "ours":
        return lambda z: ours_loss(z, x, target, model, prior, cfg)
    return lambda z: regularized_loss(z, x, target, model, prior, cfg)
