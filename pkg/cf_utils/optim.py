"""
Adam, shared by classifier training, the counterfactual objectives and the
Laplace mode search.

`adam_minimize` drives a `loss_fn(z) -> (value, grad)` from an initial point
and returns the best iterate it has seen (not the last one) plus the trace of
loss values. Defaults (lr 0.05, 1000 steps) are the reproducibility settings
used for every counterfactual search.
"""

import logging
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from cf_utils.errors import OptimizationError
from cf_utils.gaussian import rng_stream

_logger = logging.getLogger(__name__)

LR = 0.05
STEPS = 1000
BETA1 = 0.9
BETA2 = 0.999
EPSILON = 1e-8

LossFn = Callable[[np.ndarray], Tuple[float, np.ndarray]]


class Adam:
    """Adam over a dict of named arrays, updated in place."""

    def __init__(self, lr: float = LR, beta1: float = BETA1, beta2: float = BETA2,
                 epsilon: float = EPSILON):
        if lr <= 0:
            raise ValueError(f"lr must be > 0, got {lr}")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        step_size = self.lr / bc1
        for k in params:
            g = grads[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(params[k])
                self.v[k] = np.zeros_like(params[k])
            self.m[k] *= self.beta1
            self.m[k] += (1.0 - self.beta1) * g
            self.v[k] *= self.beta2
            self.v[k] += (1.0 - self.beta2) * (g * g)
            denom = np.sqrt(self.v[k] * (1.0 / bc2)) + self.epsilon
            params[k] -= step_size * self.m[k] / denom


def _finite(value: float, grad: np.ndarray) -> bool:
    return bool(np.isfinite(value)) and bool(np.all(np.isfinite(grad)))


def adam_minimize(
    loss_fn: LossFn,
    init,
    steps: int = STEPS,
    lr: float = LR,
    seed: Optional[int] = None,
    init_noise: float = 0.0,
    grad_tol: float = 0.0,
    mask=None,
    task_id: int = 0,
) -> Tuple[np.ndarray, List[float]]:
    """Minimize loss_fn with Adam; returns (best-seen iterate, loss trace).

    `mask` (boolean, broadcast against the last axis) freezes coordinates by
    zeroing their gradient. `init_noise` perturbs the start with a seeded
    draw. The run stops early once max |grad| <= grad_tol.
    """
    if steps < 0:
        raise ValueError(f"steps must be >= 0, got {steps}")
    z = np.array(init, dtype=float, copy=True)
    if init_noise > 0:
        if seed is None:
            raise ValueError("init_noise needs a seed")
        z += init_noise * rng_stream(seed, task_id).standard_normal(z.shape)
    frozen = None if mask is None else np.asarray(mask, dtype=bool)
    if frozen is not None and frozen.any() and init_noise > 0:
        z[..., frozen] = np.asarray(init, dtype=float)[..., frozen]

    value, grad = loss_fn(z)
    if not _finite(value, grad):
        raise OptimizationError("loss is not finite at the initial point", [value])
    trace = [float(value)]
    best, best_value = z.copy(), float(value)
    opt = Adam(lr=lr)
    params = {"z": z}
    for _ in range(steps):
        grad = np.array(grad, dtype=float)
        if frozen is not None:
            grad[..., frozen] = 0.0
        if np.max(np.abs(grad)) <= grad_tol:
            break
        opt.step(params, {"z": grad})
        value, grad = loss_fn(params["z"])
        if not _finite(value, grad):
            raise OptimizationError(
                f"loss became non-finite after {len(trace)} steps", trace
            )
        trace.append(float(value))
        if value < best_value:
            best, best_value = params["z"].copy(), float(value)
    _logger.debug("adam_minimize: %d steps, best %.6g", len(trace) - 1, best_value)
    return best, trace
