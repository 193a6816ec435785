"""
Decision models.

  - LinearLikelihood: y ~ N(Ax + b, L⁻¹), the exact linear-Gaussian model the
    closed-form posteriors are written for.
  - SplitClassifier: a small feed-forward network split into a representation
    r(x) (the hidden layers) and a linear softmax head w, so the head can be
    swapped for its Laplace/MAP counterpart without touching r(·).

Gradients are written out by hand (reverse mode over the dense layers); the
same backward pass serves input gradients, logit Jacobians and parameter
gradients for training.

Saved models are JSON with every array as {"shape", "dtype": "<f8", "hex"}.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import log_softmax, softmax

from cf_utils.errors import SchemaError, TrainingDivergedError
from cf_utils.gaussian import rng_stream
from cf_utils.optim import LR, STEPS, Adam
from cf_utils.utils import decode_array, encode_array, load_json, save_json

_logger = logging.getLogger(__name__)

ACTIVATIONS = ("tanh", "relu", "identity")
HIDDEN = (50, 20)
TRACE_SMOOTHING = 0.9


@dataclass(frozen=True, eq=False)
class LinearLikelihood:
    a: np.ndarray  # (k, n)
    b: np.ndarray  # (k,)
    l: np.ndarray  # (k, k) residual precision

    def __post_init__(self):
        a = np.atleast_2d(np.asarray(self.a, dtype=float))
        k = a.shape[0]
        b = np.atleast_1d(np.asarray(self.b, dtype=float)).reshape(-1)
        l = np.atleast_2d(np.asarray(self.l, dtype=float))
        if b.shape != (k,) or l.shape != (k, k):
            raise ValueError(f"inconsistent shapes: A {a.shape}, b {b.shape}, L {l.shape}")
        if np.abs(l - l.T).max() > 1e-9 * max(1.0, float(np.abs(l).max())):
            raise ValueError("L must be symmetric")
        l = 0.5 * (l + l.T)
        if np.linalg.eigvalsh(l)[0] < -1e-9 * max(1.0, float(np.abs(l).max())):
            raise ValueError("L must be positive semidefinite")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "l", l)

    @property
    def n_in(self) -> int:
        return self.a.shape[1]

    @property
    def n_out(self) -> int:
        return self.a.shape[0]


@dataclass(frozen=True, eq=False)
class DenseLayer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray    # (out,)
    activation: str = "tanh"

    def __post_init__(self):
        w = np.atleast_2d(np.asarray(self.weight, dtype=float))
        b = np.asarray(self.bias, dtype=float).reshape(-1)
        if b.shape[0] != w.shape[0]:
            raise ValueError(f"bias length {b.shape[0]} does not match weight rows {w.shape[0]}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)


@dataclass(frozen=True, eq=False)
class SplitClassifier:
    layers: Tuple[DenseLayer, ...]
    head_weight: np.ndarray  # (m, h)
    head_bias: np.ndarray    # (m,)
    n_in: int = field(default=0)

    def __post_init__(self):
        layers = tuple(self.layers)
        hw = np.atleast_2d(np.asarray(self.head_weight, dtype=float))
        hb = np.asarray(self.head_bias, dtype=float).reshape(-1)
        n_in = layers[0].weight.shape[1] if layers else (self.n_in or hw.shape[1])
        width = n_in
        for i, layer in enumerate(layers):
            if layer.weight.shape[1] != width:
                raise ValueError(f"layer {i} expects {layer.weight.shape[1]} inputs, gets {width}")
            width = layer.weight.shape[0]
        if hw.shape[1] != width or hb.shape[0] != hw.shape[0]:
            raise ValueError(f"head shapes {hw.shape}/{hb.shape} do not fit representation width {width}")
        if hw.shape[0] < 2:
            raise ValueError("a classifier needs at least 2 classes")
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "head_weight", hw)
        object.__setattr__(self, "head_bias", hb)
        object.__setattr__(self, "n_in", int(n_in))

    @property
    def class_count(self) -> int:
        return self.head_weight.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.head_weight.shape[1]


@dataclass(frozen=True)
class TrainConfig:
    lr: float = LR
    steps: int = STEPS
    batch_size: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass(frozen=True, eq=False)
class TrainResult:
    classifier: SplitClassifier
    trace: List[float]        # smoothed, non-increasing
    raw_losses: List[float]


def _activate(name: str, pre: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(pre)
    if name == "relu":
        return np.maximum(pre, 0.0)
    return pre


def _activation_grad(name: str, pre: np.ndarray, post: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return 1.0 - post * post
    if name == "relu":
        return (pre > 0).astype(float)
    return np.ones_like(pre)


def _as_rows(clf: SplitClassifier, x) -> Tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != clf.n_in:
        raise SchemaError(f"inputs have {x.shape[1]} features, classifier expects {clf.n_in}")
    return x, single


def _forward_cache(clf: SplitClassifier, x: np.ndarray):
    acts = [x]
    pres = []
    for layer in clf.layers:
        pre = acts[-1] @ layer.weight.T + layer.bias
        pres.append(pre)
        acts.append(_activate(layer.activation, pre))
    logits = acts[-1] @ clf.head_weight.T + clf.head_bias
    return acts, pres, logits


def _backward(clf: SplitClassifier, acts, pres, dlogits: np.ndarray):
    """Reverse pass; returns (d input, [(dW, db) per layer], (d head W, d head b))."""
    head = (dlogits.T @ acts[-1], dlogits.sum(axis=0))
    da = dlogits @ clf.head_weight
    grads = []
    for k in range(len(clf.layers) - 1, -1, -1):
        layer = clf.layers[k]
        dpre = da * _activation_grad(layer.activation, pres[k], acts[k + 1])
        grads.append((dpre.T @ acts[k], dpre.sum(axis=0)))
        da = dpre @ layer.weight
    grads.reverse()
    return da, grads, head


def representation(clf: SplitClassifier, x) -> np.ndarray:
    """r(x): the activation feeding the softmax head."""
    rows, single = _as_rows(clf, x)
    acts, _, _ = _forward_cache(clf, rows)
    return acts[-1][0] if single else acts[-1]


def logits(clf: SplitClassifier, x) -> np.ndarray:
    rows, single = _as_rows(clf, x)
    out = _forward_cache(clf, rows)[2]
    return out[0] if single else out


def forward(clf: SplitClassifier, x) -> np.ndarray:
    """Class probabilities for a point (m,) or rows (N, m)."""
    return softmax(logits(clf, x), axis=-1)


def predict(clf: SplitClassifier, x) -> np.ndarray:
    return np.argmax(forward(clf, x), axis=-1)


def _onehot(target, n: int, m: int) -> np.ndarray:
    t = np.broadcast_to(np.asarray(target, dtype=int), (n,))
    if np.any((t < 0) | (t >= m)):
        raise ValueError(f"target must lie in [0, {m}), got {np.unique(t).tolist()}")
    e = np.zeros((n, m))
    e[np.arange(n), t] = 1.0
    return e


def nll(clf: SplitClassifier, x, target):
    """−log p(target | x) for a point or rows."""
    rows, single = _as_rows(clf, x)
    lg = _forward_cache(clf, rows)[2]
    e = _onehot(target, rows.shape[0], clf.class_count)
    out = -np.sum(log_softmax(lg, axis=-1) * e, axis=-1)
    return float(out[0]) if single else out


def grad_input(clf: SplitClassifier, x, target) -> np.ndarray:
    """∂/∂x of −log p(target | x); rows are differentiated independently."""
    rows, single = _as_rows(clf, x)
    acts, pres, lg = _forward_cache(clf, rows)
    dlogits = softmax(lg, axis=-1) - _onehot(target, rows.shape[0], clf.class_count)
    dx, _, _ = _backward(clf, acts, pres, dlogits)
    return dx[0] if single else dx


def nll_and_grad(clf: SplitClassifier, x, target) -> Tuple[float, np.ndarray]:
    """Single-point −log p(target | x) and its input gradient in one pass."""
    rows, _ = _as_rows(clf, x)
    acts, pres, lg = _forward_cache(clf, rows)
    e = _onehot(target, 1, clf.class_count)
    value = -float(np.sum(log_softmax(lg, axis=-1) * e))
    dx, _, _ = _backward(clf, acts, pres, softmax(lg, axis=-1) - e)
    return value, dx[0]


def logit_jacobian(clf: SplitClassifier, x) -> np.ndarray:
    """(m, n) Jacobian of the logits at a single point."""
    m = clf.class_count
    rows = np.tile(np.asarray(x, dtype=float).reshape(1, -1), (m, 1))
    acts, pres, _ = _forward_cache(clf, rows)
    dx, _, _ = _backward(clf, acts, pres, np.eye(m))
    return dx


def _to_params(clf: SplitClassifier) -> Dict[str, np.ndarray]:
    params = {}
    for i, layer in enumerate(clf.layers):
        params[f"W{i}"] = layer.weight.copy()
        params[f"b{i}"] = layer.bias.copy()
    params["HW"] = clf.head_weight.copy()
    params["Hb"] = clf.head_bias.copy()
    return params


def _from_params(params: Dict[str, np.ndarray], template: SplitClassifier) -> SplitClassifier:
    layers = tuple(
        DenseLayer(params[f"W{i}"].copy(), params[f"b{i}"].copy(), layer.activation)
        for i, layer in enumerate(template.layers)
    )
    return SplitClassifier(layers, params["HW"].copy(), params["Hb"].copy(), template.n_in)


def loss_and_param_grads(clf: SplitClassifier, rows, labels) -> Tuple[float, Dict[str, np.ndarray]]:
    """Mean cross-entropy over the rows and its gradient for every parameter."""
    x, _ = _as_rows(clf, rows)
    n = x.shape[0]
    acts, pres, lg = _forward_cache(clf, x)
    e = _onehot(labels, n, clf.class_count)
    loss = -float(np.sum(log_softmax(lg, axis=-1) * e)) / n
    dlogits = (softmax(lg, axis=-1) - e) / n
    _, layer_grads, head = _backward(clf, acts, pres, dlogits)
    grads = {}
    for i, (dw, db) in enumerate(layer_grads):
        grads[f"W{i}"] = dw
        grads[f"b{i}"] = db
    grads["HW"], grads["Hb"] = head
    return loss, grads


def init_classifier(n_in: int, hidden: Sequence[int] = HIDDEN, classes: int = 2,
                    activation: str = "tanh", seed: int = 0) -> SplitClassifier:
    """Glorot-uniform weights, zero biases, drawn from the (seed, 0) stream."""
    rng = rng_stream(seed)
    widths = [int(n_in), *[int(h) for h in hidden]]
    layers = []
    for fan_in, fan_out in zip(widths, widths[1:]):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        layers.append(DenseLayer(rng.uniform(-lim, lim, (fan_out, fan_in)), np.zeros(fan_out), activation))
    lim = np.sqrt(6.0 / (widths[-1] + classes))
    head = rng.uniform(-lim, lim, (classes, widths[-1]))
    return SplitClassifier(tuple(layers), head, np.zeros(classes), int(n_in))


def train(clf: SplitClassifier, rows, labels, cfg: TrainConfig = TrainConfig()) -> TrainResult:
    """Adam on mean cross-entropy; full batch unless cfg.batch_size is set.

    The returned trace is an exponential moving average of the raw losses,
    made non-increasing by a running minimum.
    """
    x, _ = _as_rows(clf, rows)
    y = np.asarray(labels, dtype=int).reshape(-1)
    if y.shape[0] != x.shape[0]:
        raise SchemaError(f"{x.shape[0]} rows but {y.shape[0]} labels")
    _onehot(y, y.shape[0], clf.class_count)  # validates label range
    if cfg.steps == 0:
        return TrainResult(clf, [], [])

    params = _to_params(clf)
    opt = Adam(lr=cfg.lr)
    rng = rng_stream(cfg.seed, 1) if cfg.batch_size else None
    raw: List[float] = []
    trace: List[float] = []
    ema = None
    for step in range(cfg.steps):
        current = _from_params(params, clf)
        if rng is not None and cfg.batch_size < x.shape[0]:
            idx = rng.choice(x.shape[0], size=cfg.batch_size, replace=False)
            loss, grads = loss_and_param_grads(current, x[idx], y[idx])
        else:
            loss, grads = loss_and_param_grads(current, x, y)
        if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise TrainingDivergedError(f"training loss became non-finite at step {step}", trace)
        raw.append(loss)
        ema = loss if ema is None else TRACE_SMOOTHING * ema + (1 - TRACE_SMOOTHING) * loss
        trace.append(min(ema, trace[-1]) if trace else ema)
        opt.step(params, grads)
    trained = _from_params(params, clf)
    _logger.info("trained classifier for %d steps, final loss %.5f", cfg.steps, raw[-1])
    return TrainResult(trained, trace, raw)


def classifier_to_json(clf: SplitClassifier) -> dict:
    return {
        "n_in": clf.n_in,
        "layers": [
            {"weight": encode_array(l.weight), "bias": encode_array(l.bias), "activation": l.activation}
            for l in clf.layers
        ],
        "head_weight": encode_array(clf.head_weight),
        "head_bias": encode_array(clf.head_bias),
    }


def classifier_from_json(obj: dict) -> SplitClassifier:
    try:
        layers = tuple(
            DenseLayer(decode_array(l["weight"]), decode_array(l["bias"]), l["activation"])
            for l in obj["layers"]
        )
        return SplitClassifier(layers, decode_array(obj["head_weight"]),
                               decode_array(obj["head_bias"]), int(obj.get("n_in", 0)))
    except (KeyError, TypeError) as e:
        raise SchemaError(f"malformed model file: missing {e}") from None


def save_classifier(clf: SplitClassifier, path: str) -> None:
    save_json(path, classifier_to_json(clf))


def load_classifier(path: str) -> SplitClassifier:
    return classifier_from_json(load_json(path, "model"))
