"""A small multilayer perceptron with hand-written backpropagation.

Weights are stored as ``(fan_in, fan_out)`` matrices so a layer computes
``x @ W + b``. Training always runs through ReLU; the activation-interval
dropout (AID) activation exists only for the forward passes used by scoring.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, DomainError, NumericError, ShapeError
from .numerics import RngStream, as_matrix

ACTIVATIONS = ("relu", "aid")
# "drop": every interval drops with its own probability (keep with 1 - p).
# "asymmetric": positives keep with probability p2, negatives with 1 - p1.
AID_CONVENTIONS = ("drop", "asymmetric")


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int
    hidden_dims: tuple = (64, 64)
    num_classes: int = 2
    activation: str = "relu"
    aid_p1: float = 0.5
    aid_p2: float = 0.2
    aid_convention: str = "drop"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if not self.hidden_dims:
            raise ConfigError("hidden_dims must be non-empty")
        if self.input_dim < 1 or self.num_classes < 1 or min(self.hidden_dims) < 1:
            raise ConfigError("every layer dimension must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}")
        if self.aid_convention not in AID_CONVENTIONS:
            raise ConfigError(f"aid_convention must be one of {AID_CONVENTIONS}")
        for p in (self.aid_p1, self.aid_p2):
            if not 0.0 <= p <= 1.0:
                raise ConfigError("AID probabilities must lie in [0, 1]")

    @property
    def dims(self) -> tuple:
        return (self.input_dim, *self.hidden_dims, self.num_classes)


@dataclass(frozen=True)
class Model:
    config: ModelConfig
    layers: tuple  # ((W, b), ...)
    step_count: int = 0

    def params(self) -> list:
        """Parameters as a flat list ``[W0, b0, W1, b1, ...]``."""
        return [p for layer in self.layers for p in layer]

    def with_params(self, params, step_count=None) -> "Model":
        it = iter(params)
        layers = tuple((w, b) for w, b in zip(it, it))
        return Model(self.config, layers, self.step_count if step_count is None else step_count)


@dataclass
class ForwardTrace:
    logits: np.ndarray
    pre_activations: list = field(default_factory=list)
    post_activations: list = field(default_factory=list)
    captured: bool = False


def init_model(config: ModelConfig, stream: RngStream) -> Model:
    """He-normal weights (std ``sqrt(2 / fan_in)``) and zero biases."""
    rng = stream.generator()
    dims = config.dims
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
        layers.append((w, np.zeros(fan_out)))
    return Model(config, tuple(layers))


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def aid_keep_probabilities(pre: np.ndarray, p1: float, p2: float, convention: str = "drop") -> np.ndarray:
    negative = pre < 0
    if convention == "drop":
        return np.where(negative, 1.0 - p1, 1.0 - p2)
    if convention == "asymmetric":
        return np.where(negative, 1.0 - p1, p2)
    raise ConfigError(f"unknown AID convention {convention!r}")


def aid_activate(pre, p1: float, p2: float, stream: RngStream, convention: str = "drop") -> np.ndarray:
    """Interval-wise dropout on pre-activations.

    Entries in ``(-inf, 0)`` are dropped with probability ``p1`` and entries in
    ``[0, inf)`` with probability ``p2``. Survivors pass through unscaled, so a
    kept negative stays negative.
    """
    for p in (p1, p2):
        if not 0.0 <= p <= 1.0:
            raise DomainError(f"AID probability {p} outside [0, 1]")
    pre = as_matrix(pre)
    keep = stream.generator().random(pre.shape) < aid_keep_probabilities(pre, p1, p2, convention)
    return np.where(keep, pre, 0.0)


def forward(model: Model, batch_x, capture: bool = False, mask_stream: RngStream | None = None,
            activation: str | None = None) -> ForwardTrace:
    """Run the network on ``batch_x``.

    ``activation`` overrides the configured activation for this call. The AID
    activation needs ``mask_stream``; layer ``l`` draws its mask from
    ``mask_stream.child(l)``.
    """
    cfg = model.config
    activation = activation or cfg.activation
    if activation not in ACTIVATIONS:
        raise ConfigError(f"unknown activation {activation!r}")
    if activation == "aid" and mask_stream is None:
        raise ConfigError("the AID activation needs a mask stream")
    x = as_matrix(batch_x)
    if x.shape[1] != cfg.input_dim:
        raise ShapeError(f"batch has {x.shape[1]} features, model expects {cfg.input_dim}")
    trace = ForwardTrace(logits=None, captured=capture)
    h = x
    n_hidden = len(model.layers) - 1
    for idx, (w, b) in enumerate(model.layers):
        z = h @ w + b
        if idx == n_hidden:
            trace.logits = z
            break
        if activation == "relu":
            h = relu(z)
        else:
            h = aid_activate(z, cfg.aid_p1, cfg.aid_p2, mask_stream.child(idx), cfg.aid_convention)
        if capture:
            trace.pre_activations.append(z)
            trace.post_activations.append(h)
    return trace


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _check_labels(y, num_classes: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64)
    if y.size and (y.min() < 0 or y.max() >= num_classes):
        raise DomainError(f"labels must lie in [0, {num_classes})")
    return y


def _relu_pass(model: Model, x: np.ndarray):
    """Forward through ReLU keeping every layer input (needed by backprop)."""
    inputs = [x]
    h = x
    for w, b in model.layers[:-1]:
        h = relu(h @ w + b)
        inputs.append(h)
    w, b = model.layers[-1]
    return inputs, h @ w + b


def _deltas(model: Model, inputs: list, dlogits: np.ndarray) -> list:
    """Per-sample error signals at the output of every layer (unreduced)."""
    deltas = [None] * len(model.layers)
    delta = dlogits
    for idx in range(len(model.layers) - 1, -1, -1):
        deltas[idx] = delta
        if idx:
            w = model.layers[idx][0]
            delta = (delta @ w.T) * (inputs[idx] > 0)
    return deltas


def loss_and_grads(model: Model, batch_x, batch_y, regularizer=None):
    """Mean cross-entropy and its gradient, plus an optional penalty.

    ``regularizer`` is anything with ``penalty(params) -> (value, grads)``,
    typically an :class:`~seqcl.regularizers.EwcState`.
    """
    x = as_matrix(batch_x)
    y = _check_labels(batch_y, model.config.num_classes)
    n = x.shape[0]
    inputs, logits = _relu_pass(model, x)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(log_z - shifted[np.arange(n), y]))
    dlogits = _softmax(logits)
    dlogits[np.arange(n), y] -= 1.0
    dlogits /= n
    grads = []
    for a, d in zip(inputs, _deltas(model, inputs, dlogits)):
        grads.append(a.T @ d)
        grads.append(d.sum(axis=0))
    if regularizer is not None:
        penalty, pgrads = regularizer.penalty(model.params())
        loss += penalty
        grads = [g + pg for g, pg in zip(grads, pgrads)]
    return loss, grads


def squared_sample_grads(model: Model, batch_x, dlogits: np.ndarray) -> list:
    """``sum_i g_i**2`` where ``g_i`` is sample ``i``'s gradient given its logit gradient row."""
    x = as_matrix(batch_x)
    inputs, _ = _relu_pass(model, x)
    out = []
    for a, d in zip(inputs, _deltas(model, inputs, dlogits)):
        out.append((a * a).T @ (d * d))
        out.append((d * d).sum(axis=0))
    return out


def predict_proba(model: Model, batch_x) -> np.ndarray:
    _, logits = _relu_pass(model, as_matrix(batch_x))
    return _softmax(logits)


def sgd_step(model: Model, grads, learning_rate: float) -> Model:
    if learning_rate < 0:
        raise DomainError("learning rate must be positive")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient at step {model.step_count}")
    params = [p - learning_rate * g for p, g in zip(model.params(), grads)]
    return model.with_params(params, model.step_count + 1)


def train_pass(model: Model, x, y, learning_rate: float, batch_size: int, stream: RngStream,
               regularizer=None, passes: int = 1, penalty_update: str = "proximal"):
    """Shuffled minibatch SGD over ``(x, y)``; returns the model and the mean batch loss.

    With ``penalty_update="explicit"`` the regularizer's gradient joins the
    SGD step. ``"proximal"`` takes the SGD step on the data loss and then
    applies ``regularizer.prox``, the exact minimizer of the quadratic
    penalty plus the proximity term; it stays stable for any ``lr * lam``.
    """
    if penalty_update not in ("proximal", "explicit"):
        raise ConfigError(f"unknown penalty update {penalty_update!r}")
    x = as_matrix(x)
    y = np.asarray(y)
    rng = stream.generator()
    proximal = regularizer is not None and penalty_update == "proximal"
    losses = []
    for _ in range(passes):
        order = rng.permutation(x.shape[0])
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            loss, grads = loss_and_grads(model, x[idx], y[idx], None if proximal else regularizer)
            if proximal:
                loss += regularizer.penalty(model.params())[0]
            if not np.isfinite(loss):
                raise NumericError(f"non-finite loss at step {model.step_count}")
            model = sgd_step(model, grads, learning_rate)
            if proximal:
                model = model.with_params(regularizer.prox(model.params(), learning_rate))
            losses.append(loss)
    return model, float(np.mean(losses)) if losses else float("nan")


def evaluate(model: Model, dataset) -> float:
    """Argmax accuracy; logit ties resolve to the lowest class index."""
    y = np.asarray(dataset.labels)
    if y.size == 0:
        raise DomainError("cannot evaluate on an empty dataset")
    logits = forward(model, dataset.features, activation="relu").logits
    return float(np.mean(np.argmax(logits, axis=1) == y))


def model_to_dict(model: Model) -> dict:
    cfg = model.config
    flat = np.concatenate([p.ravel() for p in model.params()])
    return {
        "format": "seqcl-model",
        "version": 1,
        "config": {
            "input_dim": cfg.input_dim,
            "hidden_dims": list(cfg.hidden_dims),
            "num_classes": cfg.num_classes,
            "activation": cfg.activation,
            "aid_p1": cfg.aid_p1,
            "aid_p2": cfg.aid_p2,
            "aid_convention": cfg.aid_convention,
        },
        "step_count": model.step_count,
        "params": [float(v) for v in flat],
    }


def model_from_dict(payload: dict) -> Model:
    if payload.get("format") != "seqcl-model" or payload.get("version") != 1:
        raise ConfigError("not a version-1 seqcl model checkpoint")
    cfg = ModelConfig(**payload["config"])
    flat = np.asarray(payload["params"], dtype=np.float64)
    dims = cfg.dims
    expected = sum(i * o + o for i, o in zip(dims[:-1], dims[1:]))
    if flat.size != expected:
        raise ShapeError(f"checkpoint holds {flat.size} values, config needs {expected}")
    layers, pos = [], 0
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        w = flat[pos:pos + fan_in * fan_out].reshape(fan_in, fan_out)
        pos += fan_in * fan_out
        b = flat[pos:pos + fan_out].copy()
        pos += fan_out
        layers.append((w.copy(), b))
    return Model(cfg, tuple(layers), int(payload.get("step_count", 0)))


def replace_config(model: Model, **changes) -> Model:
    return Model(replace(model.config, **changes), model.layers, model.step_count)
