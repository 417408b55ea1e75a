"""Dense feed-forward classifier in float64 numpy with exact backprop.

The model is a list of affine layers with an elementwise activation between
them; the last layer is the classification head, one row per class label
seen so far. The head grows as new tasks arrive: new rows are appended and
old rows are kept bitwise unchanged, so logits for old classes are
unaffected by the expansion itself.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, ShapeError, ValidationError
from .seeding import spawn_rng

# value and derivative (as a function of the preactivation)
ACTIVATIONS = {
    "relu": (lambda z: np.maximum(z, 0.0), lambda z: (z > 0.0).astype(np.float64)),
    "tanh": (np.tanh, lambda z: 1.0 - np.tanh(z) ** 2),
}


@dataclass
class Layer:
    weight: np.ndarray  # (fan_out, fan_in)
    bias: np.ndarray  # (fan_out,)


@dataclass
class ModelState:
    """Parameters plus the label carried by each head row."""

    layers: list[Layer]
    activation: str
    class_labels: list[int]

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(
                f"unknown activation {self.activation!r}, expected one of "
                f"{tuple(ACTIVATIONS)}"
            )
        head = self.layers[-1]
        if len(self.class_labels) != head.weight.shape[0]:
            raise ShapeError(
                f"{head.weight.shape[0]} head rows vs {len(self.class_labels)} labels"
            )

    @property
    def input_dim(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def num_classes(self) -> int:
        return len(self.class_labels)

    def label_index(self) -> dict[int, int]:
        return {label: i for i, label in enumerate(self.class_labels)}

    def clone(self) -> "ModelState":
        return ModelState(
            layers=[Layer(l.weight.copy(), l.bias.copy()) for l in self.layers],
            activation=self.activation,
            class_labels=list(self.class_labels),
        )

    def num_params(self) -> int:
        return sum(l.weight.size + l.bias.size for l in self.layers)


@dataclass
class OptimizerState:
    """SGD with momentum and coupled L2 weight decay.

    Update per parameter p with gradient g:
        g <- g + weight_decay * p
        v <- momentum * v + g
        p <- p - learning_rate * v
    """

    learning_rate: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    velocity: list[tuple[np.ndarray, np.ndarray]] | None = field(
        default=None, repr=False
    )

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ConfigurationError("learning_rate must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigurationError("weight_decay must be >= 0")


def _init_scale(fan_in: int, activation: str, is_head: bool) -> float:
    # He scaling for relu hidden layers, Glorot-style for tanh and the head.
    if not is_head and activation == "relu":
        return np.sqrt(2.0 / fan_in)
    return np.sqrt(1.0 / fan_in)


def init_model(
    layer_sizes: Sequence[int],
    activation: str,
    seed: int,
    class_labels: Sequence[int] | None = None,
) -> ModelState:
    """Build a model with the given layer sizes.

    Args:
        layer_sizes: (input_dim, hidden..., num_classes); at least 2 entries.
        activation: hidden nonlinearity, "relu" or "tanh".
        seed: seeds the weight draws; biases start at zero.
        class_labels: label per head row; defaults to 0..num_classes-1.
    """
    sizes = [int(s) for s in layer_sizes]
    if len(sizes) < 2:
        raise ConfigurationError("layer_sizes needs at least input and output")
    if any(s < 1 for s in sizes):
        raise ConfigurationError("layer sizes must be positive")
    if class_labels is None:
        class_labels = list(range(sizes[-1]))
    rng = spawn_rng("init", seed)
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        is_head = i == len(sizes) - 2
        scale = _init_scale(fan_in, activation, is_head)
        layers.append(
            Layer(
                weight=scale * rng.normal(size=(fan_out, fan_in)),
                bias=np.zeros(fan_out),
            )
        )
    return ModelState(layers=layers, activation=activation, class_labels=list(class_labels))


def expand_head(model: ModelState, new_labels: Sequence[int], seed: int) -> ModelState:
    """Return a copy with freshly initialized head rows for new labels.

    Old head rows and all other layers are bitwise identical to the input
    model, so old-class logits do not move.
    """
    new_labels = [int(l) for l in new_labels]
    if not new_labels:
        raise ValidationError("expand_head needs at least one new label")
    if len(set(new_labels)) != len(new_labels):
        raise ValidationError("new labels contain duplicates")
    overlap = set(new_labels) & set(model.class_labels)
    if overlap:
        raise ValidationError(f"labels already present: {sorted(overlap)}")
    out = model.clone()
    head = out.layers[-1]
    fan_in = head.weight.shape[1]
    rng = spawn_rng("expand", seed)
    fresh = _init_scale(fan_in, model.activation, True) * rng.normal(
        size=(len(new_labels), fan_in)
    )
    out.layers[-1] = Layer(
        weight=np.vstack([head.weight, fresh]),
        bias=np.concatenate([head.bias, np.zeros(len(new_labels))]),
    )
    out.class_labels = list(model.class_labels) + new_labels
    return out


def _check_input(model: ModelState, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ShapeError(f"input must be 2-D, got shape {X.shape}")
    if X.shape[1] != model.input_dim:
        raise ShapeError(
            f"input dim {X.shape[1]} does not match model dim {model.input_dim}"
        )
    if not np.all(np.isfinite(X)):
        raise ValidationError("input contains non-finite values")
    return X


def _forward_cached(model: ModelState, X: np.ndarray):
    """Forward pass keeping preactivations and activations for backprop."""
    act, _ = ACTIVATIONS[model.activation]
    acts = [X]
    pres = []
    out = X
    for layer in model.layers[:-1]:
        z = out @ layer.weight.T + layer.bias
        pres.append(z)
        out = act(z)
        acts.append(out)
    head = model.layers[-1]
    logits = out @ head.weight.T + head.bias
    return logits, pres, acts


def forward(model: ModelState, X: np.ndarray) -> np.ndarray:
    """Logits for a batch, shape (n, num_classes)."""
    X = _check_input(model, X)
    logits, _, _ = _forward_cached(model, X)
    return logits


def features(model: ModelState, X: np.ndarray) -> np.ndarray:
    """Penultimate-layer representation (the head's input)."""
    X = _check_input(model, X)
    _, _, acts = _forward_cached(model, X)
    return acts[-1]


def backprop(
    model: ModelState, X: np.ndarray, grad_logits: np.ndarray
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Gradients of a scalar loss given its gradient at the logits."""
    X = _check_input(model, X)
    _, pres, acts = _forward_cached(model, X)
    return _backprop_from(model, pres, acts, grad_logits)


def _backprop_from(model, pres, acts, grad_logits):
    _, dact = ACTIVATIONS[model.activation]
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(model.layers)
    delta = grad_logits
    for i in range(len(model.layers) - 1, -1, -1):
        grads[i] = (delta.T @ acts[i], delta.sum(axis=0))
        if i > 0:
            delta = (delta @ model.layers[i].weight) * dact(pres[i - 1])
    return grads


def sgd_step(
    model: ModelState,
    grads: list[tuple[np.ndarray, np.ndarray]],
    opt: OptimizerState,
) -> None:
    """Apply one momentum-SGD update in place."""
    if opt.velocity is None:
        opt.velocity = [
            (np.zeros_like(l.weight), np.zeros_like(l.bias)) for l in model.layers
        ]
    if len(opt.velocity) != len(model.layers):
        raise ShapeError("optimizer state does not match the model's layer count")
    for layer, (gw, gb), (vw, vb) in zip(model.layers, grads, opt.velocity):
        np.multiply(vw, opt.momentum, out=vw)
        vw += gw + opt.weight_decay * layer.weight
        np.multiply(vb, opt.momentum, out=vb)
        vb += gb + opt.weight_decay * layer.bias
        layer.weight -= opt.learning_rate * vw
        layer.bias -= opt.learning_rate * vb


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


CHECKPOINT_VERSION = 1


def save_model(model: ModelState, path: str | Path) -> None:
    """Write a lossless checkpoint (npz container)."""
    payload = {
        "version": np.array(CHECKPOINT_VERSION),
        "activation": np.array(model.activation),
        "class_labels": np.array(model.class_labels, dtype=np.int64),
        "n_layers": np.array(len(model.layers)),
    }
    for i, layer in enumerate(model.layers):
        payload[f"w{i}"] = layer.weight
        payload[f"b{i}"] = layer.bias
    np.savez(path, **payload)


def load_model(path: str | Path) -> ModelState:
    """Read a checkpoint written by save_model."""
    with np.load(path) as data:
        version = int(data["version"])
        if version != CHECKPOINT_VERSION:
            raise ValidationError(f"unsupported checkpoint version {version}")
        n = int(data["n_layers"])
        layers = [Layer(data[f"w{i}"].copy(), data[f"b{i}"].copy()) for i in range(n)]
        return ModelState(
            layers=layers,
            activation=str(data["activation"]),
            class_labels=[int(l) for l in data["class_labels"]],
        )
