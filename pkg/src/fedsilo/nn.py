"""Dense feed-forward network used by every training regime.

A :class:`Model` is a plain value: an ordered tuple of :class:`LayerParams`.
Hidden layers use ReLU, the output layer is a single sigmoid unit. All
arithmetic is float64.
"""

from __future__ import annotations

import hashlib
import io
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

RELU = "relu"
SIGMOID = "sigmoid"
PROB_EPS = 1e-12

MAGIC = b"FADL1"
_ACTIVATION_TAGS = {RELU: 0, SIGMOID: 1}
_TAG_ACTIVATIONS = {v: k for k, v in _ACTIVATION_TAGS.items()}


class ShapeError(ValueError):
    """Input dimensions do not match the model."""


@dataclass(frozen=True)
class LayerParams:
    weights: np.ndarray  # (in_dim, out_dim)
    biases: np.ndarray  # (out_dim,)
    activation: str

    def __post_init__(self):
        if self.weights.ndim != 2 or self.biases.ndim != 1:
            raise ValueError("weights must be 2-D and biases 1-D")
        if self.weights.shape[1] != self.biases.shape[0]:
            raise ValueError(
                f"weights have {self.weights.shape[1]} columns but biases "
                f"have length {self.biases.shape[0]}"
            )
        if self.activation not in _ACTIVATION_TAGS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def in_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[1]


@dataclass(frozen=True)
class Model:
    layers: tuple[LayerParams, ...]

    def __post_init__(self):
        if not self.layers:
            raise ValueError("a model needs at least one layer")
        for prev, cur in zip(self.layers, self.layers[1:]):
            if cur.in_dim != prev.out_dim:
                raise ValueError(
                    f"layer input dim {cur.in_dim} does not match previous "
                    f"output dim {prev.out_dim}"
                )
        if self.layers[-1].out_dim != 1:
            raise ValueError("final layer must have a single output unit")

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def layer_dims(self) -> list[int]:
        return [self.input_dim] + [layer.out_dim for layer in self.layers]

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def copy(self) -> "Model":
        return Model(tuple(
            LayerParams(l.weights.copy(), l.biases.copy(), l.activation)
            for l in self.layers
        ))

    def same_shape(self, other: "Model") -> bool:
        return self.layer_dims == other.layer_dims and all(
            a.activation == b.activation for a, b in zip(self.layers, other.layers)
        )

    def equals(self, other: "Model") -> bool:
        """Bit-level equality of every parameter."""
        return self.same_shape(other) and all(
            np.array_equal(a.weights, b.weights) and np.array_equal(a.biases, b.biases)
            for a, b in zip(self.layers, other.layers)
        )

    def to_bytes(self) -> bytes:
        return dumps_model(self)

    def checksum(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


@dataclass(frozen=True)
class Gradients:
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]


@dataclass(frozen=True)
class ForwardCache:
    inputs: np.ndarray
    pre: tuple[np.ndarray, ...]
    post: tuple[np.ndarray, ...]

    @property
    def batch_size(self) -> int:
        return self.inputs.shape[0]


def init_model(layer_dims: Sequence[int], seed: int) -> Model:
    """Glorot-uniform weights, zero biases, fully determined by ``seed``."""
    dims = list(layer_dims)
    if len(dims) < 2:
        raise ValueError("layer_dims needs at least an input and an output size")
    if any(int(d) < 1 for d in dims):
        raise ValueError(f"all layer dims must be >= 1, got {dims}")
    if dims[-1] != 1:
        raise ValueError("output dim must be 1 for binary classification")
    rng = np.random.default_rng(seed)
    layers = []
    for i, (n_in, n_out) in enumerate(zip(dims[:-1], dims[1:])):
        limit = np.sqrt(6.0 / (n_in + n_out))
        w = rng.uniform(-limit, limit, size=(n_in, n_out))
        act = SIGMOID if i == len(dims) - 2 else RELU
        layers.append(LayerParams(w, np.zeros(n_out), act))
    return Model(tuple(layers))


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _activate(z, activation):
    if activation == RELU:
        return np.maximum(z, 0.0)
    return sigmoid(z)


def forward(model: Model, x) -> tuple[np.ndarray, ForwardCache]:
    """Return per-row probabilities and the activations needed by ``backward``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ShapeError(
            f"expected input of shape (n, {model.input_dim}), got {x.shape}"
        )
    pre, post = [], []
    a = x
    for layer in model.layers:
        z = a @ layer.weights + layer.biases
        a = _activate(z, layer.activation)
        pre.append(z)
        post.append(a)
    return a[:, 0], ForwardCache(x, tuple(pre), tuple(post))


def predict_proba(model: Model, x) -> np.ndarray:
    return forward(model, x)[0]


def l2_penalty(model: Model) -> float:
    return float(sum(np.sum(l.weights * l.weights) for l in model.layers))


def loss(probs, labels, model: Model | None = None, lam: float = 0.0) -> float:
    """Mean binary cross-entropy plus ``lam`` times the sum of squared weights.

    Biases are not penalized. Probabilities are clamped to
    ``[PROB_EPS, 1 - PROB_EPS]`` before taking logs.
    """
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if p.shape != y.shape:
        raise ValueError(f"probs {p.shape} and labels {y.shape} differ in length")
    if lam < 0:
        raise ValueError("lam must be >= 0")
    p = np.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    data = -np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p)) if p.size else 0.0
    reg = lam * l2_penalty(model) if (model is not None and lam) else 0.0
    return float(data + reg)


def backward(model: Model, cache: ForwardCache, labels, lam: float = 0.0,
             trainable: Sequence[bool] | None = None) -> Gradients:
    """Exact gradients of :func:`loss` for the batch held in ``cache``.

    ``trainable`` optionally marks layers whose gradients are needed; the
    rest get zero arrays and backpropagation stops below the lowest
    trainable layer.
    """
    y = np.asarray(labels, dtype=np.float64)
    n = cache.batch_size
    if y.shape != (n,) or len(cache.pre) != model.n_layers:
        raise ValueError("cache does not belong to this model/label batch")
    for layer, z in zip(model.layers, cache.pre):
        if z.shape != (n, layer.out_dim):
            raise ValueError("stale forward cache: shapes do not match model")
    if trainable is None:
        trainable = [True] * model.n_layers
    lowest = next((i for i, t in enumerate(trainable) if t), model.n_layers)

    gw = [None] * model.n_layers
    gb = [None] * model.n_layers
    # sigmoid + cross-entropy collapses to (p - y) at the output pre-activation
    delta = (cache.post[-1] - y[:, None]) / n
    for i in range(model.n_layers - 1, -1, -1):
        layer = model.layers[i]
        if trainable[i]:
            a_prev = cache.inputs if i == 0 else cache.post[i - 1]
            gw[i] = a_prev.T @ delta + 2.0 * lam * layer.weights
            gb[i] = delta.sum(axis=0)
        else:
            gw[i] = np.zeros_like(layer.weights)
            gb[i] = np.zeros_like(layer.biases)
        if i > lowest:
            delta = (delta @ layer.weights.T) * (cache.pre[i - 1] > 0)
        elif i > 0:
            # nothing trainable further down
            for j in range(i):
                gw[j] = np.zeros_like(model.layers[j].weights)
                gb[j] = np.zeros_like(model.layers[j].biases)
            break
    return Gradients(tuple(gw), tuple(gb))


def axpy_model(models: Sequence[Model], coefficients: Sequence[float]) -> Model:
    """Parameter-wise linear combination ``sum(c_i * model_i)``.

    Terms are accumulated in list order; inputs are left untouched.
    """
    if len(models) == 0 or len(models) != len(coefficients):
        raise ValueError("models and coefficients must be non-empty and equal length")
    first = models[0]
    for m in models[1:]:
        if not first.same_shape(m):
            raise ValueError("all models must share the same shape")
    layers = []
    for li, base in enumerate(first.layers):
        w = coefficients[0] * base.weights
        b = coefficients[0] * base.biases
        for m, c in zip(models[1:], coefficients[1:]):
            w += c * m.layers[li].weights
            b += c * m.layers[li].biases
        layers.append(LayerParams(w, b, base.activation))
    return Model(tuple(layers))


# -- persistence ------------------------------------------------------------
#
# Layout (all integers little-endian unsigned 32-bit):
#   b"FADL1" | n_layers
#   per layer: in_dim | out_dim | activation tag (u8: 0 relu, 1 sigmoid)
#              | weights, in_dim*out_dim float64 LE, row-major
#              | biases, out_dim float64 LE


def dumps_model(model: Model) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", model.n_layers))
    for layer in model.layers:
        buf.write(struct.pack("<IIB", layer.in_dim, layer.out_dim,
                              _ACTIVATION_TAGS[layer.activation]))
        buf.write(np.ascontiguousarray(layer.weights, dtype="<f8").tobytes())
        buf.write(np.ascontiguousarray(layer.biases, dtype="<f8").tobytes())
    return buf.getvalue()


def loads_model(data: bytes) -> Model:
    if data[:len(MAGIC)] != MAGIC:
        raise ValueError("not a model file (bad magic)")
    off = len(MAGIC)
    (n_layers,) = struct.unpack_from("<I", data, off)
    off += 4
    layers = []
    for _ in range(n_layers):
        n_in, n_out, tag = struct.unpack_from("<IIB", data, off)
        off += 9
        w = np.frombuffer(data, dtype="<f8", count=n_in * n_out, offset=off)
        off += 8 * n_in * n_out
        b = np.frombuffer(data, dtype="<f8", count=n_out, offset=off)
        off += 8 * n_out
        if tag not in _TAG_ACTIVATIONS:
            raise ValueError(f"unknown activation tag {tag}")
        layers.append(LayerParams(w.reshape(n_in, n_out).astype(np.float64),
                                  b.astype(np.float64), _TAG_ACTIVATIONS[tag]))
    if off != len(data):
        raise ValueError(f"{len(data) - off} trailing bytes in model file")
    return Model(tuple(layers))


def save_model(model: Model, path) -> None:
    Path(path).write_bytes(dumps_model(model))


def load_model(path) -> Model:
    return loads_model(Path(path).read_bytes())
