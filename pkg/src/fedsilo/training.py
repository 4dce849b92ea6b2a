"""Minibatch SGD over a single dataset.

Shuffling rule: the permutation for epoch ``e`` is drawn from
``numpy.random.default_rng([shuffle_seed, epoch_offset + e])``. Federated
local training passes ``epoch_offset = (cycle - 1) * local_epochs`` so a
single silo trained for T cycles of E epochs sees exactly the same batches
as plain training for T*E epochs with the same ``shuffle_seed``.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .nn import Model, backward, forward, l2_penalty, PROB_EPS


@dataclass(frozen=True)
class TrainSpec:
    epochs: int = 1
    batch_size: int = 100
    learning_rate: float = 0.01
    lam: float = 0.01
    shuffle_seed: int = 0
    freeze_mask: tuple[bool, ...] | None = None
    epoch_offset: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")


def derive_seed(master_seed: int, *keys) -> int:
    """Stable 63-bit seed from a master seed and any number of keys.

    Uses sha256 rather than ``hash()`` so results do not depend on
    PYTHONHASHSEED or on the process.
    """
    text = ":".join([str(int(master_seed))] + [str(k) for k in keys])
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little") >> 1


def epoch_permutation(n: int, shuffle_seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([shuffle_seed, epoch]).permutation(n)


def _batch_loss(p, y, reg):
    p = np.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p)) + reg)


def train_with_loss(model: Model, X, y, spec: TrainSpec) -> tuple[Model, float]:
    """Like :func:`train` but also return the mean minibatch loss seen.

    The loss is NaN when no batch was processed.
    """
    y = np.asarray(y, dtype=np.float64).ravel()
    n = len(y)
    if n == 0 or X.shape[0] != n:
        raise ValueError("training data must be non-empty with one label per row")
    if X.shape[1] != model.input_dim:
        raise ValueError(f"features have {X.shape[1]} columns, model expects "
                         f"{model.input_dim}")
    mask = spec.freeze_mask
    if mask is None:
        mask = (False,) * model.n_layers
    if len(mask) != model.n_layers:
        raise ValueError("freeze_mask length must equal the number of layers")
    trainable = [not m for m in mask]

    out = model.copy()
    if spec.epochs == 0 or not any(trainable):
        return out, float("nan")
    weights = [l.weights for l in out.layers]
    biases = [l.biases for l in out.layers]
    lr = spec.learning_rate
    losses = []

    for e in range(spec.epochs):
        if spec.shuffle:
            order = epoch_permutation(n, spec.shuffle_seed, spec.epoch_offset + e)
        else:
            order = np.arange(n)
        for start in range(0, n, spec.batch_size):
            idx = order[start:start + spec.batch_size]
            xb = np.asarray(X[idx], dtype=np.float64)
            yb = y[idx]
            probs, cache = forward(out, xb)
            reg = spec.lam * l2_penalty(out) if spec.lam else 0.0
            losses.append(_batch_loss(probs, yb, reg))
            grads = backward(out, cache, yb, spec.lam, trainable=trainable)
            for i, t in enumerate(trainable):
                if t:
                    weights[i] -= lr * grads.weights[i]
                    biases[i] -= lr * grads.biases[i]
    return out, float(np.mean(losses))


def train(model: Model, X, y, spec: TrainSpec) -> Model:
    """Run ``spec.epochs`` passes of minibatch SGD and return a new model.

    The input model is not modified. Layers flagged in ``spec.freeze_mask``
    come back bit-identical. The final partial batch is always used.
    """
    return train_with_loss(model, X, y, spec)[0]


def pooled_key(silo_ids: Sequence[str]) -> str:
    """Seed key for a pool of silos; for a single silo this is its own id."""
    return "+".join(sorted(str(s) for s in silo_ids))


def train_centralized(silos, model: Model, spec: TrainSpec) -> Model:
    """Concatenate every silo's training split (ascending silo id) and train."""
    if len(silos) == 0:
        raise ValueError("need at least one silo")
    ordered = sorted(silos, key=lambda s: s.silo_id)
    X = np.concatenate([s.train_features() for s in ordered])
    y = np.concatenate([s.train_labels() for s in ordered])
    return train(model, X, y, spec)
