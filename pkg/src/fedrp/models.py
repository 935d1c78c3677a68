"""Flat-vector differentiable models: softmax regression and a small MLP.

Everything consumes and produces plain float64 numpy arrays so the ADMM
machinery only ever sees a parameter vector and its exact gradient. Layers
are packed (W.ravel(), b) in order; hidden activations are tanh (smooth,
so finite-difference checks are clean).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import rng

ARCH_LOGISTIC = "logistic-regression"
ARCH_MLP = "mlp"


class ModelError(ValueError):
    """Invalid spec or shape-mismatched arguments."""


@dataclass(frozen=True)
class ModelSpec:
    architecture: str
    input_dim: int
    num_classes: int
    hidden_dims: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if self.architecture not in (ARCH_LOGISTIC, ARCH_MLP):
            raise ModelError(f"unknown architecture {self.architecture!r}")
        if self.architecture == ARCH_LOGISTIC and self.hidden_dims:
            raise ModelError("logistic-regression takes no hidden layers")
        if self.architecture == ARCH_MLP and not self.hidden_dims:
            raise ModelError("mlp requires at least one hidden layer")
        if self.input_dim < 1 or self.num_classes < 2:
            raise ModelError("need input_dim >= 1 and num_classes >= 2")
        if any(h < 1 for h in self.hidden_dims):
            raise ModelError("hidden dims must be positive")
        object.__setattr__(self, "hidden_dims", tuple(self.hidden_dims))

    @property
    def layer_dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_dims, self.num_classes)

    @property
    def num_params(self) -> int:
        dims = self.layer_dims
        return sum(dims[i] * dims[i + 1] + dims[i + 1] for i in range(len(dims) - 1))


@dataclass
class Batch:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or self.labels.ndim != 1:
            raise ModelError("inputs must be 2-D and labels 1-D")
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ModelError(
                f"batch size mismatch: {self.inputs.shape[0]} inputs, {self.labels.shape[0]} labels"
            )

    def __len__(self) -> int:
        return self.labels.shape[0]


def _check_params(spec: ModelSpec, w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (spec.num_params,):
        raise ModelError(
            f"parameter vector has length {w.shape}, model needs {spec.num_params}"
        )
    return w


def unpack(spec: ModelSpec, w: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """(W, b) views per layer; writes through to the flat vector."""
    w = _check_params(spec, w)
    dims = spec.layer_dims
    layers, off = [], 0
    for i in range(len(dims) - 1):
        fan_in, fan_out = dims[i], dims[i + 1]
        mat = w[off : off + fan_in * fan_out].reshape(fan_in, fan_out)
        off += fan_in * fan_out
        bias = w[off : off + fan_out]
        off += fan_out
        layers.append((mat, bias))
    return layers


def pack(spec: ModelSpec, layers: Sequence[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    parts = []
    for mat, bias in layers:
        parts.append(np.asarray(mat, dtype=np.float64).ravel())
        parts.append(np.asarray(bias, dtype=np.float64).ravel())
    w = np.concatenate(parts)
    return _check_params(spec, w)


def init_params(spec: ModelSpec, init_seed: int) -> np.ndarray:
    """Fan-in-scaled zero-mean weights, zero biases; bit-deterministic per seed."""
    dims = spec.layer_dims
    w = np.zeros(spec.num_params)
    layers = unpack(spec, w)
    for i, (mat, bias) in enumerate(layers):
        fan_in = dims[i]
        key = rng.derive_seed(init_seed, "layer", i)
        mat[...] = rng.normals(key, mat.size).reshape(mat.shape) / np.sqrt(fan_in)
        bias[...] = 0.0
    return w


def _forward(spec: ModelSpec, w: np.ndarray, inputs: np.ndarray):
    """Returns (activations per layer, logits). activations[0] is the input."""
    layers = unpack(spec, w)
    acts = [inputs]
    h = inputs
    for mat, bias in layers[:-1]:
        h = np.tanh(h @ mat + bias)
        acts.append(h)
    mat, bias = layers[-1]
    return acts, h @ mat + bias


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def loss(spec: ModelSpec, w: np.ndarray, batch: Batch) -> float:
    """Mean cross-entropy of softmax outputs over the batch."""
    w = _check_params(spec, w)
    if batch.inputs.shape[1] != spec.input_dim:
        raise ModelError(
            f"batch has input dim {batch.inputs.shape[1]}, model needs {spec.input_dim}"
        )
    _, logits = _forward(spec, w, batch.inputs)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    nll = log_z - shifted[np.arange(len(batch)), batch.labels]
    return float(nll.mean())


def _backward(spec: ModelSpec, w: np.ndarray, acts, delta: np.ndarray) -> np.ndarray:
    """Backprop given output delta = dLoss/dlogits (already batch-averaged)."""
    layers = unpack(spec, w)
    grad = np.zeros_like(w)
    grad_layers = unpack(spec, grad)
    for i in range(len(layers) - 1, -1, -1):
        mat, _ = layers[i]
        g_mat, g_bias = grad_layers[i]
        g_mat[...] = acts[i].T @ delta
        g_bias[...] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ mat.T) * (1.0 - acts[i] ** 2)  # tanh'
    return grad


def loss_and_gradient(spec: ModelSpec, w: np.ndarray, batch: Batch) -> tuple[float, np.ndarray]:
    """One fused forward/backward pass; gradient is exact."""
    w = _check_params(spec, w)
    if batch.inputs.shape[1] != spec.input_dim:
        raise ModelError(
            f"batch has input dim {batch.inputs.shape[1]}, model needs {spec.input_dim}"
        )
    acts, logits = _forward(spec, w, batch.inputs)
    probs = _softmax(logits)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    nll = log_z - shifted[np.arange(len(batch)), batch.labels]
    delta = probs.copy()
    delta[np.arange(len(batch)), batch.labels] -= 1.0
    delta /= len(batch)
    return float(nll.mean()), _backward(spec, w, acts, delta)


def gradient(spec: ModelSpec, w: np.ndarray, batch: Batch) -> np.ndarray:
    return loss_and_gradient(spec, w, batch)[1]


def gradient_soft_targets(
    spec: ModelSpec, w: np.ndarray, inputs: np.ndarray, target_probs: np.ndarray
) -> np.ndarray:
    """Gradient of cross-entropy against a soft target distribution.

    Used by the inversion attack, which optimizes a label distribution
    jointly with the input.
    """
    w = _check_params(spec, w)
    inputs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    target_probs = np.atleast_2d(np.asarray(target_probs, dtype=np.float64))
    acts, logits = _forward(spec, w, inputs)
    delta = (_softmax(logits) - target_probs) / inputs.shape[0]
    return _backward(spec, w, acts, delta)


def predict(spec: ModelSpec, w: np.ndarray, inputs: np.ndarray) -> np.ndarray:
    _, logits = _forward(spec, _check_params(spec, w), np.asarray(inputs, dtype=np.float64))
    return logits.argmax(axis=1)


def evaluate(spec: ModelSpec, w: np.ndarray, test_batches: Sequence[Batch]) -> float:
    """Fraction of argmax-correct predictions over all batches."""
    total = 0
    correct = 0
    for batch in test_batches:
        pred = predict(spec, w, batch.inputs)
        correct += int((pred == batch.labels).sum())
        total += len(batch)
    if total == 0:
        raise ModelError("cannot evaluate on an empty test set")
    return correct / total
