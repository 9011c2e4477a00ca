"""Small dense networks in float64 numpy with hand-written gradients.

Everything downstream needs exact, reproducible gradients (finite-difference
checks run at 1e-4 tolerance), so layers are plain matrices, forward passes
cache pre-activations, and backward passes return both parameter gradients
and input gradients. Optimizer state lives in explicit arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

ACTIVATIONS = ("identity", "relu", "tanh", "elu")


def _act_forward(name: str, z: np.ndarray) -> np.ndarray:
    if name == "identity":
        return z
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    if name == "elu":
        return np.where(z > 0.0, z, np.expm1(np.minimum(z, 0.0)))
    raise ValidationError(f"unknown activation {name!r}")


def _act_backward(name: str, z: np.ndarray, grad_h: np.ndarray) -> np.ndarray:
    if name == "identity":
        return grad_h
    if name == "relu":
        return grad_h * (z > 0.0)
    if name == "tanh":
        t = np.tanh(z)
        return grad_h * (1.0 - t * t)
    if name == "elu":
        return grad_h * np.where(z > 0.0, 1.0, np.exp(np.minimum(z, 0.0)))
    raise ValidationError(f"unknown activation {name!r}")


@dataclass
class Mlp:
    """Fully connected stack; weights[i] is (fan_in, fan_out)."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: tuple[str, ...]

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise ValidationError("weights, biases, and activations must align")
        for name in self.activations:
            if name not in ACTIVATIONS:
                raise ValidationError(f"unknown activation {name!r}")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    def params(self) -> list[np.ndarray]:
        out: list[np.ndarray] = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def copy(self) -> "Mlp":
        return Mlp(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.activations,
        )


def init_mlp(
    layer_dims: tuple[int, ...],
    activations: tuple[str, ...],
    rng: np.random.Generator,
) -> Mlp:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init for weights and biases."""
    if len(layer_dims) < 2:
        raise ValidationError("need at least an input and an output dimension")
    if len(activations) != len(layer_dims) - 1:
        raise ValidationError("one activation per layer required")
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(rng.uniform(-bound, bound, size=(fan_out,)))
    return Mlp(weights, biases, tuple(activations))


@dataclass
class ForwardCache:
    inputs: list[np.ndarray]  # input to each layer (B, fan_in)
    pre_acts: list[np.ndarray]  # z = x @ W + b per layer


def forward(mlp: Mlp, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """Batched forward pass; x is (B, in_dim)."""
    if x.ndim != 2 or x.shape[1] != mlp.in_dim:
        raise ValidationError(f"input must be (B, {mlp.in_dim}), got {x.shape}")
    inputs, pre_acts = [], []
    h = x
    for w, b, name in zip(mlp.weights, mlp.biases, mlp.activations):
        inputs.append(h)
        z = h @ w + b
        pre_acts.append(z)
        h = _act_forward(name, z)
    return h, ForwardCache(inputs=inputs, pre_acts=pre_acts)


def backward(
    mlp: Mlp, cache: ForwardCache, grad_out: np.ndarray
) -> tuple[list[np.ndarray], np.ndarray]:
    """Backprop grad_out (B, out_dim) to parameter grads and input grads.

    Parameter grads come back in the same order as ``Mlp.params()``:
    [dW0, db0, dW1, db1, ...].
    """
    grads: list[np.ndarray] = [None] * (2 * len(mlp.weights))  # type: ignore[list-item]
    g = grad_out
    for i in reversed(range(len(mlp.weights))):
        gz = _act_backward(mlp.activations[i], cache.pre_acts[i], g)
        grads[2 * i] = cache.inputs[i].T @ gz
        grads[2 * i + 1] = gz.sum(axis=0)
        g = gz @ mlp.weights[i].T
    return grads, g


@dataclass
class Adam:
    """Standard Adam with bias correction, updating parameters in place."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: list[np.ndarray], lr: float) -> "Adam":
        return cls(
            lr=lr,
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
        )

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        if len(params) != len(self.m) or len(grads) != len(self.m):
            raise ValidationError("parameter/gradient count does not match optimizer state")
        self.t += 1
        b1t = 1.0 - self.beta1**self.t
        b2t = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


def polyak_update(target: Mlp, online: Mlp, tau: float) -> None:
    """target := (1 - tau) * target + tau * online, in place."""
    if not (0.0 <= tau <= 1.0):
        raise ValidationError("tau must be in [0, 1]")
    for tp, op in zip(target.params(), online.params()):
        tp *= 1.0 - tau
        tp += tau * op


def hard_update(target: Mlp, online: Mlp) -> None:
    for tp, op in zip(target.params(), online.params()):
        tp[...] = op


def mlp_tensors(mlp: Mlp, prefix: str) -> dict[str, np.ndarray]:
    """Name the parameter arrays for checkpointing."""
    out: dict[str, np.ndarray] = {}
    for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        out[f"{prefix}.w{i}"] = w
        out[f"{prefix}.b{i}"] = b
    return out


def mlp_from_tensors(
    tensors: dict[str, np.ndarray], prefix: str, activations: tuple[str, ...]
) -> Mlp:
    """Rebuild an Mlp from named arrays produced by ``mlp_tensors``."""
    weights, biases = [], []
    for i in range(len(activations)):
        wk, bk = f"{prefix}.w{i}", f"{prefix}.b{i}"
        if wk not in tensors or bk not in tensors:
            raise ValidationError(f"checkpoint missing tensors for layer {i} of {prefix!r}")
        weights.append(np.asarray(tensors[wk], dtype=np.float64))
        biases.append(np.asarray(tensors[bk], dtype=np.float64))
    return Mlp(weights, biases, tuple(activations))
