"""Dense-network numerical core: MLP forward/backward, Adam, Polyak averaging.

Everything is plain numpy in 64-bit by default. Networks are lists of
(weight, bias) layers with an activation tag per layer; gradients are
computed by hand and are expected to match central finite differences
(the test suite enforces this).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class TrainingDiverged(RuntimeError):
    """Raised when a gradient or parameter stops being finite."""


_ACTIVATIONS = ("relu", "tanh", "linear")


def _apply_activation(tag: str, z: np.ndarray) -> np.ndarray:
    if tag == "relu":
        return np.maximum(z, 0.0)
    if tag == "tanh":
        return np.tanh(z)
    if tag == "linear":
        return z
    raise ValueError(f"unknown activation {tag!r}")


def _activation_grad(tag: str, z: np.ndarray, out: np.ndarray) -> np.ndarray:
    # derivative w.r.t. pre-activation z; `out` is the cached activation output
    if tag == "relu":
        return (z > 0.0).astype(z.dtype)
    if tag == "tanh":
        return 1.0 - out * out
    if tag == "linear":
        return np.ones_like(z)
    raise ValueError(f"unknown activation {tag!r}")


@dataclass
class DenseNet:
    """Fully connected network: weights[i] is (out, in), biases[i] is (out,)."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: list[str]

    @classmethod
    def create(
        cls,
        dims: list[int] | tuple[int, ...],
        rng: np.random.Generator,
        head: str = "linear",
        dtype: type = np.float64,
    ) -> "DenseNet":
        """Build a net with the given layer widths.

        Hidden layers use the rectifier; the head activation is `head`
        (linear or tanh). Weights and biases are drawn uniformly from
        +-1/sqrt(fan_in).
        """
        if len(dims) < 2:
            raise ValueError("need at least input and output dims")
        if head not in ("linear", "tanh"):
            raise ValueError(f"unsupported head activation {head!r}")
        weights, biases, acts = [], [], []
        n_layers = len(dims) - 1
        for i in range(n_layers):
            fan_in, fan_out = dims[i], dims[i + 1]
            bound = 1.0 / np.sqrt(fan_in)
            weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)).astype(dtype))
            biases.append(rng.uniform(-bound, bound, size=fan_out).astype(dtype))
            acts.append("relu" if i < n_layers - 1 else head)
        return cls(weights, biases, acts)

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    def params(self) -> list[np.ndarray]:
        out: list[np.ndarray] = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def clone(self) -> "DenseNet":
        return DenseNet(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            list(self.activations),
        )

    def validate_finite(self) -> None:
        for p in self.params():
            if not np.all(np.isfinite(p)):
                raise TrainingDiverged("non-finite network parameter")


def forward(net: DenseNet, x: np.ndarray) -> np.ndarray:
    """Evaluate the net on a single input vector or a (batch, in) matrix."""
    x = np.asarray(x, dtype=net.weights[0].dtype)
    single = x.ndim == 1
    h = x[None, :] if single else x
    if h.shape[1] != net.in_dim:
        raise ValueError(f"input dim {h.shape[1]} != expected {net.in_dim}")
    for w, b, act in zip(net.weights, net.biases, net.activations):
        h = _apply_activation(act, h @ w.T + b)
    return h[0] if single else h


def forward_cached(net: DenseNet, x: np.ndarray) -> tuple[np.ndarray, list]:
    """Forward pass that keeps per-layer inputs and outputs for backward()."""
    x = np.asarray(x, dtype=net.weights[0].dtype)
    single = x.ndim == 1
    h = x[None, :] if single else x
    if h.shape[1] != net.in_dim:
        raise ValueError(f"input dim {h.shape[1]} != expected {net.in_dim}")
    cache = []
    for w, b, act in zip(net.weights, net.biases, net.activations):
        z = h @ w.T + b
        out = _apply_activation(act, z)
        cache.append((h, z, out))
        h = out
    return (h[0] if single else h), cache


def backward(
    net: DenseNet, cache: list, grad_out: np.ndarray
) -> tuple[list[tuple[np.ndarray, np.ndarray]], np.ndarray]:
    """Backpropagate `grad_out` through a cached forward pass.

    Returns ([(dW, db) per layer], grad wrt the input). Gradients are summed
    over the batch; divide upstream by the batch size for means.
    """
    g = np.asarray(grad_out)
    single = g.ndim == 1
    if single:
        g = g[None, :]
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(net.weights)  # type: ignore
    for i in range(len(net.weights) - 1, -1, -1):
        h_in, z, out = cache[i]
        g = g * _activation_grad(net.activations[i], z, out)
        grads[i] = (g.T @ h_in, g.sum(axis=0))
        g = g @ net.weights[i]
    return grads, (g[0] if single else g)


@dataclass
class AdamState:
    """Per-parameter Adam moments for one list of tensors."""

    lr: float
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: list[np.ndarray], lr: float) -> "AdamState":
        return cls(
            lr=lr,
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
        )

    @classmethod
    def for_net(cls, net: DenseNet, lr: float) -> "AdamState":
        return cls.for_params(net.params(), lr)


def adam_step(state: AdamState, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
    """One Adam update with bias correction. Mutates params and state in place."""
    if len(params) != len(state.m) or len(grads) != len(params):
        raise ValueError("parameter/gradient count mismatch")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged("non-finite gradient in Adam step")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError("gradient shape mismatch")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def flatten_grads(layer_grads: list[tuple[np.ndarray, np.ndarray]]) -> list[np.ndarray]:
    """Turn backward()'s [(dW, db)] into the flat list matching net.params()."""
    out: list[np.ndarray] = []
    for dw, db in layer_grads:
        out.append(dw)
        out.append(db)
    return out


def polyak_update(target: DenseNet, online: DenseNet, tau: float) -> None:
    """target <- (1 - tau) * target + tau * online, elementwise, in place."""
    if not 0.0 < tau <= 1.0:
        raise ValueError("tau must be in (0, 1]")
    for pt, po in zip(target.params(), online.params()):
        if pt.shape != po.shape:
            raise ValueError("target/online shape mismatch")
        pt *= 1.0 - tau
        pt += tau * po


def named_parameters(net: DenseNet, prefix: str) -> dict[str, np.ndarray]:
    out = {}
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        out[f"{prefix}/layer{i}/W"] = w
        out[f"{prefix}/layer{i}/b"] = b
    return out


def save_checkpoint(path: str, tensors: dict[str, np.ndarray]) -> None:
    """Write named tensors to an .npz archive (shape and dtype preserved)."""
    np.savez(path, **tensors)


def load_checkpoint(path: str) -> dict[str, np.ndarray]:
    """Read back a checkpoint written by save_checkpoint; lossless round trip."""
    with np.load(path) as data:
        return {k: data[k].copy() for k in data.files}
