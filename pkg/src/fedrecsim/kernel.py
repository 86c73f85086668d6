"""Minimal dense neural-network kernel: MLP forward/backward with hand-derived
gradients, plain SGD, and a central finite-difference gradient checker.

Everything is float64 numpy. Functions are pure: they never mutate their
inputs, so parameter snapshots can be shared across parallel client
simulations.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

# Probabilities are clamped to this range before any log.
PROB_EPS = 1e-7

ACTIVATIONS = ("linear", "relu", "sigmoid")


def sigmoid(z: np.ndarray | float) -> np.ndarray | float:
    """Numerically stable logistic function."""
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out if out.ndim else float(out)


def clamp_prob(p: np.ndarray) -> np.ndarray:
    return np.clip(p, PROB_EPS, 1.0 - PROB_EPS)


def softmax(z: np.ndarray) -> np.ndarray:
    """Row-wise softmax; output rows sum to 1."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "linear":
        return z
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "sigmoid":
        return sigmoid(z)
    raise ValueError(f"unknown activation {name!r}")


def _act_grad(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if name == "linear":
        return np.ones_like(z)
    if name == "relu":
        return (z > 0.0).astype(np.float64)
    if name == "sigmoid":
        return a * (1.0 - a)
    raise ValueError(f"unknown activation {name!r}")


@dataclass
class MLPParams:
    """Feedforward network parameters: weights[k] is (out_k, in_k), biases[k]
    is (out_k,), activations[k] applies after layer k."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: list[str]

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise ValueError("weights, biases and activations must align")
        for k, (w, b, act) in enumerate(zip(self.weights, self.biases, self.activations)):
            if act not in ACTIVATIONS:
                raise ValueError(f"layer {k}: unknown activation {act!r}")
            if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
                raise ValueError(f"layer {k}: weight/bias shapes do not match")
            if k > 0 and w.shape[1] != self.weights[k - 1].shape[0]:
                raise ValueError(f"layer {k}: input dim does not chain with layer {k - 1}")

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[0]

    def copy(self) -> "MLPParams":
        return MLPParams(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            list(self.activations),
        )


@dataclass
class MLPGrads:
    """Per-parameter gradients, shape-matched to an MLPParams."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @classmethod
    def zeros_like(cls, params: MLPParams) -> "MLPGrads":
        return cls([np.zeros_like(w) for w in params.weights],
                   [np.zeros_like(b) for b in params.biases])

    def scaled(self, factor: float) -> "MLPGrads":
        return MLPGrads([w * factor for w in self.weights], [b * factor for b in self.biases])

    def add_(self, other: "MLPGrads", factor: float = 1.0) -> None:
        for w, ow in zip(self.weights, other.weights):
            w += factor * ow
        for b, ob in zip(self.biases, other.biases):
            b += factor * ob


@dataclass
class ForwardCache:
    """Layer activations retained by mlp_forward for the backward pass."""

    x: np.ndarray                 # (B, in_dim) input
    pre: list[np.ndarray]         # per-layer pre-activation (B, out_k)
    post: list[np.ndarray]        # per-layer post-activation (B, out_k)
    squeeze: bool                 # True when the caller passed a 1-D vector


def mlp_forward(params: MLPParams, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """Run the network on a vector (in_dim,) or batch (B, in_dim).

    Returns the output (same leading shape as the input) and the cache
    needed by mlp_backward.
    """
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    h = np.atleast_2d(x)
    if h.shape[1] != params.input_dim:
        raise ValueError(f"input dim {h.shape[1]} != network input dim {params.input_dim}")
    pre, post = [], []
    for w, b, act in zip(params.weights, params.biases, params.activations):
        z = h @ w.T + b
        h = _act(act, z)
        pre.append(z)
        post.append(h)
    out = post[-1][0] if squeeze else post[-1]
    return out, ForwardCache(np.atleast_2d(x), pre, post, squeeze)


def mlp_backward(
    params: MLPParams, cache: ForwardCache, upstream: np.ndarray
) -> tuple[MLPGrads, np.ndarray]:
    """Backpropagate `upstream` (d loss / d output) through the cached forward.

    Returns exact analytic gradients for every weight and bias, plus the
    gradient w.r.t. the network input. Weight gradients are summed over the
    batch; the input gradient is per-row.
    """
    g = np.atleast_2d(np.asarray(upstream, dtype=np.float64))
    if len(cache.pre) != len(params.weights):
        raise ValueError("cache does not match network depth")
    if g.shape != cache.post[-1].shape:
        raise ValueError("upstream gradient shape does not match cached forward output")
    w_grads: list[np.ndarray] = [None] * len(params.weights)  # type: ignore[list-item]
    b_grads: list[np.ndarray] = [None] * len(params.weights)  # type: ignore[list-item]
    for k in range(len(params.weights) - 1, -1, -1):
        dz = g * _act_grad(params.activations[k], cache.pre[k], cache.post[k])
        below = cache.post[k - 1] if k > 0 else cache.x
        w_grads[k] = dz.T @ below
        b_grads[k] = dz.sum(axis=0)
        g = dz @ params.weights[k]
    input_grad = g[0] if cache.squeeze else g
    return MLPGrads(w_grads, b_grads), input_grad


def sgd_apply(params: MLPParams, grads: MLPGrads, lr: float) -> MLPParams:
    """Return new parameters with each entry decremented by lr * gradient."""
    for w, gw in zip(params.weights, grads.weights):
        if w.shape != gw.shape:
            raise ValueError("gradient shape does not match parameter shape")
    for b, gb in zip(params.biases, grads.biases):
        if b.shape != gb.shape:
            raise ValueError("gradient shape does not match parameter shape")
    return MLPParams(
        [w - lr * gw for w, gw in zip(params.weights, grads.weights)],
        [b - lr * gb for b, gb in zip(params.biases, grads.biases)],
        list(params.activations),
    )


def flatten_mlp(params: MLPParams) -> np.ndarray:
    """Concatenate all weights then biases into one flat vector."""
    parts = [w.ravel() for w in params.weights] + [b.ravel() for b in params.biases]
    return np.concatenate(parts)


def unflatten_mlp(vec: np.ndarray, template: MLPParams) -> MLPParams:
    weights, biases = [], []
    off = 0
    for w in template.weights:
        weights.append(vec[off:off + w.size].reshape(w.shape).copy())
        off += w.size
    for b in template.biases:
        biases.append(vec[off:off + b.size].copy())
        off += b.size
    if off != vec.size:
        raise ValueError("flat vector length does not match template")
    return MLPParams(weights, biases, list(template.activations))


def flatten_mlp_grads(grads: MLPGrads) -> np.ndarray:
    parts = [w.ravel() for w in grads.weights] + [b.ravel() for b in grads.biases]
    return np.concatenate(parts)


def finite_diff_check(
    theta: np.ndarray,
    loss_and_grad: Callable[[np.ndarray], tuple[float, np.ndarray]],
    step: float,
    indices: Sequence[int] | None = None,
) -> float:
    """Compare analytic gradients against central finite differences.

    `loss_and_grad(theta)` must return the loss and the analytic gradient at
    a flat parameter vector. Returns the max over checked coordinates of
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8). Checks every
    coordinate unless `indices` narrows the set.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    theta = np.asarray(theta, dtype=np.float64)
    loss0, grad = loss_and_grad(theta)
    if not np.isfinite(loss0) or not np.all(np.isfinite(grad)):
        raise ValueError("loss or gradient is not finite at the given parameters")
    idx = range(theta.size) if indices is None else indices
    max_err = 0.0
    for i in idx:
        bump = np.zeros_like(theta)
        bump[i] = step
        lp, _ = loss_and_grad(theta + bump)
        lm, _ = loss_and_grad(theta - bump)
        if not (np.isfinite(lp) and np.isfinite(lm)):
            raise ValueError(f"non-finite loss while perturbing coordinate {i}")
        numeric = (lp - lm) / (2.0 * step)
        denom = max(abs(grad[i]), abs(numeric), 1e-8)
        max_err = max(max_err, abs(grad[i] - numeric) / denom)
    return max_err
