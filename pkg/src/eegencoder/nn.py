"""Activation, normalization, linear and loss primitives used by the model."""

from __future__ import annotations

import numpy as np

from .tensor import (
    ContractError,
    DimensionError,
    Tensor,
    elu,
    exp,
    log,
    matmul,
    sigmoid,
    relu,
    tmean,
    tsum,
    transpose,
)

__all__ = [
    "LinearLayer",
    "RmsNormLayer",
    "SwigluFeedForward",
    "ReluFeedForward",
    "elu",
    "rms_norm",
    "swiglu",
    "cross_entropy_smoothed",
    "xavier_uniform",
]


def xavier_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class LinearLayer:
    """Affine map x -> x @ W.T + b with a weight-decay group tag.

    ``decay_group`` is fixed at construction: only layers tagged
    ``"mlp_decayed"`` receive decoupled weight decay during optimization.
    """

    def __init__(
        self,
        in_dim: int,
        out_dim: int,
        rng: np.random.Generator,
        decay_group: str = "undecayed",
        init_scale: float = 1.0,
    ):
        if decay_group not in ("mlp_decayed", "undecayed"):
            raise ContractError(f"unknown decay group {decay_group!r}")
        self.weight = Tensor(
            init_scale * xavier_uniform(rng, (out_dim, in_dim), in_dim, out_dim), requires_grad=True
        )
        self.bias = Tensor(np.zeros(out_dim), requires_grad=True)
        self.decay_group = decay_group

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise DimensionError(f"linear layer expects last dim {self.in_dim}, got input shape {x.shape}")
        return matmul(x, transpose(self.weight)) + self.bias

    def named_parameters(self, prefix: str = ""):
        return [(prefix + "weight", self.weight), (prefix + "bias", self.bias)]


class RmsNormLayer:
    """Root-mean-square normalization over the last dimension, with learnable gain."""

    def __init__(self, dim: int, eps: float = 1e-8):
        if eps <= 0:
            raise ContractError(f"rms_norm epsilon must be positive, got {eps}")
        self.gain = Tensor(np.ones(dim), requires_grad=True)
        self.eps = float(eps)

    def __call__(self, x: Tensor) -> Tensor:
        return rms_norm(x, self)

    def named_parameters(self, prefix: str = ""):
        return [(prefix + "gain", self.gain)]


def rms_norm(x: Tensor, layer: RmsNormLayer) -> Tensor:
    """gain * x / sqrt(mean(x^2) + eps), mean taken over the last dim only."""
    if x.shape[-1] != layer.gain.shape[0]:
        raise DimensionError(f"rms_norm expects last dim {layer.gain.shape[0]}, got input shape {x.shape}")
    ms = tmean(x * x, axis=-1, keepdims=True)
    return x * ((ms + layer.eps) ** -0.5) * layer.gain


def swiglu(x: Tensor, layer_w: LinearLayer, layer_v: LinearLayer, beta: float = 1.0) -> Tensor:
    """Swish_beta(x W + b) * (x V + c), the gated feed-forward activation."""
    if layer_w.out_dim != layer_v.out_dim:
        raise DimensionError(f"swiglu gate widths differ: {layer_w.out_dim} vs {layer_v.out_dim}")
    a = layer_w(x)
    swish = a * sigmoid(beta * a)
    return swish * layer_v(x)


class SwigluFeedForward:
    """SwiGLU gate of width ``hidden`` projected back to ``d_model``."""

    def __init__(self, d_model: int, rng: np.random.Generator, hidden: int | None = None, beta: float = 1.0):
        hidden = 2 * d_model if hidden is None else hidden
        self.gate = LinearLayer(d_model, hidden, rng)
        self.value = LinearLayer(d_model, hidden, rng)
        self.out = LinearLayer(hidden, d_model, rng)
        self.beta = float(beta)

    def __call__(self, x: Tensor) -> Tensor:
        return self.out(swiglu(x, self.gate, self.value, self.beta))

    def named_parameters(self, prefix: str = ""):
        return (
            self.gate.named_parameters(prefix + "gate.")
            + self.value.named_parameters(prefix + "value.")
            + self.out.named_parameters(prefix + "out.")
        )


class ReluFeedForward:
    """Classic two-layer ReLU feed-forward (the vanilla-transformer variant)."""

    def __init__(self, d_model: int, rng: np.random.Generator, hidden: int | None = None):
        hidden = 4 * d_model if hidden is None else hidden
        self.lin1 = LinearLayer(d_model, hidden, rng)
        self.lin2 = LinearLayer(hidden, d_model, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.lin2(relu(self.lin1(x)))

    def named_parameters(self, prefix: str = ""):
        return self.lin1.named_parameters(prefix + "lin1.") + self.lin2.named_parameters(prefix + "lin2.")


def cross_entropy_smoothed(logits: Tensor, labels, smoothing: float) -> Tensor:
    """Mean batch cross-entropy against label-smoothed targets.

    Targets are q = (1-s) * onehot + s/K; the loss is -sum_k q_k log p_k
    averaged over the batch, with p = softmax(logits).
    """
    if not 0.0 <= smoothing < 1.0:
        raise ContractError(f"smoothing must lie in [0, 1), got {smoothing}")
    if logits.ndim != 2:
        raise DimensionError(f"logits must be (batch, classes), got shape {logits.shape}")
    labels = np.asarray(labels)
    B, K = logits.shape
    if labels.shape != (B,):
        raise ContractError(f"labels must have shape ({B},), got {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise ContractError(f"labels must lie in [0, {K}), got range [{labels.min()}, {labels.max()}]")

    q = np.full((B, K), smoothing / K)
    q[np.arange(B), labels] += 1.0 - smoothing

    shift = logits.data.max(axis=1, keepdims=True)  # constant; shifts cancel in log-softmax
    z = logits - Tensor(shift)
    log_p = z - log(tsum(exp(z), axis=1, keepdims=True))
    return -tsum(Tensor(q) * log_p) / B
