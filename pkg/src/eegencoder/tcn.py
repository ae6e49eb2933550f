"""Causal dilated temporal convolutional network: the local-feature pathway."""

from __future__ import annotations

import numpy as np

from .nn import RmsNormLayer, xavier_uniform
from .tensor import ContractError, DimensionError, Tensor, elu, matmul, pad, transpose


def causal_conv1d(x: Tensor, w: Tensor, dilation: int = 1) -> Tensor:
    """Dilated 1-D convolution over (B, T, d_in) with strict left padding.

    ``w`` has shape (d_out, d_in, k); tap k-1 reads the current timestep and
    earlier taps reach back by multiples of ``dilation``, so output t never
    sees input beyond t. Output length equals input length.
    """
    if x.ndim != 3 or w.ndim != 3:
        raise DimensionError(f"causal_conv1d needs (B,T,d) input and (out,in,k) kernel, got {x.shape}, {w.shape}")
    if x.shape[-1] != w.shape[1]:
        raise DimensionError(f"causal_conv1d channel mismatch: input {x.shape} vs kernel {w.shape}")
    t = x.shape[1]
    k = w.shape[2]
    left = (k - 1) * dilation
    xp = pad(x, ((0, 0), (left, 0), (0, 0)))
    out = None
    for u in range(k):
        tap = transpose(w[:, :, u])  # (d_in, d_out)
        term = matmul(xp[:, u * dilation : u * dilation + t, :], tap)
        out = term if out is None else out + term
    return out


class TcnBlock:
    """Two causal convolutions with per-timestep RMSNorm, ELU, and a residual."""

    def __init__(
        self,
        d_model: int,
        kernel: int,
        dilation: int,
        rng: np.random.Generator,
        elu_alpha: float = 1.0,
        rms_eps: float = 1e-8,
    ):
        fan = d_model * kernel
        self.conv1_w = Tensor(xavier_uniform(rng, (d_model, d_model, kernel), fan, fan), requires_grad=True)
        self.conv2_w = Tensor(xavier_uniform(rng, (d_model, d_model, kernel), fan, fan), requires_grad=True)
        self.norm1 = RmsNormLayer(d_model, eps=rms_eps)
        self.norm2 = RmsNormLayer(d_model, eps=rms_eps)
        self.residual_proj = None  # in/out widths always match here
        self.dilation = int(dilation)
        self.elu_alpha = float(elu_alpha)

    def __call__(self, x: Tensor) -> Tensor:
        h = elu(self.norm1(causal_conv1d(x, self.conv1_w, self.dilation)), self.elu_alpha)
        h = elu(self.norm2(causal_conv1d(h, self.conv2_w, self.dilation)), self.elu_alpha)
        return h + x

    def named_parameters(self, prefix: str = ""):
        return [
            (prefix + "conv1_w", self.conv1_w),
            (prefix + "conv2_w", self.conv2_w),
        ] + self.norm1.named_parameters(prefix + "norm1.") + self.norm2.named_parameters(prefix + "norm2.")


class TcnStack:
    """Residual blocks with dilations 1, 2, 4, ... doubling per block."""

    def __init__(
        self,
        d_model: int,
        n_blocks: int,
        kernel: int,
        rng: np.random.Generator,
        elu_alpha: float = 1.0,
        rms_eps: float = 1e-8,
    ):
        if n_blocks < 1:
            raise ContractError(f"need at least one TCN block, got {n_blocks}")
        self.kernel = int(kernel)
        self.blocks = [
            TcnBlock(d_model, kernel, 2**i, rng, elu_alpha=elu_alpha, rms_eps=rms_eps) for i in range(n_blocks)
        ]

    @property
    def receptive_field(self) -> int:
        return 1 + 2 * (self.kernel - 1) * (2 ** len(self.blocks) - 1)

    def __call__(self, x: Tensor) -> Tensor:
        return tcn_forward(x, self)

    def named_parameters(self, prefix: str = ""):
        params = []
        for i, blk in enumerate(self.blocks):
            params.extend(blk.named_parameters(f"{prefix}blocks.{i}."))
        return params


def tcn_forward(x: Tensor, stack: TcnStack) -> Tensor:
    for block in stack.blocks:
        x = block(x)
    return x
