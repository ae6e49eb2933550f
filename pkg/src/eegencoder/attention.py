"""Multi-head self-attention with relative position key biases and the
pre-norm transformer stack (plus the post-norm "vanilla" ablation variant)."""

from __future__ import annotations

import numpy as np

from .nn import LinearLayer, ReluFeedForward, RmsNormLayer, SwigluFeedForward
from .tensor import (
    ContractError,
    DimensionError,
    Tensor,
    embedding_lookup,
    matmul,
    reshape,
    softmax,
    transpose,
)

# Large negative additive mask: exactly zero after softmax at double precision,
# without the NaN hazards of a true -inf.
_MASK_VALUE = -1e30


class AttentionLayer:
    """Scaled dot-product self-attention over (B, T, d_model).

    Relative positions follow the key-bias scheme: the score between query i
    and key j gains q_i . a_{clip(j-i)} where ``a`` is a learned table over
    clipped signed distances. Distances beyond +/- k_clip share the edge rows.
    """

    def __init__(
        self,
        d_model: int,
        heads: int,
        rng: np.random.Generator,
        k_clip: int = 16,
        use_rel_pos: bool = True,
    ):
        if d_model % heads != 0:
            raise DimensionError(f"d_model {d_model} not divisible by {heads} heads")
        self.heads = heads
        self.d_head = d_model // heads
        self.q_proj = LinearLayer(d_model, d_model, rng)
        self.k_proj = LinearLayer(d_model, d_model, rng)
        self.v_proj = LinearLayer(d_model, d_model, rng)
        self.o_proj = LinearLayer(d_model, d_model, rng)
        self.k_clip = int(k_clip)
        if use_rel_pos:
            if self.k_clip < 1:
                raise ContractError(f"k_clip must be positive, got {k_clip}")
            self.rel_pos_k_table = Tensor(
                rng.normal(0.0, 0.02, size=(2 * self.k_clip + 1, self.d_head)), requires_grad=True
            )
        else:
            self.rel_pos_k_table = None

    def named_parameters(self, prefix: str = ""):
        params = (
            self.q_proj.named_parameters(prefix + "q_proj.")
            + self.k_proj.named_parameters(prefix + "k_proj.")
            + self.v_proj.named_parameters(prefix + "v_proj.")
            + self.o_proj.named_parameters(prefix + "o_proj.")
        )
        if self.rel_pos_k_table is not None:
            params.append((prefix + "rel_pos_k_table", self.rel_pos_k_table))
        return params


def rel_distance_indices(t: int, k_clip: int) -> np.ndarray:
    """Table row index for each (i, j) pair: clip(j - i, -k, k) + k."""
    offsets = np.arange(t)[None, :] - np.arange(t)[:, None]
    return np.clip(offsets, -k_clip, k_clip) + k_clip


def _split_heads(x: Tensor, heads: int, d_head: int) -> Tensor:
    b, t, _ = x.shape
    return transpose(reshape(x, (b, t, heads, d_head)), (0, 2, 1, 3))


def attend(x: Tensor, layer: AttentionLayer, mask: str = "causal") -> Tensor:
    """One attention pass; ``mask`` is "causal" (j <= i only) or "none"."""
    if mask not in ("causal", "none"):
        raise ContractError(f"mask must be 'causal' or 'none', got {mask!r}")
    b, t, d = x.shape
    q = _split_heads(layer.q_proj(x), layer.heads, layer.d_head)  # (B,h,T,dh)
    k = _split_heads(layer.k_proj(x), layer.heads, layer.d_head)
    v = _split_heads(layer.v_proj(x), layer.heads, layer.d_head)

    scores = matmul(q, transpose(k, (0, 1, 3, 2)))  # (B,h,T,T)
    if layer.rel_pos_k_table is not None:
        idx = rel_distance_indices(t, layer.k_clip)
        rel = embedding_lookup(layer.rel_pos_k_table, idx)  # (T,T,dh)
        # bias[b,h,i,j] = q[b,h,i,:] . rel[i,j,:], via a matmul batched over i
        bias = matmul(reshape(q, (b, layer.heads, t, 1, layer.d_head)), transpose(rel, (0, 2, 1)))
        scores = scores + reshape(bias, (b, layer.heads, t, t))
    scores = scores * (1.0 / np.sqrt(layer.d_head))

    if mask == "causal":
        causal = np.triu(np.full((t, t), _MASK_VALUE), k=1)
        scores = scores + Tensor(causal)

    weights = softmax(scores, axis=-1)
    ctx = matmul(weights, v)  # (B,h,T,dh)
    merged = reshape(transpose(ctx, (0, 2, 1, 3)), (b, t, d))
    return layer.o_proj(merged)


class TransformerBlock:
    """One attention + feed-forward block in stable (pre-norm) or vanilla form."""

    def __init__(
        self,
        d_model: int,
        heads: int,
        rng: np.random.Generator,
        k_clip: int = 16,
        variant: str = "stable",
        swish_beta: float = 1.0,
        rms_eps: float = 1e-8,
    ):
        if variant not in ("stable", "vanilla"):
            raise ContractError(f"unknown transformer variant {variant!r}")
        self.variant = variant
        stable = variant == "stable"
        self.attn = AttentionLayer(d_model, heads, rng, k_clip=k_clip, use_rel_pos=stable)
        if stable:
            self.ffn = SwigluFeedForward(d_model, rng, beta=swish_beta)
        else:
            self.ffn = ReluFeedForward(d_model, rng)
        self.norm1 = RmsNormLayer(d_model, eps=rms_eps)
        self.norm2 = RmsNormLayer(d_model, eps=rms_eps)

    def named_parameters(self, prefix: str = ""):
        return (
            self.attn.named_parameters(prefix + "attn.")
            + self.ffn.named_parameters(prefix + "ffn.")
            + self.norm1.named_parameters(prefix + "norm1.")
            + self.norm2.named_parameters(prefix + "norm2.")
        )


def block_forward(x: Tensor, block: TransformerBlock, mask: str = "causal") -> Tensor:
    if block.variant == "stable":
        # normalization strictly before each sublayer; residual bypasses it
        y = x + attend(block.norm1(x), block.attn, mask)
        return y + block.ffn(block.norm2(y))
    y = block.norm1(x + attend(x, block.attn, mask))
    return block.norm2(y + block.ffn(y))


class StableTransformer:
    """Stack of transformer blocks with a final normalization.

    The default "stable" form uses pre-norm blocks, RMSNorm, SwiGLU and
    relative positions. The "vanilla" form swaps in post-norm blocks, a ReLU
    feed-forward, and learned absolute position embeddings (and drops the
    final norm, which post-norm blocks already provide).
    """

    def __init__(
        self,
        d_model: int,
        n_layers: int,
        heads: int,
        rng: np.random.Generator,
        k_clip: int = 16,
        variant: str = "stable",
        max_len: int | None = None,
        swish_beta: float = 1.0,
        rms_eps: float = 1e-8,
    ):
        if n_layers < 1:
            raise ContractError(f"need at least one block, got {n_layers}")
        self.variant = variant
        self.blocks = [
            TransformerBlock(d_model, heads, rng, k_clip=k_clip, variant=variant, swish_beta=swish_beta, rms_eps=rms_eps)
            for _ in range(n_layers)
        ]
        self.final_norm = RmsNormLayer(d_model, eps=rms_eps) if variant == "stable" else None
        if variant == "vanilla":
            if max_len is None:
                raise ContractError("vanilla variant needs max_len for absolute position embeddings")
            self.pos_table = Tensor(rng.normal(0.0, 0.02, size=(max_len, d_model)), requires_grad=True)
        else:
            self.pos_table = None

    def __call__(self, x: Tensor, mask: str = "causal") -> Tensor:
        return stack_forward(x, self, mask)

    def named_parameters(self, prefix: str = ""):
        params = []
        for i, blk in enumerate(self.blocks):
            params.extend(blk.named_parameters(f"{prefix}blocks.{i}."))
        if self.final_norm is not None:
            params.extend(self.final_norm.named_parameters(prefix + "final_norm."))
        if self.pos_table is not None:
            params.append((prefix + "pos_table", self.pos_table))
        return params


def stack_forward(x: Tensor, model: StableTransformer, mask: str = "causal") -> Tensor:
    if model.pos_table is not None:
        t = x.shape[1]
        if t > model.pos_table.shape[0]:
            raise DimensionError(f"sequence length {t} exceeds position table of {model.pos_table.shape[0]}")
        x = x + model.pos_table[:t]
    for block in model.blocks:
        x = block_forward(x, block, mask)
    if model.final_norm is not None:
        x = model.final_norm(x)
    return x
