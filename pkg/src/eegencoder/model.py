"""Full classifier: downsampling projector, parallel dropout branches of
dual-stream (TCN + transformer) blocks, and checkpoint persistence."""

from __future__ import annotations

import dataclasses
import io
import json
import struct
from dataclasses import dataclass

import numpy as np

from .attention import StableTransformer, stack_forward
from .nn import LinearLayer, RmsNormLayer, rms_norm, xavier_uniform
from .tcn import TcnStack, tcn_forward
from .tensor import (
    ContractError,
    DimensionError,
    Tensor,
    avg_pool2d,
    conv2d,
    dropout,
    elu,
    index_last,
    pad,
    reshape,
    transpose,
)


@dataclass
class ModelConfig:
    """Every architectural hyperparameter; defaults follow the full model."""

    in_channels: int = 22
    in_time: int = 1125
    conv1_out: int = 16
    conv1_kernel_t: int = 64
    conv1_stride_t: int = 1
    conv2_out: int = 32
    conv3_out: int = 32
    conv3_kernel_t: int = 16
    pool_kernel: int = 7
    pool_stride: int = 7
    dropout_p: float = 0.3
    d_model: int = 32
    n_layers: int = 4
    n_heads: int = 2
    n_branches: int = 5
    k_clip: int = 16
    tcn_blocks: int = 2
    tcn_kernel: int = 4
    n_classes: int = 4
    use_transformer_path: bool = True
    transformer_variant: str = "stable"
    shared_head: bool = False
    elu_alpha: float = 1.0
    rms_eps: float = 1e-8
    swish_beta: float = 1.0

    def validate(self) -> None:
        positive = (
            "in_channels in_time conv1_out conv1_kernel_t conv1_stride_t conv2_out conv3_out "
            "conv3_kernel_t pool_kernel pool_stride d_model n_layers n_heads n_branches k_clip "
            "tcn_blocks tcn_kernel n_classes"
        ).split()
        for name in positive:
            if getattr(self, name) <= 0:
                raise ContractError(f"config field {name} must be positive, got {getattr(self, name)}")
        if self.d_model != self.conv3_out:
            raise ContractError(f"d_model ({self.d_model}) must equal conv3_out ({self.conv3_out})")
        if self.d_model % self.n_heads != 0:
            raise ContractError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ContractError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")
        if self.transformer_variant not in ("stable", "vanilla"):
            raise ContractError(f"unknown transformer variant {self.transformer_variant!r}")
        if self.projected_length() < 1:
            raise ContractError(
                f"projector collapses the sequence to length {self.projected_length()}; "
                "reduce pooling or the conv1 stride"
            )

    def projected_length(self) -> int:
        """Sequence length after the projector's conv/pool pipeline."""
        t = (self.in_time - 1) // self.conv1_stride_t + 1  # 'same' conv, strided
        t = (t - self.pool_kernel) // self.pool_stride + 1
        t = (t - self.pool_kernel) // self.pool_stride + 1
        return t

    @classmethod
    def miniature(cls) -> "ModelConfig":
        """Tiny configuration for finite-difference and unit testing."""
        return cls(
            in_channels=3,
            in_time=63,
            conv1_out=4,
            conv1_kernel_t=8,
            conv2_out=8,
            conv3_out=8,
            conv3_kernel_t=4,
            d_model=8,
            n_layers=1,
            n_heads=2,
            n_branches=1,
            k_clip=4,
            tcn_blocks=1,
            tcn_kernel=3,
        )

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        raw = json.loads(text)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ContractError(f"unknown config fields: {sorted(unknown)}")
        return cls(**raw)


def _same_pad(length: int, kernel: int, stride: int) -> tuple[int, int]:
    """'same' zero padding; the extra sample for even kernels goes on the right."""
    out_len = (length - 1) // stride + 1
    total = max((out_len - 1) * stride + kernel - length, 0)
    return total // 2, total - total // 2


class DownsamplingProjector:
    """Conv/pool/dropout front end turning (B,1,T,C) into (B,T',d_model)."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        c = config
        # all convs bias-free: normalization follows each activated conv
        self.conv1_w = Tensor(
            xavier_uniform(rng, (c.conv1_out, 1, c.conv1_kernel_t, 1), c.conv1_kernel_t, c.conv1_out * c.conv1_kernel_t),
            requires_grad=True,
        )
        fan2 = c.conv1_out * c.in_channels
        self.conv2_w = Tensor(
            xavier_uniform(rng, (c.conv2_out, c.conv1_out, 1, c.in_channels), fan2, c.conv2_out),
            requires_grad=True,
        )
        self.norm1 = RmsNormLayer(c.conv2_out, eps=c.rms_eps)
        fan3 = c.conv2_out * c.conv3_kernel_t
        self.conv3_w = Tensor(
            xavier_uniform(rng, (c.conv3_out, c.conv2_out, c.conv3_kernel_t, 1), fan3, c.conv3_out * c.conv3_kernel_t),
            requires_grad=True,
        )
        self.norm2 = RmsNormLayer(c.conv3_out, eps=c.rms_eps)
        self.config = c

    def __call__(self, x: Tensor, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        return projector_forward(x, self, training=training, rng=rng)

    def named_parameters(self, prefix: str = ""):
        return [
            (prefix + "conv1_w", self.conv1_w),
            (prefix + "conv2_w", self.conv2_w),
            (prefix + "conv3_w", self.conv3_w),
        ] + self.norm1.named_parameters(prefix + "norm1.") + self.norm2.named_parameters(prefix + "norm2.")


def _channel_norm_elu(h: Tensor, layer: RmsNormLayer, alpha: float) -> Tensor:
    """RMS-normalize the channel axis of (B,C,H,W), then ELU."""
    moved = transpose(h, (0, 2, 3, 1))
    moved = elu(rms_norm(moved, layer), alpha)
    return transpose(moved, (0, 3, 1, 2))


def projector_forward(
    x: Tensor, proj: DownsamplingProjector, training: bool = False, rng: np.random.Generator | None = None
) -> Tensor:
    c = proj.config
    if x.ndim != 4 or x.shape[1] != 1 or x.shape[2] != c.in_time or x.shape[3] != c.in_channels:
        raise DimensionError(
            f"projector expects input (B,1,{c.in_time},{c.in_channels}), got {tuple(x.shape)}"
        )
    lo, hi = _same_pad(c.in_time, c.conv1_kernel_t, c.conv1_stride_t)
    h = conv2d(pad(x, ((0, 0), (0, 0), (lo, hi), (0, 0))), proj.conv1_w, stride=(c.conv1_stride_t, 1))
    h = conv2d(h, proj.conv2_w)  # collapses the electrode axis to width 1
    h = _channel_norm_elu(h, proj.norm1, c.elu_alpha)
    h = avg_pool2d(h, (c.pool_kernel, 1), (c.pool_stride, 1))
    h = dropout(h, c.dropout_p, training, rng)
    t_mid = h.shape[2]
    lo, hi = _same_pad(t_mid, c.conv3_kernel_t, 1)
    h = conv2d(pad(h, ((0, 0), (0, 0), (lo, hi), (0, 0))), proj.conv3_w)
    h = _channel_norm_elu(h, proj.norm2, c.elu_alpha)
    h = avg_pool2d(h, (c.pool_kernel, 1), (c.pool_stride, 1))
    h = dropout(h, c.dropout_p, training, rng)
    b, d, t_out, _ = h.shape
    return transpose(reshape(h, (b, d, t_out)), (0, 2, 1))


# small head init keeps untrained logits near zero, i.e. near-uniform predictions
_HEAD_INIT_SCALE = 0.1


class DstsBlock:
    """Parallel TCN and transformer pathways fused at the last timestep."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator, head: LinearLayer | None = None):
        c = config
        self.tcn = TcnStack(c.d_model, c.tcn_blocks, c.tcn_kernel, rng, elu_alpha=c.elu_alpha, rms_eps=c.rms_eps)
        if c.use_transformer_path:
            self.transformer = StableTransformer(
                c.d_model,
                c.n_layers,
                c.n_heads,
                rng,
                k_clip=c.k_clip,
                variant=c.transformer_variant,
                max_len=c.projected_length(),
                swish_beta=c.swish_beta,
                rms_eps=c.rms_eps,
            )
        else:
            self.transformer = None
        if head is None:
            head = LinearLayer(c.d_model, c.n_classes, rng, decay_group="mlp_decayed", init_scale=_HEAD_INIT_SCALE)
        self.head_mlp = head

    def sequence_features(self, h: Tensor) -> Tensor:
        """Summed pathway outputs over the whole sequence (B, T, d).

        Both pathways consume the identical input tensor; the classifier
        reads only the final timestep of this sum.
        """
        features = tcn_forward(h, self.tcn)
        if self.transformer is not None:
            features = features + stack_forward(h, self.transformer, mask="causal")
        return features

    def __call__(self, h: Tensor) -> Tensor:
        return dsts_forward(h, self)

    def named_parameters(self, prefix: str = "", include_head: bool = True):
        params = self.tcn.named_parameters(prefix + "tcn.")
        if self.transformer is not None:
            params.extend(self.transformer.named_parameters(prefix + "transformer."))
        if include_head:
            params.extend(self.head_mlp.named_parameters(prefix + "head_mlp."))
        return params


def dsts_forward(h: Tensor, block: DstsBlock) -> Tensor:
    """Class logits from the last-timestep fusion of both pathways."""
    last = index_last(block.sequence_features(h), axis=1)
    return block.head_mlp(last)


class EEGEncoder:
    """Projector plus n parallel dropout+DSTS branches, averaged over branches."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        config.validate()
        self.config = config
        self.projector = DownsamplingProjector(config, rng)
        shared = (
            LinearLayer(config.d_model, config.n_classes, rng, decay_group="mlp_decayed", init_scale=_HEAD_INIT_SCALE)
            if config.shared_head
            else None
        )
        self.branches = [DstsBlock(config, rng, head=shared) for _ in range(config.n_branches)]

    def __call__(self, x: Tensor, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        return model_forward(x, self, training=training, rng=rng)

    def named_parameters(self):
        params = self.projector.named_parameters("projector.")
        for i, branch in enumerate(self.branches):
            include_head = not self.config.shared_head
            params.extend(branch.named_parameters(f"branches.{i}.", include_head=include_head))
        if self.config.shared_head:
            params.extend(self.branches[0].head_mlp.named_parameters("shared_head."))
        return params

    def parameter_entries(self):
        """(name, tensor, decayed) triples; decay applies to head MLPs only."""
        entries = []
        for name, tensor in self.named_parameters():
            decayed = ".head_mlp." in name or name.startswith("shared_head.")
            entries.append((name, tensor, decayed))
        return entries

    def count_parameters(self) -> int:
        return sum(t.size for _, t in self.named_parameters())

    def zero_grad(self) -> None:
        for _, t in self.named_parameters():
            t.zero_grad()


def model_forward(
    x: Tensor, model: EEGEncoder, training: bool = False, rng: np.random.Generator | None = None
) -> Tensor:
    """Logits (B, n_classes): mean over branch heads of dropout-perturbed features."""
    c = model.config
    h = projector_forward(x, model.projector, training=training, rng=rng)
    total = None
    for branch in model.branches:
        hb = dropout(h, c.dropout_p, training, rng)
        z = dsts_forward(hb, branch)
        total = z if total is None else total + z
    return total * (1.0 / len(model.branches))


# -- checkpoint container ------------------------------------------------------

_CKPT_MAGIC = b"EEGCKPT1"
_CKPT_VERSION = 1
_DTYPE_TAGS = {1: np.dtype("<f8"), 2: np.dtype("<i8")}
_TAG_FOR_KIND = {"f": 1, "i": 2}


class CheckpointError(ValueError):
    """Malformed or mismatched checkpoint file."""


def _write_entry(f: io.BufferedWriter, name: str, array: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    tag = _TAG_FOR_KIND.get(array.dtype.kind)
    if tag is None:
        raise ContractError(f"cannot serialize dtype {array.dtype} for entry {name!r}")
    array = np.ascontiguousarray(array, dtype=_DTYPE_TAGS[tag])
    f.write(struct.pack("<I", len(encoded)))
    f.write(encoded)
    f.write(struct.pack("<BI", tag, array.ndim))
    f.write(struct.pack(f"<{array.ndim}I", *array.shape))
    f.write(array.tobytes())


def _read_exact(f, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise CheckpointError("checkpoint file truncated")
    return buf


def _read_entry(f) -> tuple[str, np.ndarray]:
    (name_len,) = struct.unpack("<I", _read_exact(f, 4))
    name = _read_exact(f, name_len).decode("utf-8")
    tag, rank = struct.unpack("<BI", _read_exact(f, 5))
    if tag not in _DTYPE_TAGS:
        raise CheckpointError(f"unknown dtype tag {tag} for entry {name!r}")
    dims = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank))
    dtype = _DTYPE_TAGS[tag]
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    data = np.frombuffer(_read_exact(f, count * dtype.itemsize), dtype=dtype).reshape(dims)
    return name, data.copy()


def save_checkpoint(path, model: EEGEncoder, extras: dict[str, np.ndarray] | None = None) -> None:
    """Versioned binary container: config JSON plus named float64 buffers.

    ``extras`` carries non-learnable state (scaler statistics, optimizer
    moments) under reserved name prefixes; reload is bit-exact.
    """
    entries = [(name, t.data) for name, t in model.named_parameters()]
    if extras:
        entries.extend(sorted(extras.items()))
    config_blob = model.config.to_json().encode("utf-8")
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<I", _CKPT_VERSION))
        f.write(struct.pack("<I", len(config_blob)))
        f.write(config_blob)
        f.write(struct.pack("<I", len(entries)))
        for name, array in entries:
            _write_entry(f, name, np.asarray(array))


def load_checkpoint(path) -> tuple[EEGEncoder, dict[str, np.ndarray]]:
    """Rebuild a model (bit-exact parameters) and return the extra buffers."""
    with open(path, "rb") as f:
        magic = f.read(len(_CKPT_MAGIC))
        if magic != _CKPT_MAGIC:
            raise CheckpointError(f"bad checkpoint magic {magic!r}")
        (version,) = struct.unpack("<I", _read_exact(f, 4))
        if version != _CKPT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (cfg_len,) = struct.unpack("<I", _read_exact(f, 4))
        config = ModelConfig.from_json(_read_exact(f, cfg_len).decode("utf-8"))
        (n_entries,) = struct.unpack("<I", _read_exact(f, 4))
        loaded = dict(_read_entry(f) for _ in range(n_entries))

    model = EEGEncoder(config, np.random.default_rng(0))
    extras: dict[str, np.ndarray] = {}
    expected = dict(model.named_parameters())
    for name, array in loaded.items():
        if name in expected:
            if expected[name].data.shape != array.shape:
                raise CheckpointError(f"checkpoint entry {name!r} has shape {array.shape}, expected {expected[name].data.shape}")
            expected[name].data = np.ascontiguousarray(array, dtype=np.float64)
        else:
            extras[name] = array
    missing = set(expected) - set(loaded)
    if missing:
        raise CheckpointError(f"checkpoint missing parameters: {sorted(missing)[:5]}")
    return model, extras
