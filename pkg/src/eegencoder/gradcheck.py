"""Central finite-difference verification for every differentiable op and the
end-to-end miniature model."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor, backward, tsum

FD_STEP = 1e-4
TOLERANCE = 1e-3


def max_rel_error(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def check_gradients(build, inputs: list[Tensor], h: float = FD_STEP, seed: int = 0) -> float:
    """Compare autodiff grads of a random projection of build(*inputs) to FD.

    ``build`` must be deterministic in its inputs. Returns the worst
    elementwise relative error across all input tensors.
    """
    rng = np.random.default_rng(seed)
    out = build(*inputs)
    proj = rng.standard_normal(out.shape)

    def scalar() -> float:
        with T.no_grad():
            return float((build(*inputs).data * proj).sum())

    loss = tsum(out * Tensor(proj))
    for t in inputs:
        t.zero_grad()
    backward(loss)

    worst = 0.0
    for t in inputs:
        grad = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        num_flat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = scalar()
            flat[i] = orig - h
            down = scalar()
            flat[i] = orig
            num_flat[i] = (up - down) / (2.0 * h)
        worst = max(worst, max_rel_error(grad, numeric))
    return worst


def _uniform(rng, shape, low=-1.0, high=1.0, margin: float = 0.0) -> np.ndarray:
    """Random inputs in [low, high]; ``margin`` keeps them away from zero."""
    x = rng.uniform(low, high, size=shape)
    if margin > 0.0:
        x = np.sign(x) * (np.abs(x) + margin)
    return x


def _leaf(rng, shape, **kw) -> Tensor:
    return Tensor(_uniform(rng, shape, **kw), requires_grad=True)


# -- per-op cases ----------------------------------------------------------------


def _check_add(rng):
    return check_gradients(lambda a, b: a + b, [_leaf(rng, (3, 4)), _leaf(rng, (4,))])


def _check_sub(rng):
    return check_gradients(lambda a, b: a - b, [_leaf(rng, (2, 3, 4)), _leaf(rng, (3, 1))])


def _check_mul(rng):
    return check_gradients(lambda a, b: a * b, [_leaf(rng, (3, 4)), _leaf(rng, (3, 1))])


def _check_div(rng):
    return check_gradients(lambda a, b: a / b, [_leaf(rng, (3, 4)), _leaf(rng, (4,), margin=0.5)])


def _check_power(rng):
    return check_gradients(lambda a: (a * a + 0.5) ** -0.5, [_leaf(rng, (3, 4))])


def _check_exp(rng):
    return check_gradients(T.exp, [_leaf(rng, (3, 4))])


def _check_log(rng):
    return check_gradients(T.log, [_leaf(rng, (3, 4), low=0.2, high=2.0)])


def _check_sqrt(rng):
    return check_gradients(T.sqrt, [_leaf(rng, (3, 4), low=0.2, high=2.0)])


def _check_sigmoid(rng):
    return check_gradients(T.sigmoid, [_leaf(rng, (3, 4))])


def _check_relu(rng):
    return check_gradients(T.relu, [_leaf(rng, (3, 4), margin=0.05)])


def _check_elu(rng):
    return check_gradients(lambda a: T.elu(a, 1.0), [_leaf(rng, (3, 4), margin=0.05)])


def _check_softmax(rng):
    return check_gradients(lambda a: T.softmax(a, axis=-1), [_leaf(rng, (3, 5))])


def _check_sum(rng):
    return check_gradients(lambda a: tsum(a, axis=1), [_leaf(rng, (3, 4, 2))])


def _check_mean(rng):
    return check_gradients(lambda a: T.tmean(a, axis=(0, 2), keepdims=True), [_leaf(rng, (3, 4, 2))])


def _check_matmul(rng):
    return check_gradients(T.matmul, [_leaf(rng, (3, 4)), _leaf(rng, (4, 2))])


def _check_matmul_batched(rng):
    return check_gradients(T.matmul, [_leaf(rng, (2, 3, 1, 4)), _leaf(rng, (3, 4, 2))])


def _check_transpose(rng):
    return check_gradients(lambda a: T.transpose(a, (1, 2, 0)), [_leaf(rng, (2, 3, 4))])


def _check_reshape(rng):
    return check_gradients(lambda a: T.reshape(a, (6, 4)), [_leaf(rng, (2, 3, 4))])


def _check_concat(rng):
    return check_gradients(lambda a, b: T.concat([a, b], axis=1), [_leaf(rng, (2, 3)), _leaf(rng, (2, 2))])


def _check_pad(rng):
    return check_gradients(lambda a: T.pad(a, ((0, 0), (2, 1))), [_leaf(rng, (3, 4))])


def _check_slice(rng):
    return check_gradients(lambda a: a[:, 1:3, :], [_leaf(rng, (2, 4, 3))])


def _check_index_last(rng):
    return check_gradients(lambda a: T.index_last(a, axis=1), [_leaf(rng, (2, 5, 3))])


def _check_embedding_lookup(rng):
    idx = rng.integers(0, 5, size=(3, 3))
    return check_gradients(lambda t: T.embedding_lookup(t, idx), [_leaf(rng, (5, 4))])


def _check_dropout(rng):
    mask_seed = int(rng.integers(1 << 30))

    def build(a):
        return T.dropout(a, 0.4, training=True, rng=np.random.default_rng(mask_seed))

    return check_gradients(build, [_leaf(rng, (4, 5))])


def _check_conv2d(rng):
    x = _leaf(rng, (2, 3, 6, 5))
    w = _leaf(rng, (4, 3, 3, 2))
    return check_gradients(lambda x, w: T.conv2d(x, w, stride=(2, 1), padding=(1, 0)), [x, w])


def _check_conv2d_fft(rng):
    # long stride-1 temporal kernel routes through the FFT implementation
    x = _leaf(rng, (1, 2, 300, 1))
    w = _leaf(rng, (2, 2, 32, 1))
    return check_gradients(lambda x, w: T.conv2d(x, w, padding=(3, 0)), [x, w])


def _check_avg_pool(rng):
    return check_gradients(lambda x: T.avg_pool2d(x, (3, 1), (2, 1)), [_leaf(rng, (2, 2, 9, 2))])


def _check_rms_norm(rng):
    from .nn import RmsNormLayer, rms_norm

    layer = RmsNormLayer(6)
    x = _leaf(rng, (3, 6), margin=0.05)

    def build(x, gain):
        layer.gain = gain
        return rms_norm(x, layer)

    return check_gradients(build, [x, _leaf(rng, (6,), margin=0.2)])


def _check_swiglu(rng):
    from .nn import LinearLayer
    from .nn import swiglu as swiglu_fn

    lw = LinearLayer(4, 6, rng)
    lv = LinearLayer(4, 6, rng)

    def build(x, w, b, v, c):
        lw.weight, lw.bias = w, b
        lv.weight, lv.bias = v, c
        return swiglu_fn(x, lw, lv, beta=1.0)

    return check_gradients(build, [_leaf(rng, (3, 4)), lw.weight, lw.bias, lv.weight, lv.bias])


def _check_cross_entropy(rng):
    from .nn import cross_entropy_smoothed

    labels = rng.integers(0, 4, size=5)
    return check_gradients(lambda z: cross_entropy_smoothed(z, labels, 0.1), [_leaf(rng, (5, 4))])


def _check_linear(rng):
    from .nn import LinearLayer

    layer = LinearLayer(4, 3, rng)

    def build(x, w, b):
        layer.weight, layer.bias = w, b
        return layer(x)

    return check_gradients(build, [_leaf(rng, (2, 4)), layer.weight, layer.bias])


def _assign(root, dotted: str, value) -> None:
    """Set a parameter through a dotted path, with numeric parts as list indices."""
    parts = [int(p) if p.isdigit() else p for p in dotted.split(".")]
    obj = root
    for p in parts[:-1]:
        obj = obj[p] if isinstance(p, int) else getattr(obj, p)
    last = parts[-1]
    if isinstance(last, int):
        obj[last] = value
    else:
        setattr(obj, last, value)


def _module_case(rng, module, forward, inputs):
    """FD-check a layer: fresh parameter tensors are re-bound on every eval."""
    named = module.named_parameters()

    def build(x, *params):
        for (name, _), t in zip(named, params):
            _assign(module, name, t)
        return forward(x)

    return check_gradients(build, list(inputs) + [t for _, t in named])


def _attention_case(rng, mask: str):
    from .attention import AttentionLayer, attend

    layer = AttentionLayer(8, 2, rng, k_clip=2)
    return _module_case(rng, layer, lambda x: attend(x, layer, mask=mask), [_leaf(rng, (2, 5, 8))])


def _check_attend_causal(rng):
    return _attention_case(rng, "causal")


def _check_attend_unmasked(rng):
    return _attention_case(rng, "none")


def _check_transformer_block(rng):
    from .attention import TransformerBlock, block_forward

    block = TransformerBlock(8, 2, rng, k_clip=3)
    return _module_case(rng, block, lambda x: block_forward(x, block, mask="causal"), [_leaf(rng, (2, 5, 8))])


def _check_tcn(rng):
    from .tcn import TcnStack, tcn_forward

    stack = TcnStack(6, 2, 3, rng)
    return _module_case(rng, stack, lambda x: tcn_forward(x, stack), [_leaf(rng, (2, 7, 6))])


def _check_model_end_to_end(rng):
    """Whole miniature model against finite differences, parameters and input."""
    from .model import EEGEncoder, ModelConfig, model_forward

    config = ModelConfig.miniature()
    model = EEGEncoder(config, rng)
    x = _leaf(rng, (2, 1, config.in_time, config.in_channels))
    return _module_case(rng, model, lambda x: model_forward(x, model, training=False), [x])


REGISTRY = {
    "add": _check_add,
    "sub": _check_sub,
    "mul": _check_mul,
    "div": _check_div,
    "power": _check_power,
    "exp": _check_exp,
    "log": _check_log,
    "sqrt": _check_sqrt,
    "sigmoid": _check_sigmoid,
    "relu": _check_relu,
    "elu": _check_elu,
    "softmax": _check_softmax,
    "sum": _check_sum,
    "mean": _check_mean,
    "matmul": _check_matmul,
    "matmul_batched": _check_matmul_batched,
    "transpose": _check_transpose,
    "reshape": _check_reshape,
    "concat": _check_concat,
    "pad": _check_pad,
    "slice": _check_slice,
    "index_last": _check_index_last,
    "embedding_lookup": _check_embedding_lookup,
    "dropout": _check_dropout,
    "conv2d": _check_conv2d,
    "conv2d_fft": _check_conv2d_fft,
    "avg_pool": _check_avg_pool,
    "rms_norm": _check_rms_norm,
    "swiglu": _check_swiglu,
    "cross_entropy_smoothed": _check_cross_entropy,
    "linear": _check_linear,
    "attend_causal": _check_attend_causal,
    "attend_unmasked": _check_attend_unmasked,
    "transformer_block": _check_transformer_block,
    "tcn_forward": _check_tcn,
    "model_end_to_end": _check_model_end_to_end,
}


def run(op_names=None, seed: int = 7) -> dict[str, float]:
    """Worst relative error per op; unknown names raise ContractError."""
    names = list(REGISTRY) if not op_names else list(op_names)
    unknown = [n for n in names if n not in REGISTRY]
    if unknown:
        from .tensor import ContractError

        raise ContractError(f"unknown gradcheck ops: {unknown}; known: {sorted(REGISTRY)}")
    results = {}
    for name in names:
        results[name] = REGISTRY[name](np.random.default_rng(seed))
    return results
