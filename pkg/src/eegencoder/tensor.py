"""Dense float64 tensors with reverse-mode automatic differentiation.

Every value flowing through the model is a ``Tensor`` wrapping a contiguous
row-major numpy array. Operations build an implicit graph of backward
closures; ``backward(loss)`` traces the graph into a ``Tape`` (a topological
ordering of the recorded ops) and replays it once in reverse, accumulating
gradients additively into every leaf that requires them.
"""

from __future__ import annotations

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import fft as _sfft


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ContractError(ValueError):
    """An argument violates an operation's precondition."""


class StateError(RuntimeError):
    """The object is in the wrong state for the request (e.g. consumed tape)."""


class NonFiniteError(ArithmeticError):
    """A forward op produced NaN/Inf while debug checks are enabled."""


_grad_enabled = True
_debug_checks = False

# im2col scratch buffers are chunked to stay below this many float64 elements.
_IM2COL_BUDGET = 16_000_000


def set_debug_checks(enabled: bool) -> None:
    """Opt-in NaN/Inf detection after every forward op (off by default)."""
    global _debug_checks
    _debug_checks = bool(enabled)


class no_grad:
    """Context manager disabling graph recording (halves forward memory)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _fft_workers() -> int:
    cap = os.environ.get("DSTS_THREADS")
    n = os.cpu_count() or 1
    if cap:
        try:
            n = max(1, min(n, int(cap)))
        except ValueError:
            pass
    return n


class Tensor:
    """n-D float64 array, optionally tracked for gradients.

    Tensors are immutable values once created: ops return new tensors and
    never write into an operand's buffer. ``grad`` is populated (additively)
    by ``backward`` for leaves created with ``requires_grad=True``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """A leaf view of the same values, cut out of the graph."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return _getitem(self, idx)

    # -- shape/reduce conveniences ------------------------------------------

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def index_last(self, axis: int):
        return index_last(self, axis)

    def backward(self):
        backward(self)


class Tape:
    """Topologically ordered record of the ops feeding one output tensor.

    Node order satisfies: every op's inputs appear before the op itself.
    Replaying the backward closures once, in reverse, accumulates each
    leaf's gradient additively. A tape is consumed by a single replay.
    """

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @staticmethod
    def trace(root: Tensor) -> "Tape":
        """Iterative post-order DFS over the graph reachable from ``root``."""
        nodes: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                nodes.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        return Tape(nodes)

    def replay_backward(self, root: Tensor) -> None:
        if any(n._consumed for n in self.nodes):
            raise StateError("tape already consumed; gradients cannot be replayed twice")
        root.grad = np.ones_like(root.data)
        for node in reversed(self.nodes):
            if node._backward is None:
                continue  # leaf: keeps its accumulated grad
            if node.grad is not None:
                node._backward(node.grad)
            node._consumed = True
            node._backward = None
            node._parents = ()
            node.grad = None  # interior grads are transient; free them eagerly


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires-grad leaf with d(loss)/d(leaf).

    ``loss`` must be a scalar. The tape recorded under ``loss`` is consumed;
    a second backward through any part of it raises ``StateError``.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if loss._consumed:
        raise StateError("tape already consumed; gradients cannot be replayed twice")
    Tape.trace(loss).replay_backward(loss)


def _record(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    """Wrap an op result, attaching the backward closure when tracking."""
    if _debug_checks and not np.all(np.isfinite(data)):
        raise NonFiniteError("forward op produced non-finite values")
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    """Additively deposit a gradient contribution on ``t`` if it wants one."""
    if not t.requires_grad:
        return
    if t.grad is None:
        # copy: g may alias a buffer the caller still mutates
        t.grad = np.array(np.broadcast_to(g, t.data.shape), dtype=np.float64)
    else:
        t.grad += g


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back down to ``shape``."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise ops ---------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def back(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _record(a.data + b.data, (a, b), back)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def back(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _record(a.data - b.data, (a, b), back)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def back(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _record(a.data * b.data, (a, b), back)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def back(g):
        _accum(a, _unbroadcast(g / b.data, a.data.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _record(a.data / b.data, (a, b), back)


def power(a, exponent: float) -> Tensor:
    """Elementwise ``a ** c`` for a constant real exponent."""
    a = _as_tensor(a)
    c = float(exponent)
    out_data = a.data**c

    def back(g):
        _accum(a, g * c * a.data ** (c - 1.0))

    return _record(out_data, (a,), back)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out_data = np.exp(a.data)

    def back(g):
        _accum(a, g * out_data)

    return _record(out_data, (a,), back)


def log(a) -> Tensor:
    a = _as_tensor(a)

    def back(g):
        _accum(a, g / a.data)

    return _record(np.log(a.data), (a,), back)


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    out_data = np.sqrt(a.data)

    def back(g):
        _accum(a, g * 0.5 / out_data)

    return _record(out_data, (a,), back)


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    # two-sided form avoids overflow in exp for large |x|
    out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def back(g):
        _accum(a, g * out_data * (1.0 - out_data))

    return _record(out_data, (a,), back)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0

    def back(g):
        _accum(a, g * mask)

    return _record(np.where(mask, a.data, 0.0), (a,), back)


def elu(a, alpha: float = 1.0) -> Tensor:
    """x for x>0, alpha*(e^x - 1) for x<=0."""
    if alpha <= 0:
        raise ContractError(f"elu alpha must be positive, got {alpha}")
    a = _as_tensor(a)
    x = a.data
    neg = np.minimum(x, 0.0)
    out_data = np.where(x > 0, x, alpha * np.expm1(neg))

    def back(g):
        _accum(a, g * np.where(x > 0, 1.0, alpha * np.exp(neg)))

    return _record(out_data, (a,), back)


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        inner = (g * out_data).sum(axis=axis, keepdims=True)
        _accum(a, out_data * (g - inner))

    return _record(out_data, (a,), back)


# -- reductions and shape ops -------------------------------------------------


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    ax = _norm_axis(axis, a.data.ndim)
    out_data = a.data.sum(axis=ax, keepdims=keepdims)

    def back(g):
        if ax is not None and not keepdims:
            g = np.expand_dims(g, ax)
        _accum(a, np.broadcast_to(g, a.data.shape))

    return _record(out_data, (a,), back)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    ax = _norm_axis(axis, a.data.ndim)
    count = a.data.size if ax is None else int(np.prod([a.data.shape[i] for i in ax]))
    out_data = a.data.mean(axis=ax, keepdims=keepdims)

    def back(g):
        if ax is not None and not keepdims:
            g = np.expand_dims(g, ax)
        _accum(a, np.broadcast_to(g, a.data.shape) / count)

    return _record(out_data, (a,), back)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.data.shape

    def back(g):
        _accum(a, g.reshape(old))

    return _record(a.data.reshape(shape), (a,), back)


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    inv = np.argsort(axes)

    def back(g):
        _accum(a, g.transpose(inv))

    return _record(np.ascontiguousarray(a.data.transpose(axes)), (a,), back)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accum(t, piece)

    return _record(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), back)


def pad(a, pad_width) -> Tensor:
    """Zero-pad; ``pad_width`` is the per-axis (before, after) spec."""
    a = _as_tensor(a)
    pw = tuple((int(lo), int(hi)) for lo, hi in pad_width)
    if len(pw) != a.data.ndim:
        raise DimensionError(f"pad spec has {len(pw)} axes for a rank-{a.data.ndim} tensor")
    inner = tuple(slice(lo, lo + n) for (lo, _), n in zip(pw, a.data.shape))

    def back(g):
        _accum(a, g[inner])

    return _record(np.pad(a.data, pw), (a,), back)


def _getitem(a: Tensor, idx) -> Tensor:
    out_data = a.data[idx]
    if np.isscalar(out_data) or out_data.ndim == 0:
        out_data = np.asarray(out_data)

    def back(g):
        if not a.requires_grad:
            return
        full = np.zeros_like(a.data)
        full[idx] = g
        _accum(a, full)

    return _record(np.ascontiguousarray(out_data), (a,), back)


def index_last(a, axis: int) -> Tensor:
    """Select the final element along ``axis`` (e.g. last timestep)."""
    a = _as_tensor(a)
    idx = [slice(None)] * a.data.ndim
    idx[axis] = -1
    return _getitem(a, tuple(idx))


def embedding_lookup(table, indices) -> Tensor:
    """Gather rows of ``table`` (V, d) by an integer index array of any shape."""
    table = _as_tensor(table)
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ContractError(f"embedding indices must be integers, got dtype {idx.dtype}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise ContractError(f"embedding index out of range for table with {table.data.shape[0]} rows")

    def back(g):
        if not table.requires_grad:
            return
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        _accum(table, full)

    return _record(table.data[idx], (table,), back)


def dropout(a, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: scales kept activations by 1/(1-p) at train time."""
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout rate must lie in [0, 1), got {p}")
    a = _as_tensor(a)
    if not training or p == 0.0:
        return a
    if rng is None:
        raise ContractError("training-mode dropout needs an explicit rng")
    mask = (rng.random(a.data.shape) >= p) / (1.0 - p)

    def back(g):
        _accum(a, g * mask)

    return _record(a.data * mask, (a,), back)


# -- matmul -------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading dims."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got shapes {a.data.shape} and {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.data.shape} x {b.data.shape}")

    def back(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g @ b.data.swapaxes(-1, -2), a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.data.shape))

    return _record(a.data @ b.data, (a, b), back)


# -- convolution and pooling --------------------------------------------------


def _batch_chunks(n: int, per_item: int):
    step = max(1, _IM2COL_BUDGET // max(1, per_item))
    for lo in range(0, n, step):
        yield lo, min(n, lo + step)


def _conv_geometry(x_shape, w_shape, stride, padding):
    B, Cin, H, W = x_shape
    Cout, Cin_w, kh, kw = w_shape
    sh, sw = stride
    ph, pw = padding
    if Cin != Cin_w:
        raise DimensionError(f"conv2d channel mismatch: input {x_shape} vs kernel {w_shape}")
    if kh > H + 2 * ph or kw > W + 2 * pw:
        raise DimensionError(
            f"conv2d kernel ({kh},{kw}) larger than padded input ({H + 2 * ph},{W + 2 * pw})"
        )
    Ho = (H + 2 * ph - kh) // sh + 1
    Wo = (W + 2 * pw - kw) // sw + 1
    return B, Cin, H, W, Cout, kh, kw, sh, sw, ph, pw, Ho, Wo


def _use_fft_conv(Cin, Cout, kh, kw, sh, sw, Ho, Wo) -> bool:
    # FFT pays off for long stride-1 temporal kernels on column-free inputs.
    return kw == 1 and sh == 1 and sw == 1 and kh >= 32 and Ho >= 256


def conv2d(x, w, stride=(1, 1), padding=(0, 0)) -> Tensor:
    """Cross-correlation of (B,Cin,H,W) with (Cout,Cin,kh,kw) kernels."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise DimensionError(f"conv2d needs 4-D input and kernel, got {x.data.shape} and {w.data.shape}")
    B, Cin, H, W, Cout, kh, kw, sh, sw, ph, pw, Ho, Wo = _conv_geometry(x.data.shape, w.data.shape, stride, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data

    if _use_fft_conv(Cin, Cout, kh, kw, sh, sw, Ho, Wo):
        out_data, back = _conv2d_fft(x, w, xp, Ho, ph, pw, H, W)
    else:
        out_data, back = _conv2d_im2col(x, w, xp, sh, sw, ph, pw, Ho, Wo, H, W)
    return _record(out_data, (x, w), back)


def _conv2d_im2col(x: Tensor, w: Tensor, xp, sh, sw, ph, pw, Ho, Wo, H, W):
    B, Cin = xp.shape[0], xp.shape[1]
    Cout, _, kh, kw = w.data.shape
    per_item = Cin * kh * kw * Ho * Wo

    out = np.empty((B, Cout, Ho, Wo))
    for lo, hi in _batch_chunks(B, per_item):
        view = sliding_window_view(xp[lo:hi], (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
        out[lo:hi] = np.tensordot(view, w.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)

    def back(g):
        if w.requires_grad:
            gw = np.zeros((Cin, kh, kw, Cout))
            for lo, hi in _batch_chunks(B, per_item):
                view = sliding_window_view(xp[lo:hi], (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
                gw += np.tensordot(view, g[lo:hi], axes=([0, 2, 3], [0, 2, 3]))
            _accum(w, gw.transpose(3, 0, 1, 2))
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for lo, hi in _batch_chunks(B, per_item):
                gpatch = np.tensordot(g[lo:hi], w.data, axes=([1], [0]))  # (b,Ho,Wo,Cin,kh,kw)
                for u in range(kh):
                    for v in range(kw):
                        gxp[lo:hi, :, u : u + sh * Ho : sh, v : v + sw * Wo : sw] += gpatch[
                            ..., u, v
                        ].transpose(0, 3, 1, 2)
            _accum(x, np.ascontiguousarray(gxp[:, :, ph : ph + H, pw : pw + W]))

    return out, back


def _conv2d_fft(x: Tensor, w: Tensor, xp, Ho, ph, pw, H, W):
    """Stride-1 (kh,1)-kernel convolution via real FFTs along the H axis.

    The W axis carries independent signals, so (B, W) folds into one batch
    of 1-D sequences. Valid slices below rely on nfft >= padded length,
    which keeps circular wrap-around outside the retained samples.
    """
    B, Cin, Hp, Wd = xp.shape
    Cout, _, kh, _ = w.data.shape
    workers = _fft_workers()
    nfft = _sfft.next_fast_len(Hp)

    xs = np.ascontiguousarray(xp.transpose(0, 3, 1, 2)).reshape(B * Wd, Cin, Hp)
    X = _sfft.rfft(xs, nfft, axis=-1, workers=workers)
    Wh = _sfft.rfft(w.data[:, :, ::-1, 0], nfft, axis=-1, workers=workers)
    Y = np.einsum("ncf,ocf->nof", X, Wh)
    y = _sfft.irfft(Y, nfft, axis=-1, workers=workers)[..., kh - 1 : kh - 1 + Ho]
    out = np.ascontiguousarray(y.reshape(B, Wd, Cout, Ho).transpose(0, 2, 3, 1))

    def back(g):
        gs = np.ascontiguousarray(g.transpose(0, 3, 1, 2)).reshape(B * Wd, Cout, Ho)
        if w.requires_grad:
            G = _sfft.rfft(gs[:, :, ::-1], nfft, axis=-1, workers=workers)
            GW = np.einsum("ncf,nof->ocf", X, G)
            gw = _sfft.irfft(GW, nfft, axis=-1, workers=workers)[..., Ho - 1 : Ho - 1 + kh]
            _accum(w, gw[..., None])
        if x.requires_grad:
            G2 = _sfft.rfft(gs, nfft, axis=-1, workers=workers)
            W2 = _sfft.rfft(w.data[:, :, :, 0], nfft, axis=-1, workers=workers)
            GX = np.einsum("nof,ocf->ncf", G2, W2)
            gxs = _sfft.irfft(GX, nfft, axis=-1, workers=workers)[..., :Hp]
            gxp = gxs.reshape(B, Wd, Cin, Hp).transpose(0, 2, 3, 1)
            _accum(x, np.ascontiguousarray(gxp[:, :, ph : ph + H, pw : pw + W]))

    return out, back


def avg_pool2d(x, kernel, stride) -> Tensor:
    """Windowed mean over (H, W) with floor-mode output size."""
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise DimensionError(f"avg_pool2d needs a 4-D input, got {x.data.shape}")
    kh, kw = kernel
    sh, sw = stride
    B, C, H, W = x.data.shape
    if kh > H or kw > W:
        raise DimensionError(f"pool kernel ({kh},{kw}) larger than input ({H},{W})")
    Ho = (H - kh) // sh + 1
    Wo = (W - kw) // sw + 1
    view = sliding_window_view(x.data, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    out_data = view.mean(axis=(4, 5))

    def back(g):
        if not x.requires_grad:
            return
        gx = np.zeros_like(x.data)
        gshare = g / (kh * kw)
        for u in range(kh):
            for v in range(kw):
                gx[:, :, u : u + sh * Ho : sh, v : v + sw * Wo : sw] += gshare
        _accum(x, gx)

    return _record(np.ascontiguousarray(out_data), (x,), back)
