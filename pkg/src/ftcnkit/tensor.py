"""Dense tensor engine with reverse-mode automatic differentiation.

Every operation the temporal-convolution detector needs is implemented
twice over: a numpy forward pass, and a backward closure that is recorded
on a :class:`Tape` while one is active.  With no tape active the ops are
plain numpy and carry no bookkeeping, which is the fast path used for
inference.

Numerical contract: reductions that feed the inference path (layer norm,
softmax, spatial averaging, loss means) are computed with an explicit
pairwise fold of elementwise adds.  numpy's builtin ``sum``/``mean`` pick
their chunking from buffer alignment, so two bit-identical inputs in
different allocations can reduce to different bits; the fold does not.
The spatial average additionally sorts its window first, so any spatial
permutation of the input reduces in exactly the same order.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "Tape",
    "RunningStats",
    "tensor",
    "parameter",
    "backward",
    "add",
    "mul",
    "scale",
    "matmul",
    "linear",
    "conv3d",
    "maxpool3d",
    "spatial_avg_pool",
    "normalize",
    "batch_norm",
    "layer_norm",
    "activation",
    "relu",
    "gelu",
    "sigmoid",
    "softmax",
    "reshape",
    "transpose",
    "concat",
    "narrow",
    "mean",
    "tsum",
    "multi_head_attention",
    "bce_with_logits",
]

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

_state = threading.local()


def _active_tape() -> Optional["Tape"]:
    return getattr(_state, "tape", None)


class Tensor:
    """Immutable dense array. ``watched`` marks autodiff leaves (parameters)."""

    __slots__ = ("data", "watched")

    def __init__(self, data: np.ndarray, watched: bool = False):
        self.data = data
        self.watched = watched

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"

    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    def __radd__(self, other):
        return add(_wrap(other, self.dtype), self)

    def __sub__(self, other):
        return add(self, scale(_wrap(other, self.dtype), -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)


def tensor(data, dtype=np.float32) -> Tensor:
    """Wrap array-like data as an untracked tensor."""
    arr = np.asarray(data, dtype=dtype)
    _check_shape(arr)
    return Tensor(arr)


def parameter(data, dtype=None) -> Tensor:
    """Wrap array-like data as a trainable leaf (gradients accumulate here)."""
    arr = np.array(data, dtype=dtype if dtype is not None else np.float32)
    _check_shape(arr)
    return Tensor(arr, watched=True)


def _wrap(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _check_shape(arr: np.ndarray) -> None:
    if arr.ndim > 5:
        raise ValueError(f"tensors are limited to 5 axes, got shape {arr.shape}")
    if arr.size == 0:
        raise ValueError(f"empty tensor of shape {arr.shape} is not allowed")


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: Sequence[Tensor], backward: Callable):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of executed operations for reverse accumulation.

    Use as a context manager around a forward pass, then call
    :meth:`backward` exactly once with the scalar loss.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._grads: dict[int, np.ndarray] = {}
        self._consumed = False

    def __enter__(self) -> "Tape":
        if _active_tape() is not None:
            raise RuntimeError("a tape is already active in this thread")
        _state.tape = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _state.tape = None

    def backward(self, loss: Tensor) -> None:
        """Run reverse accumulation from ``loss`` through the recorded ops."""
        if self._consumed:
            raise RuntimeError("tape already consumed; record a fresh forward pass")
        self._consumed = True
        if loss.data.size != 1:
            raise ValueError(f"loss must be a single value, got shape {loss.shape}")
        self._grads[id(loss)] = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            g = self._grads.get(id(node.out))
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not isinstance(inp, Tensor):
                    continue
                acc = self._grads.get(id(inp))
                if acc is None:
                    # Copy: closures may return views or one buffer for
                    # several inputs, and accumulation mutates in place.
                    self._grads[id(inp)] = np.array(gi)
                else:
                    acc += gi

    def grad(self, t: Tensor) -> np.ndarray:
        """Gradient accumulated for ``t`` (zeros if the loss never used it)."""
        g = self._grads.get(id(t))
        if g is None:
            return np.zeros_like(t.data)
        return g

    def param_grads(self, params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
        return {name: self.grad(p) for name, p in params.items()}


def backward(tape: Tape, loss: Tensor, params: Optional[Mapping[str, Tensor]] = None):
    """Reverse-accumulate ``loss`` over ``tape``; map parameter names to grads."""
    tape.backward(loss)
    if params is None:
        return {}
    return tape.param_grads(params)


def _record(out: Tensor, inputs: Sequence, backward_fn: Callable) -> Tensor:
    tape = _active_tape()
    if tape is None:
        return out
    if not any(isinstance(i, Tensor) and i.watched for i in inputs):
        return out
    out.watched = True
    tape.nodes.append(_Node(out, inputs, backward_fn))
    return out


# ---------------------------------------------------------------------------
# deterministic reductions


def _fold_sum_last(a: np.ndarray) -> np.ndarray:
    # Pairwise halving built from elementwise adds: bitwise reproducible
    # across allocations, unlike np.sum whose chunking follows alignment.
    x = np.ascontiguousarray(a).copy()
    m = x.shape[-1]
    while m > 1:
        half = m // 2
        if m % 2:
            x[..., 0] = x[..., 0] + x[..., m - 1]
        x = x[..., :half] + x[..., half : 2 * half]
        m = half
    return x[..., 0]


def _fold_sum(a: np.ndarray, axis) -> np.ndarray:
    if axis is None:
        return _fold_sum_last(a.reshape(-1))
    return _fold_sum_last(np.moveaxis(a, axis, -1))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcasted gradient back to ``shape``."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(out, (a, b), bwd)


def scale(a: Tensor, s: float) -> Tensor:
    out = Tensor(a.data * a.dtype.type(s))

    def bwd(g):
        return (g * a.dtype.type(s),)

    return _record(out, (a,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != b.ndim and not (a.ndim == 2 or b.ndim == 2):
        raise ValueError(f"matmul rank mismatch: {a.shape} @ {b.shape}")
    if a.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul batch axes differ: {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = Tensor(np.matmul(a.data, b.data))

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record(out, (a, b), bwd)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Affine map over the last axis: y = x W^T + b with W of shape (Dout, Din)."""
    din = w.shape[1]
    if x.shape[-1] != din:
        raise ValueError(
            f"linear input last axis {x.shape} does not match weights {w.shape}"
        )
    y = np.matmul(x.data, w.data.T)
    if b is not None:
        if b.shape != (w.shape[0],):
            raise ValueError(f"bias shape {b.shape} does not match weights {w.shape}")
        y = y + b.data
    out = Tensor(y)

    def bwd(g):
        gx = np.matmul(g, w.data)
        g2 = g.reshape(-1, w.shape[0])
        x2 = x.data.reshape(-1, din)
        gw = g2.T @ x2
        gb = g2.sum(axis=0) if b is not None else None
        return gx, gw, gb

    return _record(out, (x, w, b), bwd)


# ---------------------------------------------------------------------------
# convolution and pooling


def _triple(v) -> tuple:
    if isinstance(v, int):
        return (v, v, v)
    t = tuple(int(i) for i in v)
    if len(t) != 3:
        raise ValueError(f"expected 3 entries, got {v}")
    return t


def _out_dim(d: int, k: int, s: int, p: int) -> int:
    return (d + 2 * p - k) // s + 1


def _with_batch(x: Tensor):
    if x.ndim == 4:
        return x.data[None], True
    if x.ndim == 5:
        return x.data, False
    raise ValueError(f"expected a 4- or 5-axis video tensor, got shape {x.shape}")


def conv3d(
    x: Tensor,
    w: Tensor,
    b: Optional[Tensor] = None,
    stride=(1, 1, 1),
    padding=(0, 0, 0),
) -> Tensor:
    """3D convolution over (C, T, H, W) input with zero padding.

    ``w`` has shape (Cout, Cin, Kt, Kh, Kw).  Output dims follow
    floor((d + 2p - k) / s) + 1 per axis.
    """
    xd, squeeze = _with_batch(x)
    if w.ndim != 5:
        raise ValueError(f"conv3d weights must have 5 axes, got {w.shape}")
    stride = _triple(stride)
    padding = _triple(padding)
    n, cin, t, h, wd = xd.shape
    cout, wcin, kt, kh, kw = w.shape
    if wcin != cin:
        raise ValueError(
            f"conv3d channel mismatch: input shape {x.shape} has {cin} channels, "
            f"weights shape {w.shape} expect {wcin}"
        )
    if any(s < 1 for s in stride):
        raise ValueError(f"conv3d strides must be >= 1, got {stride}")
    if any(p < 0 for p in padding):
        raise ValueError(f"conv3d padding must be >= 0, got {padding}")
    dims = (t, h, wd)
    kern = (kt, kh, kw)
    for d, k, p in zip(dims, kern, padding):
        if k > d + 2 * p:
            raise ValueError(
                f"conv3d kernel {kern} exceeds padded input {x.shape} with padding {padding}"
            )
    to, ho, wo = (_out_dim(d, k, s, p) for d, k, s, p in zip(dims, kern, stride, padding))
    if min(to, ho, wo) < 1:
        raise ValueError(
            f"conv3d produces empty output {(cout, to, ho, wo)} from input {x.shape}"
        )
    if b is not None and b.shape != (cout,):
        raise ValueError(f"conv3d bias shape {b.shape} does not match {cout} filters")

    pt, ph, pw = padding
    st, sh, sw = stride
    xp = np.pad(xd, ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw)))
    out = np.zeros((n, cout, to, ho, wo), dtype=xd.dtype)
    of = out.reshape(n, cout, -1)
    for it in range(kt):
        for ih in range(kh):
            for iw in range(kw):
                view = xp[
                    :,
                    :,
                    it : it + st * (to - 1) + 1 : st,
                    ih : ih + sh * (ho - 1) + 1 : sh,
                    iw : iw + sw * (wo - 1) + 1 : sw,
                ]
                of += np.matmul(w.data[:, :, it, ih, iw], view.reshape(n, cin, -1))
    if b is not None:
        out += b.data[None, :, None, None, None]
    res = Tensor(out[0] if squeeze else out)

    def bwd(g):
        gd = g[None] if squeeze else g
        g2 = gd.reshape(n, cout, -1)
        dxp = np.zeros_like(xp)
        dw = np.zeros_like(w.data)
        for it in range(kt):
            for ih in range(kh):
                for iw in range(kw):
                    sl = (
                        slice(None),
                        slice(None),
                        slice(it, it + st * (to - 1) + 1, st),
                        slice(ih, ih + sh * (ho - 1) + 1, sh),
                        slice(iw, iw + sw * (wo - 1) + 1, sw),
                    )
                    view = xp[sl].reshape(n, cin, -1)
                    dw[:, :, it, ih, iw] = np.matmul(g2, view.transpose(0, 2, 1)).sum(0)
                    dview = np.matmul(w.data[:, :, it, ih, iw].T, g2)
                    dxp[sl] += dview.reshape(n, cin, to, ho, wo)
        dx = dxp[:, :, pt : pt + t, ph : ph + h, pw : pw + wd]
        if squeeze:
            dx = dx[0]
        db = gd.sum(axis=(0, 2, 3, 4)) if b is not None else None
        return dx, dw, db

    return _record(res, (x, w, b), bwd)


def maxpool3d(x: Tensor, kernel, stride, padding=(0, 0, 0)) -> Tensor:
    """Max pooling with -inf padding; gradient routes to the first max in scan order."""
    xd, squeeze = _with_batch(x)
    kernel = _triple(kernel)
    stride = _triple(stride)
    padding = _triple(padding)
    n, c, t, h, wd = xd.shape
    dims = (t, h, wd)
    if any(s < 1 for s in stride):
        raise ValueError(f"maxpool3d strides must be >= 1, got {stride}")
    for d, k, p in zip(dims, kernel, padding):
        if p < 0 or p >= k:
            raise ValueError(f"maxpool3d padding {padding} must satisfy 0 <= p < kernel {kernel}")
        if k > d + 2 * p:
            raise ValueError(
                f"maxpool3d window {kernel} exceeds padded input {x.shape} with padding {padding}"
            )
    to, ho, wo = (
        _out_dim(d, k, s, p) for d, k, s, p in zip(dims, kernel, stride, padding)
    )
    if min(to, ho, wo) < 1:
        raise ValueError(f"maxpool3d produces empty output from input {x.shape}")

    kt, kh, kw = kernel
    st, sh, sw = stride
    pt, ph, pw = padding
    fill = -np.inf if np.issubdtype(xd.dtype, np.floating) else None
    xp = np.pad(
        xd, ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw)), constant_values=fill
    )

    def slices(it, ih, iw):
        return (
            slice(None),
            slice(None),
            slice(it, it + st * (to - 1) + 1, st),
            slice(ih, ih + sh * (ho - 1) + 1, sh),
            slice(iw, iw + sw * (wo - 1) + 1, sw),
        )

    out = np.full((n, c, to, ho, wo), -np.inf, dtype=xd.dtype)
    for it in range(kt):
        for ih in range(kh):
            for iw in range(kw):
                np.maximum(out, xp[slices(it, ih, iw)], out=out)
    res = Tensor(out[0] if squeeze else out)

    def bwd(g):
        gd = g[None] if squeeze else g
        dxp = np.zeros_like(xp)
        taken = np.zeros(out.shape, dtype=bool)
        for it in range(kt):
            for ih in range(kh):
                for iw in range(kw):
                    sl = slices(it, ih, iw)
                    hit = (xp[sl] == out) & ~taken
                    dxp[sl] += gd * hit
                    taken |= hit
        dx = dxp[:, :, pt : pt + t, ph : ph + h, pw : pw + wd]
        return ((dx[0] if squeeze else dx),)

    return _record(res, (x,), bwd)


def spatial_avg_pool(x: Tensor) -> Tensor:
    """Average over the two spatial axes: (..., C, T, H, W) -> (..., C, T).

    The window is sorted before the pairwise fold so any spatial permutation
    of the input produces bit-identical output.
    """
    xd, squeeze = _with_batch(x)
    n, c, t, h, wd = xd.shape
    m = h * wd
    flat = np.sort(xd.reshape(n, c, t, m), axis=-1)
    out = _fold_sum_last(flat) / xd.dtype.type(m)
    res = Tensor(out[0] if squeeze else out)

    def bwd(g):
        gd = g[None] if squeeze else g
        dx = np.broadcast_to(
            (gd / xd.dtype.type(m))[..., None, None], xd.shape
        ).copy()
        return ((dx[0] if squeeze else dx),)

    return _record(res, (x,), bwd)


# ---------------------------------------------------------------------------
# normalization


class RunningStats:
    """Running mean/variance for batch normalization (momentum update)."""

    def __init__(self, channels: int, momentum: float = 0.1, dtype=np.float32):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)
        self.momentum = momentum

    def update(self, mean: np.ndarray, var: np.ndarray) -> None:
        m = self.mean.dtype.type(self.momentum)
        self.mean = (1 - m) * self.mean + m * mean.astype(self.mean.dtype)
        self.var = (1 - m) * self.var + m * var.astype(self.var.dtype)


def batch_norm(
    x: Tensor,
    gain: Tensor,
    shift: Tensor,
    state: RunningStats,
    eps: float = 1e-5,
    training: bool = True,
) -> Tensor:
    """Per-channel normalization over all non-channel axes.

    Channel axis is 1 for batched (5-axis) input, 0 otherwise.  Training
    mode normalizes with batch statistics and updates ``state``; eval mode
    normalizes with the running statistics.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    caxis = 1 if x.ndim >= 4 and x.shape[0] != gain.shape[0] or x.ndim == 5 else 0
    if x.ndim <= 2:
        caxis = x.ndim - 1
    c = x.shape[caxis]
    if gain.shape != (c,) or shift.shape != (c,):
        raise ValueError(
            f"gain/shift shapes {gain.shape}/{shift.shape} do not match {c} channels"
        )
    axes = tuple(i for i in range(x.ndim) if i != caxis)
    m = int(np.prod([x.shape[i] for i in axes])) if axes else 1
    if m == 0:
        raise ValueError("batch_norm over an empty axis")
    bshape = tuple(c if i == caxis else 1 for i in range(x.ndim))

    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        state.update(mu, var)
    else:
        mu = state.mean.astype(x.dtype)
        var = state.var.astype(x.dtype)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = (x.data - mu.reshape(bshape)) * inv.reshape(bshape)
    out = Tensor(xhat * gain.data.reshape(bshape) + shift.data.reshape(bshape))

    def bwd(g):
        ggain = (g * xhat).sum(axis=axes)
        gshift = g.sum(axis=axes)
        gi = g * gain.data.reshape(bshape)
        if training:
            gmean = gi.mean(axis=axes, keepdims=True)
            gdot = (gi * xhat).mean(axis=axes, keepdims=True)
            dx = inv.reshape(bshape) * (gi - gmean - xhat * gdot)
        else:
            dx = gi * inv.reshape(bshape)
        return dx, ggain, gshift

    return _record(out, (x, gain, shift), bwd)


def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalization over the last axis, then affine gain/shift."""
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    d = x.shape[-1]
    if d == 0:
        raise ValueError("layer_norm over an empty axis")
    if gain.shape != (d,) or shift.shape != (d,):
        raise ValueError(
            f"gain/shift shapes {gain.shape}/{shift.shape} do not match last axis {d}"
        )
    mu = (_fold_sum_last(x.data) / x.dtype.type(d))[..., None]
    diff = x.data - mu
    var = (_fold_sum_last(diff * diff) / x.dtype.type(d))[..., None]
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = diff * inv
    out = Tensor(xhat * gain.data + shift.data)

    def bwd(g):
        red = tuple(range(g.ndim - 1))
        ggain = (g * xhat).sum(axis=red) if red else g * xhat
        gshift = g.sum(axis=red) if red else g
        gi = g * gain.data
        gmean = gi.mean(axis=-1, keepdims=True)
        gdot = (gi * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (gi - gmean - xhat * gdot)
        return dx, ggain, gshift

    return _record(out, (x, gain, shift), bwd)


def normalize(
    x: Tensor,
    kind: str,
    gain: Tensor,
    shift: Tensor,
    eps: float = 1e-5,
    mode: str = "train",
    state: Optional[RunningStats] = None,
) -> Tensor:
    """Dispatch between per-channel batch norm and last-axis layer norm."""
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    if kind == "batch-per-channel":
        if state is None:
            raise ValueError("batch-per-channel normalization needs running statistics")
        return batch_norm(x, gain, shift, state, eps=eps, training=mode == "train")
    if kind == "layer-last-axis":
        return layer_norm(x, gain, shift, eps=eps)
    raise ValueError(f"unknown normalization kind {kind!r}")


# ---------------------------------------------------------------------------
# activations


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0))

    def bwd(g):
        return (g * (x.data > 0),)

    return _record(out, (x,), bwd)


def gelu(x: Tensor) -> Tensor:
    # Exact Gaussian-CDF form x * Phi(x), not the tanh approximation.
    phi = 0.5 * (1.0 + erf(x.data * x.dtype.type(_INV_SQRT2)))
    out = Tensor(x.data * phi)

    def bwd(g):
        pdf = np.exp(-0.5 * x.data * x.data) * x.dtype.type(_INV_SQRT2PI)
        return (g * (phi + x.data * pdf),)

    return _record(out, (x,), bwd)


def sigmoid(x: Tensor) -> Tensor:
    out = Tensor(_sigmoid_stable(x.data))

    def bwd(g):
        s = out.data
        return (g * s * (1 - s),)

    return _record(out, (x,), bwd)


def _sigmoid_stable(z: np.ndarray) -> np.ndarray:
    t = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + t), t / (1.0 + t))


def activation(x: Tensor, kind: str) -> Tensor:
    fns = {"relu": relu, "gelu": gelu, "sigmoid": sigmoid}
    if kind not in fns:
        raise ValueError(f"unknown activation kind {kind!r}")
    return fns[kind](x)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along ``axis``; outputs sum to 1."""
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    denom = np.expand_dims(_fold_sum(e, axis), axis if axis >= 0 else e.ndim + axis)
    out = Tensor(e / denom)

    def bwd(g):
        s = out.data
        dot = (g * s).sum(axis=axis, keepdims=True)
        return (s * (g - dot),)

    return _record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# shape ops


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(np.reshape(x.data, shape))

    def bwd(g):
        return (g.reshape(x.shape),)

    return _record(out, (x,), bwd)


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    out = Tensor(np.transpose(x.data, axes))

    def bwd(g):
        return (np.transpose(g, inv),)

    return _record(out, (x,), bwd)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]

    def bwd(g):
        return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=axis))

    return _record(out, tuple(tensors), bwd)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of ``length`` entries along ``axis``."""
    sl = tuple(
        slice(start, start + length) if i == axis else slice(None)
        for i in range(x.ndim)
    )
    out = Tensor(x.data[sl].copy())

    def bwd(g):
        dx = np.zeros_like(x.data)
        dx[sl] = g
        return (dx,)

    return _record(out, (x,), bwd)


def tsum(x: Tensor, axis: Optional[int] = None) -> Tensor:
    """Pairwise-fold sum over ``axis`` (all elements when axis is None)."""
    out = Tensor(np.asarray(_fold_sum(x.data, axis)))

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _record(out, (x,), bwd)


def mean(x: Tensor, axis: Optional[int] = None) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return scale(tsum(x, axis), 1.0 / n)


# ---------------------------------------------------------------------------
# attention


def multi_head_attention(
    x: Tensor,
    heads: int,
    head_dim: int,
    wq: Tensor,
    bq: Tensor,
    wk: Tensor,
    bk: Tensor,
    wv: Tensor,
    bv: Tensor,
    wo: Tensor,
    bo: Tensor,
) -> Tensor:
    """Multi-head scaled dot-product self-attention over token sequences.

    ``x`` is (S, D) or (B, S, D); per-head projections are D -> head_dim,
    concatenated heads are projected back to D.  Built from the primitive
    ops above so gradients compose automatically.
    """
    if heads < 1 or head_dim < 1:
        raise ValueError(f"heads and head_dim must be positive, got {heads}, {head_dim}")
    squeeze = x.ndim == 2
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    bsz, s, d = x.shape
    inner = heads * head_dim

    def split_heads(t):
        return transpose(reshape(t, (bsz, s, heads, head_dim)), (0, 2, 1, 3))

    q = split_heads(linear(x, wq, bq))
    k = split_heads(linear(x, wk, bk))
    v = split_heads(linear(x, wv, bv))
    att = softmax(
        matmul(scale(q, 1.0 / math.sqrt(head_dim)), transpose(k, (0, 1, 3, 2))),
        axis=-1,
    )
    ctx = reshape(transpose(matmul(att, v), (0, 2, 1, 3)), (bsz, s, inner))
    out = linear(ctx, wo, bo)
    if squeeze:
        out = reshape(out, (s, d))
    return out


# ---------------------------------------------------------------------------
# loss


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross-entropy computed in logit space (no probability clamping)."""
    y = np.asarray(targets, dtype=logits.dtype)
    if y.shape != logits.shape:
        raise ValueError(f"targets shape {y.shape} does not match logits {logits.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    z = logits.data
    per = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    n = per.size
    out = Tensor(np.asarray(_fold_sum(per, None) / logits.dtype.type(n)))

    def bwd(g):
        return (g * (_sigmoid_stable(z) - y) / logits.dtype.type(n), None)

    return _record(out, (logits, None), bwd)
