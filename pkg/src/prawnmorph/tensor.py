"""Dense tensors with reverse-mode automatic differentiation.

The engine is deliberately small: a :class:`Tensor` wraps a numpy array, a
:class:`Tape` records every operation executed inside its ``with`` block, and
:func:`backward` replays the tape in reverse to fill the ``grad`` buffers of
the leaf tensors.  Operations executed outside a tape run as plain numpy and
never track gradients.

Conventions, fixed for reproducibility:

* convolution is cross-correlation (no kernel flip),
* reductions use numpy's row-major sequential summation order,
* max-pool gradient ties break to the first maximal element in row-major
  window order,
* arrays keep the dtype they were created with; training code uses float32,
  gradient checks run the same code paths at float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, ShapeError

__all__ = [
    "Tensor",
    "Tape",
    "AdamState",
    "backward",
    "adam_step",
    "conv2d",
    "linear",
    "relu",
    "sigmoid",
    "maxpool2",
    "spatial_softmax",
    "bilinear_resize",
    "log",
    "sqrt",
]

# Memory cap for im2col scratch buffers (number of scalars per chunk).
_COL_BUDGET = 1 << 25

# Guard for d(sqrt)/dx at x == 0 so gradients stay finite.
_SQRT_FLOOR = 1e-12


class Tensor:
    """Dense N-dimensional array with an optional gradient buffer.

    ``data`` is stored row-major; non-float input is promoted to float32.
    Tensors produced by operations are treated as immutable; only leaf
    parameters are updated in place (between steps, by the optimizer).
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # Arithmetic sugar; the heavy lifting lives in the module functions.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not an engine op")
        return mul(self, 1.0 / other)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)


@dataclass
class _Node:
    """One recorded operation: output, inputs and the local gradient rule."""

    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], tuple]


class Tape:
    """Ordered record of operations, appended in execution order.

    Execution order is a valid topological order (inputs always exist before
    the op that consumes them), which is what :func:`backward` relies on.
    """

    def __init__(self):
        self.ops: list[_Node] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPE_STACK.pop()

    def __len__(self) -> int:
        return len(self.ops)


_TAPE_STACK: list[Tape] = []


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out: Tensor, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    """Attach ``out`` to the active tape if any input tracks gradients."""
    if _TAPE_STACK and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _TAPE_STACK[-1].ops.append(_Node(out, inputs, backward_fn))
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Fill ``grad`` of every requires_grad leaf reachable from ``loss``.

    ``loss`` must be a scalar.  Gradients of tensors that feed several
    operations accumulate by summation.  Leaves keep previously accumulated
    gradients (call ``zero_grad`` between steps).
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    flows: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    holders: dict[int, Tensor] = {id(loss): loss}
    produced = {id(node.out) for node in tape.ops}
    for node in reversed(tape.ops):
        g = flows.pop(id(node.out), None)
        holders.pop(id(node.out), None)
        if g is None:
            continue
        for t, gt in zip(node.inputs, node.backward(g)):
            if gt is None or not t.requires_grad:
                continue
            key = id(t)
            if key in flows:
                flows[key] = flows[key] + gt
            else:
                flows[key] = gt
                holders[key] = t
    for key, t in holders.items():
        if key in produced:
            continue
        g = flows[key]
        t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data + b.data)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data * b.data)

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(out, (a, b), bwd)


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x); gradient is 0 at x <= 0 and 1 at x > 0."""
    x = _as_tensor(x)
    out = Tensor(np.maximum(x.data, 0))

    def bwd(g):
        return (g * (x.data > 0),)

    return _record(out, (x,), bwd)


def sigmoid(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    d = x.data
    y = np.empty_like(d)
    pos = d >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    y[~pos] = e / (1.0 + e)
    out = Tensor(y)

    def bwd(g):
        return (g * y * (1.0 - y),)

    return _record(out, (x,), bwd)


def log(x: Tensor) -> Tensor:
    """Natural logarithm; caller guarantees strictly positive input."""
    x = _as_tensor(x)
    out = Tensor(np.log(x.data))

    def bwd(g):
        return (g / x.data,)

    return _record(out, (x,), bwd)


def sqrt(x: Tensor) -> Tensor:
    """Elementwise square root.

    The derivative 1/(2*sqrt(x)) is floored at sqrt(x) = 1e-12 so that a loss
    sitting exactly at its zero (e.g. a perfect prediction) produces a finite,
    zero-times-finite gradient instead of NaN.
    """
    x = _as_tensor(x)
    y = np.sqrt(x.data)
    out = Tensor(y)

    def bwd(g):
        return (g / (2.0 * np.maximum(y, _SQRT_FLOOR)),)

    return _record(out, (x,), bwd)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(x.data.sum(axis=axis, keepdims=keepdims))

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record(out, (x,), bwd)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(x.data.mean(axis=axis, keepdims=keepdims))
    count = x.data.size // max(out.data.size, 1)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape) / count,)

    return _record(out, (x,), bwd)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(x.data.reshape(shape))

    def bwd(g):
        return (g.reshape(x.shape),)

    return _record(out, (x,), bwd)


def permute(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(np.ascontiguousarray(x.data.transpose(axes)))
    inverse = tuple(np.argsort(axes))

    def bwd(g):
        return (g.transpose(inverse),)

    return _record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# neural-network ops
# ---------------------------------------------------------------------------

def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """weight @ x + bias for a vector x, or x @ weight.T + bias for a batch.

    ``x`` is (m,) or (batch, m); ``weight`` is (out, m); ``bias`` is (out,).
    """
    x, weight = _as_tensor(x), _as_tensor(weight)
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(
            f"linear: input extent {x.shape[-1]} != weight inner extent {weight.shape[1]}"
        )
    y = x.data @ weight.data.T
    if bias is not None:
        bias = _as_tensor(bias)
        y = y + bias.data
    out = Tensor(y)

    if bias is None:
        def bwd(g):
            if x.ndim == 1:
                return g @ weight.data, np.outer(g, x.data)
            return g @ weight.data, g.T @ x.data

        return _record(out, (x, weight), bwd)

    def bwd(g):
        if x.ndim == 1:
            return g @ weight.data, np.outer(g, x.data), g
        return g @ weight.data, g.T @ x.data, g.sum(axis=0)

    return _record(out, (x, weight, bias), bwd)


def _pad_input(x: np.ndarray, padding: int) -> np.ndarray:
    if not padding:
        return x
    n, c, h, w = x.shape
    xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
    xp[:, :, padding:padding + h, padding:padding + w] = x
    return xp


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Lower windows to a (C*k*k, N*Ho*Wo) matrix via k*k bulk slice copies."""
    n, c = xp.shape[0], xp.shape[1]
    cols = np.empty((c, k, k, n, ho, wo), dtype=xp.dtype)
    for u in range(k):
        for v in range(k):
            src = xp[:, :, u:u + stride * ho:stride, v:v + stride * wo:stride]
            cols[:, u, v] = src.transpose(1, 0, 2, 3)
    return cols.reshape(c * k * k, n * ho * wo)


def _conv2d_forward(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> np.ndarray:
    n, c, h, wd = x.shape
    d, _, k, _ = w.shape
    xp = _pad_input(x, padding)
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    w2 = np.ascontiguousarray(w.reshape(d, c * k * k))
    out = np.empty((n, d, ho, wo), dtype=x.dtype)
    chunk = max(1, _COL_BUDGET // max(c * k * k * ho * wo, 1))
    for i in range(0, n, chunk):
        m = min(chunk, n - i)
        cols = _im2col(xp[i:i + m], k, stride, ho, wo)
        block = w2 @ cols  # (d, m*ho*wo)
        out[i:i + m] = block.reshape(d, m, ho, wo).transpose(1, 0, 2, 3)
    return out


def _conv2d_backward(g: np.ndarray, x: np.ndarray, w: np.ndarray,
                     stride: int, padding: int) -> tuple[np.ndarray, np.ndarray]:
    n, c, h, wd = x.shape
    d, _, k, _ = w.shape
    ho, wo = g.shape[2], g.shape[3]
    hp, wp = h + 2 * padding, wd + 2 * padding
    xp = _pad_input(x, padding)
    w2 = np.ascontiguousarray(w.reshape(d, c * k * k))
    dw2 = np.zeros((d, c * k * k), dtype=w.dtype)
    dxp = np.zeros((n, c, hp, wp), dtype=x.dtype)
    chunk = max(1, _COL_BUDGET // max(c * k * k * ho * wo, 1))
    for i in range(0, n, chunk):
        m = min(chunk, n - i)
        g2 = np.ascontiguousarray(g[i:i + m].transpose(1, 0, 2, 3)).reshape(d, m * ho * wo)
        cols = _im2col(xp[i:i + m], k, stride, ho, wo)
        dw2 += g2 @ cols.T
        dcols = (w2.T @ g2).reshape(c, k, k, m, ho, wo)
        dst = dxp[i:i + m]
        for u in range(k):
            for v in range(k):
                dst[:, :, u:u + stride * ho:stride, v:v + stride * wo:stride] += (
                    dcols[:, u, v].transpose(1, 0, 2, 3)
                )
    if padding:
        dxp = dxp[:, :, padding:hp - padding, padding:wp - padding]
    return dxp, dw2.reshape(w.shape)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation (no kernel flip).

    ``x`` is (channels, H, W) or (batch, channels, H, W); ``weight`` is
    (out_channels, in_channels, k, k); output extent per axis is
    floor((in + 2*padding - k)/stride) + 1.
    """
    x, weight = _as_tensor(x), _as_tensor(weight)
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be >= 1, got {stride}")
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"conv2d: weight must be (d, s, k, k), got {weight.shape}")
    batched = x.ndim == 4
    if not batched:
        if x.ndim != 3:
            raise ShapeError(f"conv2d: input must be (s, H, W), got {x.shape}")
        xd = x.data[None]
    else:
        xd = x.data
    k = weight.shape[2]
    if xd.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"conv2d: input has {xd.shape[1]} channels, weight expects {weight.shape[1]}"
        )
    if k > xd.shape[2] + 2 * padding or k > xd.shape[3] + 2 * padding:
        raise ShapeError(
            f"conv2d: kernel {k} larger than padded input {xd.shape[2:]} + 2*{padding}"
        )
    y = _conv2d_forward(xd, weight.data, stride, padding)
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"conv2d: bias shape {bias.shape} != ({weight.shape[0]},)")
        y += bias.data[:, None, None]
    out = Tensor(y if batched else y[0])

    def bwd(g):
        gb = g if batched else g[None]
        dx, dw = _conv2d_backward(gb, xd, weight.data, stride, padding)
        dx = dx if batched else dx[0]
        if bias is None:
            return dx, dw
        return dx, dw, gb.sum(axis=(0, 2, 3))

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _record(out, inputs, bwd)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; H and W must be even.

    The gradient routes to the first maximal element of each window in
    row-major order.
    """
    x = _as_tensor(x)
    batched = x.ndim == 4
    xd = x.data if batched else x.data[None]
    n, c, h, w = xd.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2: spatial extents must be even, got {h}x{w}")
    windows = xd.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    windows = windows.reshape(n, c, h // 2, w // 2, 4)
    idx = windows.argmax(axis=-1)  # first max in row-major window order
    y = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
    out = Tensor(y if batched else y[0])

    def bwd(g):
        gb = g if batched else g[None]
        dwin = np.zeros((n, c, h // 2, w // 2, 4), dtype=xd.dtype)
        np.put_along_axis(dwin, idx[..., None], gb[..., None], axis=-1)
        dx = dwin.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        dx = dx.reshape(n, c, h, w)
        return (dx if batched else dx[0],)

    return _record(out, (x,), bwd)


def spatial_softmax(x: Tensor) -> Tensor:
    """Per-channel softmax over the spatial grid; each channel sums to 1."""
    x = _as_tensor(x)
    d = x.data
    m = d.max(axis=(-2, -1), keepdims=True)
    e = np.exp(d - m)
    y = e / e.sum(axis=(-2, -1), keepdims=True)
    out = Tensor(y)

    def bwd(g):
        dot = (g * y).sum(axis=(-2, -1), keepdims=True)
        return (y * (g - dot),)

    return _record(out, (x,), bwd)


_RESIZE_CACHE: dict[tuple[int, int, str], np.ndarray] = {}


def _resize_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    """1-D bilinear interpolation matrix, align-corners-false with edge clamp.

    Output sample i reads the continuous source position
    (i + 0.5) * n_in / n_out - 0.5, linearly blending its two neighbours;
    positions outside [0, n_in - 1] clamp to the border sample.
    """
    key = (n_in, n_out, np.dtype(dtype).str)
    cached = _RESIZE_CACHE.get(key)
    if cached is not None:
        return cached
    m = np.zeros((n_out, n_in), dtype=np.float64)
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    lo = np.clip(np.floor(pos).astype(int), 0, n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = np.clip(pos - np.floor(pos), 0.0, 1.0)
    frac[pos < 0] = 0.0
    frac[pos > n_in - 1] = 0.0
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    m = m.astype(dtype)
    _RESIZE_CACHE[key] = m
    return m


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resampling of the trailing two axes (align-corners false)."""
    x = _as_tensor(x)
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"bilinear_resize: target extents must be >= 1, got {out_h}x{out_w}")
    h, w = x.shape[-2], x.shape[-1]
    ry = _resize_matrix(h, out_h, x.dtype)
    rx = _resize_matrix(w, out_w, x.dtype)
    y = np.matmul(np.matmul(ry, x.data), rx.T)
    out = Tensor(y)

    def bwd(g):
        return (np.matmul(np.matmul(ry.T, g), rx),)

    return _record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """Adam moment buffers plus the constants from the usual formulation."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray] | None,
              state: AdamState) -> tuple[Sequence[Tensor], AdamState]:
    """One bias-corrected Adam update, in place on the parameter buffers.

    ``grads`` defaults to each parameter's ``grad`` buffer; a missing
    gradient counts as zero.
    """
    if grads is None:
        grads = [p.grad for p in params]
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    state.step += 1
    b1c = 1.0 - state.beta1 ** state.step
    b2c = 1.0 - state.beta2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ShapeError(f"adam_step: grad shape {g.shape} != param shape {p.data.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g)
        p.data -= state.lr * (m / b1c) / (np.sqrt(v / b2c) + state.eps)
    return params, state
