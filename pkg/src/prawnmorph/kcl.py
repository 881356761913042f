"""Kronecker convolution layers.

A layer's dense weight H (shape s x d x k x k, input channels first) is never
stored: it is assembled on every forward pass as a sum of Kronecker products
between n small algebra matrices A_i (n x n) and n filter blocks F_i
(s/n x d/n x k x k).  Learnable scalars per layer: n^3 + s*d*k^2/n, plus d
bias terms, versus s*d*k^2 for a dense convolution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import Tensor, _record, add, conv2d, permute

__all__ = [
    "KclParams",
    "LayerCost",
    "kron",
    "assemble_weight",
    "kcl_forward",
    "count_params",
    "count_params_dense",
    "count_flops",
]


def kron(a: Tensor, f: Tensor) -> Tensor:
    """Kronecker product of a matrix with a filter block.

    ``a`` is (p, q) and ``f`` is (cin, cout, k, k); the result has shape
    (p*cin, q*cout, k, k) where block (i, j) equals a[i, j] * f.
    """
    a, f = (x if isinstance(x, Tensor) else Tensor(x) for x in (a, f))
    if a.ndim != 2 or f.ndim != 4:
        raise ShapeError(f"kron: expected (p,q) and (a,b,k,k), got {a.shape} and {f.shape}")
    p, q = a.shape
    ci, co, kh, kw = f.shape
    blocks = a.data[:, None, :, None, None, None] * f.data[None, :, None, :, :, :]
    out = Tensor(blocks.reshape(p * ci, q * co, kh, kw))

    def bwd(g):
        g6 = g.reshape(p, ci, q, co, kh, kw)
        da = np.einsum("iajbuv,abuv->ij", g6, f.data)
        df = np.einsum("iajbuv,ij->abuv", g6, a.data)
        return da, df

    return _record(out, (a, f), bwd)


@dataclass
class KclParams:
    """Learnable pieces of one Kronecker convolution layer.

    ``a`` holds n matrices of shape (n, n); ``f`` holds n filter blocks of
    shape (s/n, d/n, k, k); ``bias`` is a length-d vector or None.
    """

    n: int
    s: int
    d: int
    k: int
    a: list[Tensor]
    f: list[Tensor]
    bias: Tensor | None

    def __post_init__(self):
        _check_divisible(self.s, self.d, self.n)

    @classmethod
    def init(cls, s: int, d: int, k: int, n: int, rng: np.random.Generator,
             dtype=np.float32, with_bias: bool = True) -> "KclParams":
        """Fresh layer: A_i start as identity / sqrt(n), F_i as fan-in-scaled
        uniform noise, bias at zero."""
        _check_divisible(s, d, n)
        eye = (np.eye(n) / math.sqrt(n)).astype(dtype)
        a = [Tensor(eye.copy(), requires_grad=True) for _ in range(n)]
        bound = math.sqrt(6.0 / (s * k * k))
        f = [
            Tensor(rng.uniform(-bound, bound, size=(s // n, d // n, k, k)).astype(dtype),
                   requires_grad=True)
            for _ in range(n)
        ]
        bias = Tensor(np.zeros(d, dtype=dtype), requires_grad=True) if with_bias else None
        return cls(n=n, s=s, d=d, k=k, a=a, f=f, bias=bias)

    def tensors(self) -> list[Tensor]:
        out = [*self.a, *self.f]
        if self.bias is not None:
            out.append(self.bias)
        return out


@dataclass
class LayerCost:
    """Parameter and FLOP accounting for one layer at a given spatial size."""

    param_count: int
    flop_count: int


def _check_divisible(s: int, d: int, n: int) -> None:
    if n < 1:
        raise ConfigError(f"domain order n must be >= 1, got {n}")
    if s % n or d % n:
        raise ConfigError(f"n={n} must divide both channel counts s={s} and d={d}")


def assemble_weight(params: KclParams) -> Tensor:
    """Sum of Kronecker products A_i (x) F_i, shape (s, d, k, k)."""
    h = kron(params.a[0], params.f[0])
    for ai, fi in zip(params.a[1:], params.f[1:]):
        h = add(h, kron(ai, fi))
    return h


def kcl_forward(x: Tensor, params: KclParams, stride: int = 1, padding: int = 0) -> Tensor:
    """Convolve with the assembled weight; identical to a dense conv2d.

    The assembled H is (s, d, k, k) with input channels first; conv2d takes
    output channels first, so the leading two axes are swapped in between.
    """
    h = assemble_weight(params)
    w = permute(h, (1, 0, 2, 3))
    return conv2d(x, w, params.bias, stride=stride, padding=padding)


def count_params(s: int, d: int, k: int, n: int, with_bias: bool = False) -> int:
    """Learnable scalars of one KCL layer: n^3 + s*d*k^2/n (+ d for bias)."""
    _check_divisible(s, d, n)
    total = n ** 3 + (s * d * k * k) // n
    if with_bias:
        total += d
    return total


def count_params_dense(s: int, d: int, k: int, with_bias: bool = False) -> int:
    """Learnable scalars of the equivalent dense convolution: s*d*k^2 (+ d)."""
    total = s * d * k * k
    if with_bias:
        total += d
    return total


def count_flops(s: int, d: int, k: int, n: int, h: int, w: int) -> int:
    """FLOPs for one forward pass producing an h x w output map.

    Convention: one multiply-accumulate counts as 2 FLOPs, so the convolution
    term is 2*h*w*d*s*k^2; assembling H from the Kronecker sum adds n*s*d*k^2.
    """
    _check_divisible(s, d, n)
    return 2 * h * w * d * s * k * k + n * s * d * k * k
