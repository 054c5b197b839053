"""Dense float64 tensors with reverse-mode differentiation.

The pipeline is a fixed feed-forward composition, so the machinery here is
deliberately small: every operation records its parents and a vector-Jacobian
closure, and ``Tensor.backward`` replays the recorded sequence in reverse
topological order.  Gradients of intermediate nodes live in a per-call
dictionary; only leaf tensors (parameters, inputs) keep a ``.grad`` array, so
several backward passes can run over one recorded graph without interfering.

Numerical contract: float64 everywhere, zero padding for convolutions, and
fixed accumulation order in every kernel so identical inputs give
bitwise-identical outputs across runs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ConfigError, DimensionError

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _as_f64(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    return arr


class Tensor:
    """A numpy-backed value in the recorded computation sequence."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_f64(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], tuple[np.ndarray, ...]] | None = None

    # -- graph construction -------------------------------------------------

    @staticmethod
    def _from_op(data: np.ndarray, parents: Sequence["Tensor"], vjp) -> "Tensor":
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._vjp = vjp
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- backward ------------------------------------------------------------

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``.grad``.

        ``self`` must be a scalar (loss).  Intermediate gradients are kept in
        a transient table, so calling backward on two different roots of the
        same recorded graph composes by simple leaf-grad accumulation.
        """
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar root")

        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            upstream = grads.pop(id(node), None)
            if upstream is None:
                continue
            if node._vjp is None:
                if node.requires_grad:
                    if node.grad is None:
                        node.grad = upstream.copy()
                    else:
                        node.grad = node.grad + upstream
                continue
            for parent, pgrad in zip(node._parents, node._vjp(upstream)):
                if not parent.requires_grad or pgrad is None:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pgrad
                else:
                    grads[key] = pgrad

    def zero_grad(self) -> None:
        self.grad = None

    # -- elementwise arithmetic ----------------------------------------------

    @staticmethod
    def _ensure(other) -> "Tensor":
        return other if isinstance(other, Tensor) else Tensor(other)

    def __add__(self, other):
        other = Tensor._ensure(other)
        data = self.data + other.data
        return Tensor._from_op(
            data,
            (self, other),
            lambda g: (_unbroadcast(g, self.shape), _unbroadcast(g, other.shape)),
        )

    __radd__ = __add__

    def __mul__(self, other):
        other = Tensor._ensure(other)
        data = self.data * other.data
        a, b = self.data, other.data
        return Tensor._from_op(
            data,
            (self, other),
            lambda g: (_unbroadcast(g * b, self.shape), _unbroadcast(g * a, other.shape)),
        )

    __rmul__ = __mul__

    def __neg__(self):
        return Tensor._from_op(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        other = Tensor._ensure(other)
        data = self.data - other.data
        return Tensor._from_op(
            data,
            (self, other),
            lambda g: (_unbroadcast(g, self.shape), _unbroadcast(-g, other.shape)),
        )

    def __rsub__(self, other):
        return Tensor._ensure(other) - self

    def __truediv__(self, other):
        other = Tensor._ensure(other)
        data = self.data / other.data
        a, b = self.data, other.data
        return Tensor._from_op(
            data,
            (self, other),
            lambda g: (
                _unbroadcast(g / b, self.shape),
                _unbroadcast(-g * a / (b * b), other.shape),
            ),
        )

    def __rtruediv__(self, other):
        return Tensor._ensure(other) / self

    def __pow__(self, exponent: float):
        data = self.data ** exponent
        x = self.data
        return Tensor._from_op(
            data, (self,), lambda g: (g * exponent * x ** (exponent - 1),)
        )

    # -- reductions -----------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        data = self.data.sum(axis=axis, keepdims=keepdims)
        shape = self.shape

        def vjp(g):
            if axis is None:
                return (np.broadcast_to(g, shape).copy(),)
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            if not keepdims:
                g = np.expand_dims(g, tuple(a % len(shape) for a in axes))
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._from_op(data, (self,), vjp)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            count = self.data.size
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            count = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce an upstream gradient back to a broadcast operand's shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, (gdim, sdim) in enumerate(zip(grad.shape, shape)):
        if sdim == 1 and gdim != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad.reshape(shape)


# -- elementwise nonlinearities ------------------------------------------------


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return Tensor._from_op(y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-x.data))
    return Tensor._from_op(y, (x,), lambda g: (g * y * (1.0 - y),))


def gelu(x: Tensor) -> Tensor:
    """Exact-erf GELU: x * Phi(x) with Phi the standard normal CDF."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    y = x.data * cdf
    pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
    local = cdf + x.data * pdf
    return Tensor._from_op(y, (x,), lambda g: (g * local,))


def sqrt(x: Tensor) -> Tensor:
    y = np.sqrt(x.data)
    return Tensor._from_op(y, (x,), lambda g: (g * 0.5 / y,))


def log(x: Tensor) -> Tensor:
    d = x.data
    return Tensor._from_op(np.log(d), (x,), lambda g: (g / d,))


def clamp(x: Tensor, low: float, high: float) -> Tensor:
    """Clip values to [low, high]; gradient passes only strictly inside."""
    y = np.clip(x.data, low, high)
    mask = (x.data > low) & (x.data < high)
    return Tensor._from_op(y, (x,), lambda g: (g * mask,))


# -- convolution ----------------------------------------------------------------


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of a 2D cross-correlation over a [C, H, W] map."""

    in_channels: int
    out_channels: int
    kernel_size: int
    stride: int = 1
    padding: int = 0
    groups: int = 1

    def validate(self) -> None:
        if self.stride < 1 or self.padding < 0 or self.groups < 1:
            raise ConfigError(f"invalid conv spec: {self}")
        if self.in_channels % self.groups != 0:
            raise ConfigError(
                f"in_channels {self.in_channels} not divisible by groups {self.groups}"
            )
        if self.out_channels % self.groups != 0:
            raise ConfigError(
                f"out_channels {self.out_channels} not divisible by groups {self.groups}"
            )

    def out_extent(self, extent: int) -> int:
        out = (extent + 2 * self.padding - self.kernel_size) // self.stride + 1
        if out < 1:
            raise ConfigError(
                f"kernel {self.kernel_size} with stride {self.stride}, padding "
                f"{self.padding} does not fit input extent {extent}"
            )
        return out


def _im2col(padded: np.ndarray, k: int, stride: int, out_h: int, out_w: int) -> np.ndarray:
    """Stack the k*k shifted views of a padded map: [C, k, k, out_h, out_w]."""
    c = padded.shape[0]
    cols = np.empty((c, k, k, out_h, out_w), dtype=np.float64)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = padded[:, i : i + stride * out_h : stride,
                                   j : j + stride * out_w : stride]
    return cols


def conv2d(x: Tensor, spec: ConvSpec, weight: Tensor, bias: Tensor) -> Tensor:
    """Grouped 2D cross-correlation with zero padding.

    weight is [out_channels, in_channels/groups, k, k]; bias is [out_channels].
    Depthwise convolution is the groups == in_channels case.
    """
    spec.validate()
    if x.data.ndim != 3 or x.shape[0] != spec.in_channels:
        raise DimensionError(
            f"conv2d input axis 0: expected {spec.in_channels} channels, "
            f"got shape {x.shape}"
        )
    k = spec.kernel_size
    cin_g = spec.in_channels // spec.groups
    expected_w = (spec.out_channels, cin_g, k, k)
    if weight.shape != expected_w:
        axis = next(
            i for i, (a, b) in enumerate(zip(weight.shape, expected_w)) if a != b
        ) if len(weight.shape) == 4 else 0
        raise DimensionError(
            f"conv2d weight axis {axis}: expected shape {expected_w}, got {weight.shape}"
        )
    if bias.shape != (spec.out_channels,):
        raise DimensionError(
            f"conv2d bias axis 0: expected length {spec.out_channels}, got {bias.shape}"
        )

    _, h, w = x.shape
    out_h, out_w = spec.out_extent(h), spec.out_extent(w)
    g = spec.groups
    cout_g = spec.out_channels // g
    pad = spec.padding

    padded = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad)))
    cols = _im2col(padded, k, spec.stride, out_h, out_w)
    # [g, cin_g*k*k, out_h*out_w] batched against [g, cout_g, cin_g*k*k]
    cols_g = cols.reshape(g, cin_g * k * k, out_h * out_w)
    w_g = weight.data.reshape(g, cout_g, cin_g * k * k)
    out = np.matmul(w_g, cols_g).reshape(spec.out_channels, out_h, out_w)
    out = out + bias.data[:, None, None]

    def vjp(grad):
        grad_g = grad.reshape(g, cout_g, out_h * out_w)
        d_w = np.matmul(grad_g, cols_g.transpose(0, 2, 1)).reshape(weight.shape)
        d_b = grad.sum(axis=(1, 2))
        d_cols = np.matmul(w_g.transpose(0, 2, 1), grad_g)
        d_cols = d_cols.reshape(spec.in_channels, k, k, out_h, out_w)
        d_padded = np.zeros_like(padded)
        s = spec.stride
        for i in range(k):
            for j in range(k):
                d_padded[:, i : i + s * out_h : s, j : j + s * out_w : s] += d_cols[:, i, j]
        d_x = d_padded[:, pad : pad + h, pad : pad + w]
        return d_x, d_w, d_b

    return Tensor._from_op(out, (x, weight, bias), vjp)


# -- group normalization ---------------------------------------------------------


def group_norm(x: Tensor, num_groups: int, gamma: Tensor, beta: Tensor,
               eps: float = 1e-5) -> Tensor:
    """Normalize each channel group of a [C, H, W] map to mean 0 / var 1,
    then apply the per-channel affine (gamma, beta)."""
    c, h, w = x.shape
    if c % num_groups != 0:
        raise ConfigError(f"channels {c} not divisible by num_groups {num_groups}")
    if eps <= 0:
        raise ConfigError("group_norm eps must be positive")
    cg = c // num_groups

    grouped = x.data.reshape(num_groups, cg * h * w)
    mu = grouped.mean(axis=1, keepdims=True)
    centered = grouped - mu
    var = (centered * centered).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (centered * inv_std).reshape(c, h, w)
    out = gamma.data[:, None, None] * xhat + beta.data[:, None, None]

    def vjp(grad):
        d_gamma = (grad * xhat).sum(axis=(1, 2))
        d_beta = grad.sum(axis=(1, 2))
        d_xhat = (grad * gamma.data[:, None, None]).reshape(num_groups, cg * h * w)
        n = cg * h * w
        xhat_g = xhat.reshape(num_groups, n)
        # d_x = inv_std * (d_xhat - mean(d_xhat) - xhat * mean(d_xhat * xhat))
        mean_d = d_xhat.mean(axis=1, keepdims=True)
        mean_dx = (d_xhat * xhat_g).mean(axis=1, keepdims=True)
        d_x = inv_std * (d_xhat - mean_d - xhat_g * mean_dx)
        return d_x.reshape(c, h, w), d_gamma, d_beta

    return Tensor._from_op(out, (x, gamma, beta), vjp)


# -- bilinear resize --------------------------------------------------------------


def _resize_axis(in_extent: int, out_extent: int):
    """Source indices and interpolation weights, align-corners-false."""
    dst = np.arange(out_extent, dtype=np.float64)
    src = (dst + 0.5) * (in_extent / out_extent) - 0.5
    i0f = np.floor(src)
    t = src - i0f
    i0 = np.clip(i0f, 0, in_extent - 1).astype(np.intp)
    i1 = np.clip(i0f + 1, 0, in_extent - 1).astype(np.intp)
    return i0, i1, t


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinearly resample a [C, H, W] map; the identity size is exact."""
    if out_h < 1 or out_w < 1:
        raise ConfigError(f"resize target must be positive, got ({out_h}, {out_w})")
    c, h, w = x.shape
    y0, y1, ty = _resize_axis(h, out_h)
    x0, x1, tx = _resize_axis(w, out_w)

    wy0 = (1.0 - ty)[:, None]
    wy1 = ty[:, None]
    wx0 = (1.0 - tx)[None, :]
    wx1 = tx[None, :]

    d = x.data
    out = (
        wy0 * wx0 * d[:, y0[:, None], x0[None, :]]
        + wy0 * wx1 * d[:, y0[:, None], x1[None, :]]
        + wy1 * wx0 * d[:, y1[:, None], x0[None, :]]
        + wy1 * wx1 * d[:, y1[:, None], x1[None, :]]
    )

    def vjp(grad):
        d_x = np.zeros((c, h, w), dtype=np.float64)
        np.add.at(d_x, (slice(None), y0[:, None], x0[None, :]), grad * (wy0 * wx0))
        np.add.at(d_x, (slice(None), y0[:, None], x1[None, :]), grad * (wy0 * wx1))
        np.add.at(d_x, (slice(None), y1[:, None], x0[None, :]), grad * (wy1 * wx0))
        np.add.at(d_x, (slice(None), y1[:, None], x1[None, :]), grad * (wy1 * wx1))
        return (d_x,)

    return Tensor._from_op(out, (x,), vjp)


# -- channel projection ------------------------------------------------------------


def channel_project(x: Tensor, matrix: np.ndarray) -> Tensor:
    """Apply a constant [M, C] matrix across the channel axis of [C, H, W]."""
    m = _as_f64(matrix)
    if m.ndim != 2 or m.shape[1] != x.shape[0]:
        raise DimensionError(
            f"channel_project matrix axis 1: expected {x.shape[0]}, got {m.shape}"
        )
    out = np.einsum("mc,chw->mhw", m, x.data)
    return Tensor._from_op(out, (x,), lambda g: (np.einsum("mc,mhw->chw", m, g),))
