"""Dense float64 tensors with reverse-mode autodiff on a per-pass tape.

Storage is row-major contiguous numpy; every differentiable operation
appends one entry to the active tape (define-by-run), and ``backward``
replays the tape in reverse over the subgraph reachable from the loss.
Tensors are immutable after creation except for their ``grad`` buffer.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from functools import lru_cache
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import erf, expit


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ContractError(RuntimeError):
    """A documented precondition was violated by the caller."""


# When true, every forward op asserts a finite result. Costs a full pass
# over each output, so tests enable it selectively.
nan_checks = False

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    """A dense float64 array plus an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "node_id")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.node_id: Optional[int] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; the functional forms below are canonical.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def transpose(self, axes=None) -> "Tensor":
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return sum_over(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return mean_over(self, axis, keepdims)


BackwardRule = Callable[[np.ndarray], tuple]


class Tape:
    """Ordered log of recorded operations for one forward pass.

    Entries are appended in execution order, so every operation's inputs
    precede it and a reverse sweep is a valid topological order.
    """

    __slots__ = ("entries",)

    def __init__(self):
        self.entries: list[tuple[Tensor, tuple[Tensor, ...], BackwardRule]] = []

    def __len__(self) -> int:
        return len(self.entries)

    def clear(self) -> None:
        self.entries.clear()


_tape: Optional[Tape] = Tape()


def active_tape() -> Optional[Tape]:
    return _tape


def clear_tape() -> None:
    """Drop all recorded operations (call once per training step)."""
    if _tape is not None:
        _tape.clear()


@contextmanager
def no_grad():
    """Disable tape recording inside the block (pure inference)."""
    global _tape
    saved, _tape = _tape, None
    try:
        yield
    finally:
        _tape = saved


@contextmanager
def scoped_tape():
    """Run with a private fresh tape; restores the previous one on exit."""
    global _tape
    saved, _tape = _tape, Tape()
    try:
        yield _tape
    finally:
        _tape = saved


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tracing(*tensors: Tensor) -> bool:
    return _tape is not None and any(t.requires_grad for t in tensors)


def _record(out: Tensor, inputs: tuple[Tensor, ...], backward: BackwardRule) -> None:
    out.requires_grad = True
    out.node_id = len(_tape.entries)
    _tape.entries.append((out, inputs, backward))


def _finite(data: np.ndarray) -> np.ndarray:
    if nan_checks and not np.all(np.isfinite(data)):
        raise FloatingPointError("forward op produced non-finite values")
    return data


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g down to ``shape``, inverting trailing-dimension broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Batched matrix product with trailing-dimension broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from exc
    out = Tensor(_finite(data))
    if _tracing(a, b):
        ad, bd = a.data, b.data

        def backward(g):
            ga = gb = None
            if a.requires_grad:
                ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
            if b.requires_grad:
                gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
            return ga, gb

        _record(out, (a, b), backward)
    return out


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def _binary(name, a, b, fwd, bwd_a, bwd_b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = fwd(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"{name}: cannot broadcast {a.shape} with {b.shape}") from exc
    out = Tensor(_finite(data))
    if _tracing(a, b):
        ad, bd = a.data, b.data

        def backward(g):
            ga = _unbroadcast(bwd_a(g, ad, bd), ad.shape) if a.requires_grad else None
            gb = _unbroadcast(bwd_b(g, ad, bd), bd.shape) if b.requires_grad else None
            return ga, gb

        _record(out, (a, b), backward)
    return out


def add(a, b) -> Tensor:
    return _binary("add", a, b, np.add, lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b) -> Tensor:
    return _binary("sub", a, b, np.subtract, lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b) -> Tensor:
    return _binary("mul", a, b, np.multiply, lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a, b) -> Tensor:
    return _binary(
        "div", a, b, np.divide, lambda g, x, y: g / y, lambda g, x, y: -g * x / (y * y)
    )


def scale(x, s: float) -> Tensor:
    """Multiply by a python scalar (cheaper than a broadcast mul)."""
    x = as_tensor(x)
    out = Tensor(_finite(x.data * s))
    if _tracing(x):
        _record(out, (x,), lambda g: (g * s,))
    return out


def relu(x) -> Tensor:
    x = as_tensor(x)
    out = Tensor(np.maximum(x.data, 0.0))
    if _tracing(x):
        mask = x.data > 0.0

        def backward(g):
            return (g * mask,)

        _record(out, (x,), backward)
    return out


def gelu(x) -> Tensor:
    """Exact Gaussian-error-linear unit, x * Phi(x)."""
    x = as_tensor(x)
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / _SQRT2))
    out = Tensor(_finite(xd * cdf))
    if _tracing(x):

        def backward(g):
            pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT_2PI
            return (g * (cdf + xd * pdf),)

        _record(out, (x,), backward)
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = expit(x.data)
    out = Tensor(_finite(s))
    if _tracing(x):

        def backward(g):
            return (g * s * (1.0 - s),)

        _record(out, (x,), backward)
    return out


def softmax(x, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis`` (max-subtraction)."""
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(_finite(s))
    if _tracing(x):

        def backward(g):
            return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

        _record(out, (x,), backward)
    return out


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    n = x.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ShapeError(
            f"layer_norm: gamma {gamma.shape} / beta {beta.shape} must be ({n},)"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(_finite(gamma.data * xhat + beta.data))
    if _tracing(x, gamma, beta):
        gd = gamma.data

        def backward(g):
            gx = gg = gb = None
            if gamma.requires_grad:
                gg = (g * xhat).reshape(-1, n).sum(axis=0)
            if beta.requires_grad:
                gb = g.reshape(-1, n).sum(axis=0)
            if x.requires_grad:
                dxhat = g * gd
                gx = inv * (
                    dxhat
                    - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
                )
            return gx, gg, gb

        _record(out, (x, gamma, beta), backward)
    return out


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        data = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from exc
    out = Tensor(data)
    if _tracing(x):
        src_shape = x.shape
        _record(out, (x,), lambda g: (g.reshape(src_shape),))
    return out


def transpose(x, axes=None) -> Tensor:
    """Permute axes (copies; there are no strided views)."""
    x = as_tensor(x)
    if axes is not None and sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {x.shape}")
    out = Tensor(np.transpose(x.data, axes))
    if _tracing(x):
        if axes is None:
            inv = None
        else:
            inv = [0] * len(axes)
            for i, a in enumerate(axes):
                inv[a] = i

        def backward(g):
            return (np.ascontiguousarray(np.transpose(g, inv)),)

        _record(out, (x,), backward)
    return out


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(
            f"concat: incompatible shapes {[t.shape for t in ts]} on axis {axis}"
        ) from exc
    out = Tensor(data)
    if _tracing(*ts):
        sizes = [t.shape[axis] for t in ts]
        offsets = np.cumsum(sizes)[:-1]

        def backward(g):
            pieces = np.split(g, offsets, axis=axis)
            return tuple(
                np.ascontiguousarray(p) if t.requires_grad else None
                for p, t in zip(pieces, ts)
            )

        _record(out, tuple(ts), backward)
    return out


def narrow(x, axis: int, start: int, length: int) -> Tensor:
    """Slice ``length`` elements from ``start`` along one axis."""
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"narrow: axis {axis} invalid for shape {x.shape}")
    axis = axis % x.ndim
    extent = x.shape[axis]
    if start < 0 or length < 0 or start + length > extent:
        raise ShapeError(
            f"narrow: range [{start}, {start + length}) exceeds extent {extent}"
        )
    key = tuple(
        slice(start, start + length) if i == axis else slice(None) for i in range(x.ndim)
    )
    out = Tensor(x.data[key])
    if _tracing(x):
        src_shape = x.shape

        def backward(g):
            full = np.zeros(src_shape)
            full[key] = g
            return (full,)

        _record(out, (x,), backward)
    return out


def _norm_axes(axis, ndim: int) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    axes = tuple(a % ndim for a in axis)
    if len(set(axes)) != len(axes) or any(not -ndim <= a < ndim for a in axis):
        raise ShapeError(f"reduction: axes {axis} invalid for rank {ndim}")
    return axes


def _reduce(x, axis, keepdims, mean: bool) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    fn = np.mean if mean else np.sum
    data = fn(x.data, axis=axes, keepdims=keepdims)
    out = Tensor(data)
    if _tracing(x):
        src_shape = x.shape
        kept = tuple(1 if i in axes else s for i, s in enumerate(src_shape))
        count = 1
        for a in axes:
            count *= src_shape[a]

        def backward(g):
            g = g.reshape(kept)
            if mean:
                g = g / count
            return (np.ascontiguousarray(np.broadcast_to(g, src_shape)),)

        _record(out, (x,), backward)
    return out


def sum_over(x, axis=None, keepdims=False) -> Tensor:
    return _reduce(x, axis, keepdims, mean=False)


def mean_over(x, axis=None, keepdims=False) -> Tensor:
    return _reduce(x, axis, keepdims, mean=True)


# ---------------------------------------------------------------------------
# spatial ops
# ---------------------------------------------------------------------------


@lru_cache(maxsize=None)
def _bilinear_matrix(n: int) -> np.ndarray:
    """Interpolation matrix mapping n samples to 2n (align_corners=False)."""
    m = np.zeros((2 * n, n))
    for o in range(2 * n):
        c = (o + 0.5) / 2.0 - 0.5
        i0 = math.floor(c)
        t = c - i0
        m[o, min(max(i0, 0), n - 1)] += 1.0 - t
        m[o, min(max(i0 + 1, 0), n - 1)] += t
    return m


def upsample2x_bilinear(x) -> Tensor:
    """Double the last two axes by bilinear interpolation."""
    x = as_tensor(x)
    if x.ndim < 2:
        raise ShapeError(f"upsample2x_bilinear: need rank >= 2, got {x.shape}")
    h, w = x.shape[-2:]
    ah, aw = _bilinear_matrix(h), _bilinear_matrix(w)
    data = np.matmul(np.matmul(ah, x.data), aw.T)
    out = Tensor(_finite(data))
    if _tracing(x):

        def backward(g):
            return (np.matmul(np.matmul(ah.T, g), aw),)

        _record(out, (x,), backward)
    return out


def conv2d(x, kernel, stride: int = 1) -> Tensor:
    """Cross-correlation with zero padding chosen so h' = ceil(h / stride).

    Accepts (Cin, h, w) or (N, Cin, h, w); the kernel is (Cout, Cin, kh, kw).
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be >= 1, got {stride}")
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or kernel.ndim != 4 or xd.shape[1] != kernel.shape[1]:
        raise ShapeError(f"conv2d: incompatible shapes {x.shape} and {kernel.shape}")
    n, cin, h, w = xd.shape
    cout, _, kh, kw = kernel.shape
    ho, wo = -(-h // stride), -(-w // stride)
    ph = max((ho - 1) * stride + kh - h, 0)
    pw = max((wo - 1) * stride + kw - w, 0)
    pt, pl = ph // 2, pw // 2
    xp = np.pad(xd, ((0, 0), (0, 0), (pt, ph - pt), (pl, pw - pl)))
    cols = np.empty((n, cin, kh, kw, ho, wo))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[
                :, :, i : i + stride * (ho - 1) + 1 : stride,
                j : j + stride * (wo - 1) + 1 : stride,
            ]
    cols2 = cols.reshape(n, cin * kh * kw, ho * wo)
    kmat = kernel.data.reshape(cout, cin * kh * kw)
    data = np.matmul(kmat, cols2).reshape(n, cout, ho, wo)
    if squeeze:
        data = data[0]
    out = Tensor(_finite(data))
    if _tracing(x, kernel):
        kshape = kernel.shape

        def backward(g):
            g4 = g[None] if squeeze else g
            g2 = g4.reshape(n, cout, ho * wo)
            gk = gx = None
            if kernel.requires_grad:
                gk = np.matmul(g2, cols2.swapaxes(-1, -2)).sum(axis=0).reshape(kshape)
            if x.requires_grad:
                dcols = np.matmul(kmat.T, g2).reshape(n, cin, kh, kw, ho, wo)
                dxp = np.zeros_like(xp)
                for i in range(kh):
                    for j in range(kw):
                        dxp[
                            :, :, i : i + stride * (ho - 1) + 1 : stride,
                            j : j + stride * (wo - 1) + 1 : stride,
                        ] += dcols[:, :, i, j]
                gx = dxp[:, :, pt : pt + h, pl : pl + w]
                if squeeze:
                    gx = gx[0]
            return gx, gk

        _record(out, (x, kernel), backward)
    return out


# ---------------------------------------------------------------------------
# reverse sweep
# ---------------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Populate ``grad`` for every requires_grad tensor reachable from loss.

    Repeated calls accumulate into existing ``grad`` buffers; gradients for
    the current sweep are staged separately so earlier sweeps never leak
    into this one's propagation.
    """
    tape = _tape
    if tape is None:
        raise ContractError("backward: no active tape")
    if not isinstance(loss, Tensor) or loss.size != 1:
        shape = getattr(loss, "shape", None)
        raise ContractError(f"backward: loss must be a scalar tensor, got shape {shape}")
    if loss.node_id is None:
        raise ContractError("backward: loss is not on the active tape")

    inflight: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    holders: dict[int, Tensor] = {id(loss): loss}
    needed = bytearray(loss.node_id + 1)
    needed[loss.node_id] = 1

    for idx in range(loss.node_id, -1, -1):
        if not needed[idx]:
            continue
        out, inputs, rule = tape.entries[idx]
        grads = rule(inflight[id(out)])
        for inp, g in zip(inputs, grads):
            if g is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in inflight:
                inflight[key] = inflight[key] + g
            else:
                inflight[key] = g
                holders[key] = inp
            if inp.node_id is not None and inp.node_id < idx:
                needed[inp.node_id] = 1

    for key, t in holders.items():
        g = inflight[key]
        t.grad = np.array(g) if t.grad is None else t.grad + g
