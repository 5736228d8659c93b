"""Layer primitives on top of the tensor core: modules, attention, convs."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Parameter container with hierarchical dotted names.

    Assigning a requires_grad Tensor or a Module to an attribute registers
    it; registration order is construction order, which keeps parameter
    iteration (and therefore init, optimizer state, and checkpoints)
    deterministic.
    """

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())


class ModuleList(Module):
    def __init__(self, modules):
        super().__init__()
        self._items = list(modules)
        for i, m in enumerate(self._items):
            setattr(self, str(i), m)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


def _uniform_param(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = (1.0 / fan_in) ** 0.5
    return Tensor(rng.uniform(-bound, bound, shape), requires_grad=True)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.weight = _uniform_param(rng, (d_in, d_out), d_in)
        self.bias = _uniform_param(rng, (d_out,), d_in) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        if self.bias is not None:
            y = T.add(y, self.bias)
        return y


class LayerNorm(Module):
    def __init__(self, dim: int):
        super().__init__()
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.beta = Tensor(np.zeros(dim), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta)


class Conv2d(Module):
    def __init__(
        self,
        c_in: int,
        c_out: int,
        kernel_size: int,
        stride: int,
        rng: np.random.Generator,
    ):
        super().__init__()
        fan_in = c_in * kernel_size * kernel_size
        self.kernel = _uniform_param(rng, (c_out, c_in, kernel_size, kernel_size), fan_in)
        self.bias = _uniform_param(rng, (c_out,), fan_in)
        self.stride = stride

    def __call__(self, x: Tensor) -> Tensor:
        y = T.conv2d(x, self.kernel, self.stride)
        return T.add(y, T.reshape(self.bias, (-1, 1, 1)))


class FeedForward(Module):
    """Two-layer position-wise net with 4x hidden width and GELU."""

    def __init__(self, dim: int, rng: np.random.Generator):
        super().__init__()
        self.fc1 = Linear(dim, 4 * dim, rng)
        self.fc2 = Linear(4 * dim, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class MultiHeadAttention(Module):
    """Standard scaled dot-product attention over (B, L, D) sequences.

    Positional encodings are added to the query/key inputs only, so a
    zero-layer stack leaves the value stream untouched.
    """

    def __init__(self, dim: int, n_head: int, rng: np.random.Generator):
        super().__init__()
        if dim % n_head:
            raise T.ShapeError(f"attention: dim {dim} not divisible by {n_head} heads")
        self.n_head = n_head
        self.head_dim = dim // n_head
        self.q_proj = Linear(dim, dim, rng)
        self.k_proj = Linear(dim, dim, rng)
        self.v_proj = Linear(dim, dim, rng)
        self.out_proj = Linear(dim, dim, rng)

    def _split(self, x: Tensor) -> Tensor:
        b, l, d = x.shape
        return T.transpose(T.reshape(x, (b, l, self.n_head, self.head_dim)), (0, 2, 1, 3))

    def __call__(
        self,
        query: Tensor,
        kv: Tensor,
        query_pos: Tensor | None = None,
        kv_pos: Tensor | None = None,
    ) -> Tensor:
        q_in = T.add(query, query_pos) if query_pos is not None else query
        k_in = T.add(kv, kv_pos) if kv_pos is not None else kv
        q = self._split(self.q_proj(q_in))
        k = self._split(self.k_proj(k_in))
        v = self._split(self.v_proj(kv))
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), self.head_dim**-0.5)
        attn = T.softmax(scores, axis=-1)
        ctx = T.matmul(attn, v)
        b, _, lq, _ = ctx.shape
        merged = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, lq, -1))
        return self.out_proj(merged)


class EncoderLayer(Module):
    """Post-norm self-attention block."""

    def __init__(self, dim: int, n_head: int, rng: np.random.Generator):
        super().__init__()
        self.attn = MultiHeadAttention(dim, n_head, rng)
        self.norm1 = LayerNorm(dim)
        self.ffn = FeedForward(dim, rng)
        self.norm2 = LayerNorm(dim)

    def __call__(self, x: Tensor, pos: Tensor | None) -> Tensor:
        x = self.norm1(T.add(x, self.attn(x, x, query_pos=pos, kv_pos=pos)))
        x = self.norm2(T.add(x, self.ffn(x)))
        return x


class DecoderLayer(Module):
    """Post-norm block: query self-attention, cross-attention, feed-forward."""

    def __init__(self, dim: int, n_head: int, rng: np.random.Generator):
        super().__init__()
        self.self_attn = MultiHeadAttention(dim, n_head, rng)
        self.norm1 = LayerNorm(dim)
        self.cross_attn = MultiHeadAttention(dim, n_head, rng)
        self.norm2 = LayerNorm(dim)
        self.ffn = FeedForward(dim, rng)
        self.norm3 = LayerNorm(dim)

    def __call__(self, x: Tensor, memory: Tensor, memory_pos: Tensor | None) -> Tensor:
        x = self.norm1(T.add(x, self.self_attn(x, x)))
        x = self.norm2(T.add(x, self.cross_attn(x, memory, kv_pos=memory_pos)))
        x = self.norm3(T.add(x, self.ffn(x)))
        return x


def sincos_2d(h: int, w: int, dim: int) -> np.ndarray:
    """Fixed 2-D sinusoidal position encoding, flattened to (h*w, dim).

    Half the channels encode the row coordinate, half the column, each as
    sin/cos pairs over a geometric frequency ladder.
    """
    if dim % 4:
        raise T.ShapeError(f"sincos_2d: dim must be divisible by 4, got {dim}")
    half = dim // 2
    n_freq = half // 2
    omega = 1.0 / (10000.0 ** (np.arange(n_freq) / n_freq))
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")

    def encode(coord):
        ang = coord.reshape(-1, 1) * omega
        return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)

    return np.concatenate([encode(ys), encode(xs)], axis=1)
