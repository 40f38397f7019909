"""Small module system and transformer building blocks.

Modules own named Tensors; named_state() walks attributes recursively and
yields dotted names, which is also the naming scheme used by checkpoints.
"""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    def named_state(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        """All tensors owned by this module tree, trainable or frozen.

        Underscore-prefixed attributes are implementation constants and are
        not part of the state.
        """
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}" if not prefix else f"{prefix}.{name}"
            if isinstance(value, Tensor):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_state(full)
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_state(f"{full}.{i}")
                    elif isinstance(item, Tensor):
                        yield f"{full}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_state() if t.requires_grad]

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.named_state()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        own = dict(self.named_state())
        missing = sorted(set(own) - set(arrays))
        if missing:
            raise KeyError(f"checkpoint is missing tensors: {missing[:5]}")
        for name, t in own.items():
            src = arrays[name]
            if tuple(src.shape) != tuple(t.data.shape):
                raise ad.ShapeError(
                    f"checkpoint tensor {name!r} has shape {tuple(src.shape)}, "
                    f"model expects {tuple(t.data.shape)}"
                )
            t.data = np.asarray(src, dtype=t.data.dtype)


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator,
                 zero_init: bool = False, bias: bool = True):
        if zero_init:
            w = np.zeros((in_dim, out_dim))
        else:
            w = rng.normal(0.0, 1.0 / math.sqrt(in_dim), size=(in_dim, out_dim))
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        # flatten leading dims so numpy issues one large GEMM instead of a
        # python loop of per-slice products
        lead = x.shape[:-1]
        flat = x if x.ndim == 2 else ad.reshape(x, (-1, x.shape[-1]))
        y = ad.matmul(flat, self.weight)
        if self.bias is not None:
            y = ad.add(y, self.bias)
        if x.ndim != 2:
            y = ad.reshape(y, lead + (self.weight.shape[1],))
        return y


class MLP(Module):
    """Linear stack with GELU between layers."""

    def __init__(self, dims: list[int], rng: np.random.Generator,
                 zero_init_last: bool = False):
        self.layers = [
            Linear(dims[i], dims[i + 1], rng,
                   zero_init=zero_init_last and i == len(dims) - 2)
            for i in range(len(dims) - 1)
        ]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = ad.gelu(x)
        return x


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5, learnable: bool = True):
        self.gain = Tensor(np.ones(dim), requires_grad=learnable)
        self.bias = Tensor(np.zeros(dim), requires_grad=learnable)
        self._eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gain, self.bias, eps=self._eps)


class SelfAttention(Module):
    """Multi-head bidirectional self-attention over (B, T, d) tokens."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads != 0:
            raise ad.ShapeError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.head_dim = dim // heads
        self.qkv = Linear(dim, 3 * dim, rng)
        self.proj = Linear(dim, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        b, t, d = x.shape
        h, hd = self.heads, self.head_dim
        qkv = self.qkv(x)
        q = ad.narrow(qkv, 2, 0, d)
        k = ad.narrow(qkv, 2, d, d)
        v = ad.narrow(qkv, 2, 2 * d, d)
        # (B, T, d) -> (B, h, T, hd)
        q = ad.transpose(ad.reshape(q, (b, t, h, hd)), (0, 2, 1, 3))
        k = ad.transpose(ad.reshape(k, (b, t, h, hd)), (0, 2, 1, 3))
        v = ad.transpose(ad.reshape(v, (b, t, h, hd)), (0, 2, 1, 3))
        scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(hd))
        attn = ad.softmax(scores, axis=-1)
        ctx = ad.matmul(attn, v)
        ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (b, t, d))
        return self.proj(ctx)


class TransformerBlock(Module):
    """Plain pre-LN transformer block (used by the condition extractor)."""

    def __init__(self, dim: int, heads: int, ffn_dim: int, rng: np.random.Generator):
        self.norm1 = LayerNorm(dim)
        self.attn = SelfAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.ffn = MLP([dim, ffn_dim, dim], rng)

    def __call__(self, x: Tensor) -> Tensor:
        x = ad.add(x, self.attn(self.norm1(x)))
        x = ad.add(x, self.ffn(self.norm2(x)))
        return x


class Embedding(Module):
    def __init__(self, count: int, dim: int, rng: np.random.Generator,
                 trainable: bool = True, scale: float = 1.0):
        self.table = Tensor(rng.normal(0.0, scale, size=(count, dim)),
                            requires_grad=trainable)

    def __call__(self, ids) -> Tensor:
        return ad.gather(self.table, np.asarray(ids, dtype=np.int64), axis=0)


def sinusoidal_features(x: np.ndarray, dim: int, max_period: float = 1e4) -> np.ndarray:
    """Classic sin/cos features of a scalar signal, shape (..., dim)."""
    if dim % 2 != 0:
        raise ValueError("feature dim must be even")
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    angles = np.asarray(x, dtype=np.float64)[..., None] * freqs
    feats = np.concatenate([np.sin(angles), np.cos(angles)], axis=-1)
    return feats.astype(ad.get_default_dtype())
