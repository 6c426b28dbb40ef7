"""Transformer layers on top of :mod:`emac.autodiff`."""
from __future__ import annotations

import math
from collections import OrderedDict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .density import TilingError


class Module:
    """Parameter container; parameters are collected in attribute order."""

    def named_parameters(self, prefix: str = "") -> "OrderedDict[str, Tensor]":
        out: OrderedDict[str, Tensor] = OrderedDict()
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                out[full] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(full + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{full}.{i}."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


def param(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, zero: bool = False):
        w = np.zeros((d_in, d_out)) if zero else xavier_uniform(rng, d_in, d_out)
        self.weight = param(w)
        self.bias = param(np.zeros(d_out))

    def __call__(self, x) -> Tensor:
        return ad.add(ad.matmul(x, self.weight), self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gamma = param(np.ones(dim))
        self.beta = param(np.zeros(dim))

    def __call__(self, x) -> Tensor:
        return ad.layer_norm(x, self.gamma, self.beta)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, n, c = x.shape
    x = ad.reshape(x, (*lead, n, heads, c // heads))
    nd = len(lead)
    return ad.transpose(x, tuple(range(nd)) + (nd + 1, nd, nd + 2))


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, d = x.shape
    nd = len(lead)
    x = ad.transpose(x, tuple(range(nd)) + (nd + 1, nd, nd + 2))
    return ad.reshape(x, (*lead, n, h * d))


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Scaled dot-product attention over the last two axes."""
    scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(q.shape[-1]))
    return ad.matmul(ad.softmax_lastdim(scores), v)


class Attention(Module):
    """Multi-head attention; cross-attention when ``context`` is given."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ValueError(f"width {dim} not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(dim, dim, rng)
        self.kv = Linear(dim, 2 * dim, rng)
        self.proj = Linear(dim, dim, rng)

    def __call__(self, x: Tensor, context: Tensor | None = None) -> Tensor:
        ctx = x if context is None else context
        c = x.shape[-1]
        q = _split_heads(self.q(x), self.heads)
        k, v = ad.split(self.kv(ctx), [c, c], axis=-1)
        out = attention(q, _split_heads(k, self.heads), _split_heads(v, self.heads))
        return self.proj(_merge_heads(out))


class Mlp(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ad.gelu(self.fc1(x)))


class Block(Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float, rng: np.random.Generator):
        self.norm1 = LayerNorm(dim)
        self.attn = Attention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio), rng)

    def __call__(self, x: Tensor) -> Tensor:
        x = ad.add(x, self.attn(self.norm1(x)))
        return ad.add(x, self.mlp(self.norm2(x)))


class CrossBlock(Module):
    """Queries attend to a separate context sequence, then an MLP."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float, rng: np.random.Generator):
        self.norm_q = LayerNorm(dim)
        self.norm_kv = LayerNorm(dim)
        self.attn = Attention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio), rng)

    def __call__(self, queries: Tensor, context: Tensor) -> Tensor:
        x = ad.add(queries, self.attn(self.norm_q(queries), self.norm_kv(context)))
        return ad.add(x, self.mlp(self.norm2(x)))


# ---------------------------------------------------------------- patches

def patchify(x, p: int) -> Tensor:
    """(B, h, w[, c]) -> (B, N, p*p*c) with patches in row-major order."""
    x = ad.as_tensor(x)
    if x.ndim == 3:
        b, h, w = x.shape
        c = 1
        x = ad.reshape(x, (b, h, w, 1))
    else:
        b, h, w, c = x.shape
    if h % p or w % p:
        raise TilingError(f"{h}x{w} input cannot be tiled by {p}x{p} patches")
    gh, gw = h // p, w // p
    x = ad.reshape(x, (b, gh, p, gw, p, c))
    x = ad.transpose(x, (0, 1, 3, 2, 4, 5))
    return ad.reshape(x, (b, gh * gw, p * p * c))


def unpatchify(t, p: int, h: int, w: int) -> Tensor:
    """(B, N, p*p) -> (B, h, w); inverse of :func:`patchify` for one channel."""
    t = ad.as_tensor(t)
    b = t.shape[0]
    gh, gw = h // p, w // p
    x = ad.reshape(t, (b, gh, gw, p, p))
    x = ad.transpose(x, (0, 1, 3, 2, 4))
    return ad.reshape(x, (b, h, w))


def patchify_array(x: np.ndarray, p: int) -> np.ndarray:
    x = np.asarray(x)
    b, h, w = x.shape
    return x.reshape(b, h // p, p, w // p, p).transpose(0, 1, 3, 2, 4).reshape(b, -1, p * p)


def unpatchify_array(t: np.ndarray, p: int, h: int, w: int) -> np.ndarray:
    b = t.shape[0]
    return t.reshape(b, h // p, w // p, p, p).transpose(0, 1, 3, 2, 4).reshape(b, h, w)


def sincos_pos_embed(dim: int, grid_h: int, grid_w: int) -> np.ndarray:
    """Fixed 2-D sine-cosine embedding, (grid_h * grid_w, dim), row-major."""
    if dim % 4:
        raise ValueError(f"positional embedding width must be a multiple of 4, got {dim}")
    quarter = dim // 4
    omega = 1.0 / 10000.0 ** (np.arange(quarter, dtype=np.float64) / quarter)
    rows, cols = np.meshgrid(np.arange(grid_h, dtype=np.float64), np.arange(grid_w, dtype=np.float64), indexing="ij")

    def enc(pos):
        ang = pos.reshape(-1, 1) * omega[None, :]
        return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)

    return np.concatenate([enc(rows), enc(cols)], axis=1)
