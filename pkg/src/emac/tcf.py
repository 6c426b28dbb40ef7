"""Temporal collaborative fusion.

The previous frame's prediction is warped onto the current frame, a single-head
cross-attention over density patches estimates a residual, and the residual is
added back to the current prediction.
"""
from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor
from .density import TilingError
from .flow import warp_bilinear
from .nn import Linear, Module, attention, patchify, unpatchify


class TcfHead(Module):
    def __init__(self, patch: int = 8, dim: int = 32, rng: np.random.Generator | int = 0, query: str = "current"):
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        if query not in ("current", "warped"):
            raise ContractError(f"query source must be 'current' or 'warped', got {query!r}")
        self.patch = patch
        self.dim = dim
        self.query_source = query
        n = patch * patch
        self.q = Linear(n, dim, rng)
        self.k = Linear(n, dim, rng)
        self.v = Linear(n, dim, rng)
        self.out = Linear(dim, n, rng, zero=True)

    def residual(self, d_warp, d_cur) -> Tensor:
        """Residual map for (B, h, w) or (h, w) standardised inputs."""
        d_warp, d_cur = ad.as_tensor(d_warp), ad.as_tensor(d_cur)
        if d_warp.shape != d_cur.shape:
            raise ContractError(f"maps differ in shape: {d_warp.shape} vs {d_cur.shape}")
        squeeze = d_cur.ndim == 2
        if squeeze:
            d_warp = ad.reshape(d_warp, (1,) + d_warp.shape)
            d_cur = ad.reshape(d_cur, (1,) + d_cur.shape)
        h, w = d_cur.shape[-2:]
        p = self.patch
        if h % p or w % p:
            raise TilingError(f"{h}x{w} map cannot be tiled by {p}x{p} fusion patches")
        cur_tok = patchify(d_cur, p)
        warp_tok = patchify(d_warp, p)
        q_src, kv_src = (cur_tok, warp_tok) if self.query_source == "current" else (warp_tok, cur_tok)
        mixed = attention(self.q(q_src), self.k(kv_src), self.v(kv_src))
        res = unpatchify(self.out(mixed), p, h, w)
        return ad.reshape(res, (h, w)) if squeeze else res


def residual(d_warp, d_cur, head: TcfHead) -> Tensor:
    return head.residual(d_warp, d_cur)


def fuse(d_cur, d_prev, flow, head: TcfHead) -> Tensor:
    """Current prediction plus the attention residual against the warped previous one."""
    d_cur, d_prev = ad.as_tensor(d_cur), ad.as_tensor(d_prev)
    if d_cur.shape != d_prev.shape:
        raise ContractError(f"maps differ in shape: {d_cur.shape} vs {d_prev.shape}")
    warped = warp_bilinear(d_prev, flow)
    return ad.add(head.residual(warped, d_cur), d_cur)


def output_norm(head: TcfHead) -> float:
    """Frobenius norm of the output projection (weights and bias)."""
    return math.sqrt(float(np.sum(head.out.weight.data ** 2) + np.sum(head.out.bias.data ** 2)))
