"""Optical flow providers, bilinear backward warping and Middlebury ``.flo`` I/O.

Flow convention: the vector (u, v) stored at pixel (x, y) of frame t points to
the corresponding location (x + u, y + v) in frame t-1. Warping a field from
frame t-1 therefore samples it at the displaced coordinates.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .autodiff import ContractError, Function, Tensor, as_tensor
from .density import FormatError

FLO_MAGIC = 202021.25


class WarpBilinear(Function):
    @staticmethod
    def forward(ctx, field, flow):
        squeeze = field.ndim == 2
        f = field[None] if squeeze else field
        fl = flow[None] if flow.ndim == 3 else flow
        fl = np.broadcast_to(fl, f.shape + (2,))
        ctx.flow, ctx.squeeze = fl, squeeze
        out = kernels.warp_bilinear(f, fl)
        return out[0] if squeeze else out

    @staticmethod
    def backward(ctx, g):
        g3 = g[None] if ctx.squeeze else g
        gf = kernels.warp_bilinear_adjoint(g3, ctx.flow)
        return (gf[0] if ctx.squeeze else gf), None


def warp_bilinear(field, flow) -> Tensor:
    """Sample ``field`` (h, w) or (B, h, w) at pixel + flow, zero outside.

    Differentiable with respect to ``field``; the flow is treated as data.
    """
    field = as_tensor(field)
    flow = np.asarray(flow.data if isinstance(flow, Tensor) else flow, dtype=np.float64)
    hw = field.shape[-2:]
    if flow.shape[-3:] != hw + (2,):
        raise ContractError(f"flow {flow.shape} does not match field {field.shape}")
    if not np.all(np.isfinite(flow)):
        raise ContractError("flow must be finite")
    return WarpBilinear.apply(field, Tensor(flow))


def estimate_blockmatch(cur, prev, block: int = 8, radius: int = 8, stride: int | None = None) -> np.ndarray:
    """Integer flow from exhaustive SSD block search of ``cur`` against ``prev``.

    Ties prefer the smaller displacement, then the smaller (u, v) lexicographically.
    """
    cur = np.asarray(cur, dtype=np.float64)
    prev = np.asarray(prev, dtype=np.float64)
    if cur.shape != prev.shape or cur.ndim != 2:
        raise ContractError(f"frames must share a 2-D shape, got {cur.shape} and {prev.shape}")
    if block < 3 or radius < 1:
        raise ContractError(f"need block >= 3 and radius >= 1, got {block}, {radius}")
    return kernels.blockmatch(cur, prev, block, radius, stride or block)


@dataclass(frozen=True)
class FlowProvider:
    """Which flow source feeds the fusion step: ``blockmatch``, ``gt`` or ``identity``."""

    kind: str = "blockmatch"
    block: int = 8
    radius: int = 8
    stride: int | None = None

    def __post_init__(self):
        if self.kind not in ("blockmatch", "gt", "identity"):
            raise ContractError(f"unknown flow provider {self.kind!r}")

    def __call__(self, cur, prev, gt_flow=None) -> np.ndarray:
        h, w = np.shape(cur)
        if self.kind == "identity":
            return np.zeros((h, w, 2))
        if self.kind == "gt":
            if gt_flow is None:
                raise ContractError("ground-truth flow requested but the sample carries none")
            return np.asarray(gt_flow, dtype=np.float64)
        return estimate_blockmatch(cur, prev, self.block, self.radius, self.stride)


# ---------------------------------------------------------------- .flo files

def write_flo(path, flow: np.ndarray) -> None:
    flow = np.asarray(flow)
    h, w, two = flow.shape
    if two != 2:
        raise ValueError(f"flow must be (h, w, 2), got {flow.shape}")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<f", FLO_MAGIC))
        fh.write(struct.pack("<ii", w, h))
        fh.write(np.ascontiguousarray(flow, dtype="<f4").tobytes())


def read_flo(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise FormatError(path, len(raw), "truncated .flo header")
    (magic,) = struct.unpack_from("<f", raw, 0)
    if magic != FLO_MAGIC:
        raise FormatError(path, 0, f"bad .flo magic {magic}")
    w, h = struct.unpack_from("<ii", raw, 4)
    if w <= 0 or h <= 0:
        raise FormatError(path, 4, f"invalid size {w}x{h}")
    need = 12 + 8 * w * h
    if len(raw) != need:
        raise FormatError(path, min(len(raw), need), f"expected {need} bytes, found {len(raw)}")
    return np.frombuffer(raw, dtype="<f4", offset=12).reshape(h, w, 2).astype(np.float32)
