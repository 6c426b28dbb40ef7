"""Pure numpy kernels. Reference behaviour for the compiled ``_kernels`` module."""
from __future__ import annotations

import numpy as np


def _bilinear_taps(flow):
    h, w = flow.shape[-3], flow.shape[-2]
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    sx = xs + flow[..., 0]
    sy = ys + flow[..., 1]
    x0 = np.floor(sx)
    y0 = np.floor(sy)
    fx = sx - x0
    fy = sy - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    taps = []
    for dy, dx, wgt in (
        (0, 0, (1.0 - fy) * (1.0 - fx)),
        (0, 1, (1.0 - fy) * fx),
        (1, 0, fy * (1.0 - fx)),
        (1, 1, fy * fx),
    ):
        yy = y0 + dy
        xx = x0 + dx
        valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        taps.append((np.where(valid, yy, 0), np.where(valid, xx, 0), np.where(valid, wgt, 0.0), valid))
    return taps


def warp_bilinear(field: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """Backward warp: ``out[y, x] = field(y + v, x + u)`` with zero padding.

    ``field`` is (B, h, w); ``flow`` is (B, h, w, 2).
    """
    out = np.zeros(field.shape, dtype=np.float64)
    b_idx = np.arange(field.shape[0])[:, None, None]
    for yy, xx, wgt, valid in _bilinear_taps(flow):
        out = out + np.where(valid, wgt * field[b_idx, yy, xx], 0.0)
    return out


def warp_bilinear_adjoint(grad_out: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """Transpose of :func:`warp_bilinear` with respect to the sampled field."""
    bsz, h, w = grad_out.shape
    grad = np.zeros(bsz * h * w, dtype=np.float64)
    offs = (np.arange(bsz) * h * w)[:, None, None]
    for yy, xx, wgt, valid in _bilinear_taps(flow):
        flat = (offs + yy * w + xx)[valid]
        np.add.at(grad, flat, (wgt * grad_out)[valid])
    return grad.reshape(bsz, h, w)


def _candidates(radius: int):
    cands = [(u, v) for v in range(-radius, radius + 1) for u in range(-radius, radius + 1)]
    cands.sort(key=lambda c: (c[0] * c[0] + c[1] * c[1], c[0], c[1]))
    return cands


def blockmatch(cur: np.ndarray, prev: np.ndarray, block: int, radius: int, stride: int) -> np.ndarray:
    """Exhaustive SSD block search; returns an (h, w, 2) integer-valued flow."""
    h, w = cur.shape
    flow = np.zeros((h, w, 2), dtype=np.float64)
    origins = [(by, bx) for by in range(0, h, stride) for bx in range(0, w, stride)]
    best = {o: (np.inf, 0, 0) for o in origins}
    for u, v in _candidates(radius):
        for by, bx in origins:
            ey, ex = min(by + block, h), min(bx + block, w)
            if by + v < 0 or ey + v > h or bx + u < 0 or ex + u > w:
                continue
            diff = cur[by:ey, bx:ex] - prev[by + v:ey + v, bx + u:ex + u]
            ssd = float(np.sum(diff * diff))
            if ssd < best[(by, bx)][0]:
                best[(by, bx)] = (ssd, u, v)
    for (by, bx), (_, u, v) in best.items():
        flow[by:by + block, bx:bx + block, 0] = u
        flow[by:by + block, bx:bx + block, 1] = v
    return flow


def rasterize(points: np.ndarray, h: int, w: int, sigma: float, truncate: float) -> np.ndarray:
    """Sum of unit-mass Gaussians, each clipped to the image and renormalised."""
    out = np.zeros((h, w), dtype=np.float64)
    reach = truncate * sigma
    inv = 1.0 / (2.0 * sigma * sigma)
    for x, y in points:
        c0, c1 = max(0, int(np.floor(x - reach))), min(w - 1, int(np.ceil(x + reach)))
        r0, r1 = max(0, int(np.floor(y - reach))), min(h - 1, int(np.ceil(y + reach)))
        cols = np.arange(c0, c1 + 1, dtype=np.float64)
        rows = np.arange(r0, r1 + 1, dtype=np.float64)
        kx = np.exp(-((cols - x) ** 2) * inv)
        ky = np.exp(-((rows - y) ** 2) * inv)
        kx[np.abs(cols - x) > reach] = 0.0
        ky[np.abs(rows - y) > reach] = 0.0
        kx /= kx.sum()
        ky /= ky.sum()
        out[r0:r1 + 1, c0:c1 + 1] += ky[:, None] * kx[None, :]
    return out
