# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels; same contracts as ``emac._kernels_py``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport floor, ceil, exp, fabs, INFINITY

cnp.import_array()


def warp_bilinear(const double[:, :, ::1] field, const double[:, :, :, ::1] flow):
    cdef Py_ssize_t bsz = field.shape[0], h = field.shape[1], w = field.shape[2]
    out_arr = np.zeros((bsz, h, w), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t b, y, x
    cdef long x0, y0
    cdef double sx, sy, fx, fy, acc
    with nogil:
        for b in range(bsz):
            for y in range(h):
                for x in range(w):
                    sx = x + flow[b, y, x, 0]
                    sy = y + flow[b, y, x, 1]
                    x0 = <long>floor(sx)
                    y0 = <long>floor(sy)
                    fx = sx - x0
                    fy = sy - y0
                    acc = 0.0
                    if 0 <= y0 < h:
                        if 0 <= x0 < w:
                            acc = acc + (1.0 - fy) * (1.0 - fx) * field[b, y0, x0]
                        if 0 <= x0 + 1 < w:
                            acc = acc + (1.0 - fy) * fx * field[b, y0, x0 + 1]
                    if 0 <= y0 + 1 < h:
                        if 0 <= x0 < w:
                            acc = acc + fy * (1.0 - fx) * field[b, y0 + 1, x0]
                        if 0 <= x0 + 1 < w:
                            acc = acc + fy * fx * field[b, y0 + 1, x0 + 1]
                    out[b, y, x] = acc
    return out_arr


def warp_bilinear_adjoint(const double[:, :, ::1] grad_out, const double[:, :, :, ::1] flow):
    cdef Py_ssize_t bsz = grad_out.shape[0], h = grad_out.shape[1], w = grad_out.shape[2]
    grad_arr = np.zeros((bsz, h, w), dtype=np.float64)
    cdef double[:, :, ::1] grad = grad_arr
    cdef Py_ssize_t b, y, x
    cdef long x0, y0
    cdef double sx, sy, fx, fy, g
    with nogil:
        for b in range(bsz):
            for y in range(h):
                for x in range(w):
                    g = grad_out[b, y, x]
                    sx = x + flow[b, y, x, 0]
                    sy = y + flow[b, y, x, 1]
                    x0 = <long>floor(sx)
                    y0 = <long>floor(sy)
                    fx = sx - x0
                    fy = sy - y0
                    if 0 <= y0 < h:
                        if 0 <= x0 < w:
                            grad[b, y0, x0] += (1.0 - fy) * (1.0 - fx) * g
                        if 0 <= x0 + 1 < w:
                            grad[b, y0, x0 + 1] += (1.0 - fy) * fx * g
                    if 0 <= y0 + 1 < h:
                        if 0 <= x0 < w:
                            grad[b, y0 + 1, x0] += fy * (1.0 - fx) * g
                        if 0 <= x0 + 1 < w:
                            grad[b, y0 + 1, x0 + 1] += fy * fx * g
    return grad_arr


def blockmatch(const double[:, ::1] cur, const double[:, ::1] prev, int block, int radius, int stride):
    cdef Py_ssize_t h = cur.shape[0], w = cur.shape[1]
    flow_arr = np.zeros((h, w, 2), dtype=np.float64)
    cdef double[:, :, ::1] flow = flow_arr
    cands = sorted(
        ((u, v) for v in range(-radius, radius + 1) for u in range(-radius, radius + 1)),
        key=lambda c: (c[0] * c[0] + c[1] * c[1], c[0], c[1]),
    )
    cdef long[:, ::1] cand = np.asarray(cands, dtype=np.int64).reshape(-1, 2).astype(np.int_)
    cdef Py_ssize_t nc = cand.shape[0]
    cdef Py_ssize_t by, bx, ey, ex, yy, xx, k
    cdef long u, v, bu, bv
    cdef double ssd, best, d
    with nogil:
        by = 0
        while by < h:
            ey = by + block if by + block < h else h
            bx = 0
            while bx < w:
                ex = bx + block if bx + block < w else w
                best = INFINITY
                bu = 0
                bv = 0
                for k in range(nc):
                    u = cand[k, 0]
                    v = cand[k, 1]
                    if by + v < 0 or ey + v > h or bx + u < 0 or ex + u > w:
                        continue
                    ssd = 0.0
                    for yy in range(by, ey):
                        for xx in range(bx, ex):
                            d = cur[yy, xx] - prev[yy + v, xx + u]
                            ssd = ssd + d * d
                    if ssd < best:
                        best = ssd
                        bu = u
                        bv = v
                for yy in range(by, ey):
                    for xx in range(bx, ex):
                        flow[yy, xx, 0] = bu
                        flow[yy, xx, 1] = bv
                bx = bx + stride
            by = by + stride
    return flow_arr


def rasterize(const double[:, ::1] points, int h, int w, double sigma, double truncate):
    out_arr = np.zeros((h, w), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    kx_arr = np.zeros(w, dtype=np.float64)
    ky_arr = np.zeros(h, dtype=np.float64)
    cdef double[::1] kx = kx_arr
    cdef double[::1] ky = ky_arr
    cdef double reach = truncate * sigma
    cdef double inv = 1.0 / (2.0 * sigma * sigma)
    cdef Py_ssize_t n = points.shape[0], i, r, c
    cdef long c0, c1, r0, r1
    cdef double x, y, sx, sy, dx, dy
    with nogil:
        for i in range(n):
            x = points[i, 0]
            y = points[i, 1]
            c0 = <long>floor(x - reach)
            c1 = <long>ceil(x + reach)
            r0 = <long>floor(y - reach)
            r1 = <long>ceil(y + reach)
            if c0 < 0:
                c0 = 0
            if r0 < 0:
                r0 = 0
            if c1 > w - 1:
                c1 = w - 1
            if r1 > h - 1:
                r1 = h - 1
            sx = 0.0
            for c in range(c0, c1 + 1):
                dx = c - x
                kx[c] = exp(-(dx * dx) * inv) if fabs(dx) <= reach else 0.0
                sx = sx + kx[c]
            sy = 0.0
            for r in range(r0, r1 + 1):
                dy = r - y
                ky[r] = exp(-(dy * dy) * inv) if fabs(dy) <= reach else 0.0
                sy = sy + ky[r]
            for r in range(r0, r1 + 1):
                for c in range(c0, c1 + 1):
                    out[r, c] += (ky[r] / sy) * (kx[c] / sx)
    return out_arr
