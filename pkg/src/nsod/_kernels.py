"""Compiled fused crop-resize-describe kernel (same math as ``Featurizer.describe``)."""

import math

import numpy as np
from numba import njit


@njit(cache=True)
def _axis(lo, hi, size, i0, i1, frac):
    scale = (hi - lo) / size
    last = math.ceil(hi - 1.0)
    for u in range(size):
        t = (u + 0.5) * scale - 0.5 + lo
        if t < lo:
            t = lo
        if t > hi - 1.0:
            t = hi - 1.0
        a = math.floor(t)
        i0[u] = a
        i1[u] = min(a + 1, last)
        frac[u] = t - a


@njit(cache=True)
def describe_boxes(img, boxes, patch, grid, color_bins, orient_bins, flat_fill):
    n = boxes.shape[0]
    per = 3 * color_bins + orient_bins
    dim = grid * grid * per
    out = np.zeros((n, dim))
    buf = np.empty((patch, patch, 3))
    x0 = np.empty(patch, np.int64)
    x1 = np.empty(patch, np.int64)
    fx = np.empty(patch)
    y0 = np.empty(patch, np.int64)
    y1 = np.empty(patch, np.int64)
    fy = np.empty(patch)
    cell_of = np.empty(patch, np.int64)
    for u in range(patch):
        cell_of[u] = u * grid // patch
    counts = np.zeros(grid * grid)
    for u in range(patch):
        for v in range(patch):
            counts[cell_of[u] * grid + cell_of[v]] += 1.0
    cscale = color_bins / 256.0
    for r in range(n):
        _axis(boxes[r, 0], boxes[r, 2], patch, x0, x1, fx)
        _axis(boxes[r, 1], boxes[r, 3], patch, y0, y1, fy)
        for v in range(patch):
            wy = fy[v]
            for u in range(patch):
                wx = fx[u]
                for c in range(3):
                    top = img[y0[v], x0[u], c] * (1 - wx) + img[y0[v], x1[u], c] * wx
                    bot = img[y1[v], x0[u], c] * (1 - wx) + img[y1[v], x1[u], c] * wx
                    buf[v, u, c] = top * (1 - wy) + bot * wy
        row = out[r]
        for v in range(patch):
            for u in range(patch):
                cell = cell_of[v] * grid + cell_of[u]
                base = cell * per
                mx = max(buf[v, u, 0], buf[v, u, 1], buf[v, u, 2])
                mn = min(buf[v, u, 0], buf[v, u, 1], buf[v, u, 2])
                chroma = (mx - mn) / 255.0
                for c in range(3):
                    b = int(buf[v, u, c] * cscale)
                    if b > color_bins - 1:
                        b = color_bins - 1
                    row[base + c * color_bins + b] += chroma
                best = -1.0
                gxb = 0.0
                gyb = 0.0
                for c in range(3):
                    gx = 0.0
                    gy = 0.0
                    if 0 < u < patch - 1:
                        gx = (buf[v, u + 1, c] - buf[v, u - 1, c]) / 2
                    if 0 < v < patch - 1:
                        gy = (buf[v + 1, u, c] - buf[v - 1, u, c]) / 2
                    m2 = gx * gx + gy * gy
                    if m2 > best:
                        best = m2
                        gxb = gx
                        gyb = gy
                mag = math.hypot(gxb, gyb) / 255.0
                theta = math.atan2(gyb, gxb) % math.pi
                ob = int(theta * (orient_bins / math.pi))
                if ob > orient_bins - 1:
                    ob = orient_bins - 1
                row[base + 3 * color_bins + ob] += mag
        for cell in range(grid * grid):
            for j in range(per):
                row[cell * per + j] /= counts[cell]
        nonzero = False
        for j in range(dim):
            if row[j] != 0.0:
                nonzero = True
        if not nonzero:
            for j in range(dim):
                row[j] = flat_fill
    return out
