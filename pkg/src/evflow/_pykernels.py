"""Pure numpy implementations of the hot kernels.

These are the reference fallback for the compiled ``_ckernels`` module and
must stay bit-identical to it: same arithmetic expressions, same
accumulation order (corner-major, then event/pixel order).
"""

import numpy as np


def _axis_corners(coord, size):
    """Lower/upper integer cell and triangular weights along one axis."""
    lo = np.floor(coord)
    hi = lo + 1.0
    w_lo = 1.0 - np.abs(lo - coord)
    w_hi = 1.0 - np.abs(hi - coord)
    lo_i = lo.astype(np.int64)
    hi_i = lo_i + 1
    ok_lo = (lo_i >= 0) & (lo_i < size) & (w_lo > 0.0)
    ok_hi = (hi_i >= 0) & (hi_i < size) & (w_hi > 0.0)
    return ((lo_i, w_lo, ok_lo), (hi_i, w_hi, ok_hi))


def voxel_scatter(xs, ys, pidx, tnorm, depth, height, width):
    """Accumulate events into a (2, depth, height, width) grid.

    Each event spreads unit mass with the triangular kernel max(0, 1 - |a|)
    along x, y and normalized time. ``pidx`` selects the polarity plane.
    """
    grid = np.zeros(2 * depth * height * width)
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    tnorm = np.asarray(tnorm, dtype=np.float64)
    pidx = np.asarray(pidx, dtype=np.int64)
    cx = _axis_corners(xs, width)
    cy = _axis_corners(ys, height)
    ct = _axis_corners(tnorm, depth)
    for ix, wx, okx in cx:
        for iy, wy, oky in cy:
            wxy = wx * wy
            for it, wt, okt in ct:
                ok = okx & oky & okt
                flat = ((pidx[ok] * depth + it[ok]) * height + iy[ok]) * width + ix[ok]
                np.add.at(grid, flat, wxy[ok] * wt[ok])
    return grid.reshape(2, depth, height, width)


def legacy_scatter(xs, ys, pidx, tnorm, height, width):
    """Per-polarity event counts and latest normalized timestamps, each (2, H, W)."""
    xs = np.asarray(xs, dtype=np.int64)
    ys = np.asarray(ys, dtype=np.int64)
    pidx = np.asarray(pidx, dtype=np.int64)
    flat = (pidx * height + ys) * width + xs
    counts = np.zeros(2 * height * width)
    latest = np.zeros(2 * height * width)
    np.add.at(counts, flat, 1.0)
    np.maximum.at(latest, flat, np.asarray(tnorm, dtype=np.float64))
    return counts.reshape(2, height, width), latest.reshape(2, height, width)


def _bilinear_setup(height, width, cx, cy):
    xc = np.minimum(np.maximum(cx, 0.0), width - 1.0)
    yc = np.minimum(np.maximum(cy, 0.0), height - 1.0)
    x0 = np.minimum(np.floor(xc).astype(np.int64), max(width - 2, 0))
    y0 = np.minimum(np.floor(yc).astype(np.int64), max(height - 2, 0))
    x1 = np.minimum(x0 + 1, width - 1)
    y1 = np.minimum(y0 + 1, height - 1)
    wx = xc - x0
    wy = yc - y0
    return x0, x1, y0, y1, wx, wy


def bilinear_forward(image, cx, cy):
    c, height, width = image.shape
    x0, x1, y0, y1, wx, wy = _bilinear_setup(height, width, cx, cy)
    i00 = image[:, y0, x0]
    i01 = image[:, y0, x1]
    i10 = image[:, y1, x0]
    i11 = image[:, y1, x1]
    top = (1.0 - wx) * i00 + wx * i01
    bot = (1.0 - wx) * i10 + wx * i11
    return (1.0 - wy) * top + wy * bot


def bilinear_backward(image, cx, cy, grad):
    c, height, width = image.shape
    x0, x1, y0, y1, wx, wy = _bilinear_setup(height, width, cx, cy)
    i00 = image[:, y0, x0]
    i01 = image[:, y0, x1]
    i10 = image[:, y1, x0]
    i11 = image[:, y1, x1]
    gx = grad * ((1.0 - wy) * (i01 - i00) + wy * (i11 - i10))
    gy = grad * ((1.0 - wx) * (i10 - i00) + wx * (i11 - i01))
    inside_x = (cx >= 0.0) & (cx <= width - 1.0)
    inside_y = (cy >= 0.0) & (cy <= height - 1.0)
    gcx = np.where(inside_x, gx.sum(axis=0), 0.0)
    gcy = np.where(inside_y, gy.sum(axis=0), 0.0)

    gimg = np.zeros((c, height * width))
    corners = (
        (y0, x0, (1.0 - wy) * (1.0 - wx)),
        (y0, x1, (1.0 - wy) * wx),
        (y1, x0, wy * (1.0 - wx)),
        (y1, x1, wy * wx),
    )
    for yy, xx, w in corners:
        flat = (yy * width + xx).ravel()
        for ch in range(c):
            np.add.at(gimg[ch], flat, (grad[ch] * w).ravel())
    return gimg.reshape(c, height, width), gcx, gcy
