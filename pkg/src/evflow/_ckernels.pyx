# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels. Must remain bit-identical to ``_pykernels``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport floor, fabs

cnp.import_array()


cdef inline void _corners(double coord, Py_ssize_t size, Py_ssize_t* idx, double* w, bint* ok) noexcept nogil:
    cdef double lo = floor(coord)
    cdef double hi = lo + 1.0
    cdef Py_ssize_t lo_i = <Py_ssize_t>lo
    w[0] = 1.0 - fabs(lo - coord)
    w[1] = 1.0 - fabs(hi - coord)
    idx[0] = lo_i
    idx[1] = lo_i + 1
    ok[0] = lo_i >= 0 and lo_i < size and w[0] > 0.0
    ok[1] = lo_i + 1 >= 0 and lo_i + 1 < size and w[1] > 0.0


def voxel_scatter(const double[::1] xs, const double[::1] ys, const long long[::1] pidx,
                  const double[::1] tnorm, Py_ssize_t depth, Py_ssize_t height, Py_ssize_t width):
    cdef Py_ssize_t n = xs.shape[0]
    out = np.zeros(2 * depth * height * width)
    cdef double[::1] grid = out
    # per-event corners along each axis, computed once; -1 marks an unusable corner
    ci_arr = np.empty((3, 2, n), dtype=np.intp)
    cw_arr = np.empty((3, 2, n))
    cdef Py_ssize_t[:, :, ::1] ci = ci_arr
    cdef double[:, :, ::1] cw = cw_arr
    cdef Py_ssize_t i, a, b, c, plane_stride = depth * height * width
    cdef Py_ssize_t idx[2]
    cdef double w[2]
    cdef bint ok[2]
    with nogil:
        for i in range(n):
            _corners(xs[i], width, idx, w, ok)
            for a in range(2):
                ci[0, a, i] = idx[a] if ok[a] else -1
                cw[0, a, i] = w[a]
            _corners(ys[i], height, idx, w, ok)
            for a in range(2):
                ci[1, a, i] = idx[a] if ok[a] else -1
                cw[1, a, i] = w[a]
            _corners(tnorm[i], depth, idx, w, ok)
            for a in range(2):
                ci[2, a, i] = idx[a] if ok[a] else -1
                cw[2, a, i] = w[a]
        # corner-major accumulation keeps the numpy fallback's summation order
        for a in range(2):
            for b in range(2):
                for c in range(2):
                    for i in range(n):
                        if ci[0, a, i] < 0 or ci[1, b, i] < 0 or ci[2, c, i] < 0:
                            continue
                        grid[pidx[i] * plane_stride + (ci[2, c, i] * height + ci[1, b, i]) * width
                             + ci[0, a, i]] += (cw[0, a, i] * cw[1, b, i]) * cw[2, c, i]
    return out.reshape(2, depth, height, width)


def legacy_scatter(const long long[::1] xs, const long long[::1] ys, const long long[::1] pidx,
                   const double[::1] tnorm, Py_ssize_t height, Py_ssize_t width):
    cdef Py_ssize_t n = xs.shape[0]
    counts_arr = np.zeros(2 * height * width)
    latest_arr = np.zeros(2 * height * width)
    cdef double[::1] counts = counts_arr
    cdef double[::1] latest = latest_arr
    cdef Py_ssize_t i, k
    with nogil:
        for i in range(n):
            k = (pidx[i] * height + ys[i]) * width + xs[i]
            counts[k] += 1.0
            if tnorm[i] > latest[k]:
                latest[k] = tnorm[i]
    return counts_arr.reshape(2, height, width), latest_arr.reshape(2, height, width)


cdef inline void _setup(double cx, double cy, Py_ssize_t height, Py_ssize_t width,
                        Py_ssize_t* x0, Py_ssize_t* x1, Py_ssize_t* y0, Py_ssize_t* y1,
                        double* wx, double* wy) noexcept nogil:
    cdef double xc = cx
    cdef double yc = cy
    cdef Py_ssize_t xmax = width - 2 if width >= 2 else 0
    cdef Py_ssize_t ymax = height - 2 if height >= 2 else 0
    if xc < 0.0:
        xc = 0.0
    if xc > width - 1.0:
        xc = width - 1.0
    if yc < 0.0:
        yc = 0.0
    if yc > height - 1.0:
        yc = height - 1.0
    x0[0] = <Py_ssize_t>floor(xc)
    y0[0] = <Py_ssize_t>floor(yc)
    if x0[0] > xmax:
        x0[0] = xmax
    if y0[0] > ymax:
        y0[0] = ymax
    x1[0] = x0[0] + 1 if x0[0] + 1 < width else width - 1
    y1[0] = y0[0] + 1 if y0[0] + 1 < height else height - 1
    wx[0] = xc - x0[0]
    wy[0] = yc - y0[0]


def bilinear_forward(const double[:, :, ::1] image, const double[:, ::1] cx, const double[:, ::1] cy):
    cdef Py_ssize_t c = image.shape[0], height = image.shape[1], width = image.shape[2]
    cdef Py_ssize_t ho = cx.shape[0], wo = cx.shape[1]
    out_arr = np.empty((c, ho, wo))
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t i, j, ch, x0, x1, y0, y1
    cdef double wx, wy, top, bot
    with nogil:
        for i in range(ho):
            for j in range(wo):
                _setup(cx[i, j], cy[i, j], height, width, &x0, &x1, &y0, &y1, &wx, &wy)
                for ch in range(c):
                    top = (1.0 - wx) * image[ch, y0, x0] + wx * image[ch, y0, x1]
                    bot = (1.0 - wx) * image[ch, y1, x0] + wx * image[ch, y1, x1]
                    out[ch, i, j] = (1.0 - wy) * top + wy * bot
    return out_arr


def bilinear_backward(const double[:, :, ::1] image, const double[:, ::1] cx, const double[:, ::1] cy,
                      const double[:, :, ::1] grad):
    cdef Py_ssize_t c = image.shape[0], height = image.shape[1], width = image.shape[2]
    cdef Py_ssize_t ho = cx.shape[0], wo = cx.shape[1]
    gimg_arr = np.zeros((c, height, width))
    gcx_arr = np.zeros((ho, wo))
    gcy_arr = np.zeros((ho, wo))
    cdef double[:, :, ::1] gimg = gimg_arr
    cdef double[:, ::1] gcx = gcx_arr
    cdef double[:, ::1] gcy = gcy_arr
    cdef Py_ssize_t i, j, ch, k, x0, x1, y0, y1, yy, xx
    cdef double wx, wy, g, i00, i01, i10, i11, sx, sy, w
    with nogil:
        for i in range(ho):
            for j in range(wo):
                _setup(cx[i, j], cy[i, j], height, width, &x0, &x1, &y0, &y1, &wx, &wy)
                for ch in range(c):
                    g = grad[ch, i, j]
                    i00 = image[ch, y0, x0]
                    i01 = image[ch, y0, x1]
                    i10 = image[ch, y1, x0]
                    i11 = image[ch, y1, x1]
                    sx = g * ((1.0 - wy) * (i01 - i00) + wy * (i11 - i10))
                    sy = g * ((1.0 - wx) * (i10 - i00) + wx * (i11 - i01))
                    if ch == 0:
                        gcx[i, j] = sx
                        gcy[i, j] = sy
                    else:
                        gcx[i, j] = gcx[i, j] + sx
                        gcy[i, j] = gcy[i, j] + sy
                if not (cx[i, j] >= 0.0 and cx[i, j] <= width - 1.0):
                    gcx[i, j] = 0.0
                if not (cy[i, j] >= 0.0 and cy[i, j] <= height - 1.0):
                    gcy[i, j] = 0.0
        for k in range(4):
            for ch in range(c):
                for i in range(ho):
                    for j in range(wo):
                        _setup(cx[i, j], cy[i, j], height, width, &x0, &x1, &y0, &y1, &wx, &wy)
                        if k == 0:
                            yy = y0
                            xx = x0
                            w = (1.0 - wy) * (1.0 - wx)
                        elif k == 1:
                            yy = y0
                            xx = x1
                            w = (1.0 - wy) * wx
                        elif k == 2:
                            yy = y1
                            xx = x0
                            w = wy * (1.0 - wx)
                        else:
                            yy = y1
                            xx = x1
                            w = wy * wx
                        gimg[ch, yy, xx] += grad[ch, i, j] * w
    return gimg_arr, gcx_arr, gcy_arr
