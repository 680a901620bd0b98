"""Slow, direct reference implementations used only by the tests.

None of these share code with the package under test.
"""

import math

import numpy as np


def conv2d_loops(x, w, b, stride, padding):
    """Six nested loops over (n, o, i, j, c, a, b) with explicit zero padding."""
    n_, c_, h, wd = x.shape
    o_, _, kh, kw = w.shape
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n_, o_, oh, ow))
    for n in range(n_):
        for o in range(o_):
            for i in range(oh):
                for j in range(ow):
                    acc = b[o]
                    for c in range(c_):
                        for a in range(kh):
                            for bb in range(kw):
                                yy = i * stride + a - padding
                                xx = j * stride + bb - padding
                                if 0 <= yy < h and 0 <= xx < wd:
                                    acc += x[n, c, yy, xx] * w[o, c, a, bb]
                    out[n, o, i, j] = acc
    return out


def conv_nd_direct(x, w, b, stride, padding):
    """Per-output-element dot product over an explicitly padded slice (2-D or 3-D, batched)."""
    nsp = w.ndim - 2
    pads = [(0, 0), (0, 0)] + [(p, p) for p in padding]
    xp = np.pad(x, pads)
    ks = w.shape[2:]
    osz = [(xp.shape[2 + k] - ks[k]) // stride[k] + 1 for k in range(nsp)]
    out = np.zeros((x.shape[0], w.shape[0]) + tuple(osz))
    for n in range(x.shape[0]):
        for o in range(w.shape[0]):
            for pos in np.ndindex(*osz):
                sl = tuple(slice(p * s, p * s + k) for p, s, k in zip(pos, stride, ks))
                out[(n, o) + pos] = np.sum(xp[(n, slice(None)) + sl] * w[o]) + b[o]
    return out


def conv_transpose2d_loops(x, w, b, stride, padding):
    """Scatter each input pixel times the kernel into the output, then crop."""
    n_, ci, h, wd = x.shape
    _, co, kh, kw = w.shape
    fh, fw = (h - 1) * stride + kh, (wd - 1) * stride + kw
    full = np.zeros((n_, co, fh, fw))
    for n in range(n_):
        for c in range(ci):
            for i in range(h):
                for j in range(wd):
                    full[n, :, i * stride : i * stride + kh, j * stride : j * stride + kw] += x[n, c, i, j] * w[c]
    out = full[:, :, padding : fh - padding, padding : fw - padding]
    return out + b.reshape(1, -1, 1, 1)


def kb(a):
    return max(0.0, 1.0 - abs(a))


def voxel_per_event(xs, ys, ts, ps, D, H, W, quantum=2.0**-42):
    """Literal per-event accumulation of the triangular-kernel voxel grid (2, D, H, W)."""
    grid = np.zeros((2, D, H, W))
    if len(ts) == 0:
        return grid
    t_first, t_last = min(ts), max(ts)
    for x, y, t, p in zip(xs, ys, ts, ps):
        if t_last == t_first:
            tn = 0.0
        else:
            tn = (t - t_first) / (t_last - t_first) * (D - 1)
            tn = round(tn / quantum) * quantum
        plane = 0 if p > 0 else 1
        for px in (math.floor(x), math.floor(x) + 1):
            for py in (math.floor(y), math.floor(y) + 1):
                for b in range(D):
                    w = kb(px - x) * kb(py - y) * kb(b - tn)
                    if w > 0 and 0 <= px < W and 0 <= py < H:
                        grid[plane, b, py, px] += w
    return grid


def legacy_scan(xs, ys, ts, ps, H, W):
    out = np.zeros((4, H, W))
    if len(ts) == 0:
        return out
    lo, hi = min(ts), max(ts)
    for x, y, t, p in zip(xs, ys, ts, ps):
        c = 0 if p > 0 else 1
        out[c, y, x] += 1
        tn = (t - lo) / (hi - lo) if hi > lo else 1.0
        out[2 + c, y, x] = max(out[2 + c, y, x], tn)
    return out


def bilinear_scalar(img, x, y):
    """Clamp-to-edge bilinear sample of a 2-D array at one point."""
    h, w = img.shape
    x = min(max(x, 0.0), w - 1.0)
    y = min(max(y, 0.0), h - 1.0)
    x0 = min(int(math.floor(x)), max(w - 2, 0))
    y0 = min(int(math.floor(y)), max(h - 2, 0))
    x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
    ax, ay = x - x0, y - y0
    return ((1 - ay) * ((1 - ax) * img[y0, x0] + ax * img[y0, x1])
            + ay * ((1 - ax) * img[y1, x0] + ax * img[y1, x1]))


def photometric_loops(flow, a, b, eps, q):
    h, w = a.shape
    total = 0.0
    for y in range(h):
        for x in range(w):
            r = a[y, x] - bilinear_scalar(b, x + flow[0, y, x], y + flow[1, y, x])
            total += (r * r + eps * eps) ** q
    return total


def smoothness_loops(flow):
    _, h, w = flow.shape
    total = 0.0
    for i in range(h):
        for j in range(w):
            for c in range(2):
                if i + 1 < h:
                    total += abs(flow[c, i, j] - flow[c, i + 1, j])
                if j + 1 < w:
                    total += abs(flow[c, i, j] - flow[c, i, j + 1])
    return total


def aee_loops(pred, gt, mask):
    errs = []
    for i in range(mask.shape[0]):
        for j in range(mask.shape[1]):
            if mask[i, j]:
                du = pred[0, i, j] - gt[0, i, j]
                dv = pred[1, i, j] - gt[1, i, j]
                errs.append(math.sqrt(du * du + dv * dv))
    n = len(errs)
    return sum(errs) / n, 100.0 * sum(1 for e in errs if e > 3.0) / n, n


def window_scan(ts, t0, t1):
    return [i for i, t in enumerate(ts) if t0 <= t < t1]


def dense_polarity_sim(intensity_fn, x, y, t_end, theta, steps):
    """Fine-timestep reference for one pixel: signs of all threshold crossings."""
    ref = math.log(intensity_fn(x, y, 0.0))
    signs = []
    for k in range(1, steps + 1):
        L = math.log(intensity_fn(x, y, t_end * k / steps))
        while L - ref >= theta:
            ref += theta
            signs.append(1)
        while ref - L >= theta:
            ref -= theta
            signs.append(-1)
    return signs
