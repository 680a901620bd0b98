"""Minimal float64 tensor engine with reverse-mode differentiation.

Every operation records a closure that maps the output adjoint to the
input adjoints. ``backward`` replays those closures in reverse topological
order. Only the operations the flow network and its loss need are provided;
there is deliberately no general broadcasting.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from evflow import kernels

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[BackwardFn] = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_scalar(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self):
        return tsum(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], fn: BackwardFn, op: str) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = fn
        out.op = op
    return out


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


class Graph:
    """Recorded operations reachable from a root, inputs before outputs."""

    def __init__(self, root: Tensor):
        self.root = root
        self.nodes: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                self.nodes.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen and parent.requires_grad:
                    stack.append((parent, False))

    def __len__(self) -> int:
        return len(self.nodes)

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n.is_leaf]


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``grad`` of every reachable leaf."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    graph = Graph(loss)
    adjoints: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for node in reversed(graph.nodes):
        g = adjoints.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        grads = node._backward(g)
        for parent, pg in zip(node._parents, grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in adjoints:
                adjoints[key] = adjoints[key] + pg
            else:
                adjoints[key] = pg


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape(a, b, "mul")
    return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def mul_scalar(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,), "mul_scalar")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0
    return _result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def tabs(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return _result(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")


def charbonnier(a: Tensor, eps: float, q: float) -> Tensor:
    """Elementwise (a^2 + eps^2)^q."""
    base = a.data * a.data + eps * eps
    out = base**q

    def fn(g):
        return (g * (q * base ** (q - 1.0)) * (2.0 * a.data),)

    return _result(out, (a,), fn, "charbonnier")


def tsum(a: Tensor) -> Tensor:
    shape = a.shape
    return _result(np.asarray(a.data.sum()), (a,), lambda g: (np.full(shape, np.asarray(g).reshape(())),), "sum")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        raise ShapeError(f"reshape: cannot view {a.shape} ({a.size} elements) as {shape}")
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: empty input list")
    ref = tensors[0]
    axis = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim:
            raise ShapeError(f"concat: rank mismatch {ref.shape} vs {t.shape}")
        for ax in range(ref.ndim):
            if ax != axis and t.shape[ax] != ref.shape[ax]:
                raise ShapeError(f"concat: axis {ax} mismatch {ref.shape} vs {t.shape}")
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), fn, "concat")


def getitem(a: Tensor, index) -> Tensor:
    """Basic (slice/integer) indexing."""
    out = a.data[index]
    shape = a.shape

    def fn(g):
        full = np.zeros(shape)
        full[index] += g
        return (full,)

    return _result(np.array(out, dtype=np.float64), (a,), fn, "getitem")


def avg_pool2(a: Tensor) -> Tensor:
    """2x2 average pooling over the last two axes (both must be even)."""
    *lead, h, w = a.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2: spatial size {h}x{w} is not even")
    out = a.data.reshape(*lead, h // 2, 2, w // 2, 2).mean(axis=(-3, -1))

    def fn(g):
        return (np.repeat(np.repeat(g, 2, axis=-2), 2, axis=-1) * 0.25,)

    return _result(out, (a,), fn, "avg_pool2")


# ---------------------------------------------------------------- convolution


def _tuple(v, n: int, name: str) -> tuple[int, ...]:
    if isinstance(v, (int, np.integer)):
        return (int(v),) * n
    v = tuple(int(x) for x in v)
    if len(v) != n:
        raise ShapeError(f"{name} needs {n} entries, got {v}")
    return v


def _pad(x: np.ndarray, pads: tuple[int, ...]) -> np.ndarray:
    if not any(pads):
        return x
    return np.pad(x, [(0, 0), (0, 0)] + [(p, p) for p in pads])


def _windows(xp: np.ndarray, ksize: tuple[int, ...], stride: tuple[int, ...]) -> np.ndarray:
    """View of shape (N, C, *out_spatial, *ksize)."""
    nsp = len(ksize)
    view = sliding_window_view(xp, ksize, axis=tuple(range(2, 2 + nsp)))
    return view[(slice(None), slice(None)) + tuple(slice(None, None, s) for s in stride)]


def _scatter_windows(cols: np.ndarray, spatial: tuple[int, ...], ksize, stride) -> np.ndarray:
    """Adjoint of ``_windows``: cols (N, C, *ksize, *in_spatial) summed into (N, C, *spatial)."""
    n, c = cols.shape[:2]
    nsp = len(ksize)
    grid = cols.shape[2 + nsp :]
    out = np.zeros((n, c) + tuple(spatial))
    for offset in itertools.product(*(range(k) for k in ksize)):
        target = tuple(slice(o, o + s * (m - 1) + 1, s) for o, s, m in zip(offset, stride, grid))
        out[(slice(None), slice(None)) + target] += cols[(slice(None), slice(None)) + offset]
    return out


def _conv_nd(x: Tensor, w: Tensor, b: Optional[Tensor], stride, padding, nsp: int, name: str) -> Tensor:
    if x.ndim == nsp + 1:
        out = _conv_nd(reshape(x, (1,) + x.shape), w, b, stride, padding, nsp, name)
        return reshape(out, out.shape[1:])
    if x.ndim != nsp + 2 or w.ndim != nsp + 2:
        raise ShapeError(f"{name}: expected input rank {nsp + 1}/{nsp + 2} and weight rank {nsp + 2}, "
                         f"got {x.shape} and {w.shape}")
    stride = _tuple(stride, nsp, "stride")
    padding = _tuple(padding, nsp, "padding")
    if min(stride) < 1:
        raise ShapeError(f"{name}: stride must be >= 1, got {stride}")
    n, cin = x.shape[:2]
    cout, wcin = w.shape[:2]
    ksize = w.shape[2:]
    if wcin != cin:
        raise ShapeError(f"{name}: channel axis mismatch, input has {cin}, weight expects {wcin}")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"{name}: bias shape {b.shape} does not match {cout} output channels")
    spatial = x.shape[2:]
    padded = tuple(s + 2 * p for s, p in zip(spatial, padding))
    for ax, (k, s) in enumerate(zip(ksize, padded)):
        if k > s:
            raise ShapeError(f"{name}: kernel extent {k} exceeds padded size {s} on spatial axis {ax}")

    xp = _pad(x.data, padding)
    win = _windows(xp, ksize, stride)
    red = list(range(2 + nsp, 2 + 2 * nsp))
    out = np.tensordot(win, w.data, axes=([1] + red, [1] + list(range(2, 2 + nsp))))
    out = np.moveaxis(out, -1, 1)
    if b is not None:
        out = out + b.data.reshape((1, cout) + (1,) * nsp)
    out = np.ascontiguousarray(out)
    sp_axes = list(range(2, 2 + nsp))

    def fn(g):
        gx = gw = gb = None
        if x.requires_grad:
            cols = np.tensordot(g, w.data, axes=([1], [0]))  # (N, *So, Cin, *K)
            perm = [0, 1 + nsp] + list(range(2 + nsp, 2 + 2 * nsp)) + list(range(1, 1 + nsp))
            gxp = _scatter_windows(cols.transpose(perm), padded, ksize, stride)
            crop = tuple(slice(p, p + s) for p, s in zip(padding, spatial))
            gx = gxp[(slice(None), slice(None)) + crop]
        if w.requires_grad:
            gw = np.tensordot(g, win, axes=([0] + sp_axes, [0] + sp_axes))
        if b is not None and b.requires_grad:
            gb = g.sum(axis=tuple([0] + sp_axes))
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _result(out, parents, fn, name)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride=1, padding=0) -> Tensor:
    """Cross-correlation over (C, H, W) or (N, C, H, W); weight is (Cout, Cin, kh, kw)."""
    return _conv_nd(as_tensor(x), as_tensor(weight), bias, stride, padding, 2, "conv2d")


def conv3d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride=1, padding=0) -> Tensor:
    """Cross-correlation over (C, D, H, W) or (N, C, D, H, W); weight is (Cout, Cin, kd, kh, kw)."""
    return _conv_nd(as_tensor(x), as_tensor(weight), bias, stride, padding, 3, "conv3d")


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride=1, padding=0) -> Tensor:
    """Transposed convolution; weight is (Cin, Cout, kh, kw).

    The output is the input-gradient map of ``conv2d`` with the same weight,
    so the spatial size is ``(H - 1) * stride - 2 * padding + k``.
    """
    x, w = as_tensor(x), as_tensor(weight)
    if x.ndim == 3:
        out = conv_transpose2d(reshape(x, (1,) + x.shape), w, bias, stride, padding)
        return reshape(out, out.shape[1:])
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv_transpose2d: expected 4-d input and weight, got {x.shape} and {w.shape}")
    stride = _tuple(stride, 2, "stride")
    padding = _tuple(padding, 2, "padding")
    if min(stride) < 1:
        raise ShapeError(f"conv_transpose2d: stride must be >= 1, got {stride}")
    n, cin, h, wd = x.shape
    wcin, cout, kh, kw = w.shape
    if wcin != cin:
        raise ShapeError(f"conv_transpose2d: channel axis mismatch, input has {cin}, weight expects {wcin}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv_transpose2d: bias shape {bias.shape} does not match {cout} output channels")
    full = ((h - 1) * stride[0] + kh, (wd - 1) * stride[1] + kw)
    oh, ow = full[0] - 2 * padding[0], full[1] - 2 * padding[1]
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv_transpose2d: padding {padding} leaves an empty output")

    cols = np.tensordot(x.data, w.data, axes=([1], [0]))  # (N, H, W, Cout, kh, kw)
    out_full = _scatter_windows(cols.transpose(0, 3, 4, 5, 1, 2), full, (kh, kw), stride)
    out = out_full[:, :, padding[0] : padding[0] + oh, padding[1] : padding[1] + ow]
    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1, 1)
    out = np.ascontiguousarray(out)

    def fn(g):
        gfull = _pad(g, padding)
        win = _windows(gfull, (kh, kw), stride)  # (N, Cout, H, W, kh, kw)
        gx = gw = gb = None
        if x.requires_grad:
            gx = np.moveaxis(np.tensordot(win, w.data, axes=([1, 4, 5], [1, 2, 3])), -1, 1)
        if w.requires_grad:
            gw = np.tensordot(x.data, win, axes=([0, 2, 3], [0, 2, 3]))
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    parents = (x, w) if bias is None else (x, w, bias)
    return _result(out, parents, fn, "conv_transpose2d")


# ---------------------------------------------------------------- warping


def bilinear_sample(image: Tensor, coords_x: Tensor, coords_y: Tensor) -> Tensor:
    """Sample a (C, H, W) image at real-valued pixel positions, clamping to the border.

    Differentiable with respect to the image and both coordinate maps.
    """
    image, coords_x, coords_y = as_tensor(image), as_tensor(coords_x), as_tensor(coords_y)
    if image.ndim != 3:
        raise ShapeError(f"bilinear_sample: image must be (C, H, W), got {image.shape}")
    if coords_x.shape != coords_y.shape or coords_x.ndim != 2:
        raise ShapeError(f"bilinear_sample: coordinate maps {coords_x.shape} / {coords_y.shape} must be equal 2-d")
    out = kernels.bilinear_forward(image.data, coords_x.data, coords_y.data)

    def fn(g):
        gi, gx, gy = kernels.bilinear_backward(image.data, coords_x.data, coords_y.data, np.ascontiguousarray(g))
        return gi, gx, gy

    return _result(out, (image, coords_x, coords_y), fn, "bilinear_sample")


# ---------------------------------------------------------------- optimizer


class AdamState:
    """First/second moments and step count for a list of parameters."""

    def __init__(self, params: Sequence[Tensor]):
        self.m = [np.zeros(p.shape) for p in params]
        self.v = [np.zeros(p.shape) for p in params]
        self.step = 0


def adam_step(params: Sequence[Tensor], state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, in place."""
    missing = [i for i, p in enumerate(params) if p.grad is None]
    if missing:
        raise ValueError(f"adam_step: parameter(s) {missing} have no gradient")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


# ---------------------------------------------------------------- verification hooks


def numerical_gradient(f: Callable[[], Tensor], t: Tensor, index, h: float = 1e-5) -> float:
    """Central difference of the scalar ``f()`` with respect to ``t.data[index]``."""
    orig = t.data[index]
    t.data[index] = orig + h
    fp = f().item()
    t.data[index] = orig - h
    fm = f().item()
    t.data[index] = orig
    return (fp - fm) / (2.0 * h)


def directional_derivative(f: Callable[[], Tensor], tensors: Iterable[Tensor],
                           directions: Sequence[np.ndarray], h: float = 1e-5) -> float:
    """Central difference of ``f`` along a joint direction over several tensors."""
    tensors = list(tensors)
    saved = [t.data.copy() for t in tensors]
    for t, d, s in zip(tensors, directions, saved):
        t.data[...] = s + h * d
    fp = f().item()
    for t, d, s in zip(tensors, directions, saved):
        t.data[...] = s - h * d
    fm = f().item()
    for t, s in zip(tensors, saved):
        t.data[...] = s
    return (fp - fm) / (2.0 * h)


def relative_error(analytic: float, numeric: float, floor: float = 1e-12) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def analytic_gradients(f: Callable[[], Tensor], tensors: Sequence[Tensor]) -> list[np.ndarray]:
    for t in tensors:
        t.zero_grad()
    f().backward()
    return [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in tensors]
