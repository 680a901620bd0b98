"""Hot-kernel dispatch.

The compiled ``_ckernels`` extension is used when it was built; otherwise the
numpy fallback in ``_pykernels`` is used. Setting ``EVFLOW_PURE_PYTHON=1``
forces the fallback. Both backends produce bit-identical results.
"""

import os

import numpy as np

from evflow import _pykernels

try:
    if os.environ.get("EVFLOW_PURE_PYTHON", "") not in ("", "0"):
        raise ImportError("compiled kernels disabled by EVFLOW_PURE_PYTHON")
    from evflow import _ckernels as _impl

    BACKEND = "cython"
except ImportError:
    _impl = _pykernels
    BACKEND = "numpy"


def _f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def _i64(a):
    return np.ascontiguousarray(a, dtype=np.int64)


def voxel_scatter(xs, ys, pidx, tnorm, depth: int, height: int, width: int, impl=None):
    impl = impl or _impl
    return impl.voxel_scatter(_f64(xs), _f64(ys), _i64(pidx), _f64(tnorm), int(depth), int(height), int(width))


def legacy_scatter(xs, ys, pidx, tnorm, height: int, width: int, impl=None):
    impl = impl or _impl
    return impl.legacy_scatter(_i64(xs), _i64(ys), _i64(pidx), _f64(tnorm), int(height), int(width))


def bilinear_forward(image, cx, cy, impl=None):
    impl = impl or _impl
    return impl.bilinear_forward(_f64(image), _f64(cx), _f64(cy))


def bilinear_backward(image, cx, cy, grad, impl=None):
    impl = impl or _impl
    return impl.bilinear_backward(_f64(image), _f64(cx), _f64(cy), _f64(grad))


def implementations():
    """Available backends by name, for benchmarks and cross-checks."""
    out = {"numpy": _pykernels}
    if _impl is not _pykernels:
        out["cython"] = _impl
    else:
        try:
            from evflow import _ckernels

            out["cython"] = _ckernels
        except ImportError:
            pass
    return out
