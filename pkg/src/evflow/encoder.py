"""Spatio-temporal voxel encoding of event windows.

Events are spread over ``D`` temporal bins with the triangular kernel
``k(a) = max(0, 1 - |a|)`` applied to normalized time (and to x, y, which
collapses to a unit weight for integer pixel coordinates), one plane per
polarity. The ``(2, D, H, W)`` grid is then split along time into a former
and a latter half and restacked as ``(4, D/2, H, W)`` with channel order
[former +, former -, latter +, latter -].

Normalized times are snapped to a ``2**-42`` lattice. All kernel weights are
then multiples of that quantum, so every per-cell accumulation of up to
2048 events is exact in float64: the result does not depend on summation
order and the total mass equals the event count exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np

from evflow import kernels
from evflow.events import EventWindow, Events
from evflow.tensor import Tensor

TIME_QUANTUM = 2.0**-42


@dataclass(frozen=True)
class VoxelGrid:
    data: Tensor
    D: int
    t_range: tuple[float, float]

    @property
    def array(self) -> np.ndarray:
        return self.data.data

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def total_mass(self) -> float:
        """Exactly rounded sum of all entries."""
        return math.fsum(self.array.ravel())


def _check_depth(D: int) -> int:
    D = int(D)
    if D < 2 or D % 2:
        raise ValueError(f"time depth D must be even and >= 2, got {D}")
    return D


def normalize_times(t, D: int) -> np.ndarray:
    """Map event timestamps linearly onto [0, D-1] (first event -> 0, last -> D-1)."""
    D = _check_depth(D)
    t = np.asarray(t, dtype=np.float64)
    if t.size == 0:
        raise ValueError("normalize_times needs at least one event")
    t_first, t_last = t.min(), t.max()
    span = t_last - t_first
    if span == 0:
        return np.zeros_like(t)
    tn = (t - t_first) / span * (D - 1)
    tn = np.rint(tn / TIME_QUANTUM) * TIME_QUANTUM
    return np.clip(tn, 0.0, D - 1.0)


def _events_of(window: Union[EventWindow, Events]) -> Events:
    return window.events if isinstance(window, EventWindow) else window


def encode_full(window: Union[EventWindow, Events], D: int, sensor_size: tuple[int, int]) -> np.ndarray:
    """The (2, D, H, W) accumulation before the former/latter split."""
    D = _check_depth(D)
    h, w = sensor_size
    ev = _events_of(window)
    if len(ev) == 0:
        return np.zeros((2, D, h, w))
    tn = normalize_times(ev.t, D)
    pidx = (ev.p < 0).astype(np.int64)
    return kernels.voxel_scatter(ev.x, ev.y, pidx, tn, D, h, w)


def split_former_latter(full: np.ndarray) -> np.ndarray:
    half = full.shape[1] // 2
    return np.ascontiguousarray(np.concatenate([full[:, :half], full[:, half:]], axis=0))


def encode(window: Union[EventWindow, Events], D: int = 8, sensor_size=None) -> VoxelGrid:
    """Encode an event window into a (4, D/2, H, W) VoxelGrid."""
    if sensor_size is None:
        if not isinstance(window, EventWindow):
            raise ValueError("sensor_size is required when encoding bare Events")
        sensor_size = window.sensor_size
    ev = _events_of(window)
    grid = split_former_latter(encode_full(window, D, sensor_size))
    t_range = (float(ev.t.min()), float(ev.t.max())) if len(ev) else (0.0, 0.0)
    return VoxelGrid(Tensor(grid), int(D), t_range)


def encode_legacy_counts(window: Union[EventWindow, Events], sensor_size=None) -> Tensor:
    """Count-and-latest-timestamp image, channels [pos count, neg count, pos latest, neg latest].

    Timestamps are normalized to [0, 1] over the window's first..last event;
    a window whose events share one timestamp maps them to 1.0.
    """
    if sensor_size is None:
        sensor_size = window.sensor_size
    h, w = sensor_size
    ev = _events_of(window)
    if len(ev) == 0:
        return Tensor(np.zeros((4, h, w)))
    span = ev.t.max() - ev.t.min()
    tn = (ev.t - ev.t.min()) / span if span > 0 else np.ones(len(ev))
    pidx = (ev.p < 0).astype(np.int64)
    counts, latest = kernels.legacy_scatter(ev.x, ev.y, pidx, tn, h, w)
    return Tensor(np.concatenate([counts, latest], axis=0))
