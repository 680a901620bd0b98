"""Masked end-point-error metrics and flow visualization."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from evflow.events import EventWindow, Events
from evflow.serialization import PathLike

OUTLIER_PX = 3.0


class AEEResult(NamedTuple):
    aee: float
    outlier_pct: float
    n_active: int
    defined: bool = True


@dataclass
class EvalReport:
    aee: float
    outlier_pct: float
    n_active: int
    per_window: list = field(default_factory=list)
    skipped_empty: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def save(self, path: PathLike) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json() + "\n")


def event_mask(window, size=None) -> np.ndarray:
    """True at pixels that received at least one event."""
    if size is None:
        size = window.sensor_size
    ev = window.events if isinstance(window, EventWindow) else window
    mask = np.zeros(size, dtype=bool)
    mask[ev.y, ev.x] = True
    return mask


def _summarize(e: np.ndarray) -> AEEResult:
    # exactly rounded sum: the mean does not depend on pixel order
    if e.size == 0:
        return AEEResult(0.0, 0.0, 0, defined=False)
    return AEEResult(math.fsum(e) / e.size, 100.0 * float(np.count_nonzero(e > OUTLIER_PX)) / e.size, int(e.size))


def endpoint_error(pred, gt) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 3 or pred.shape[0] != 2:
        raise ValueError(f"flow shapes must agree as (2, H, W): {pred.shape} vs {gt.shape}")
    return np.hypot(pred[0] - gt[0], pred[1] - gt[1])


def aee(pred, gt, mask: Optional[np.ndarray] = None) -> AEEResult:
    """Mean Euclidean end-point error over masked pixels and % of errors above 3 px."""
    err = endpoint_error(pred, gt)
    if mask is None:
        mask = np.ones(err.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != err.shape:
        raise ValueError(f"mask shape {mask.shape} does not match flow {err.shape}")
    return _summarize(err[mask])


def pooled(errors: list[np.ndarray]) -> AEEResult:
    """Aggregate over concatenated per-window masked errors."""
    return _summarize(np.concatenate(errors) if errors else np.zeros(0))


def _hsv_to_rgb(h, s, v):
    i = np.floor(h * 6.0).astype(np.int64) % 6
    f = h * 6.0 - np.floor(h * 6.0)
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    table = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)]
    rgb = np.zeros(h.shape + (3,))
    for k, (r, g, b) in enumerate(table):
        sel = i == k
        rgb[sel] = np.stack([r[sel], g[sel], b[sel]], axis=-1)
    return rgb


def flow_to_image(flow, mask: Optional[np.ndarray] = None, max_magnitude: Optional[float] = None) -> np.ndarray:
    """HSV coloring: hue = direction, saturation = magnitude / max; masked-out pixels black."""
    flow = np.asarray(flow, dtype=np.float64)
    u, v = flow[0], flow[1]
    mag = np.hypot(u, v)
    if mask is None:
        mask = np.ones(mag.shape, dtype=bool)
    if max_magnitude is None:
        max_magnitude = float(mag[mask].max()) if mask.any() else 0.0
    hue = (np.arctan2(v, u) / (2.0 * np.pi)) % 1.0
    sat = np.clip(mag / max_magnitude, 0.0, 1.0) if max_magnitude > 0 else np.zeros_like(mag)
    rgb = _hsv_to_rgb(hue, sat, np.ones_like(mag))
    img = np.round(rgb * 255.0).astype(np.uint8)
    img[~mask] = 0
    return img


def write_ppm(path: PathLike, image: np.ndarray) -> None:
    image = np.asarray(image, dtype=np.uint8)
    h, w, _ = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(image.tobytes())


def read_ppm(path: PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    fields, pos = [], 0
    while len(fields) < 4:
        while blob[pos : pos + 1].isspace():
            pos += 1
        end = pos
        while not blob[end : end + 1].isspace():
            end += 1
        fields.append(blob[pos:end])
        pos = end
    if fields[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h = int(fields[1]), int(fields[2])
    return np.frombuffer(blob, dtype=np.uint8, count=w * h * 3, offset=pos + 1).reshape(h, w, 3)
