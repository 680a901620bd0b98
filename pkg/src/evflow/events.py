"""Event streams, grayscale frames, file formats and a synthetic event camera.

Events are stored column-wise (``Events``) because every consumer works on
whole arrays; single records are exposed as ``Event`` on indexing.
"""

from __future__ import annotations

import csv
import json
import math
import os
import struct
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence, Union

import numpy as np

from evflow.serialization import FormatError, PathLike, load_tensor, save_tensor

EVB_MAGIC = b"EVB1\0\0\0\0"
EVB_RECORD = np.dtype([("x", "<u2"), ("y", "<u2"), ("t", "<f8"), ("p", "i1"), ("pad", "V3")])
assert EVB_RECORD.itemsize == 16


class ValidationError(ValueError):
    """Data violates a structural invariant (coordinates, ordering, polarity)."""


@dataclass(frozen=True)
class Event:
    x: int
    y: int
    t: float
    p: int


class Events:
    """Column-oriented, immutable event list."""

    __slots__ = ("x", "y", "t", "p")

    def __init__(self, x=(), y=(), t=(), p=()):
        x = np.asarray(x, dtype=np.int64).reshape(-1)
        y = np.asarray(y, dtype=np.int64).reshape(-1)
        t = np.asarray(t, dtype=np.float64).reshape(-1)
        p = np.asarray(p, dtype=np.int8).reshape(-1)
        if not (len(x) == len(y) == len(t) == len(p)):
            raise ValidationError(f"event columns differ in length: {len(x)}, {len(y)}, {len(t)}, {len(p)}")
        for arr in (x, y, t, p):
            arr.flags.writeable = False
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "p", p)

    def __setattr__(self, name, value):
        raise AttributeError("Events is immutable")

    @classmethod
    def from_list(cls, events: Sequence[Event]) -> "Events":
        if not events:
            return cls()
        return cls([e.x for e in events], [e.y for e in events], [e.t for e in events], [e.p for e in events])

    def to_list(self) -> list[Event]:
        return [Event(int(a), int(b), float(c), int(d)) for a, b, c, d in zip(self.x, self.y, self.t, self.p)]

    def __len__(self) -> int:
        return len(self.t)

    def __iter__(self) -> Iterator[Event]:
        return iter(self.to_list())

    def __getitem__(self, index):
        if isinstance(index, (int, np.integer)):
            return Event(int(self.x[index]), int(self.y[index]), float(self.t[index]), int(self.p[index]))
        return Events(self.x[index], self.y[index], self.t[index], self.p[index])

    def __eq__(self, other) -> bool:
        if not isinstance(other, Events):
            return NotImplemented
        return (np.array_equal(self.x, other.x) and np.array_equal(self.y, other.y)
                and np.array_equal(self.t.view(np.int64), other.t.view(np.int64))
                and np.array_equal(self.p, other.p))

    def __repr__(self) -> str:
        return f"Events(n={len(self)})"

    @staticmethod
    def concat(parts: Sequence["Events"]) -> "Events":
        parts = list(parts)
        if not parts:
            return Events()
        return Events(*(np.concatenate([getattr(e, c) for e in parts]) for c in ("x", "y", "t", "p")))

    def validate(self, sensor_size: tuple[int, int]) -> None:
        """Raise ``ValidationError`` naming the first offending record."""
        h, w = sensor_size
        bad = (self.x < 0) | (self.x >= w) | (self.y < 0) | (self.y >= h)
        bad |= (self.p != 1) & (self.p != -1)
        bad |= ~np.isfinite(self.t)
        if len(self) > 1:
            bad[1:] |= np.diff(self.t) < 0
        if bad.any():
            i = int(np.argmax(bad))
            raise ValidationError(f"event record {i} invalid for sensor {h}x{w}: {self[i]}")


@dataclass(frozen=True)
class GrayFrame:
    t: float
    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 2:
            raise ValidationError(f"frame at t={self.t} must be 2-d, got shape {px.shape}")
        if not np.all(np.isfinite(px)) or px.min(initial=0.0) < 0.0 or px.max(initial=0.0) > 1.0:
            raise ValidationError(f"frame at t={self.t} has pixels outside [0, 1]")
        object.__setattr__(self, "pixels", px)

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape


@dataclass(frozen=True)
class FrameSequence:
    frames: list[GrayFrame]
    events: Events
    sensor_size: tuple[int, int]

    def __post_init__(self):
        object.__setattr__(self, "sensor_size", (int(self.sensor_size[0]), int(self.sensor_size[1])))
        self.validate()

    def validate(self) -> None:
        for f in self.frames:
            if f.shape != self.sensor_size:
                raise ValidationError(f"frame at t={f.t} has shape {f.shape}, sensor is {self.sensor_size}")
        ts = [f.t for f in self.frames]
        for k in range(1, len(ts)):
            if not ts[k] > ts[k - 1]:
                raise ValidationError(f"frame {k} timestamp {ts[k]} is not after frame {k - 1} ({ts[k - 1]})")
        self.events.validate(self.sensor_size)
        if len(self.events) and ts:
            outside = (self.events.t < ts[0]) | (self.events.t > ts[-1])
            if outside.any():
                i = int(np.argmax(outside))
                raise ValidationError(f"event record {i} at t={self.events.t[i]} lies outside the frame span")

    @property
    def num_windows(self) -> int:
        return max(len(self.frames) - 1, 0)


@dataclass(frozen=True)
class EventWindow:
    events: Events
    t_start: float
    t_end: float
    frame_before: GrayFrame
    frame_after: GrayFrame
    index: int = 0

    @property
    def sensor_size(self) -> tuple[int, int]:
        return self.frame_before.shape

    def __len__(self) -> int:
        return len(self.events)


def window_between_frames(seq: FrameSequence, i: int) -> EventWindow:
    """Events with frame_i.t <= t < frame_{i+1}.t."""
    if not 0 <= i < len(seq.frames) - 1:
        raise IndexError(f"window index {i} out of range for {len(seq.frames)} frames")
    t0, t1 = seq.frames[i].t, seq.frames[i + 1].t
    lo = int(np.searchsorted(seq.events.t, t0, side="left"))
    hi = int(np.searchsorted(seq.events.t, t1, side="left"))
    return EventWindow(seq.events[lo:hi], t0, t1, seq.frames[i], seq.frames[i + 1], i)


def iter_windows(seq: FrameSequence) -> Iterator[EventWindow]:
    for i in range(seq.num_windows):
        yield window_between_frames(seq, i)


# ---------------------------------------------------------------- cropping


def _crop_offsets(sensor_size, size) -> tuple[int, int]:
    (H, W), (h, w) = sensor_size, size
    if h > H or w > W or h < 1 or w < 1:
        raise ValidationError(f"crop {h}x{w} does not fit sensor {H}x{W}")
    return (H - h) // 2, (W - w) // 2


def _crop_events(ev: Events, top: int, left: int, size) -> Events:
    h, w = size
    keep = (ev.y >= top) & (ev.y < top + h) & (ev.x >= left) & (ev.x < left + w)
    return Events(ev.x[keep] - left, ev.y[keep] - top, ev.t[keep], ev.p[keep])


def crop_center(obj, size):
    """Central crop of a GrayFrame, EventWindow or FrameSequence."""
    size = (int(size[0]), int(size[1]))
    if isinstance(obj, GrayFrame):
        top, left = _crop_offsets(obj.shape, size)
        return GrayFrame(obj.t, obj.pixels[top : top + size[0], left : left + size[1]].copy())
    if isinstance(obj, EventWindow):
        top, left = _crop_offsets(obj.sensor_size, size)
        return EventWindow(_crop_events(obj.events, top, left, size), obj.t_start, obj.t_end,
                           crop_center(obj.frame_before, size), crop_center(obj.frame_after, size), obj.index)
    if isinstance(obj, FrameSequence):
        top, left = _crop_offsets(obj.sensor_size, size)
        return FrameSequence([crop_center(f, size) for f in obj.frames],
                             _crop_events(obj.events, top, left, size), size)
    raise TypeError(f"crop_center does not handle {type(obj).__name__}")


# ---------------------------------------------------------------- file formats


def save_events(seq: FrameSequence, path: PathLike, format: str = "binary") -> None:
    if format == "binary":
        _save_evb(seq, path)
    elif format == "csv":
        _save_csv(seq, path)
    else:
        raise ValueError(f"unknown event format {format!r}")


def load_events(path: PathLike, format: Optional[str] = None) -> FrameSequence:
    """Load an EVB1 file (``binary``) or a CSV manifest JSON (``csv``).

    With ``format=None`` the suffix decides: ``.json`` means csv.
    """
    if format is None:
        format = "csv" if str(path).endswith(".json") else "binary"
    if format == "binary":
        return _load_evb(path)
    if format == "csv":
        return _load_csv(path)
    raise ValueError(f"unknown event format {format!r}")


def _save_evb(seq: FrameSequence, path: PathLike) -> None:
    h, w = seq.sensor_size
    ev = seq.events
    rec = np.zeros(len(ev), dtype=EVB_RECORD)
    rec["x"], rec["y"], rec["t"], rec["p"] = ev.x, ev.y, ev.t, ev.p
    with open(path, "wb") as fh:
        fh.write(EVB_MAGIC)
        fh.write(struct.pack("<4I", w, h, len(seq.frames), len(ev)))
        for f in seq.frames:
            fh.write(struct.pack("<d", f.t))
            fh.write(f.pixels.astype("<f8").tobytes())
        fh.write(rec.tobytes())


def _load_evb(path: PathLike) -> FrameSequence:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != EVB_MAGIC:
        raise FormatError(f"{path}: bad EVB1 magic at byte 0")
    if len(blob) < 24:
        raise FormatError(f"{path}: truncated header, file has {len(blob)} bytes, need 24")
    w, h, nf, ne = struct.unpack_from("<4I", blob, 8)
    off = 24
    frame_bytes = 8 + 8 * h * w
    frames = []
    for k in range(nf):
        if off + frame_bytes > len(blob):
            raise FormatError(f"{path}: frame {k} truncated at byte {off}")
        (t,) = struct.unpack_from("<d", blob, off)
        px = np.frombuffer(blob, dtype="<f8", count=h * w, offset=off + 8).reshape(h, w).astype(np.float64)
        try:
            frames.append(GrayFrame(t, px))
        except ValidationError as exc:
            raise ValidationError(f"{path}: frame {k} (byte {off}): {exc}") from None
        off += frame_bytes
    need = off + ne * EVB_RECORD.itemsize
    if len(blob) != need:
        raise FormatError(f"{path}: event section at byte {off} expects {ne} records "
                          f"({need} bytes total), file has {len(blob)} bytes")
    rec = np.frombuffer(blob, dtype=EVB_RECORD, count=ne, offset=off)
    events = Events(rec["x"], rec["y"], rec["t"], rec["p"])
    try:
        return FrameSequence(frames, events, (h, w))
    except ValidationError as exc:
        raise ValidationError(f"{path}: {exc}") from None


def _save_csv(seq: FrameSequence, manifest_path: PathLike) -> None:
    manifest_path = os.fspath(manifest_path)
    root = os.path.dirname(manifest_path) or "."
    stem = os.path.splitext(os.path.basename(manifest_path))[0]
    events_name = f"{stem}_events.csv"
    frames = []
    for k, f in enumerate(seq.frames):
        name = f"{stem}_frame_{k:05d}.evt"
        save_tensor(os.path.join(root, name), f.pixels)
        frames.append({"t": f.t, "path": name})
    with open(os.path.join(root, events_name), "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["x", "y", "t", "p"])
        for x, y, t, p in zip(seq.events.x, seq.events.y, seq.events.t, seq.events.p):
            writer.writerow([int(x), int(y), repr(float(t)), int(p)])
    manifest = {"frames": frames, "events": events_name, "sensor_size": list(seq.sensor_size)}
    with open(manifest_path, "w") as fh:
        json.dump(manifest, fh, indent=2)


def _load_csv(manifest_path: PathLike) -> FrameSequence:
    manifest_path = os.fspath(manifest_path)
    root = os.path.dirname(manifest_path) or "."
    with open(manifest_path) as fh:
        try:
            manifest = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{manifest_path}: line {exc.lineno}: {exc.msg}") from None
    frames = [GrayFrame(float(f["t"]), load_tensor(os.path.join(root, f["path"]))) for f in manifest["frames"]]
    if "sensor_size" in manifest:
        sensor = tuple(manifest["sensor_size"])
    elif frames:
        sensor = frames[0].shape
    else:
        raise FormatError(f"{manifest_path}: no frames and no sensor_size")
    cols: dict[str, list] = {"x": [], "y": [], "t": [], "p": []}
    events_path = os.path.join(root, manifest["events"])
    with open(events_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["x", "y", "t", "p"]:
            raise FormatError(f"{events_path}: line 1: expected header x,y,t,p, got {header}")
        for lineno, row in enumerate(reader, start=2):
            try:
                x, y, t, p = row
                cols["x"].append(int(x))
                cols["y"].append(int(y))
                cols["t"].append(float(t))
                cols["p"].append(int(p))
            except ValueError:
                raise FormatError(f"{events_path}: line {lineno}: cannot parse {row!r}") from None
    events = Events(cols["x"], cols["y"], cols["t"], cols["p"])
    return FrameSequence(frames, events, sensor)


# ---------------------------------------------------------------- synthetic camera

PATTERNS = ("translating-checker", "translating-gradient")


@dataclass(frozen=True)
class SynthConfig:
    threshold: float = 0.15
    pattern: str = "translating-checker"
    velocity: tuple[float, float] = (40.0, 20.0)
    duration: float = 1.0
    frame_rate: float = 20.0
    sensor_size: tuple[int, int] = (48, 48)
    seed: int = 0
    period: float = 12.0
    substeps: int = 32

    def validate(self) -> None:
        if not self.threshold > 0:
            raise ValidationError(f"threshold must be > 0, got {self.threshold}")
        if not self.frame_rate > 0:
            raise ValidationError(f"frame_rate must be > 0, got {self.frame_rate}")
        if not self.duration > 0:
            raise ValidationError(f"duration must be > 0, got {self.duration}")
        if self.pattern not in PATTERNS:
            raise ValidationError(f"pattern must be one of {PATTERNS}, got {self.pattern!r}")
        if self.substeps < 1 or min(self.sensor_size) < 1:
            raise ValidationError("substeps and sensor extents must be positive")


@dataclass(frozen=True)
class SynthResult:
    sequence: FrameSequence
    config: SynthConfig
    flow_per_window: list[tuple[float, float]] = field(default_factory=list)

    def gt_flow(self, i: int) -> np.ndarray:
        """Exact (2, H, W) flow mapping frame i pixels onto frame i+1."""
        u, v = self.flow_per_window[i]
        h, w = self.sequence.sensor_size
        return np.stack([np.full((h, w), u), np.full((h, w), v)])


def frame_times(cfg: SynthConfig) -> np.ndarray:
    n = int(round(cfg.duration * cfg.frame_rate)) + 1
    return np.arange(n) / cfg.frame_rate


class _Scene:
    def __init__(self, cfg: SynthConfig):
        self.cfg = cfg
        h, w = cfg.sensor_size
        self.ys, self.xs = np.mgrid[0:h, 0:w].astype(np.float64)
        rng = np.random.default_rng(cfg.seed)
        self.phase = rng.uniform(0.0, cfg.period, size=2)
        if cfg.pattern == "translating-gradient":
            vx, vy = cfg.velocity
            corners = [(x - vx * t) + 0.5 * (y - vy * t)
                       for x in (0.0, w - 1.0) for y in (0.0, h - 1.0) for t in (0.0, cfg.duration)]
            self.s_lo, self.s_hi = min(corners), max(corners)
            if self.s_hi == self.s_lo:
                self.s_hi = self.s_lo + 1.0

    def intensity(self, t: float) -> np.ndarray:
        cfg = self.cfg
        X = self.xs - cfg.velocity[0] * t
        Y = self.ys - cfg.velocity[1] * t
        if cfg.pattern == "translating-checker":
            k = 2.0 * math.pi / cfg.period
            s = np.sin(k * (X + self.phase[0])) * np.sin(k * (Y + self.phase[1]))
            return 0.5 + 0.35 * np.tanh(2.5 * s)
        s = X + 0.5 * Y
        return 0.15 + 0.7 * (s - self.s_lo) / (self.s_hi - self.s_lo)


def generate_synthetic(cfg: SynthConfig) -> SynthResult:
    """Render a translating pattern and emit events by log-intensity threshold crossing.

    Each pixel keeps a reference log intensity; whenever the current log
    intensity moves ``threshold`` above or below it an event is emitted and the
    reference steps by one threshold. Crossing times are linearly
    interpolated inside each simulation sub-step.
    """
    cfg.validate()
    scene = _Scene(cfg)
    times = frame_times(cfg)
    theta = cfg.threshold
    frames = [GrayFrame(float(t), scene.intensity(float(t))) for t in times]

    ref = np.log(frames[0].pixels)
    chunks: list[tuple[np.ndarray, ...]] = []
    for k in range(len(times) - 1):
        sub = times[k] + (times[k + 1] - times[k]) * np.arange(cfg.substeps + 1) / cfg.substeps
        sub[-1] = times[k + 1]
        La = np.log(frames[k].pixels)
        for j in range(cfg.substeps):
            ta, tb = float(sub[j]), float(sub[j + 1])
            Lb = np.log(frames[k + 1].pixels) if j == cfg.substeps - 1 else np.log(scene.intensity(tb))
            while True:
                up = Lb - ref >= theta
                down = ref - Lb >= theta
                if not (up.any() or down.any()):
                    break
                for mask, sign in ((up, 1), (down, -1)):
                    if not mask.any():
                        continue
                    iy, ix = np.nonzero(mask)
                    level = ref[mask] + sign * theta
                    frac = (level - La[mask]) / (Lb[mask] - La[mask])
                    ts = np.clip(ta + frac * (tb - ta), ta, tb)
                    chunks.append((ix, iy, ts, np.full(len(ix), sign, dtype=np.int8)))
                    ref[mask] = level
            La = Lb

    if chunks:
        x, y, t, p = (np.concatenate(c) for c in zip(*chunks))
        order = np.argsort(t, kind="stable")
        events = Events(x[order], y[order], t[order], p[order])
    else:
        events = Events()
    seq = FrameSequence(frames, events, cfg.sensor_size)
    flows = [(cfg.velocity[0] * float(times[k + 1] - times[k]), cfg.velocity[1] * float(times[k + 1] - times[k]))
             for k in range(len(times) - 1)]
    return SynthResult(seq, cfg, flows)
