"""Self-supervised photometric + smoothness objective."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple, Sequence, Union

import numpy as np

from evflow import tensor as T
from evflow.events import GrayFrame
from evflow.tensor import Tensor

FrameLike = Union[GrayFrame, np.ndarray]


@dataclass(frozen=True)
class LossConfig:
    lam: float = 0.5
    rho_eps: float = 1e-3
    rho_q: float = 0.45
    scales: int = 4

    def validate(self) -> None:
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if not self.rho_eps > 0:
            raise ValueError(f"rho_eps must be > 0, got {self.rho_eps}")
        if not 0 < self.rho_q <= 1:
            raise ValueError(f"rho_q must lie in (0, 1], got {self.rho_q}")
        if not 1 <= self.scales <= 4:
            raise ValueError(f"scales must be 1..4, got {self.scales}")

    def to_dict(self) -> dict:
        return asdict(self)


class LossTerms(NamedTuple):
    total: Tensor
    photo: Tensor
    smooth: Tensor


def _pixels(frame: FrameLike) -> np.ndarray:
    return frame.pixels if isinstance(frame, GrayFrame) else np.asarray(frame, dtype=np.float64)


def _check_flow(flow: Tensor, name: str) -> None:
    if flow.ndim != 3 or flow.shape[0] != 2:
        raise T.ShapeError(f"{name}: flow must be (2, H, W), got {flow.shape}")


def warp(image: np.ndarray, flow: Tensor) -> Tensor:
    """Backward warp: out(x, y) = image(x + u(x, y), y + v(x, y))."""
    h, w = image.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    cx = T.add(Tensor(xs), flow[0])
    cy = T.add(Tensor(ys), flow[1])
    out = T.bilinear_sample(Tensor(image[None]), cx, cy)
    return T.reshape(out, (h, w))


def photometric_loss(flow: Tensor, frame_t: FrameLike, frame_next: FrameLike, cfg: LossConfig = LossConfig()) -> Tensor:
    """Sum over pixels of rho(I_t(x, y) - I_next(x + u, y + v)), rho = Charbonnier."""
    flow = T.as_tensor(flow)
    _check_flow(flow, "photometric_loss")
    a, b = _pixels(frame_t), _pixels(frame_next)
    if a.shape != flow.shape[1:] or b.shape != flow.shape[1:]:
        raise T.ShapeError(f"photometric_loss: frames {a.shape}/{b.shape} vs flow {flow.shape[1:]}")
    residual = T.sub(Tensor(a), warp(b, flow))
    return T.tsum(T.charbonnier(residual, cfg.rho_eps, cfg.rho_q))


def smoothness_loss(flow: Tensor) -> Tensor:
    """Sum of absolute forward differences of u and v along both image axes."""
    flow = T.as_tensor(flow)
    _check_flow(flow, "smoothness_loss")
    if flow.shape[1] < 2 or flow.shape[2] < 2:
        raise T.ShapeError(f"smoothness_loss: flow must be at least 2x2, got {flow.shape[1:]}")
    dy = T.sub(flow[:, :-1, :], flow[:, 1:, :])
    dx = T.sub(flow[:, :, :-1], flow[:, :, 1:])
    return T.add(T.tsum(T.tabs(dy)), T.tsum(T.tabs(dx)))


def downsample(frame: FrameLike, factor: int) -> np.ndarray:
    """Repeated 2x2 average pooling until the size shrinks by ``factor``."""
    px = _pixels(frame)
    while factor > 1:
        h, w = px.shape
        px = px.reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))
        factor //= 2
    return px


def loss_terms(flows: Sequence[Tensor], frame_t: FrameLike, frame_next: FrameLike,
               cfg: LossConfig = LossConfig()) -> LossTerms:
    """Per-scale photometric and smoothness sums over the finest ``cfg.scales`` levels.

    Flows are in full-resolution pixels; each level's flow is divided by its
    downsampling factor before warping the pooled frames.
    """
    cfg.validate()
    a, b = _pixels(frame_t), _pixels(frame_next)
    full_h = a.shape[0]
    photo = smooth = None
    for flow in list(flows)[-cfg.scales :]:
        flow = T.as_tensor(flow)
        _check_flow(flow, "total_loss")
        factor = full_h // flow.shape[1]
        if factor * flow.shape[1] != full_h or factor & (factor - 1):
            raise T.ShapeError(f"total_loss: flow size {flow.shape[1:]} is not a power-of-two fraction of {a.shape}")
        scaled = T.mul_scalar(flow, 1.0 / factor) if factor > 1 else flow
        ph = photometric_loss(scaled, downsample(a, factor), downsample(b, factor), cfg)
        sm = smoothness_loss(scaled)
        photo = ph if photo is None else T.add(photo, ph)
        smooth = sm if smooth is None else T.add(smooth, sm)
    total = T.add(photo, T.mul_scalar(smooth, cfg.lam))
    return LossTerms(total, photo, smooth)


def total_loss(pyramid, frame_t: FrameLike, frame_next: FrameLike, cfg: LossConfig = LossConfig()) -> Tensor:
    """photometric + lambda * smoothness, summed over pyramid levels."""
    flows = pyramid.flows if hasattr(pyramid, "flows") else pyramid
    return loss_terms(flows, frame_t, frame_next, cfg).total
