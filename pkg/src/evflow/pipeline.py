"""End-to-end runs: synthesize a dataset, encode it, train, evaluate.

A dataset directory holds ``dataset.json``, the EVB1 event file and one EVT1
ground-truth flow per window. Every command writes its fully resolved
``RunConfig`` as ``config.json`` next to its outputs.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from evflow import tensor as T
from evflow.encoder import encode, encode_legacy_counts
from evflow.evaluate import EvalReport, aee, endpoint_error, event_mask, flow_to_image, pooled, write_ppm
from evflow.events import (FrameSequence, SynthConfig, ValidationError, crop_center, generate_synthetic,
                           iter_windows, load_events, save_events)
from evflow.loss import LossConfig, loss_terms
from evflow.network import NetworkConfig, forward, init_params, load_checkpoint, save_checkpoint
from evflow.serialization import PathLike, load_tensor, save_tensor

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class RunConfig:
    D: int = 8
    crop: tuple[int, int] = (256, 256)
    lr: float = 1e-4
    epochs: int = 30
    batch: int = 16
    seed: int = 0
    base_channels: int = 32
    max_iters: Optional[int] = None
    loss: LossConfig = LossConfig()
    synth: SynthConfig = SynthConfig(sensor_size=(260, 346))

    def validate(self) -> None:
        if self.D < 2 or self.D % 2:
            raise ValidationError(f"D must be even and >= 2, got {self.D}")
        if min(self.crop) < 16 or self.crop[0] % 16 or self.crop[1] % 16:
            raise ValidationError(f"crop {self.crop} must be positive multiples of 16")
        if self.lr < 0 or self.epochs < 1 or self.batch < 1 or self.base_channels < 1:
            raise ValidationError("lr must be >= 0 and epochs, batch, base_channels positive")
        if self.max_iters is not None and self.max_iters < 1:
            raise ValidationError(f"max_iters must be positive, got {self.max_iters}")
        self.loss.validate()
        self.synth.validate()

    @property
    def network(self) -> NetworkConfig:
        return NetworkConfig(D=self.D, base_channels=self.base_channels)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def save(self, path: PathLike) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


PROFILES = {
    "paper": RunConfig(),
    # Small enough for a CPU: 32x32 crop of a 48x48 sensor, 4 base channels.
    "toy": RunConfig(crop=(32, 32), batch=2, base_channels=4, lr=1e-2,
                     synth=SynthConfig(sensor_size=(48, 48))),
}


def _tuplify(value):
    return tuple(value) if isinstance(value, list) else value


def merge_config(base: RunConfig, overrides: dict) -> RunConfig:
    """Apply a nested dict of overrides (e.g. from a JSON config file)."""
    unknown = set(overrides) - {f.name for f in dataclasses.fields(RunConfig)}
    if unknown:
        raise ValidationError(f"unknown config keys: {sorted(unknown)}")
    kwargs = {}
    for key, value in overrides.items():
        if key == "loss":
            value = dataclasses.replace(base.loss, **value)
        elif key == "synth":
            value = dataclasses.replace(base.synth, **{k: _tuplify(v) for k, v in value.items()})
        else:
            value = _tuplify(value)
        kwargs[key] = value
    try:
        return dataclasses.replace(base, **kwargs)
    except TypeError as exc:
        raise ValidationError(str(exc)) from None


def load_config_file(path: PathLike) -> dict:
    with open(path) as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: line {exc.lineno}: {exc.msg}") from None


# ---------------------------------------------------------------- dataset


@dataclass
class Dataset:
    sequence: FrameSequence
    flows: list[np.ndarray]
    meta: dict = field(default_factory=dict)


def cmd_synth(cfg: RunConfig, out_dir: PathLike) -> dict:
    """Generate a synthetic sequence and write it as a dataset directory."""
    cfg.validate()
    synth = dataclasses.replace(cfg.synth, seed=cfg.seed)
    result = generate_synthetic(synth)
    out_dir = os.fspath(out_dir)
    os.makedirs(os.path.join(out_dir, "flow_gt"), exist_ok=True)
    save_events(result.sequence, os.path.join(out_dir, "events.evb"), "binary")
    windows = []
    for i in range(result.sequence.num_windows):
        name = f"flow_gt/window_{i:04d}.evt"
        save_tensor(os.path.join(out_dir, name), result.gt_flow(i))
        w = result.sequence
        windows.append({"index": i, "t_start": w.frames[i].t, "t_end": w.frames[i + 1].t, "flow_gt": name})
    summary = {"events": "events.evb", "format": "binary", "sensor_size": list(result.sequence.sensor_size),
               "num_events": len(result.sequence.events), "num_frames": len(result.sequence.frames),
               "windows": windows, "synth": dataclasses.asdict(synth)}
    with open(os.path.join(out_dir, "dataset.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    dataclasses.replace(cfg, synth=synth).save(os.path.join(out_dir, "config.json"))
    return summary


def load_dataset(data_dir: PathLike) -> Dataset:
    data_dir = os.fspath(data_dir)
    with open(os.path.join(data_dir, "dataset.json")) as fh:
        meta = json.load(fh)
    seq = load_events(os.path.join(data_dir, meta["events"]), meta.get("format", "binary"))
    flows = [load_tensor(os.path.join(data_dir, w["flow_gt"])) for w in meta["windows"]]
    if len(flows) != seq.num_windows:
        raise ValidationError(f"{data_dir}: {len(flows)} flow files for {seq.num_windows} windows")
    return Dataset(seq, flows, meta)


def _crop_flow(flow: np.ndarray, size) -> np.ndarray:
    _, H, W = flow.shape
    top, left = (H - size[0]) // 2, (W - size[1]) // 2
    return flow[:, top : top + size[0], left : left + size[1]]


@dataclass
class Sample:
    index: int
    voxel: np.ndarray
    frame_t: np.ndarray
    frame_next: np.ndarray
    mask: np.ndarray
    flow: np.ndarray
    n_events: int


def prepare_samples(ds: Dataset, cfg: RunConfig) -> list[Sample]:
    """Crop and encode every window; empty windows are kept with n_events == 0."""
    seq = ds.sequence
    if seq.sensor_size != tuple(cfg.crop):
        seq = crop_center(seq, cfg.crop)
    samples = []
    for win in iter_windows(seq):
        samples.append(Sample(win.index, encode(win, cfg.D).array, win.frame_before.pixels,
                              win.frame_after.pixels, event_mask(win), _crop_flow(ds.flows[win.index], cfg.crop),
                              len(win)))
    return samples


def cmd_encode(cfg: RunConfig, data_dir: PathLike, out_dir: PathLike, legacy: bool = False) -> list[str]:
    """Write one EVT1 voxel grid (or legacy 4-channel image) per window."""
    cfg.validate()
    ds = load_dataset(data_dir)
    seq = ds.sequence if ds.sequence.sensor_size == tuple(cfg.crop) else crop_center(ds.sequence, cfg.crop)
    out_dir = os.fspath(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for win in iter_windows(seq):
        grid = encode_legacy_counts(win).data if legacy else encode(win, cfg.D).array
        path = os.path.join(out_dir, f"window_{win.index:04d}.evt")
        save_tensor(path, grid)
        written.append(path)
    cfg.save(os.path.join(out_dir, "config.json"))
    return written


# ---------------------------------------------------------------- training


@dataclass
class TrainResult:
    params: object
    log_rows: list[dict]

    @property
    def totals(self) -> list[float]:
        return [r["total"] for r in self.log_rows]


def batch_loss(params, samples: list[Sample], loss_cfg: LossConfig):
    """Mean over the batch of (total, photo, smooth) scalar tensors."""
    x = T.Tensor(np.stack([s.voxel for s in samples]))
    pyr = forward(params, x)
    totals, photos, smooths = [], [], []
    for i, s in enumerate(samples):
        terms = loss_terms([f[i] for f in pyr.flows], s.frame_t, s.frame_next, loss_cfg)
        totals.append(terms.total)
        photos.append(terms.photo)
        smooths.append(terms.smooth)
    scale = 1.0 / len(samples)

    def mean(ts):
        acc = ts[0]
        for t in ts[1:]:
            acc = T.add(acc, t)
        return T.mul_scalar(acc, scale)

    return mean(totals), mean(photos), mean(smooths)


LOG_FIELDS = ("iter", "photo", "smooth", "total", "photo_per_px")


def _write_log(path: str, rows: list[dict], append: bool) -> None:
    with open(path, "a" if append else "w") as fh:
        if not append:
            fh.write(",".join(LOG_FIELDS) + "\n")
        for r in rows:
            fh.write(",".join(str(r[k]) if k == "iter" else repr(float(r[k])) for k in LOG_FIELDS) + "\n")


def cmd_train(cfg: RunConfig, data_dir: PathLike, ckpt_out: PathLike, resume: Optional[PathLike] = None) -> TrainResult:
    """Minimize the self-supervised loss with Adam; checkpoint after every epoch."""
    cfg.validate()
    samples = [s for s in prepare_samples(load_dataset(data_dir), cfg) if s.n_events > 0]
    if not samples:
        raise ValidationError(f"{data_dir}: no non-empty event windows to train on")
    ckpt_out = os.fspath(ckpt_out)
    os.makedirs(ckpt_out, exist_ok=True)
    cfg.save(os.path.join(ckpt_out, "config.json"))
    log_path = os.path.join(ckpt_out, "train_log.csv")

    params = init_params(cfg.seed, cfg.network)
    state = T.AdamState(params.parameters())
    start_epoch, iteration = 0, 0
    if resume is not None:
        params, extra, aux = load_checkpoint(resume, expect=cfg.network)
        state = T.AdamState(params.parameters())
        state.step = int(extra.get("adam_step", 0))
        for k, name in enumerate(params.names()):
            state.m[k][...] = aux[f"adam_m.{name}"]
            state.v[k][...] = aux[f"adam_v.{name}"]
        start_epoch, iteration = int(extra["epoch"]), int(extra["iteration"])
    if resume is None or not os.path.exists(log_path):
        _write_log(log_path, [], append=False)

    rows: list[dict] = []
    n_px = cfg.crop[0] * cfg.crop[1]
    done = False
    for epoch in range(start_epoch, cfg.epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(samples))
        epoch_rows = []
        for b0 in range(0, len(order), cfg.batch):
            if cfg.max_iters is not None and iteration >= cfg.max_iters:
                done = True
                break
            batch = [samples[i] for i in order[b0 : b0 + cfg.batch]]
            total, photo, smooth = batch_loss(params, batch, cfg.loss)
            if not math.isfinite(total.item()):
                raise TrainingError(f"non-finite loss {total.item()} at iteration {iteration}")
            params.zero_grad()
            total.backward()
            T.adam_step(params.parameters(), state, cfg.lr)
            row = {"iter": iteration, "photo": photo.item(), "smooth": smooth.item(), "total": total.item(),
                   "photo_per_px": photo.item() / n_px}
            epoch_rows.append(row)
            log.debug("epoch %d iter %d total %.6g", epoch, iteration, row["total"])
            iteration += 1
        rows.extend(epoch_rows)
        _write_log(log_path, epoch_rows, append=True)
        aux = {}
        for k, name in enumerate(params.names()):
            aux[f"adam_m.{name}"] = state.m[k]
            aux[f"adam_v.{name}"] = state.v[k]
        save_checkpoint(ckpt_out, params, {"epoch": epoch + 1, "iteration": iteration, "adam_step": state.step},
                        aux)
        if done:
            break
    return TrainResult(params, rows)


# ---------------------------------------------------------------- evaluation


def cmd_eval(cfg: RunConfig, data_dir: PathLike, ckpt: Optional[PathLike], out_dir: Optional[PathLike] = None,
             oracle: bool = False) -> EvalReport:
    """Masked AEE of the final flow against ground truth on every non-empty window.

    Without ``ckpt`` the seed-initialized network is evaluated; ``oracle``
    scores the ground truth against itself.
    """
    cfg.validate()
    samples = prepare_samples(load_dataset(data_dir), cfg)
    if ckpt is not None:
        params, _, _ = load_checkpoint(ckpt, expect=cfg.network)
    else:
        params = init_params(cfg.seed, cfg.network)
    if out_dir is not None:
        out_dir = os.fspath(out_dir)
        os.makedirs(out_dir, exist_ok=True)
    per_window, errors, skipped = [], [], 0
    for s in samples:
        if s.n_events == 0:
            skipped += 1
            continue
        pred = s.flow if oracle else forward(params, s.voxel).final.data
        res = aee(pred, s.flow, s.mask)
        per_window.append({"window": s.index, "aee": res.aee, "outlier_pct": res.outlier_pct,
                           "n_active": res.n_active})
        errors.append(endpoint_error(pred, s.flow)[s.mask])
        if out_dir is not None:
            vmax = float(max(np.hypot(*pred).max(), np.hypot(*s.flow).max()))
            side = np.concatenate([flow_to_image(pred, s.mask, vmax), flow_to_image(s.flow, s.mask, vmax)], axis=1)
            write_ppm(os.path.join(out_dir, f"flow_{s.index:04d}.ppm"), side)
    if skipped:
        log.warning("%d empty window(s) excluded from the aggregate", skipped)
    agg = pooled(errors)
    report = EvalReport(agg.aee, agg.outlier_pct, agg.n_active, per_window, skipped)
    if out_dir is not None:
        report.save(os.path.join(out_dir, "report.json"))
        cfg.save(os.path.join(out_dir, "config.json"))
    return report
