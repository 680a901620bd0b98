import dataclasses
import struct

import numpy as np
import pytest

from evflow.events import (EVB_MAGIC, Event, EventWindow, Events, FrameSequence, GrayFrame, SynthConfig,
                           ValidationError, crop_center, generate_synthetic, iter_windows, load_events,
                           save_events, window_between_frames)
from evflow.serialization import FormatError

import oracles


def _frames(times, shape=(4, 5), value=0.5):
    return [GrayFrame(t, np.full(shape, value)) for t in times]


def _seq(ev, times=(0.0, 1.0, 2.0), shape=(4, 5)):
    return FrameSequence(_frames(times, shape), ev, shape)


@pytest.fixture(scope="module")
def synth_small():
    return generate_synthetic(SynthConfig(sensor_size=(24, 24), duration=0.25, frame_rate=20))


# ---------------------------------------------------------------- types and validation


def test_events_are_immutable():
    ev = Events([0], [0], [0.0], [1])
    with pytest.raises(AttributeError):
        ev.x = np.array([1])
    with pytest.raises(ValueError):
        ev.x[0] = 3


def test_list_round_trip():
    items = [Event(1, 2, 0.25, 1), Event(0, 0, 0.5, -1)]
    assert Events.from_list(items).to_list() == items


def test_frame_pixels_outside_unit_interval_rejected():
    with pytest.raises(ValidationError):
        GrayFrame(0.0, np.full((2, 2), 1.5))


def test_frames_must_strictly_increase():
    with pytest.raises(ValidationError, match="frame 1"):
        FrameSequence(_frames([0.0, 0.0]), Events(), (4, 5))


def test_validate_names_first_bad_record():
    ev = Events([0, 9, 1], [0, 0, 0], [0.0, 0.1, 0.2], [1, 1, 1])
    with pytest.raises(ValidationError, match="record 1"):
        ev.validate((4, 5))
    with pytest.raises(ValidationError, match="record 2"):
        Events([0, 1, 1], [0, 0, 0], [0.0, 0.1, 0.2], [1, -1, 0]).validate((4, 5))


def test_event_outside_frame_span_rejected():
    with pytest.raises(ValidationError, match="outside the frame span"):
        _seq(Events([0], [0], [3.0], [1]))


# ---------------------------------------------------------------- file formats


def test_binary_empty_events_round_trip(tmp_path):
    seq = _seq(Events(), times=(0.0, 1.0))
    save_events(seq, tmp_path / "e.evb")
    back = load_events(tmp_path / "e.evb")
    assert len(back.events) == 0 and len(back.frames) == 2


def test_binary_layout(tmp_path):
    seq = _seq(Events([1, 2], [3, 0], [0.5, 1.25], [1, -1]))
    save_events(seq, tmp_path / "e.evb")
    blob = (tmp_path / "e.evb").read_bytes()
    assert blob[:8] == EVB_MAGIC
    assert struct.unpack_from("<4I", blob, 8) == (5, 4, 3, 2)
    assert len(blob) == 24 + 3 * (8 + 8 * 20) + 2 * 16
    x, y, t, p = struct.unpack_from("<HHdb", blob, len(blob) - 16)
    assert (x, y, t, p) == (2, 0, 1.25, -1)


@pytest.mark.parametrize("fmt,name", [("binary", "e.evb"), ("csv", "m.json")])
def test_round_trip_bit_exact(tmp_path, fmt, name, rng):
    t = rng.random(3) * 2.0
    t[1] = 0.1 + 2.0**-40  # not representable with few decimal digits
    t = np.sort(t)
    ev = Events([0, 4, 2], [3, 1, 0], t, [1, -1, 1])
    seq = _seq(ev)
    save_events(seq, tmp_path / name, fmt)
    back = load_events(tmp_path / name)
    assert back.events == ev
    for a, b in zip(back.frames, seq.frames):
        assert a.t == b.t and a.pixels.tobytes() == b.pixels.tobytes()


def test_binary_x_out_of_range_names_record(tmp_path):
    seq = _seq(Events([0, 1], [0, 0], [0.0, 0.5], [1, 1]))
    save_events(seq, tmp_path / "e.evb")
    blob = bytearray((tmp_path / "e.evb").read_bytes())
    struct.pack_into("<H", blob, len(blob) - 16, 5)  # x == W on record 1
    (tmp_path / "e.evb").write_bytes(bytes(blob))
    with pytest.raises(ValidationError, match="record 1"):
        load_events(tmp_path / "e.evb")


def test_binary_truncated_reports_offset(tmp_path):
    seq = _seq(Events([0], [0], [0.0], [1]))
    save_events(seq, tmp_path / "e.evb")
    blob = (tmp_path / "e.evb").read_bytes()
    (tmp_path / "e.evb").write_bytes(blob[:-3])
    with pytest.raises(FormatError, match="byte"):
        load_events(tmp_path / "e.evb")
    (tmp_path / "bad.evb").write_bytes(b"NOPE" + blob[4:])
    with pytest.raises(FormatError, match="magic"):
        load_events(tmp_path / "bad.evb")


def test_csv_parse_error_reports_line(tmp_path):
    save_events(_seq(Events([0, 1], [0, 0], [0.0, 0.5], [1, 1])), tmp_path / "m.json", "csv")
    path = tmp_path / "m_events.csv"
    lines = path.read_text().splitlines()
    lines[2] = "1,0,abc,1"
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(FormatError, match="line 3"):
        load_events(tmp_path / "m.json")


# ---------------------------------------------------------------- windows


def test_half_open_window_boundary():
    seq = _seq(Events([0, 1], [0, 0], [0.5, 1.0], [1, 1]))
    w0, w1 = window_between_frames(seq, 0), window_between_frames(seq, 1)
    assert list(w0.events.t) == [0.5]
    assert list(w1.events.t) == [1.0]
    assert w0.frame_before is seq.frames[0] and w0.frame_after is seq.frames[1]


def test_empty_window_valid():
    w = window_between_frames(_seq(Events([0], [0], [1.5], [1])), 0)
    assert len(w) == 0


def test_window_index_out_of_range():
    with pytest.raises(IndexError):
        window_between_frames(_seq(Events()), 2)


def test_windows_match_scan_and_partition(synth_small):
    seq = synth_small.sequence
    ts = list(seq.events.t)
    parts = []
    for w in iter_windows(seq):
        idx = oracles.window_scan(ts, w.t_start, w.t_end)
        assert len(w) == len(idx)
        assert w.events == seq.events[idx[0] : idx[-1] + 1] if idx else len(w) == 0
        parts.append(w.events)
    in_range = seq.events.t < seq.frames[-1].t
    assert Events.concat(parts) == seq.events[np.flatnonzero(in_range)]


# ---------------------------------------------------------------- cropping


def test_crop_identity(synth_small):
    seq = synth_small.sequence
    w = window_between_frames(seq, 1)
    c = crop_center(w, seq.sensor_size)
    assert c.events == w.events
    assert c.frame_before.pixels.tobytes() == w.frame_before.pixels.tobytes()


def test_crop_center_maps_center_pixel():
    seq = FrameSequence(_frames([0.0, 1.0], (10, 12)), Events([6], [5], [0.5], [1]), (10, 12))
    c = crop_center(seq, (4, 6))
    assert (c.events.x[0], c.events.y[0]) == (3, 2)
    assert c.frames[0].shape == (4, 6)


def test_crop_count_matches_scan(synth_small):
    seq = synth_small.sequence
    c = crop_center(seq, (16, 10))
    top, left = (24 - 16) // 2, (24 - 10) // 2
    n = sum(1 for x, y in zip(seq.events.x, seq.events.y) if top <= y < top + 16 and left <= x < left + 10)
    assert len(c.events) == n


def test_crop_larger_than_sensor_rejected():
    with pytest.raises(ValidationError, match="does not fit"):
        crop_center(GrayFrame(0.0, np.zeros((4, 4))), (5, 4))


# ---------------------------------------------------------------- synthetic camera


def test_synth_deterministic():
    cfg = SynthConfig(sensor_size=(16, 16), duration=0.2)
    a, b = generate_synthetic(cfg), generate_synthetic(cfg)
    assert a.sequence.events == b.sequence.events
    assert all(x.pixels.tobytes() == y.pixels.tobytes() for x, y in zip(a.sequence.frames, b.sequence.frames))


def test_synth_zero_velocity_no_events():
    r = generate_synthetic(SynthConfig(velocity=(0.0, 0.0), sensor_size=(16, 16), duration=0.2))
    assert len(r.sequence.events) == 0


def test_synth_invalid_config():
    with pytest.raises(ValidationError):
        generate_synthetic(SynthConfig(threshold=0.0))
    with pytest.raises(ValidationError):
        generate_synthetic(SynthConfig(frame_rate=-1.0))


def test_synth_gt_flow_magnitude(synth_small):
    dt = 1.0 / 20
    for i in range(synth_small.sequence.num_windows):
        mag = np.hypot(*synth_small.gt_flow(i))
        np.testing.assert_allclose(mag, np.hypot(40.0, 20.0) * dt, rtol=1e-12)


def test_gradient_polarity_matches_dense_simulation():
    cfg = SynthConfig(pattern="translating-gradient", velocity=(30.0, 0.0), sensor_size=(6, 10), duration=0.5,
                      threshold=0.05)
    r = generate_synthetic(cfg)
    ev = r.sequence.events
    # intensity grows with x, so motion in +x darkens every pixel
    assert len(ev) > 0 and np.all(ev.p == -1)
    from evflow.events import _Scene

    scene = _Scene(cfg)

    def intensity(x, y, t):
        return float(scene.intensity(t)[y, x])

    for x, y in [(0, 0), (4, 3), (9, 5)]:
        signs = oracles.dense_polarity_sim(intensity, x, y, cfg.duration, cfg.threshold, 4000)
        sel = (ev.x == x) & (ev.y == y)
        assert list(ev.p[sel]) == signs


def test_event_count_tracks_log_intensity_change(synth_small):
    seq, theta = synth_small.sequence, synth_small.config.threshold
    counts = np.zeros(seq.sensor_size)
    np.add.at(counts, (seq.events.y, seq.events.x), 1)
    # net signed count vs net log change from first to last frame
    signed = np.zeros(seq.sensor_size)
    np.add.at(signed, (seq.events.y, seq.events.x), seq.events.p.astype(float))
    net = np.log(seq.frames[-1].pixels) - np.log(seq.frames[0].pixels)
    assert np.all(np.abs(signed * theta - net) < theta + 1e-12)
    assert counts.sum() == len(seq.events)


def test_synth_config_is_frozen():
    with pytest.raises(dataclasses.FrozenInstanceError):
        SynthConfig().threshold = 1.0
