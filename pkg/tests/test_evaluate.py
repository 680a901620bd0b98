import json

import numpy as np
import pytest

from evflow.evaluate import EvalReport, aee, event_mask, flow_to_image, pooled, read_ppm, write_ppm
from evflow.events import Events

import oracles


def test_event_mask_empty():
    assert not event_mask(Events(), (4, 5)).any()


def test_event_mask_single_event():
    m = event_mask(Events([3], [5], [0.0], [1]), (8, 8))
    assert m.sum() == 1 and m[5, 3]


def test_event_mask_matches_scan(rng):
    ev = Events(rng.integers(0, 9, 300), rng.integers(0, 6, 300), np.sort(rng.random(300)), rng.choice([-1, 1], 300))
    ref = np.zeros((6, 9), dtype=bool)
    for x, y in zip(ev.x, ev.y):
        ref[y, x] = True
    np.testing.assert_array_equal(event_mask(ev, (6, 9)), ref)


def test_perfect_prediction():
    f = np.random.default_rng(0).normal(size=(2, 5, 5))
    assert aee(f, f, np.ones((5, 5), bool))[:3] == (0.0, 0.0, 25)


def test_three_four_five():
    gt = np.zeros((2, 4, 4))
    pred = gt.copy()
    pred[0] += 3.0
    pred[1] += 4.0
    mask = np.zeros((4, 4), bool)
    mask[1:3] = True
    r = aee(pred, gt, mask)
    assert (r.aee, r.outlier_pct, r.n_active) == (5.0, 100.0, 8)


def test_outlier_threshold_is_strict():
    gt = np.zeros((2, 1, 2))
    pred = np.zeros((2, 1, 2))
    pred[0, 0, 0] = 3.0
    pred[0, 0, 1] = 3.0 + 1e-9
    assert aee(pred, gt).outlier_pct == 50.0


def test_empty_mask_is_flagged_not_nan():
    r = aee(np.zeros((2, 3, 3)), np.ones((2, 3, 3)), np.zeros((3, 3), bool))
    assert r.defined is False and r.n_active == 0 and r.aee == 0.0


def test_shape_mismatch():
    with pytest.raises(ValueError):
        aee(np.zeros((2, 3, 3)), np.zeros((2, 3, 4)))


def test_matches_loop_oracle_small(rng):
    pred, gt = rng.normal(scale=3, size=(2, 8, 8)), rng.normal(scale=3, size=(2, 8, 8))
    mask = rng.random((8, 8)) < 0.6
    r = aee(pred, gt, mask)
    ref = oracles.aee_loops(pred, gt, mask)
    assert abs(r.aee - ref[0]) < 1e-12 and abs(r.outlier_pct - ref[1]) < 1e-12 and r.n_active == ref[2]


def test_unmasked_pixels_do_not_matter(rng):
    pred, gt = rng.normal(size=(2, 6, 6)), rng.normal(size=(2, 6, 6))
    mask = rng.random((6, 6)) < 0.5
    pred2 = pred.copy()
    pred2[:, ~mask] = 1e6
    assert aee(pred, gt, mask) == aee(pred2, gt, mask)


def test_scaling_scales_aee(rng):
    pred, gt = rng.normal(size=(2, 6, 6)), rng.normal(size=(2, 6, 6))
    r1, r2 = aee(pred, gt), aee(4.0 * pred, 4.0 * gt)
    assert r2.aee == pytest.approx(4.0 * r1.aee, rel=1e-14)
    assert r2.outlier_pct >= r1.outlier_pct


def test_pooled_concatenates():
    r = pooled([np.array([1.0, 5.0]), np.array([3.0])])
    assert (r.aee, r.n_active) == (3.0, 3)
    assert r.outlier_pct == pytest.approx(100 / 3)
    assert pooled([]).defined is False


def test_report_json_round_trip(tmp_path):
    rep = EvalReport(1.5, 10.0, 20, [{"window": 0, "aee": 1.5, "outlier_pct": 10.0, "n_active": 20}], 1)
    rep.save(tmp_path / "r.json")
    assert json.loads((tmp_path / "r.json").read_text())["skipped_empty"] == 1


def test_flow_image_zero_flow_uniform():
    img = flow_to_image(np.zeros((2, 3, 4)))
    assert np.all(img == img[0, 0])
    assert tuple(img[0, 0]) == (255, 255, 255)


def test_flow_image_single_hue():
    flow = np.zeros((2, 3, 3))
    flow[0] = np.linspace(0.5, 2, 9).reshape(3, 3)
    img = flow_to_image(flow).astype(int)
    # pure +x is hue 0 (red): the red channel stays saturated, green and blue track each other
    assert np.all(img[..., 0] == 255)
    np.testing.assert_array_equal(img[..., 1], img[..., 2])


def test_flow_image_masked_black():
    mask = np.ones((3, 3), bool)
    mask[1, 2] = False
    img = flow_to_image(np.ones((2, 3, 3)), mask)
    assert tuple(img[1, 2]) == (0, 0, 0)


def test_ppm_round_trip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, size=(5, 7, 3)).astype(np.uint8)
    img[0, 0] = (32, 10, 9)  # whitespace-valued bytes right after the header
    write_ppm(tmp_path / "a.ppm", img)
    np.testing.assert_array_equal(read_ppm(tmp_path / "a.ppm"), img)
