import numpy as np
import pytest

from evflow import tensor as T
from evflow.loss import LossConfig, downsample, loss_terms, photometric_loss, smoothness_loss, total_loss
from evflow.tensor import Tensor

import oracles

CFG = LossConfig()


def _smooth_image(h, w, seed=0):
    rng = np.random.default_rng(seed)
    ys, xs = np.mgrid[0:h, 0:w]
    a, b = rng.uniform(0.2, 0.6, 2)
    return 0.5 + 0.2 * np.sin(a * xs + 0.3) * np.cos(b * ys + 0.7)


def test_identical_frames_zero_flow():
    img = _smooth_image(8, 8)
    loss = photometric_loss(Tensor(np.zeros((2, 8, 8))), img, img, CFG).item()
    assert loss == pytest.approx(64 * CFG.rho_eps ** (2 * CFG.rho_q), rel=1e-12)


def test_unit_shift_recovered_in_interior():
    img = _smooth_image(8, 10)
    nxt = np.zeros_like(img)
    nxt[:, 1:] = img[:, :-1]
    flow = np.zeros((2, 8, 10))
    flow[0] = 1.0
    from evflow.loss import warp

    warped = warp(nxt, Tensor(flow)).data
    np.testing.assert_array_equal(warped[:, :-1], img[:, :-1])


def test_photometric_matches_loop_oracle(rng):
    a, b = rng.random((8, 8)), rng.random((8, 8))
    flow = rng.normal(scale=1.5, size=(2, 8, 8))
    got = photometric_loss(Tensor(flow), a, b, CFG).item()
    assert abs(got - oracles.photometric_loops(flow, a, b, CFG.rho_eps, CFG.rho_q)) < 1e-12


def test_smoothness_constant_flow_is_zero():
    flow = np.stack([np.full((5, 6), 1.7), np.full((5, 6), -0.3)])
    assert smoothness_loss(Tensor(flow)).item() == 0.0


def test_smoothness_hand_case():
    flow = np.zeros((2, 2, 2))
    flow[0] = [[0.0, 1.0], [0.0, 1.0]]
    assert smoothness_loss(Tensor(flow)).item() == 2.0


def test_smoothness_matches_loop_oracle(rng):
    flow = rng.normal(size=(2, 7, 9))
    assert abs(smoothness_loss(Tensor(flow)).item() - oracles.smoothness_loops(flow)) < 1e-12


def test_smoothness_too_small_rejected():
    with pytest.raises(T.ShapeError):
        smoothness_loss(Tensor(np.zeros((2, 1, 4))))


def test_shape_mismatch():
    with pytest.raises(T.ShapeError):
        photometric_loss(Tensor(np.zeros((2, 4, 4))), np.zeros((4, 5)), np.zeros((4, 5)))


def _pyramid(rng, size=16):
    return [Tensor(rng.normal(size=(2, size // f, size // f))) for f in (8, 4, 2, 1)]


def test_lambda_zero_is_photometric_only(rng):
    flows = _pyramid(rng)
    a, b = _smooth_image(16, 16, 1), _smooth_image(16, 16, 2)
    terms = loss_terms(flows, a, b, LossConfig(lam=0.0))
    assert terms.total.item() == terms.photo.item()


def test_single_scale_literal(rng):
    flows = _pyramid(rng)
    a, b = _smooth_image(16, 16, 1), _smooth_image(16, 16, 2)
    cfg = LossConfig(lam=0.7, scales=1)
    expect = photometric_loss(flows[-1], a, b, cfg).item() + 0.7 * smoothness_loss(flows[-1]).item()
    assert total_loss(flows, a, b, cfg).item() == pytest.approx(expect, rel=1e-14)


def test_multiscale_divides_flow_by_factor(rng):
    flows = _pyramid(rng)
    a, b = _smooth_image(16, 16, 1), _smooth_image(16, 16, 2)
    terms = loss_terms(flows, a, b, LossConfig(lam=1.0))
    expect = 0.0
    for f in flows:
        k = 16 // f.shape[1]
        scaled = Tensor(f.data / k)
        expect += photometric_loss(scaled, downsample(a, k), downsample(b, k)).item()
        expect += smoothness_loss(scaled).item()
    assert terms.total.item() == pytest.approx(expect, rel=1e-12)


def test_lambda_linearity(rng):
    flows = _pyramid(rng)
    a, b = _smooth_image(16, 16, 1), _smooth_image(16, 16, 2)
    l0 = total_loss(flows, a, b, LossConfig(lam=0.0)).item()
    s = loss_terms(flows, a, b, CFG).smooth.item()
    for lam in (0.25, 1.0, 3.0):
        assert total_loss(flows, a, b, LossConfig(lam=lam)).item() == pytest.approx(l0 + lam * s, rel=1e-12)


def test_non_negative(rng):
    for _ in range(5):
        terms = loss_terms(_pyramid(rng), rng.random((16, 16)), rng.random((16, 16)), CFG)
        assert terms.photo.item() >= 0 and terms.smooth.item() >= 0 and terms.total.item() >= 0


def test_downsample_average_pooling():
    img = np.arange(16.0).reshape(4, 4)
    np.testing.assert_array_equal(downsample(img, 2), [[2.5, 4.5], [10.5, 12.5]])
    assert downsample(img, 4).item() == img.mean()


@pytest.mark.parametrize("shift", [1, 2])
def test_minimum_at_true_shift(shift):
    h, w = 16, 24
    ys, xs = np.mgrid[0:h, 0:w + shift]
    big = 0.5 + 0.3 * np.sin(0.7 * xs) * np.cos(0.5 * ys)
    a = big[:, shift:]
    b = big[:, :w]  # b(x) = a(x - shift): content moved right by `shift`
    m = 4  # interior margin

    def interior(u):
        flow = np.zeros((2, h, w))
        flow[0] = u
        from evflow.loss import warp

        r = a - warp(b, Tensor(flow)).data
        return float(np.sum(((r * r + CFG.rho_eps**2) ** CFG.rho_q)[m:-m, m:-m]))

    best = interior(shift)
    for d in (-1.0, -0.5, 0.5, 1.0):
        assert best <= interior(shift + d)


def test_scale_consistency_on_smooth_images():
    h = w = 32
    ys, xs = np.mgrid[0:h, 0:w].astype(float)

    def scene(dx):
        return 0.5 + 0.25 * np.sin(2 * np.pi * (xs - dx) / 32) * np.cos(2 * np.pi * ys / 32)

    a, b = scene(0.0), scene(2.0)
    per_px = []
    for k in (1, 2, 4):
        n = h // k
        flow = Tensor(np.stack([np.full((n, n), 2.0 / k), np.zeros((n, n))]))
        v = photometric_loss(flow, downsample(a, k), downsample(b, k), CFG).item() / n**2
        zero = photometric_loss(Tensor(np.zeros((2, n, n))), downsample(a, k), downsample(b, k), CFG).item() / n**2
        assert v < 0.5 * zero
        per_px.append(v)
    # residuals vanish up to border clamping and pooling
    assert max(per_px) - min(per_px) < 0.02
