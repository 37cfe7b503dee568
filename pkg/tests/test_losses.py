import math

import numpy as np
import pytest
import torch

from toadhm.losses import (
    LossConfig, mse, mse_grad, torch_loss, weighted_bce, weighted_bce_grad,
)


def central_diff(f, p, h=1e-5):
    g = np.zeros_like(p)
    for idx in np.ndindex(p.shape):
        hi, lo = p.copy(), p.copy()
        hi[idx] += h
        lo[idx] -= h
        g[idx] = (f(hi) - f(lo)) / (2 * h)
    return g


def random_grid(seed, shape=(6, 7)):
    rng = np.random.default_rng(seed)
    return rng.random(shape), rng.uniform(0.05, 0.95, shape)


def test_bce_perfect_prediction_is_zero():
    y = np.ones((3, 3))
    assert weighted_bce(y, np.ones((3, 3)), W_t=100) == pytest.approx(0.0, abs=1e-4)
    assert weighted_bce(np.zeros((2, 2)), np.zeros((2, 2))) == pytest.approx(0.0, abs=1e-6)


def test_bce_analytic_values():
    assert weighted_bce(np.zeros((4, 4)), np.full((4, 4), 0.5)) == pytest.approx(math.log(2), abs=1e-12)
    assert weighted_bce(np.ones((4, 4)), np.full((4, 4), 0.5), W_t=100) == pytest.approx(
        100 * math.log(2), abs=1e-10)
    assert 100 * math.log(2) == pytest.approx(69.3147, abs=1e-4)


def test_bce_weight_one_is_plain_bce():
    y, p = random_grid(3)
    plain = np.mean(-(y * np.log(p) + (1 - y) * np.log(1 - p)))
    assert weighted_bce(y, p, W_t=1) == pytest.approx(plain, rel=1e-12)


def test_bce_is_finite_at_saturation():
    assert math.isfinite(weighted_bce(np.ones(3), np.zeros(3)))
    assert math.isfinite(weighted_bce(np.zeros(3), np.ones(3)))


def test_mse_values():
    assert mse(np.ones((3, 3)) * 0.3, np.ones((3, 3)) * 0.3) == 0.0
    assert mse(np.zeros((5, 5)), np.full((5, 5), 0.5)) == 0.25


def test_mse_matches_scalar_loop():
    y, p = random_grid(11, (9, 4))
    total = 0.0
    for a, b in zip(y.ravel(), p.ravel()):
        total += (a - b) ** 2
    assert mse(y, p) == pytest.approx(total / y.size, abs=1e-12)


@pytest.mark.parametrize("fn", [mse, weighted_bce])
def test_shape_mismatch(fn):
    with pytest.raises(ValueError):
        fn(np.zeros((2, 3)), np.zeros((3, 2)))


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("wt", [1.0, 100.0])
def test_bce_gradient(seed, wt):
    y, p = random_grid(seed)
    num = central_diff(lambda q: weighted_bce(y, q, W_t=wt), p)
    ana = weighted_bce_grad(y, p, W_t=wt)
    np.testing.assert_allclose(ana, num, rtol=1e-5)


@pytest.mark.parametrize("seed", range(5))
def test_mse_gradient(seed):
    y, p = random_grid(seed)
    np.testing.assert_allclose(mse_grad(y, p), central_diff(lambda q: mse(y, q), p), rtol=1e-5)


@pytest.mark.parametrize("kind,grad", [("mse", mse_grad), ("weighted_bce", weighted_bce_grad)])
def test_torch_autograd_agrees_with_analytic(kind, grad):
    y, p = random_grid(21)
    cfg = LossConfig(kind=kind)
    pt = torch.tensor(p, requires_grad=True)
    loss = torch_loss(cfg)(torch.tensor(y), pt)
    loss.backward()
    ref = mse(y, p) if kind == "mse" else weighted_bce(y, p, cfg.W_t)
    assert loss.item() == pytest.approx(ref, rel=1e-10)
    np.testing.assert_allclose(pt.grad.numpy(), grad(y, p), rtol=1e-10)


def test_loss_config_validation():
    LossConfig("weighted_bce", W_t=1)
    with pytest.raises(ValueError):
        LossConfig("mse", W_t=50)
    with pytest.raises(ValueError):
        LossConfig("focal")
    with pytest.raises(ValueError):
        LossConfig("weighted_bce", epsilon=0.01)
    with pytest.raises(ValueError):
        LossConfig("weighted_bce", W_t=0.5)


def test_losses_non_negative():
    rng = np.random.default_rng(0)
    for _ in range(20):
        y, p = rng.random((5, 5)), rng.random((5, 5))
        assert mse(y, p) >= 0
        assert weighted_bce(y.round(), p) >= 0
