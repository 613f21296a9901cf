import math

import numpy as np
import pytest

from anf import autodiff as ad
from anf.autodiff import Rng, Tensor
from anf.conditioners import ActNorm, ConstantConditioner, MlpConditioner, ScaleHeadConfig, actnorm_apply, actnorm_init, cond_forward


def test_additive_mode_scale_is_exactly_one(rng):
    c = MlpConditioner(3, 2, head_mode="additive", rng=rng)
    for p in c.parameters():
        p.data += rng.normal(p.shape)
    scale, shift = cond_forward(c, rng.normal((5, 3)))
    assert np.array_equal(scale.data, np.ones((5, 2)))
    assert shift.shape == (5, 2)
    assert c.out_width == 2


def test_affine_output_width(rng):
    assert MlpConditioner(3, 2, rng=rng).out_width == 4


def test_zero_head_step_scale_for_five_steps(rng):
    c = MlpConditioner(2, 3, scale_head=ScaleHeadConfig(total_steps=5), rng=rng)
    scale, shift = cond_forward(c, rng.normal((10, 2)) * 5)
    np.testing.assert_allclose(scale.data, 0.95 ** (1 / 5), rtol=0, atol=1e-14)
    assert scale.data[0, 0] == pytest.approx(0.98979, abs=1e-5)
    assert np.array_equal(shift.data, np.zeros((10, 3)))


def test_log_scale_is_clamped(rng):
    c = MlpConditioner(1, 1, hidden=(), scale_head=ScaleHeadConfig(clip_bound=2.5, target_composed_scale=math.exp(20.0)), rng=rng)
    # huge offset drives log_sigmoid(pre) + offset far above the bound
    log_scale, _ = c.forward(Tensor([[0.3]]))
    assert log_scale.data[0, 0] == 2.5
    c.biases[-1].data[1] = -1e3
    log_scale, _ = c.forward(Tensor([[0.3]]))
    assert log_scale.data[0, 0] == -2.5


def test_scale_strictly_positive_everywhere(rng):
    c = MlpConditioner(2, 2, rng=rng)
    for p in c.parameters():
        p.data += 3 * rng.normal(p.shape)
    scale, _ = cond_forward(c, 10 * rng.normal((200, 2)))
    assert (scale.data >= math.exp(-2.5)).all() and (scale.data <= math.exp(2.5)).all()


def test_width_mismatch_raises(rng):
    with pytest.raises(ValueError):
        MlpConditioner(3, 1, rng=rng).forward(Tensor(np.zeros((2, 4))))
    with pytest.raises(ValueError):
        ConstantConditioner(2, [0.0], [0.0]).forward(np.zeros((1, 3)))


def test_deterministic_forward(rng):
    c = MlpConditioner(2, 2, rng=rng)
    x = rng.normal((4, 2))
    a, b = c.forward(x), c.forward(x)
    assert np.array_equal(a[0].data, b[0].data) and np.array_equal(a[1].data, b[1].data)


def test_truncated_init_and_zero_head():
    c = MlpConditioner(4, 2, hidden=(64, 64), rng=Rng(0))
    for w in c.weights[:-1]:
        assert np.abs(w.data).max() <= 0.2
    assert not c.weights[-1].data.any() and not c.biases[-1].data.any()


def test_unknown_mode_and_activation():
    with pytest.raises(ValueError):
        MlpConditioner(1, 1, head_mode="multiplicative")
    with pytest.raises(ValueError):
        MlpConditioner(1, 1, activation="relu6")


def test_actnorm_identity():
    layer = ActNorm(2)
    layer.initialized = True
    y, ld = layer.apply(np.array([[1.0, -2.0]]))
    np.testing.assert_array_equal(y.data, [[1.0, -2.0]])
    assert ld.data[0] == 0.0


def test_actnorm_init_standardizes_batch():
    batch = np.array([[1.0, 10.0], [3.0, 14.0], [5.0, 6.0], [-1.0, 10.0]])
    layer = ActNorm(2)
    y, _ = actnorm_init(layer, batch)
    np.testing.assert_allclose(y.data.mean(0), 0.0, atol=1e-6)
    np.testing.assert_allclose(y.data.var(0), 1.0, atol=1e-6)


def test_actnorm_init_std_two_gives_half_scale():
    batch = np.array([[-2.0], [2.0], [-2.0], [2.0]])  # std exactly 2
    layer = ActNorm(1)
    actnorm_init(layer, batch)
    assert layer.scale[0] == pytest.approx(0.5, abs=1e-12)


def test_actnorm_logdet_for_half_scales():
    layer = ActNorm(2)
    layer.initialized = True
    layer.log_scale.data[:] = math.log(0.5)
    _, ld = actnorm_apply(layer, np.ones((3, 2)))
    np.testing.assert_allclose(ld.data, 2 * math.log(0.5))
    assert ld.data[0] == pytest.approx(-1.3863, abs=1e-4)


def test_actnorm_apply_before_init_raises():
    with pytest.raises(RuntimeError):
        ActNorm(1).apply(np.zeros((2, 1)))


def test_actnorm_inverse_round_trip(rng):
    layer = ActNorm(3)
    x = rng.normal((6, 3)) * 4 + 1
    actnorm_init(layer, x)
    y, ld = layer.apply(x)
    x2, ld2 = layer.inverse(y)
    np.testing.assert_allclose(x2.data, x, atol=1e-12)
    np.testing.assert_allclose(ld.data + ld2.data, 0.0, atol=1e-12)
