import math

import numpy as np
import pytest

from uamsa import tensor as T
from uamsa.errors import ParameterError, ShapeError
from uamsa.loss import (
    LossConfig,
    bce,
    bce_with_logits,
    mc_moments,
    mc_predict,
    smoothing_loss,
)
from uamsa.model import ModelSpec, build, forward
from uamsa.rng import Rng
from uamsa.tensor import Tensor

from conftest import gradcheck, leaf


@pytest.fixture(scope="module")
def tiny_models():
    spec = dict(depth=2, base_channels=4)
    return build(ModelSpec(**spec), Rng(0)), build(ModelSpec(dropout_p=0.0, **spec), Rng(0))


@pytest.fixture(scope="module")
def image():
    return Tensor(np.random.default_rng(3).random((2, 1, 16, 16)))


# ------------------------------------------------------------- mc_predict


def test_no_dropout_gives_zero_variance(tiny_models, image):
    _, model = tiny_models
    pred = mc_predict(model, image, 4, Rng(1))
    assert np.all(pred.variance == 0)
    det = T.sigmoid(forward(model, image)).data
    assert np.array_equal(pred.mean, det)


def test_single_pass_zero_variance(tiny_models, image):
    model, _ = tiny_models
    assert np.all(mc_predict(model, image, 1, Rng(1)).variance == 0)


def test_injected_sampler():
    values = [0.2, 0.4, 0.6]
    x = Tensor(np.zeros((1, 1, 2, 2)))
    pred = mc_predict(None, x, 3, Rng(0), sampler=lambda x, t: np.full((1, 1, 2, 2), values[t]))
    np.testing.assert_allclose(pred.mean, 0.4, atol=1e-15)
    np.testing.assert_allclose(pred.variance, 0.08 / 3, atol=1e-15)


def test_mc_predict_deterministic_and_restores_mode(tiny_models, image):
    model, _ = tiny_models
    model.set_mode("deterministic")
    a = mc_predict(model, image, 3, Rng(5), keep_samples=True)
    b = mc_predict(model, image, 3, Rng(5), keep_samples=True)
    assert np.array_equal(a.mean, b.mean) and np.array_equal(a.variance, b.variance)
    assert a.samples.shape == (3, 2, 1, 16, 16)
    assert np.any(a.variance > 0)
    assert model.mode == "deterministic"
    with pytest.raises(ParameterError):
        mc_predict(model, image, 0, Rng(5))


def test_mc_moments_population_variance(rng):
    s = rng.random((7, 3, 4))
    mu, var = mc_moments(s)
    np.testing.assert_allclose(var, s.var(axis=0, ddof=0), atol=1e-15)
    np.testing.assert_allclose(mu, s.mean(axis=0), atol=1e-15)


# -------------------------------------------------------------------- bce


def test_bce_closed_forms():
    t = np.array([[0.0, 1.0], [1.0, 0.0]])
    perfect = bce(leaf(t, False), leaf(t, False)).item()
    assert perfect < 1e-6 * abs(math.log(1e-7))
    half = bce(leaf(np.full((2, 2), 0.5), False), leaf(t, False)).item()
    assert abs(half - math.log(2)) < 1e-12


def test_bce_gradcheck():
    for seed in range(5):
        gen = np.random.default_rng(seed)
        p = leaf(gen.uniform(0.05, 0.95, (4, 4)))
        t = leaf((gen.random((4, 4)) > 0.5).astype(float), False)
        assert gradcheck(lambda p: bce(p, t), [p], seed=seed) < 1e-3


def test_bce_shape_mismatch():
    with pytest.raises(ShapeError):
        bce(Tensor(np.full((2, 2), 0.5)), Tensor(np.zeros((2, 3))))


def test_logit_form_agrees(rng):
    z = rng.standard_normal((3, 5)) * 4
    t = (rng.random((3, 5)) > 0.5).astype(float)
    a = bce_with_logits(leaf(z, False), leaf(t, False)).item()
    b = bce(T.sigmoid(leaf(z, False)), leaf(t, False)).item()
    assert abs(a - b) < 1e-9
    for seed in range(5):
        zz = leaf(np.random.default_rng(seed).standard_normal((4, 4)) * 3)
        gradcheck(lambda z: bce_with_logits(z, leaf(t[:, :4][:3].repeat(2, 0)[:4], False)), [zz], seed=seed)


def test_logit_form_extreme_values_finite():
    z = leaf(np.array([[-200.0, 200.0]]))
    t = leaf(np.array([[1.0, 0.0]]), False)
    assert abs(bce_with_logits(z, t).item() - 200.0) < 1e-9


# --------------------------------------------------------- smoothing loss


def stack_of(values, shape=(1, 1, 2, 2)):
    return leaf(np.stack([np.full(shape, v) for v in values]))


def test_lambda_zero_total_is_bce():
    gen = np.random.default_rng(0)
    s = leaf(gen.uniform(0.1, 0.9, (3, 2, 1, 4, 4)))
    t = leaf((gen.random((2, 1, 4, 4)) > 0.5).astype(float), False)
    parts = smoothing_loss(s, t, LossConfig(lambda_u=0.0, t_passes=3))
    assert parts.total.item() == parts.bce_part.item()
    assert parts.var_part.item() > 0


def test_identical_stack_zero_variance():
    t = leaf(np.array([[[[1.0, 0.0], [0.0, 1.0]]]]), False)
    parts = smoothing_loss(stack_of([0.7, 0.7, 0.7]), t, LossConfig(lambda_u=0.5, t_passes=3))
    assert parts.var_part.item() == 0.0
    assert parts.total.item() == bce(leaf(np.full((1, 1, 2, 2), 0.7), False), t).item()


def test_two_pass_variance_value():
    t = leaf(np.array([[[[1.0, 0.0], [0.0, 1.0]]]]), False)
    parts = smoothing_loss(stack_of([0.3, 0.5]), t, LossConfig(lambda_u=1.0, t_passes=2))
    assert abs(parts.var_part.item() - 0.01) < 1e-9
    expected = bce(leaf(np.full((1, 1, 2, 2), 0.4), False), t).item() + 0.01
    assert abs(parts.total.item() - expected) < 1e-12


def test_variance_permutation_and_scaling():
    gen = np.random.default_rng(1)
    s = gen.uniform(0.2, 0.8, (4, 1, 1, 3, 3))
    t = leaf((gen.random((1, 1, 3, 3)) > 0.5).astype(float), False)
    cfg = LossConfig(lambda_u=1.0, t_passes=4)
    base = smoothing_loss(leaf(s), t, cfg).var_part.item()
    perm = smoothing_loss(leaf(s[[2, 0, 3, 1]]), t, cfg).var_part.item()
    assert abs(base - perm) < 1e-15
    alpha = 0.5
    scaled = smoothing_loss(leaf(0.5 + alpha * (s - 0.5)), t, cfg).var_part.item()
    assert abs(scaled - alpha**2 * base) < 1e-15


def test_smoothing_loss_gradcheck():
    for seed in range(5):
        gen = np.random.default_rng(seed)
        s = leaf(gen.uniform(0.1, 0.9, (3, 2, 1, 4, 4)))
        t = leaf((gen.random((2, 1, 4, 4)) > 0.5).astype(float), False)
        for bce_on in ("mean", "per_pass"):
            cfg = LossConfig(lambda_u=0.7, t_passes=3, bce_on=bce_on)
            gradcheck(lambda s: smoothing_loss(s, t, cfg).total, [s], seed=seed)


def test_per_pass_bce_matches_on_identical_stacks():
    t = leaf(np.array([[[[1.0, 0.0], [0.0, 1.0]]]]), False)
    a = smoothing_loss(stack_of([0.6, 0.6]), t, LossConfig(t_passes=2, bce_on="per_pass")).total.item()
    b = smoothing_loss(stack_of([0.6, 0.6]), t, LossConfig(t_passes=2)).total.item()
    assert abs(a - b) < 1e-15


def test_config_validation_and_presets():
    assert LossConfig.for_modality("T1C").lambda_u == 0.12
    assert LossConfig.for_modality("T2W").lambda_u == 0.191
    assert LossConfig.for_modality("T2FLAIR").lambda_u == 0.191
    with pytest.raises(ParameterError):
        LossConfig(lambda_u=-0.1)
    with pytest.raises(ParameterError):
        LossConfig(t_passes=0)
    t = leaf(np.zeros((1, 1, 2, 2)), False)
    with pytest.raises(ShapeError):
        smoothing_loss(stack_of([0.5, 0.5, 0.5]), t, LossConfig(t_passes=2))
