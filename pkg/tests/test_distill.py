"""Loss mathematics against hand computations and scalar-loop oracles."""

import math

import numpy as np
import pytest

from cropseg.distill import (
    EnsembleOutput,
    LossConfig,
    TotalLoss,
    bce_loss,
    bce_loss_grad,
    channel_softmax,
    ensemble_teachers,
    kd_loss_channel,
    kd_loss_spatial,
    kd_loss_spatial_grad,
    spatial_softmax,
    total_loss,
    total_loss_grad,
)
from cropseg.errors import ConfigError, ShapeError


# --- scalar-loop oracles (pure python, independent of the numpy paths) -----

def oracle_softmax(values, tau):
    exps = [math.exp(v / tau) for v in values]
    z = sum(exps)
    return [e / z for e in exps]


def oracle_kd_spatial(teacher, student, tau):
    # teacher/student: (C, H, W) nested lists or arrays
    t = np.asarray(teacher, dtype=np.float64)
    s = np.asarray(student, dtype=np.float64)
    c = t.shape[0]
    total = 0.0
    for ci in range(c):
        p = oracle_softmax(t[ci].ravel().tolist(), tau)
        q = oracle_softmax(s[ci].ravel().tolist(), tau)
        for pi, qi in zip(p, q):
            if pi >= 1e-12:
                total += pi * (math.log(pi) - math.log(qi))
    return tau * tau / c * total


def oracle_kd_channel(teacher, student, tau):
    t = np.asarray(teacher, dtype=np.float64)
    s = np.asarray(student, dtype=np.float64)
    _, h, w = t.shape
    total = 0.0
    for i in range(h):
        for j in range(w):
            p = oracle_softmax(t[:, i, j].tolist(), tau)
            q = oracle_softmax(s[:, i, j].tolist(), tau)
            for pi, qi in zip(p, q):
                if pi >= 1e-12:
                    total += pi * (math.log(pi) - math.log(qi))
    return tau * tau * total / (h * w)


def oracle_bce(mask, logits):
    y = np.asarray(mask, dtype=np.float64).ravel()
    z = np.asarray(logits, dtype=np.float64).ravel()
    total = 0.0
    for yi, zi in zip(y, z):
        p = 1.0 / (1.0 + math.exp(-zi))
        total += -(yi * math.log(p) + (1 - yi) * math.log(1 - p))
    return total / len(y)


# --- ensemble ---------------------------------------------------------------

def test_ensemble_mean_example():
    out = ensemble_teachers([np.array([[[1.0, 3.0]]]), np.array([[[3.0, 1.0]]])])
    assert isinstance(out, EnsembleOutput)
    assert out.num_teachers == 2
    assert np.array_equal(out.values, np.array([[[2.0, 2.0]]]))


def test_ensemble_idempotent_on_identical_teachers(rng):
    t = rng.standard_normal((2, 4, 4)).astype(np.float32)
    out = ensemble_teachers([t, t, t])
    assert np.array_equal(out.values, t)


def test_ensemble_permutation_invariant_bit_exact(rng):
    teachers = [rng.standard_normal((1, 5, 5)) for _ in range(4)]
    a = ensemble_teachers(teachers).values
    b = ensemble_teachers(teachers[::-1]).values
    c = ensemble_teachers([teachers[2], teachers[0], teachers[3], teachers[1]]).values
    assert np.array_equal(a, b) and np.array_equal(a, c)


def test_ensemble_matches_elementwise_loop(rng):
    teachers = [rng.standard_normal((2, 3, 3)) for _ in range(3)]
    got = ensemble_teachers(teachers).values
    for idx in np.ndindex(*got.shape):
        expected = sum(float(t[idx]) for t in teachers) / 3.0
        assert abs(float(got[idx]) - expected) < 1e-12


def test_ensemble_rejects_bad_input(rng):
    with pytest.raises(ValueError):
        ensemble_teachers([])
    with pytest.raises(ShapeError):
        ensemble_teachers([np.zeros((1, 2, 2)), np.zeros((1, 3, 3))])


# --- softmaxes ---------------------------------------------------------------

def test_spatial_softmax_uniform_on_zeros():
    out = spatial_softmax(np.zeros((1, 2, 2)), tau=1.0)
    assert np.allclose(out, 0.25)


def test_spatial_softmax_hand_value():
    out = spatial_softmax(np.array([0.0, math.log(2)]).reshape(1, 1, 2), tau=1.0)
    assert np.allclose(out.ravel(), [1 / 3, 2 / 3], atol=1e-12)


def test_spatial_softmax_shift_invariance(rng):
    x = rng.standard_normal((2, 3, 4, 4))
    a = spatial_softmax(x, tau=0.7)
    b = spatial_softmax(x + 123.456, tau=0.7)
    assert np.allclose(a, b, atol=1e-6)
    sums = a.sum(axis=(2, 3))
    assert np.allclose(sums, 1.0, atol=1e-6)


def test_spatial_softmax_rejects_nonfinite():
    bad = np.array([[[np.inf, 0.0]]])
    with pytest.raises(FloatingPointError):
        spatial_softmax(bad, tau=1.0)


def test_channel_softmax_symmetry_and_hand_value():
    equal = channel_softmax(np.zeros((2, 3, 3)), tau=1.0)
    assert np.allclose(equal, 0.5)
    out = channel_softmax(np.array([0.0, math.log(3)]).reshape(2, 1, 1), tau=1.0)
    assert np.allclose(out.ravel(), [0.25, 0.75], atol=1e-12)


def test_channel_softmax_large_temperature_flattens():
    # exact limit: softmax([5,-5]/tau) deviates from 0.5 by tanh(5/tau)/2
    out = channel_softmax(np.array([5.0, -5.0]).reshape(2, 1, 1), tau=1000.0)
    assert np.allclose(out.ravel(), [0.5, 0.5], atol=math.tanh(5 / 1000) / 2 + 1e-9)
    out = channel_softmax(np.array([5.0, -5.0]).reshape(2, 1, 1), tau=10000.0)
    assert np.allclose(out.ravel(), [0.5, 0.5], atol=1e-3)


def test_channel_softmax_single_channel_is_config_error():
    with pytest.raises(ConfigError):
        channel_softmax(np.zeros((1, 2, 2)), tau=1.0)


def test_channel_softmax_per_position_shift_invariance(rng):
    x = rng.standard_normal((3, 4, 4))
    shift = rng.standard_normal((1, 4, 4))
    assert np.allclose(channel_softmax(x, 1.0), channel_softmax(x + shift, 1.0), atol=1e-6)


# --- KD losses ---------------------------------------------------------------

def test_kd_spatial_zero_for_identical_inputs(rng):
    x = rng.standard_normal((2, 1, 4, 4))
    assert kd_loss_spatial(x, x, tau=1.5) == pytest.approx(0.0, abs=1e-12)


def test_kd_spatial_hand_value():
    teacher = np.array([0.0, math.log(2)]).reshape(1, 1, 2)
    student = np.zeros((1, 1, 2))
    expected = (1 / 3) * math.log(2 / 3) + (2 / 3) * math.log(4 / 3)  # 0.0566330...
    assert kd_loss_spatial(teacher, student, tau=1.0) == pytest.approx(expected, rel=1e-12)
    assert expected == pytest.approx(0.05663, abs=5e-6)


@pytest.mark.parametrize("tau", [0.5, 1.0, 2.0])
@pytest.mark.parametrize("c", [1, 2, 4])
def test_kd_spatial_matches_scalar_oracle(tau, c, rng):
    t = 2.0 * rng.standard_normal((c, 3, 5))
    s = 2.0 * rng.standard_normal((c, 3, 5))
    got = kd_loss_spatial(t, s, tau)
    want = oracle_kd_spatial(t, s, tau)
    assert got == pytest.approx(want, rel=1e-9)
    # tau^2 scaling: loss equals tau^2 * KL of the tau-softmaxes
    assert got >= 0.0


def test_kd_channel_hand_value():
    teacher = np.array([0.0, math.log(3)]).reshape(2, 1, 1)
    student = np.zeros((2, 1, 1))
    expected = 0.25 * math.log(0.5) + 0.75 * math.log(1.5)  # 0.1308152...
    assert kd_loss_channel(teacher, student, tau=1.0) == pytest.approx(expected, rel=1e-12)
    assert expected == pytest.approx(0.13081, abs=5e-6)


def test_kd_channel_zero_and_oracle(rng):
    x = rng.standard_normal((2, 3, 3))
    assert kd_loss_channel(x, x, tau=2.0) == pytest.approx(0.0, abs=1e-12)
    t = rng.standard_normal((3, 4, 2))
    s = rng.standard_normal((3, 4, 2))
    assert kd_loss_channel(t, s, 0.5) == pytest.approx(oracle_kd_channel(t, s, 0.5), rel=1e-9)


def test_kd_channel_single_channel_is_config_error():
    with pytest.raises(ConfigError):
        kd_loss_channel(np.zeros((1, 2, 2)), np.zeros((1, 2, 2)), tau=1.0)


def test_kd_losses_batch_mean(rng):
    t = rng.standard_normal((3, 2, 4, 4))
    s = rng.standard_normal((3, 2, 4, 4))
    batched = kd_loss_spatial(t, s, 1.0)
    per_sample = [kd_loss_spatial(t[i], s[i], 1.0) for i in range(3)]
    assert batched == pytest.approx(np.mean(per_sample), rel=1e-12)


def test_kd_shape_mismatch():
    with pytest.raises(ShapeError):
        kd_loss_spatial(np.zeros((1, 2, 2)), np.zeros((1, 3, 3)), tau=1.0)


# --- BCE ---------------------------------------------------------------------

def test_bce_logit_zero_is_ln2():
    for label in (0.0, 1.0):
        got = bce_loss(np.full((2, 2), label), np.zeros((1, 2, 2)))
        assert got == pytest.approx(math.log(2), rel=1e-12)


def test_bce_hand_value():
    got = bce_loss(np.ones((1, 1)), np.full((1, 1, 1), math.log(3)))
    assert got == pytest.approx(-math.log(0.75), rel=1e-12)
    assert got == pytest.approx(0.2877, abs=5e-5)


def test_bce_saturated_logits_stable():
    mask = np.array([[1.0, 0.0], [0.0, 1.0]])
    logits = np.where(mask > 0, 40.0, -40.0)[None]
    with np.errstate(over="raise"):
        loss = bce_loss(mask, logits)
    assert loss < 1e-10


def test_bce_matches_scalar_oracle(rng):
    mask = (rng.random((4, 4)) > 0.5).astype(float)
    logits = 3.0 * rng.standard_normal((1, 4, 4))
    assert bce_loss(mask, logits) == pytest.approx(oracle_bce(mask, logits), rel=1e-9)


def test_bce_rejects_nonbinary_mask():
    with pytest.raises(ValueError):
        bce_loss(np.full((2, 2), 0.5), np.zeros((1, 2, 2)))


# --- total loss ---------------------------------------------------------------

def test_total_loss_lambda_zero_equals_bce(rng):
    mask = (rng.random((4, 4)) > 0.5).astype(float)
    student = rng.standard_normal((1, 4, 4))
    teacher = rng.standard_normal((1, 4, 4))
    out = total_loss(mask, teacher, student, LossConfig(kd_weight=0.0))
    assert out.total == bce_loss(mask, student)
    assert out.kd >= 0.0


def test_total_loss_components(rng):
    mask = (rng.random((4, 4)) > 0.5).astype(float)
    student = rng.standard_normal((1, 4, 4))
    teacher = rng.standard_normal((1, 4, 4))
    cfg = LossConfig(temperature=1.0, kd_weight=3.0, softmax_axis="spatial")
    out = total_loss(mask, teacher, student, cfg)
    assert isinstance(out, TotalLoss)
    assert out.ce == pytest.approx(bce_loss(mask, student), rel=1e-12)
    assert out.kd == pytest.approx(kd_loss_spatial(teacher, student, 1.0), rel=1e-12)
    assert out.total == pytest.approx(out.ce + 3.0 * out.kd, rel=1e-12)


def test_total_loss_at_confident_optimum(rng):
    mask = (rng.random((4, 4)) > 0.5).astype(float)
    student = np.where(mask > 0, 40.0, -40.0)[None]
    out = total_loss(mask, student, student, LossConfig())
    assert out.kd == pytest.approx(0.0, abs=1e-12)
    assert abs(out.total - out.ce) < 1e-6


# --- gradients (quick spot checks; the full sweep lives in acceptance) -------

def central_diff(fn, x, h=1e-4):
    grad = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        grad[idx] = (fn(xp) - fn(xm)) / (2 * h)
        it.iternext()
    return grad


def rel_err(a, b):
    denom = np.maximum(np.abs(a) + np.abs(b), 1e-8)
    return float(np.max(np.abs(a - b) / denom))


def test_kd_spatial_gradient(rng):
    t = rng.standard_normal((2, 3, 3))
    s = rng.standard_normal((2, 3, 3))
    _, grad = kd_loss_spatial_grad(t, s, tau=2.0)
    fd = central_diff(lambda z: kd_loss_spatial(t, z, tau=2.0), s)
    assert rel_err(grad, fd) < 1e-6


def test_bce_gradient(rng):
    mask = (rng.random((3, 3)) > 0.5).astype(float)
    s = rng.standard_normal((1, 3, 3))
    _, grad = bce_loss_grad(mask, s)
    fd = central_diff(lambda z: bce_loss(mask, z), s)
    assert rel_err(grad, fd) < 1e-6


def test_total_loss_gradient(rng):
    mask = (rng.random((3, 3)) > 0.5).astype(float)
    t = rng.standard_normal((1, 3, 3))
    s = rng.standard_normal((1, 3, 3))
    cfg = LossConfig(temperature=0.5, kd_weight=3.0)
    _, grad = total_loss_grad(mask, t, s, cfg)
    fd = central_diff(lambda z: total_loss(mask, t, z, cfg).total, s)
    assert rel_err(grad, fd) < 1e-6
