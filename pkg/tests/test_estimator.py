import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gammaseek.kinematics import ProbePose
from gammaseek.estimator import (
    MIN_SAMPLES,
    HistoryBuffer,
    UnobservableError,
    confidence_score,
    estimate_target,
    model_and_jacobian,
    relative_angle,
)
from gammaseek.radiation import ResponseParams, response

P = ResponseParams()
QUAT = np.array([0.0, 0.0, 0.0, 1.0])


def random_history(rng, source, n=40, activity=1.0, noise=False):
    h = HistoryBuffer(n)
    for k in range(n):
        tip = source + rng.normal(0, 15, 3) + [0, 0, 40]
        to_src = source - tip
        axis = to_src / np.linalg.norm(to_src) + rng.normal(0, 0.4, 3)
        axis /= np.linalg.norm(axis)
        d = np.linalg.norm(to_src)
        a = math.acos(np.clip(axis @ to_src / d, -1, 1))
        mean = float(response(d, a, P, activity))
        cps = float(rng.poisson(mean)) if noise else mean
        h.append(ProbePose(tip, axis, QUAT), cps, k)
    return h


def test_prediction_matches_response_model():
    rng = np.random.default_rng(0)
    src = rng.normal(0, 20, (4, 3))
    tips = rng.normal(0, 40, (4, 30, 3))
    axes = rng.normal(size=(4, 30, 3))
    axes /= np.linalg.norm(axes, axis=-1, keepdims=True)
    act = np.array([1.0, 2.0, 0.5, 100.0])
    pred, _, dact = model_and_jacobian(src, tips, axes, P, act)
    v = src[:, None] - tips
    d = np.linalg.norm(v, axis=-1)
    alpha = np.arccos(np.clip((axes * v).sum(-1) / d, -1, 1))
    for b in range(4):
        np.testing.assert_allclose(pred[b], response(d[b], alpha[b], P, act[b]), rtol=1e-12)
        np.testing.assert_allclose(dact[b], (pred[b] - P.c2) / act[b], rtol=1e-12)


def test_jacobian_matches_central_differences():
    rng = np.random.default_rng(1)
    src = rng.normal(0, 20, (1, 3))
    tips = rng.normal(0, 40, (1, 200, 3))
    axes = rng.normal(size=(1, 200, 3))
    axes /= np.linalg.norm(axes, axis=-1, keepdims=True)
    act = np.array([3.0])
    _, grad, _ = model_and_jacobian(src, tips, axes, P, act)
    h = 1e-6
    fd = np.zeros_like(grad)
    for k in range(3):
        e = np.zeros((1, 3))
        e[0, k] = h
        fd[..., k] = (model_and_jacobian(src + e, tips, axes, P, act)[0] - model_and_jacobian(src - e, tips, axes, P, act)[0]) / (2 * h)
    # rows sitting right on a branch point of the efficiency curve are skipped
    v = src[:, None] - tips
    alpha = np.arccos(np.clip((axes * v).sum(-1) / np.linalg.norm(v, axis=-1), -1, 1))
    smooth = (np.abs(alpha - P.breakpoint) > 1e-4) & (np.abs(alpha - math.radians(85)) > 1e-4)
    np.testing.assert_allclose(grad[smooth], fd[smooth], rtol=1e-5, atol=1e-7)


def test_noiseless_fit_recovers_source():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        src = rng.normal(0, 10, 3)
        h = random_history(rng, src)
        est = estimate_target(h, P, src + rng.normal(0, 5, 3))
        assert est.converged
        assert np.linalg.norm(est.position - src) < 1e-4
        assert est.confidence == 1.0


def test_noisy_fit_is_close_and_confidence_near_one():
    errs = []
    for seed in range(10):
        rng = np.random.default_rng(100 + seed)
        src = rng.normal(0, 10, 3)
        h = random_history(rng, src, n=80, activity=50.0, noise=True)
        est = estimate_target(h, P, src + rng.normal(0, 5, 3), activity_scale=50.0)
        errs.append(np.linalg.norm(est.position - src))
        assert est.rmse < 1.6
    assert np.median(errs) < 2.0


def test_relative_angle_uses_given_pose():
    rng = np.random.default_rng(2)
    src = np.zeros(3)
    h = random_history(rng, src)
    pose = ProbePose(np.array([0.0, 0.0, 30.0]), np.array([0.0, 0.0, -1.0]), QUAT)
    est = estimate_target(h, P, src + 1.0, pose=pose)
    assert est.relative_angle == pytest.approx(relative_angle(pose, est.position), abs=1e-12)
    assert est.relative_angle < 1e-4
    np.testing.assert_allclose(est.direction, [0, 0, -1], atol=1e-4)


def test_unobservable_cases():
    rng = np.random.default_rng(3)
    with pytest.raises(UnobservableError):
        estimate_target(random_history(rng, np.zeros(3), n=MIN_SAMPLES - 1), P, np.zeros(3))
    flat = HistoryBuffer(20)
    same = HistoryBuffer(20)
    for k in range(20):
        tip = rng.normal(0, 10, 3)
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        flat.append(ProbePose(tip, axis, QUAT), 4.0, k)
        same.append(ProbePose(tip, np.array([0.0, 0.0, -1.0]), QUAT), float(k), k)
    with pytest.raises(UnobservableError):
        estimate_target(flat, P, np.zeros(3))
    with pytest.raises(UnobservableError):
        estimate_target(same, P, np.zeros(3))


def test_non_converged_fit_falls_back_to_guess():
    rng = np.random.default_rng(4)
    h = random_history(rng, np.zeros(3))
    guess = np.array([30.0, -20.0, 10.0])
    est = estimate_target(h, P, guess, max_iter=1)
    assert not est.converged
    np.testing.assert_array_equal(est.position, guess)
    assert est.confidence == 0.0


@given(st.floats(0, 1e6, allow_nan=False))
def test_confidence_score_range(rmse):
    c = confidence_score(rmse)
    assert 0.0 < c <= 1.0
    assert confidence_score(float("nan")) == 0.0
    assert confidence_score(float("inf")) == 0.0


def test_history_buffer_ring_and_order():
    h = HistoryBuffer(3)
    pose = ProbePose(np.zeros(3), np.array([0.0, 0.0, 1.0]), QUAT)
    for k in range(5):
        h.append(pose, float(k), k)
    assert len(h) == 3
    assert [s.step for s in h] == [2, 3, 4]
    tips, axes, cps = h.arrays()
    assert tips.shape == (3, 3) and axes.shape == (3, 3)
    np.testing.assert_array_equal(cps, [2.0, 3.0, 4.0])
    with pytest.raises(ValueError):
        h.append(pose, 0.0, 1)
    with pytest.raises(ValueError):
        HistoryBuffer(0)
    empty = HistoryBuffer(2).arrays()
    assert empty[0].shape == (0, 3) and empty[2].shape == (0,)


def test_history_copies_inputs():
    h = HistoryBuffer(2)
    tip = np.zeros(3)
    h.append(ProbePose(tip, np.array([0.0, 0.0, 1.0]), QUAT), 1.0, 0)
    tip[0] = 99.0
    assert next(iter(h)).tip[0] == 0.0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_batched_rows_are_independent(seed):
    rng = np.random.default_rng(seed)
    src = rng.normal(0, 20, (3, 3))
    tips = rng.normal(0, 40, (3, 12, 3))
    axes = rng.normal(size=(3, 12, 3))
    axes /= np.linalg.norm(axes, axis=-1, keepdims=True)
    act = rng.uniform(0.5, 5, 3)
    pred, grad, _ = model_and_jacobian(src, tips, axes, P, act)
    for b in range(3):
        p1, g1, _ = model_and_jacobian(src[b : b + 1], tips[b : b + 1], axes[b : b + 1], P, act[b : b + 1])
        np.testing.assert_array_equal(p1[0], pred[b])
        np.testing.assert_array_equal(g1[0], grad[b])
