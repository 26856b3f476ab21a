import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import least_squares
from scipy.spatial.transform import Rotation

from gammaseek.kinematics import ProbePose
from gammaseek.lsq import ConvergenceError
from gammaseek.radiation import (
    REFERENCE_FIT,
    CalibrationFileError,
    CalibrationProtocol,
    CalibrationSet,
    Measurement,
    ResponseParams,
    SourceTarget,
    expected_cps,
    fit_response,
    generate_calibration_grid,
    geometric_term,
    geometric_term_dd,
    poisson_rate,
    read_calibration_file,
    response,
    sample_cps,
    scale_function,
    scale_function_dalpha,
    write_calibration_file,
)

P = ResponseParams()


def pose(tip=(0.0, 0.0, 0.0), axis=(0.0, 0.0, 1.0)):
    return ProbePose(np.array(tip, float), np.array(axis, float), np.array([0.0, 0.0, 0.0, 1.0]))


def test_scale_function_branches():
    assert scale_function(0.0, P.r, P.l) == 1.0
    bp = math.atan(2 * P.r / P.l)
    assert scale_function(bp, P.r, P.l) == 1.0
    # second branch evaluated by hand: 2 r / (l tan a)
    assert scale_function(math.radians(45.0), 10.0, 26.50) == pytest.approx(20.0 / 26.50, rel=1e-12)
    assert abs(scale_function(math.radians(45.0), 10.0, 26.50) - 0.7547) < 1e-4


def test_scale_function_continuity_dense_sweep():
    alpha = np.linspace(0.0, math.pi / 2 - 1e-9, 2_000_001)
    f = scale_function(alpha, P.r, P.l)
    assert np.all((f > 0) & (f <= 1.0))
    # the largest jump drops to zero with the step: no discontinuity anywhere
    bp = P.breakpoint
    eps = 1e-12
    for a0 in (bp, np.radians(85.0)):
        assert abs(scale_function(a0 + eps, P.r, P.l) - scale_function(a0 - eps, P.r, P.l)) < 1e-9


def test_scale_function_behind_face_is_floor():
    assert scale_function(math.pi / 2, P.r, P.l) == 0.0
    assert scale_function(2.0, P.r, P.l, floor=0.01) == 0.01
    assert np.isfinite(scale_function(np.linspace(0, math.pi, 101), P.r, P.l)).all()


def test_scale_function_derivative_matches_finite_differences():
    rng = np.random.default_rng(0)
    alpha = rng.uniform(0.0, math.pi / 2 - 1e-3, 1000)
    alpha = alpha[np.abs(alpha - P.breakpoint) > 1e-4]
    alpha = alpha[np.abs(alpha - np.radians(85.0)) > 1e-4]
    h = 1e-6
    fd = (scale_function(alpha + h, P.r, P.l) - scale_function(alpha - h, P.r, P.l)) / (2 * h)
    np.testing.assert_allclose(scale_function_dalpha(alpha, P.r, P.l), fd, rtol=1e-5, atol=1e-8)


def test_expected_cps_reference_value():
    params = ResponseParams(r=6.7, l=26.50, c1=173.78, c2=0.29)
    value = expected_cps(params, pose(), SourceTarget([0.0, 0.0, params.r]))
    assert value == pytest.approx(173.78 * 0.5 * (1 - 1 / math.sqrt(2)) + 0.29, rel=1e-12)
    assert abs(value - 25.74) < 5e-3


def test_expected_cps_far_field_limit():
    far = expected_cps(P, pose(), SourceTarget([0.0, 0.0, 1e6 * P.r]))
    assert abs(far - P.c2) < 1e-6
    assert far >= P.c2


def test_expected_cps_singular_at_tip():
    with pytest.raises(ValueError):
        expected_cps(P, pose(), SourceTarget([0.0, 0.0, 0.0]))


def test_doubling_distance_decreases_reading():
    rng = np.random.default_rng(1)
    for _ in range(200):
        d = rng.uniform(0.5, 200.0)
        a = rng.uniform(0.0, math.radians(80.0))
        assert response(2 * d, a, P) < response(d, a, P)


def test_distance_derivative_matches_finite_differences():
    rng = np.random.default_rng(2)
    d = rng.uniform(1.0, 300.0, 1000)
    h = 1e-5 * d
    fd = (geometric_term(d + h, P.r) - geometric_term(d - h, P.r)) / (2 * h)
    an = geometric_term_dd(d, P.r)
    assert np.all(an < 0)
    np.testing.assert_allclose(an, fd, rtol=1e-4)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_rigid_motion_invariance(seed):
    rng = np.random.default_rng(seed)
    tip = rng.normal(0, 50, 3)
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    src = tip + rng.normal(0, 40, 3)
    R = Rotation.random(random_state=seed % (2**31))
    t = rng.normal(0, 100, 3)
    a = expected_cps(P, pose(tip, axis), SourceTarget(src))
    b = expected_cps(P, pose(R.apply(tip) + t, R.apply(axis)), SourceTarget(R.apply(src) + t))
    assert abs(a - b) < 1e-9
    assert a >= P.c2


def test_poisson_sampling_statistics():
    rng = np.random.default_rng(3)
    n = 100_000
    src = SourceTarget([0.0, 0.0, 1e9])
    draws = np.array([sample_cps(P, pose(), src, rng) for _ in range(2000)])
    assert np.all(draws == np.round(draws)) and np.all(draws >= 0)
    many = poisson_rate(np.full(n, 0.29), np.random.default_rng(4))
    assert abs(many.mean() - 0.29) < 3 * math.sqrt(0.29) / math.sqrt(n)


def test_poisson_sampling_deterministic_and_concentrates():
    src = SourceTarget([0.0, 0.0, 20.0])
    a = [sample_cps(P, pose(), src, np.random.default_rng(7)) for _ in range(3)]
    assert a[0] == a[1] == a[2]
    mean = expected_cps(P, pose(), src)
    long = sample_cps(P, pose(), src, np.random.default_rng(8), dwell=1e6)
    assert abs(long - mean) / mean < 5 / math.sqrt(mean * 1e6)


def test_protocol_grid_layout():
    data = generate_calibration_grid(P, CalibrationProtocol(noise="none"))
    assert len(data) == 40
    d, alpha, cps = data.valid_arrays()
    for m in data.measurements:
        assert m.cps == pytest.approx(float(response(m.d, m.alpha, P)), rel=0, abs=0)


def test_unreadable_points_are_the_far_oblique_corner():
    data = generate_calibration_grid(P, CalibrationProtocol(noise="none"))
    invalid = [(round(m.d * math.cos(m.alpha), 6), round(m.d * math.sin(m.alpha), 6)) for m, ok in zip(data.measurements, data.valid) if not ok]
    # predicted from the model: the readability threshold fails only at the deepest row, off axis
    expected = []
    for v, h in CalibrationProtocol().points():
        if response(math.hypot(v, h), math.atan2(h, v), P) < P.c2 + 1.0:
            expected.append((v, h))
    assert sorted(invalid) == sorted(expected)
    assert len(invalid) == 4
    assert all(v == 45.0 for v, _ in invalid)


def _scipy_fit(data, r, x0):
    d, alpha, cps = data.valid_arrays()

    def resid(x):
        return response(d, alpha, ResponseParams(r=r, l=x[0], c1=x[1], c2=x[2])) - cps

    return least_squares(resid, x0, bounds=([1e-6, 0, 0], [np.inf] * 3), xtol=1e-15, ftol=1e-15, gtol=1e-15).x


def test_noiseless_fit_recovers_parameters():
    data = generate_calibration_grid(P, CalibrationProtocol(noise="none"))
    params, report = fit_response(data, r=P.r)
    for k in ("l", "c1", "c2"):
        assert getattr(params, k) == pytest.approx(REFERENCE_FIT[k], rel=1e-6)
    assert report.r_squared == pytest.approx(1.0, abs=1e-12)


def test_noisy_fit_agrees_with_scipy_oracle():
    # The objective has kinks where a grid point sits on the efficiency
    # breakpoint, so the oracle compares residuals rather than parameters.
    for seed in range(20):
        data = generate_calibration_grid(P, CalibrationProtocol(), np.random.default_rng(seed))
        d, alpha, cps = data.valid_arrays()
        params, report = fit_response(data, r=P.r)
        ref = _scipy_fit(data, P.r, (20.0, 100.0, 1.0))
        ours = float(((response(d, alpha, params) - cps) ** 2).sum())
        theirs = float(((response(d, alpha, ResponseParams(P.r, *ref)) - cps) ** 2).sum())
        assert ours <= theirs * (1 + 1e-4)
        assert report.rmse == pytest.approx(math.sqrt(ours / d.size), rel=1e-12)


def test_fit_is_order_invariant():
    data = generate_calibration_grid(P, CalibrationProtocol(), np.random.default_rng(11))
    perm = np.random.default_rng(12).permutation(len(data))
    shuffled = CalibrationSet([data.measurements[i] for i in perm], [data.valid[i] for i in perm], [data.n_samples[i] for i in perm])
    a, _ = fit_response(data, r=P.r)
    b, _ = fit_response(shuffled, r=P.r)
    assert (a.l, a.c1, a.c2) == (b.l, b.c1, b.c2)


def test_fit_errors():
    few = CalibrationSet([Measurement(10.0, 0.0, 5.0)] * 5, [True] * 5, [1] * 5)
    with pytest.raises(ValueError):
        fit_response(few)
    flat = CalibrationSet([Measurement(5.0 + i, 0.0, 3.0) for i in range(10)], [True] * 10, [1] * 10)
    with pytest.raises(ValueError):
        fit_response(flat)
    data = generate_calibration_grid(P, CalibrationProtocol(), np.random.default_rng(0))
    with pytest.raises(ConvergenceError):
        fit_response(data, max_iter=1)


def test_calibration_file_round_trip(tmp_path):
    data = generate_calibration_grid(P, CalibrationProtocol(), np.random.default_rng(5))
    path = tmp_path / "cal.csv"
    write_calibration_file(path, data)
    back = read_calibration_file(path)
    assert [m.cps for m in back.measurements] == [m.cps for m in data.measurements]
    assert back.valid == data.valid
    np.testing.assert_allclose([m.alpha for m in back.measurements], [m.alpha for m in data.measurements], rtol=1e-15)


def test_calibration_file_error_names_line(tmp_path):
    lines = ["# header"] + [f"{5 * i}, 0, 10, 10, 1" for i in range(1, 6)] + ["10, zero, 3, 10, 1"]
    path = tmp_path / "bad.csv"
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(CalibrationFileError) as exc:
        read_calibration_file(path)
    assert exc.value.line == 7
    assert "line 7" in str(exc.value)
