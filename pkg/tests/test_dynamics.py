import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mantrack import constants as K
from mantrack.dynamics import (
    ForceModelConfig, InertialState, PropagationError, ThrustProfile, acceleration, moon_position,
    propagate, propagate_ensemble, ric_frame, stm_finite_difference, sun_position,
)
from mantrack.dynamics.gravity import j2_value

A = 7078.0
MU = K.MU_EARTH
V = math.sqrt(MU / A)
PERIOD = 2 * math.pi * math.sqrt(A**3 / MU)
CIRC = InertialState(np.array([A, 0, 0]), np.array([0, V, 0]))
INCL = InertialState(np.array([0.0, 5001.048, 5001.048]), np.array([-7.510139, 0, 0]))


def energy(x):
    return 0.5 * x[3:] @ x[3:] - MU / np.linalg.norm(x[:3])


def test_circular_orbit_returns_after_one_period():
    assert PERIOD == pytest.approx(5926.2, abs=0.1)
    tr = propagate(CIRC, None, PERIOD, ForceModelConfig.two_body(), tol=1e-12)
    x = tr.states[-1]
    assert np.linalg.norm(x[:3] - CIRC.r) < 1e-3
    assert np.linalg.norm(x[3:] - CIRC.v) < 1e-6


def test_zero_duration_is_identity():
    tr = propagate(CIRC, None, 0.0, ForceModelConfig.two_body())
    np.testing.assert_array_equal(tr.states[-1], CIRC.vector)


def test_energy_conserved_over_ten_orbits():
    tr = propagate(INCL, None, 10 * PERIOD, ForceModelConfig.two_body(), tol=1e-12)
    e0, e1 = energy(INCL.vector), energy(tr.states[-1])
    assert abs(e1 - e0) / abs(e0) < 1e-10


def test_short_radial_thrust_displacement():
    cfg = ForceModelConfig.two_body()
    th = ThrustProfile(np.array([0.0, 100.0]), np.array([[1e-7, 0, 0]]))
    a = propagate(CIRC, th, 100.0, cfg, tol=1e-13).states[-1]
    b = propagate(CIRC, None, 100.0, cfg, tol=1e-13).states[-1]
    assert np.linalg.norm(a[:3] - b[:3]) == pytest.approx(5e-4, rel=0.05)


def test_thrust_linearity_at_short_horizon():
    cfg = ForceModelConfig.two_body()
    base = propagate(CIRC, None, 300.0, cfg, tol=1e-13).states[-1]
    dev = []
    for s in (1.0, 2.0):
        th = ThrustProfile(np.array([0.0, 300.0]), np.array([[0, s * 1e-7, 0]]))
        dev.append(np.linalg.norm(propagate(CIRC, th, 300.0, cfg, tol=1e-13).states[-1][:3] - base[:3]))
    assert dev[1] / dev[0] == pytest.approx(2.0, rel=0.01)


def test_segment_boundaries_appear_once():
    th = ThrustProfile(np.array([0.0, 100.0, 250.0, 400.0]), np.full((3, 3), 1e-8))
    tr = propagate(CIRC, th, 400.0, ForceModelConfig.two_body(), epochs=[100.0, 300.0])
    for b in th.bounds:
        assert np.sum(np.isclose(tr.epochs, b)) == 1
    assert np.all(np.diff(tr.epochs) > 0)


def test_impact_is_reported():
    fall = InertialState(np.array([K.R_EARTH + 100.0, 0, 0]), np.array([-1.0, 0.5, 0]))
    with pytest.raises(PropagationError, match="impact"):
        propagate(fall, None, 3600.0, ForceModelConfig.two_body())


def test_ensemble_marks_failures_per_particle():
    X = np.vstack([CIRC.vector, [K.R_EARTH + 100.0, 0, 0, -1.0, 0.5, 0]])
    _, S, status = propagate_ensemble(X, 0.0, [3600.0], ForceModelConfig.two_body())
    assert status[0] == 0 and status[1] != 0


def test_ensemble_matches_single_propagation():
    cfg = ForceModelConfig.high_fidelity(4)
    th = ThrustProfile(np.array([0.0, 500.0, 1200.0]), np.array([[1e-7, 2e-7, 0], [0, -1e-7, 3e-8]]))
    single = propagate(INCL, th, 1200.0, cfg, tol=1e-12).states[-1]
    _, S, _ = propagate_ensemble(np.vstack([INCL.vector] * 3), 0.0, [1200.0], cfg,
                                 accel=th.accel[None], bounds=th.bounds, tol=1e-12)
    np.testing.assert_allclose(S[:, -1], np.broadcast_to(single, (3, 6)), rtol=0, atol=1e-6)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e4, 1e4), min_size=6, max_size=6))
def test_ric_frame_is_orthonormal(v):
    x = np.array(v)
    x[:3] += np.array([7000.0, 0, 0])
    x[3:] = x[3:] * 1e-3 + np.array([0, 7.5, 0.1])
    R = ric_frame(InertialState.from_vector(x))
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-13)
    assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-12)


def test_j2_acceleration_matches_closed_form():
    cfg = ForceModelConfig.low_fidelity()
    r = np.array([4000.0, 3000.0, 5000.0])
    a = acceleration(InertialState(r, np.zeros(3)), cfg)
    rn = np.linalg.norm(r)
    z2 = (r[2] / rn) ** 2
    k = 1.5 * j2_value() * MU * K.R_EARTH**2 / rn**5
    expect = -MU * r / rn**3 + k * np.array([r[0] * (5 * z2 - 1), r[1] * (5 * z2 - 1), r[2] * (5 * z2 - 3)])
    np.testing.assert_allclose(a, expect, rtol=1e-12)


def test_degree_two_harmonics_agree_with_j2_model():
    r = np.array([4000.0, 3000.0, 5000.0])
    st_ = InertialState(r, np.zeros(3))
    zonal = ForceModelConfig(gravity_degree=2, gravity_order=0)
    j2 = ForceModelConfig.low_fidelity()
    np.testing.assert_allclose(acceleration(st_, zonal), acceleration(st_, j2), rtol=1e-9)


def test_ephemerides_distances():
    s = np.linalg.norm(sun_position(K.EPOCH_JD))
    m = np.linalg.norm(moon_position(K.EPOCH_JD))
    assert 0.98 * K.AU_KM < s < 1.02 * K.AU_KM
    assert 356000 < m < 407000


def test_stm_identity_at_start():
    F = stm_finite_difference(CIRC, None, [0.0], ForceModelConfig.two_body(), np.full(6, 1e-3))
    np.testing.assert_array_equal(F[0], np.eye(6))


def test_stm_short_step_matches_two_body_jacobian():
    x = INCL.vector
    dt = 1.0
    F = stm_finite_difference(INCL, None, [dt], ForceModelConfig.two_body(),
                              np.array([1e-3] * 3 + [1e-6] * 3), tol=1e-13)[0]
    r = x[:3]
    rn = np.linalg.norm(r)
    G = MU * (3 * np.outer(r, r) / rn**5 - np.eye(3) / rn**3)
    Amat = np.block([[np.zeros((3, 3)), np.eye(3)], [G, np.zeros((3, 3))]])
    # second-order term keeps the first-order oracle honest at the 1e-6 level
    np.testing.assert_allclose(F, np.eye(6) + dt * Amat + 0.5 * dt**2 * Amat @ Amat, atol=1e-6)


def test_stm_determinant_is_one_for_conservative_dynamics():
    F = stm_finite_difference(INCL, None, [PERIOD], ForceModelConfig.low_fidelity(),
                              np.array([1e-3] * 3 + [1e-6] * 3), tol=1e-13)[0]
    assert np.linalg.det(F) == pytest.approx(1.0, abs=1e-6)


def test_bad_steps_rejected():
    with pytest.raises(ValueError):
        stm_finite_difference(CIRC, None, [10.0], ForceModelConfig.two_body(), np.zeros(6))


def test_thrust_profile_validation():
    with pytest.raises(ValueError):
        ThrustProfile(np.array([0.0, 10.0]), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        ThrustProfile(np.array([0.0, 0.0]), np.zeros((1, 3)))
    with pytest.raises(ValueError):
        ThrustProfile(np.array([0.0, 1.0]), np.zeros((1, 3)), frame="body")


def test_thrust_window_splits_segments():
    th = ThrustProfile(np.array([0.0, 10.0, 20.0]), np.array([[1.0, 0, 0], [2.0, 0, 0]]))
    w = th.window(5.0, 15.0)
    np.testing.assert_array_equal(w.bounds, [5.0, 10.0, 15.0])
    np.testing.assert_array_equal(w.accel[:, 0], [1.0, 2.0])
