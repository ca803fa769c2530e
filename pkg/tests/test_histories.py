import logging
import math

import numpy as np
import pytest
from scipy.integrate import quad
from scipy.special import ellipeinc

from nlclab.errors import AnomalyBudgetError, GridError, ValidationFailure
from nlclab.physics.dynamics import Branch, combine, evolve_minus, evolve_plus, final_eigenbasis
from nlclab.physics.histories import (
    AnomalyParams,
    MicroHistory,
    RaisedCosineRamp,
    construct_history,
    mean_phase_anomaly_rate,
    net_phase_anomaly,
    parameterize,
    phase_uncertainty,
    ramp_phase_anomaly,
    reconstruct,
    special_state_frames,
)
from nlclab.physics.lagrangian import lagrangian_profile, nlc_residual, parametric_nlc_residual
from nlclab.physics.spin_algebra import SpinVector, build_spin_operators, eigenbasis
from tests.helpers import OMEGA, make_context, random_schedule, random_state


def _params(t0=1.0, omega=OMEGA, gamma_s=1e-3, delta_t=1e-3):
    return AnomalyParams(gamma_s=gamma_s, t0=t0, delta_t=delta_t, omega=omega)


def _simple_history(m=5, **overrides):
    fields = dict(
        times=np.linspace(0.0, 1.0, m),
        a=np.ones(m),
        alpha=np.full(m, 0.3),
        theta_offset=np.zeros(m),
        c=[1.0 + 0j],
        frames=np.eye(2),
        branch=Branch.PLUS,
        omega=OMEGA,
        t_ref=0.0,
    )
    fields.update(overrides)
    return MicroHistory(**fields)


def test_anomaly_params_collects_every_problem():
    with pytest.raises(ValidationFailure) as excinfo:
        AnomalyParams(gamma_s=-1.0, t0=0.0, delta_t=0.0, omega=1.0)
    message = str(excinfo.value)
    assert "gamma_s" in message and "t0" in message and "delta_t" in message


def test_anomaly_params_rejects_fast_regime():
    with pytest.raises(ValidationFailure, match="omega\\*t0"):
        AnomalyParams(gamma_s=0.0, t0=1e-4, delta_t=1e-5, omega=1e6)


def test_microhistory_validation():
    with pytest.raises(ValidationFailure, match="A must be positive"):
        _simple_history(a=np.zeros(5))
    with pytest.raises(ValidationFailure, match="c_j"):
        _simple_history(c=[0.5 + 0j])
    with pytest.raises(GridError):
        _simple_history(times=np.array([0.0, 0.5, 0.5, 0.7, 1.0]))
    with pytest.raises(ValidationFailure):
        _simple_history(branch=Branch.MIXED)


def test_coefficients_follow_the_parameterization():
    history = _simple_history(a=np.full(5, 2.0), theta_offset=np.full(5, 0.25))

    coeff = history.coefficients()

    expected = 2.0 * np.exp(0.25j) * np.array([math.cos(0.3), math.sin(0.3)])
    assert np.allclose(coeff, expected)
    states = reconstruct(history).states()
    phase = np.exp(-1j * OMEGA * history.times)[:, None]
    assert np.allclose(states, phase * expected)


def test_parameterize_round_trip_fixed_basis(rng):
    ctx = make_context(n=3, schedule=random_schedule(rng, 0.0, 1.0))
    traj = evolve_plus(ctx, SpinVector(random_state(rng, 3)), 0.0, 1.0, 500)
    _, basis = eigenbasis(build_spin_operators(3), rng.normal(size=3))

    history = parameterize(traj, basis)

    assert np.all((history.alpha >= 0) & (history.alpha <= math.pi / 2))
    assert np.allclose(reconstruct(history).states(), traj.states(), atol=1e-10)
    assert np.allclose(history.raw_states, traj.states())


def test_parameterize_against_special_states_is_static(rng):
    ctx = make_context(n=2, schedule=random_schedule(rng, 0.0, 1.0))
    traj = evolve_plus(ctx, SpinVector(random_state(rng, 2)), 0.0, 1.0, 1000)
    frames = special_state_frames(ctx, traj.times)

    history = parameterize(traj, frames)

    # The state and the frames obey the same ELE, so nothing moves.
    assert np.ptp(history.alpha) <= 1e-7
    assert np.ptp(history.theta_offset) <= 1e-7
    assert np.max(np.abs(history.c - history.c[0])) <= 1e-7


def test_parameterize_refuses_mixed_trajectories(rng):
    ctx = make_context()
    q0 = SpinVector.basis(2, 0)
    mixed = combine(evolve_plus(ctx, q0, 0.0, 1.0, 50), evolve_minus(ctx, q0, 0.0, 1.0, 50))
    with pytest.raises(ValidationFailure):
        parameterize(mixed, np.eye(2))


def test_special_state_frames(rng):
    ctx = make_context(n=3, schedule=random_schedule(rng, 0.0, 1.0))
    times = np.linspace(0.0, 1.0, 301)

    frames = special_state_frames(ctx, times)

    gram = np.einsum("mki,mkj->mij", frames.conj(), frames)
    assert np.allclose(gram, np.eye(3), atol=1e-8)
    _, vectors = final_eigenbasis(ctx, 1.0)
    assert np.allclose(frames[-1], vectors)


def test_special_state_frames_fall_back_to_stationary_basis():
    ctx = make_context(n=2)
    basis = np.array([[0.6, 0.8], [0.8, -0.6]], dtype=complex)

    frames = special_state_frames(ctx, np.linspace(0.0, 1.0, 4), basis)

    assert frames.shape == (4, 2, 2)
    assert np.allclose(frames, basis)


def test_ramp_anomaly_matches_elliptic_closed_form():
    omega, t0, delta = 1e3, 1.0, 50.0
    ramp = RaisedCosineRamp(0.0, delta, t0, omega)
    tau = np.linspace(0.0, t0, 201)

    got = ramp.cumulative_anomaly(tau)

    k = delta * math.pi / (2 * t0)
    exact = omega * tau - (t0 * omega / math.pi) * ellipeinc(math.pi * tau / t0, (k / omega) ** 2)
    assert np.allclose(got, exact, rtol=1e-9, atol=1e-12)


def test_ramp_rates_respect_the_phase_budget():
    ramp = RaisedCosineRamp(0.2, 1.4, 1.0, 30.0)
    tau = np.linspace(0.0, 1.0, 50)

    lhs = ramp.thetadot(tau) ** 2 + ramp.alphadot(tau) ** 2
    assert np.allclose(lhs, 30.0**2)
    assert ramp.alpha(np.array([0.0]))[0] == pytest.approx(0.2)
    assert ramp.alpha(np.array([1.0]))[0] == pytest.approx(1.4)


@pytest.mark.slow
@pytest.mark.parametrize("alpha_a", [-math.pi / 3, math.pi / 6, 2 * math.pi / 3, -7 * math.pi / 3])
def test_constructed_history_is_null_and_spends_expected_anomaly(alpha_a):
    ctx = make_context(n=2)
    p = _params()
    alpha_start = math.pi / 3

    history = construct_history(ctx, p, alpha_start, alpha_start + alpha_a, 2001)

    assert nlc_residual(ctx, history) <= 1e-6
    net = ramp_phase_anomaly(history)
    oracle, _ = quad(
        lambda s: RaisedCosineRamp(alpha_start, alpha_start + alpha_a, p.t0, p.omega).anomaly_rate(
            np.array([s])
        )[0],
        0.0,
        p.t0,
        epsabs=0.0,
        epsrel=1e-12,
    )
    assert net == pytest.approx(oracle, rel=1e-3)
    small = alpha_a**2 * math.pi**2 / (16 * p.omega * p.t0)
    assert net == pytest.approx(small, rel=1e-6)

    mean_rate = alpha_a / p.t0
    mean_square = alpha_a**2 * math.pi**2 / (8 * p.t0**2)
    sigma = math.sqrt(mean_square - mean_rate**2)
    assert net == pytest.approx(p.t0 * mean_phase_anomaly_rate(sigma, mean_rate, p.omega), rel=1e-6)


def test_constructed_history_matches_parametric_residual():
    ctx = make_context(n=2)
    p = _params()
    history = construct_history(ctx, p, 0.4, 1.1, 1001)
    ramp = RaisedCosineRamp(0.4, 1.1, p.t0, p.omega)

    times, q, qdot = reconstruct(history).samples()
    lag = lagrangian_profile(ctx, times, q, qdot)

    k = 500
    tau = np.array([times[k]])
    expected = -parametric_nlc_residual(
        p.omega, 1.0, 0.0, ramp.alphadot(tau)[0], ramp.thetadot(tau)[0]
    )
    assert lag[k] == pytest.approx(expected, abs=1e-6 * p.omega)


@pytest.mark.slow
def test_constructed_history_in_a_field_uses_special_states(rng):
    ctx = make_context(n=3, schedule=random_schedule(rng, 0.0, 1.0))

    history = construct_history(ctx, _params(), 0.2, math.pi / 2, 1001, c=[0.6, 0.8j])

    assert nlc_residual(ctx, history) <= 1e-6
    _, vectors = final_eigenbasis(ctx, 1.0)
    assert np.allclose(history.frames[-1], vectors)


def test_construct_history_guards():
    ctx = make_context()
    with pytest.raises(GridError):
        construct_history(ctx, _params(), 0.0, 1.0, 50)
    fast = _params(omega=1e3)
    with pytest.raises(AnomalyBudgetError):
        construct_history(make_context(omega=1e3), fast, 0.0, 700.0, 200)
    with pytest.raises(GridError):
        construct_history(ctx, _params(), 0.0, 1.0, 100, times=np.linspace(0.0, 0.5, 100))


def test_window_and_time_reversal():
    ctx = make_context(n=2, span=(-1.0, 1.0))
    p = _params(t0=2.0)
    history = construct_history(ctx, p, 0.3, 1.2, 401, t_start=-1.0)

    right = history.window(-1.0, 0.0)
    assert right.times[0] == -1.0 and right.times[-1] == pytest.approx(0.0, abs=1e-15)

    reversed_ = history.time_reversed()
    assert reversed_.branch is Branch.MINUS
    assert np.allclose(reversed_.times, -history.times[::-1])
    assert np.allclose(reconstruct(reversed_).states(), reconstruct(history).states()[::-1])

    again = reversed_.time_reversed()
    assert again.branch is Branch.PLUS
    assert np.allclose(reconstruct(again).states(), reconstruct(history).states())


def test_window_needs_two_points():
    with pytest.raises(GridError):
        _simple_history().window(0.1, 0.2)


def test_phase_anomaly_formulas():
    p = _params(gamma_s=0.01, t0=2.0, delta_t=1e-3, omega=1e6)

    assert net_phase_anomaly(0.5, p) == pytest.approx((0.01**2 + 0.25) / (2 * 1e6 * 2.0))
    assert phase_uncertainty(0.5, p) == pytest.approx(1e-3 * (0.01**2 + 0.25) / (2 * 1e6 * 4.0))
    assert mean_phase_anomaly_rate(3.0, 4.0, 1e3) == pytest.approx(25.0 / 2e3)


def test_mean_rate_refuses_large_anomalies():
    with pytest.raises(AnomalyBudgetError):
        mean_phase_anomaly_rate(0.0, 0.1 * 1e3, 1e3)
    with pytest.raises(ValidationFailure):
        mean_phase_anomaly_rate(0.0, 0.0, 0.0)


def test_phase_uncertainty_warns_for_wide_windows(caplog):
    p = _params(t0=1.0, delta_t=2.0)

    with caplog.at_level(logging.WARNING, logger="nlclab"):
        phase_uncertainty(0.1, p)

    assert "exceeds t0" in caplog.text
