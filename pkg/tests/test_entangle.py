import json
import math

import numpy as np
import pytest

from nlclab.config import parse_config
from nlclab.errors import ExperimentShapeError, GridError, InvalidOutcomeError
from nlclab.physics.born import born_probability, outcome_distribution
from nlclab.physics.dynamics import Branch, evolve_minus, evolve_plus
from nlclab.physics.entangle import (
    CANONICAL_SETTINGS,
    DualExperiment,
    JointOutcome,
    PhaseMarker,
    best_guess_left,
    check_m3,
    chsh,
    chsh_combination,
    correlation,
    dual_trajectories,
    dualize,
    hidden_history,
    joint_probabilities,
    joint_table,
    marginals,
    sample_joint_outcomes,
    sampled_chsh,
    sampled_correlations,
    setting_pairs,
    undualize,
)
from nlclab.physics.lagrangian import nlc_residual
from nlclab.physics.spin_algebra import SpinVector
from tests.helpers import random_state, tilted_config


def _symmetric_config(alpha0=math.pi / 8, **overrides):
    data = tilted_config(alpha=alpha0, **overrides)
    data["preparation"]["time"] = -1.0
    return parse_config(json.dumps(data))


# -- outcomes -------------------------------------------------------------------


def test_joint_outcome_parse_and_label():
    outcome = JointOutcome.parse("+-")
    assert (outcome.left, outcome.right) == (1, -1)
    assert outcome.label == "+-"


@pytest.mark.parametrize("label", ["+", "+0", "++-", "ab", ""])
def test_joint_outcome_parse_rejects_bad_labels(label):
    with pytest.raises(InvalidOutcomeError):
        JointOutcome.parse(label)


def test_joint_outcome_rejects_bad_values():
    with pytest.raises(InvalidOutcomeError):
        JointOutcome(0, 1)


# -- joint statistics -----------------------------------------------------------


def test_joint_table_order_and_values():
    table = joint_table(math.pi / 8, 0.0)
    b = math.cos(math.pi / 8) ** 2

    assert [o.label for o in table] == ["++", "+-", "-+", "--"]
    assert [o.prob for o in table] == pytest.approx([b / 2, (1 - b) / 2, (1 - b) / 2, b / 2])


@pytest.mark.parametrize("gamma_s", [0.0, 0.1])
def test_marginals_are_unbiased(rng, gamma_s):
    for _ in range(20):
        alpha0 = float(rng.uniform(-math.pi, math.pi))
        m = marginals(joint_table(alpha0, gamma_s))
        assert m["left"][0] == pytest.approx(0.5, abs=1e-12)
        assert m["right"][0] == pytest.approx(0.5, abs=1e-12)


@pytest.mark.parametrize("gamma_s", [0.0, 0.05, 0.3])
def test_correlation_closed_form(gamma_s):
    for alpha0 in (0.1, math.pi / 8, 0.9, 1.4):
        expected = math.cos(2 * alpha0) / math.cosh(2 * gamma_s)
        assert correlation(alpha0, gamma_s) == pytest.approx(expected, abs=1e-12)


def test_chsh_reaches_tsirelson_bound_at_canonical_settings():
    assert chsh(CANONICAL_SETTINGS, 0.0) == pytest.approx(2 * math.sqrt(2), abs=1e-9)


def test_chsh_is_damped_by_anomaly_scale():
    assert chsh(CANONICAL_SETTINGS, 0.2) == pytest.approx(
        2 * math.sqrt(2) / math.cosh(0.4), abs=1e-9
    )


def test_setting_pairs_and_combination():
    assert setting_pairs([1, 2, 3, 4]) == ((1.0, 3.0), (1.0, 4.0), (2.0, 3.0), (2.0, 4.0))
    assert chsh_combination([0.5, 0.5, 0.5, -0.5]) == pytest.approx(2.0)


def test_joint_probabilities_of_a_dual_experiment():
    exp = DualExperiment.for_alpha0(0.3, 0.05)
    table = joint_probabilities(exp)
    assert table[0].prob == pytest.approx(0.5 * born_probability(0.3, 0.05))


@pytest.mark.parametrize("gamma_s", [0.0, 0.05])
def test_conditional_distribution_matches_one_particle_outcomes(gamma_s):
    for alpha0 in np.linspace(0.05, 1.5, 12):
        exp = DualExperiment.for_alpha0(float(alpha0), gamma_s)
        table = {(o.left, o.right): o.prob for o in joint_probabilities(exp)}
        matching = table[(1, 1)] + table[(-1, 1)]
        conditional = (table[(1, 1)] / matching, table[(-1, 1)] / matching)

        one_particle = outcome_distribution(undualize(exp))

        assert conditional == pytest.approx(one_particle.probs, abs=1e-12)


# -- sampling -----------------------------------------------------------------


def test_sampled_joint_frequencies_track_the_table():
    n = 100_000
    outcomes, counts = sample_joint_outcomes(math.pi / 8, 0.0, n, seed=21)

    assert sum(counts) == n
    exact = joint_table(math.pi / 8, 0.0)
    for got, want in zip(outcomes, exact):
        se = math.sqrt(want.prob * (1 - want.prob) / n)
        assert abs(got.prob - want.prob) <= 5 * se
    m = marginals(outcomes)
    assert m["right"][0] == pytest.approx(0.5, abs=5 * math.sqrt(0.25 / n))


def test_sampled_correlations_are_worker_independent():
    one = sampled_correlations(CANONICAL_SETTINGS, 0.0, 70_000, seed=4, workers=1)
    two = sampled_correlations(CANONICAL_SETTINGS, 0.0, 70_000, seed=4, workers=2)
    assert one == two


@pytest.mark.slow
def test_sampled_chsh_violates_the_classical_bound():
    value = sampled_chsh(CANONICAL_SETTINGS, 0.0, 1_000_000, seed=5, workers=4)
    assert value > 2.7


# -- dual construction ----------------------------------------------------------


def test_dualize_reads_alpha0_from_axes():
    exp = dualize(_symmetric_config(alpha0=math.pi / 8))

    assert isinstance(exp, DualExperiment)
    assert exp.alpha0 == pytest.approx(math.pi / 8)
    assert exp.t_f == 1.0
    assert exp.theta_i is PhaseMarker.CONSTRAINED_UNKNOWN
    assert exp.theta_f is PhaseMarker.CONSTRAINED_UNKNOWN


def test_dualize_round_trip():
    cfg = _symmetric_config(schedule=[{"t_start": -1.0, "t_end": 1.0, "b_start": [0.5, 0.0, 1.0]}])

    assert undualize(dualize(cfg)).model_dump() == cfg.model_dump()


def test_dualize_rejects_asymmetric_times():
    cfg = parse_config(json.dumps(tilted_config()))
    with pytest.raises(ExperimentShapeError):
        dualize(cfg)
    with pytest.raises(ExperimentShapeError):
        dualize("not an experiment")


def test_dual_experiment_needs_axes_in_xz_plane():
    with pytest.raises(ExperimentShapeError):
        DualExperiment((0.0, 1.0, 0.0), (0.0, 0.0, 1.0), 0, 1.0, 0.0, 1e6, 1.0, 1e-3)


def test_right_particle_sees_mirrored_field():
    cfg = _symmetric_config(
        schedule=[
            {"t_start": -1.0, "t_end": 0.0, "b_start": [1.0, 0.0, 0.0]},
            {"t_start": 0.0, "t_end": 1.0, "b_start": [0.0, 0.0, 2.0]},
        ]
    )
    exp = dualize(cfg)

    assert list(exp.left_schedule.field_at(0.5)) == pytest.approx([0.0, 0.0, 2.0])
    assert list(exp.right_schedule.field_at(0.5)) == pytest.approx([-1.0, 0.0, 0.0])


def test_dual_trajectories_meet_at_the_junction():
    cfg = _symmetric_config(
        schedule=[{"t_start": -1.0, "t_end": 1.0, "b_start": [0.5, 0.0, 1.0]}]
    )
    exp = dualize(cfg)

    left, right = dual_trajectories(exp, steps=1000)

    assert left.branch is Branch.PLUS and right.branch is Branch.MINUS
    assert check_m3(left, right, exp.omega).passed


_FIELD = [
    {"t_start": -1.0, "t_end": 1.0, "b_start": [0.5, 0.0, 1.0], "b_end": [0.0, 0.3, 1.5]}
]


def _junction_state(exp, steps):
    ctx = exp.one_particle_context()
    return evolve_plus(ctx, exp.m1_state(), -exp.t_f, 0.0, steps).endpoint


def test_right_particle_is_the_time_reversed_one_particle_history():
    exp = dualize(_symmetric_config(schedule=_FIELD))
    steps = 2000

    one_particle = evolve_plus(exp.one_particle_context(), exp.m1_state(), -1.0, 0.0, steps)
    left, right = dual_trajectories(exp, steps=steps)

    assert np.allclose(right.times, -one_particle.times[::-1], rtol=0.0, atol=1e-12)
    assert np.max(np.abs(right.states() - one_particle.states()[::-1])) <= 1e-8
    assert np.allclose(left.start.amps, one_particle.endpoint.amps, atol=1e-12)


def test_independent_trajectories_fail_the_junction(rng):
    exp = dualize(_symmetric_config(schedule=_FIELD))
    left, _ = dual_trajectories(exp, steps=1000)
    stranger = SpinVector(random_state(rng, 2))

    right = evolve_minus(exp.right_context(), stranger, 0.0, exp.t_f, 1000)
    check = check_m3(left, right, exp.omega)

    assert not check.passed
    assert check.state_residual > 1e-3


def test_junction_residual_is_linear_in_the_mismatch():
    exp = dualize(_symmetric_config(schedule=_FIELD))
    left, _ = dual_trajectories(exp, steps=1000)
    q_mid = _junction_state(exp, 1000)
    direction = np.array([1.0, 1j]) / math.sqrt(2.0)

    epsilons = np.array([1e-3, 1e-4, 1e-5])
    residuals = []
    for eps in epsilons:
        shifted = SpinVector(q_mid.amps + eps * direction)
        right = evolve_minus(exp.right_context(), shifted, 0.0, exp.t_f, 1000)
        check = check_m3(left, right, exp.omega)
        assert not check.passed
        assert check.derivative_residual == pytest.approx(eps, rel=1e-2)
        residuals.append(check.state_residual)

    assert residuals == pytest.approx(list(epsilons), rel=1e-3)
    slope = np.polyfit(np.log(epsilons), np.log(residuals), 1)[0]
    assert slope == pytest.approx(1.0, abs=1e-3)


def test_left_best_guess_overlap_is_the_one_particle_probability():
    cfg = _symmetric_config(alpha0=0.4, gamma_s=0.0, schedule=_FIELD)
    exp = dualize(cfg)
    q_mid = _junction_state(exp, cfg.steps)
    expected = outcome_distribution(undualize(exp)).probs

    for k, left_outcome in enumerate((1, -1)):
        guess = best_guess_left(exp, left_outcome)
        assert guess.times[0] == 0.0
        overlap = abs(np.vdot(guess.start.amps, q_mid.amps)) ** 2
        assert overlap == pytest.approx(expected[k], abs=1e-9)


# -- hidden histories -----------------------------------------------------------


def test_hidden_history_targets():
    exp = DualExperiment.for_alpha0(math.pi / 8, 0.01)

    plus_plus = hidden_history(exp, JointOutcome.parse("++"), half_grid=201)
    plus_minus = hidden_history(exp, JointOutcome.parse("+-"), half_grid=201)

    assert plus_plus.alpha_start == pytest.approx(math.pi / 8)
    assert plus_plus.alpha_a == pytest.approx(-math.pi / 8)
    assert plus_minus.alpha_start == pytest.approx(5 * math.pi / 8)
    assert plus_minus.alpha_a == pytest.approx(3 * math.pi / 8)


@pytest.mark.parametrize("label", ["++", "+-", "-+", "--"])
def test_hidden_history_is_null_and_joins_at_m3(label):
    exp = DualExperiment.for_alpha0(math.pi / 8, 0.01)

    hh = hidden_history(exp, JointOutcome.parse(label), half_grid=501)

    assert hh.left.branch is Branch.PLUS
    assert hh.right.branch is Branch.MINUS
    assert hh.left.times[0] == pytest.approx(0.0, abs=1e-15)
    assert hh.right.times[0] == pytest.approx(0.0, abs=1e-15)
    assert check_m3(hh.left, hh.right, exp.omega).passed
    assert nlc_residual(exp.left_context(), hh.left) <= 1e-6
    assert nlc_residual(exp.right_context(), hh.right) <= 1e-6


def test_hidden_histories_in_random_fields(rng):
    labels = ("++", "+-", "-+", "--")
    for _ in range(6):
        b_start = [float(v) for v in rng.uniform(-2.0, 2.0, size=3)]
        b_end = [float(v) for v in rng.uniform(-2.0, 2.0, size=3)]
        schedule = [{"t_start": -1.0, "t_end": 1.0, "b_start": b_start, "b_end": b_end}]
        alpha0 = float(rng.uniform(0.1, 1.4))
        exp = dualize(_symmetric_config(alpha0=alpha0, gamma_s=0.01, schedule=schedule))
        outcome = JointOutcome.parse(labels[int(rng.integers(4))])

        hh = hidden_history(exp, outcome, half_grid=501)

        assert check_m3(hh.left, hh.right, exp.omega).passed
        assert nlc_residual(exp.left_context(), hh.left) <= 1e-6
        assert nlc_residual(exp.right_context(), hh.right) <= 1e-6


def test_hidden_history_with_seed_is_reproducible():
    exp = DualExperiment.for_alpha0(0.4, 0.3)
    outcome = JointOutcome.parse("-+")

    first = hidden_history(exp, outcome, seed=17, half_grid=101)
    again = hidden_history(exp, outcome, seed=17, half_grid=101)

    assert first.alpha_a == again.alpha_a


def test_hidden_history_refuses_impossible_outcomes():
    exp = DualExperiment.for_alpha0(0.0, 0.0)
    with pytest.raises(InvalidOutcomeError):
        hidden_history(exp, JointOutcome.parse("+-"))
    with pytest.raises(GridError):
        hidden_history(DualExperiment.for_alpha0(0.3, 0.1), JointOutcome.parse("++"), half_grid=10)
