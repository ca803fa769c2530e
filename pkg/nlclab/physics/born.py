"""Outcome probabilities from counting phase-anomaly histories.

Reaching an outcome eigenstate from an initial tilt alpha needs a net
anomaly alpha_a onto one of the targets l*pi - alpha (first eigenstate) or
l*pi + pi/2 - alpha (orthogonal one). Each target carries the Cauchy weight
1/(gamma_s^2 + alpha_a^2); summing over l gives

    S(alpha) = sinh(2 g) / (2 g (sin^2 alpha + sinh^2 g))

and the outcome ratio S(alpha)/S(pi/2 - alpha), which tends to cot^2(alpha)
as gamma_s -> 0.
"""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache, partial
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy import constants

from nlclab.config import ExperimentConfig, Measurement
from nlclab.errors import (
    CertainOutcome,
    NumericalGuardError,
    SingularWeightError,
    ValidationFailure,
)
from nlclab.physics.dynamics import evolve_plus
from nlclab.physics.histories import AnomalyParams, net_phase_anomaly
from nlclab.physics.spin_algebra import SpinOperatorSet, SpinVector, eigenbasis
from nlclab.utils.rng import block_generator, check_seed, map_blocks


logger = logging.getLogger(__name__)

HALF_PI = math.pi / 2.0
DEFAULT_L_MAX = 10_000
# Regression bound K in |P - cos^2 alpha| <= K gamma_s^2.
BORN_DEVIATION_BOUND = 1.0
CLOSED_FORM_TOL = 1e-10
_ANGLE_TOL = 1e-12


class Method(str, Enum):
    ANALYTIC = "analytic"
    MONTE_CARLO = "monte_carlo"
    NO_COLLAPSE = "no_collapse"


@dataclass(frozen=True)
class OutcomeDistribution:
    labels: Tuple[str, ...]
    probs: Tuple[float, ...]
    method: Method
    samples: int = 0
    seed: int = 0
    counts: Optional[Tuple[int, ...]] = None
    endpoint: Optional[SpinVector] = field(default=None, compare=False)
    metadata: Dict[str, Any] = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        if len(self.labels) != len(self.probs):
            raise ValidationFailure("labels and probs must have equal length")
        if any(p < 0 for p in self.probs):
            raise ValidationFailure("probabilities must be non-negative")
        if abs(math.fsum(self.probs) - 1.0) > 1e-12:
            raise ValidationFailure(f"probabilities sum to {math.fsum(self.probs)!r}, not 1")

    def prob(self, label: str) -> float:
        return self.probs[self.labels.index(label)]


def p0_weight(alpha_a: float, gamma_s: float) -> float:
    """Unnormalized Cauchy weight 1/(gamma_s^2 + alpha_a^2)."""

    denom = gamma_s * gamma_s + alpha_a * alpha_a
    if denom == 0.0:
        raise SingularWeightError("p0_weight is singular at alpha_a = gamma_s = 0")
    return 1.0 / denom


def _reduce(alpha: float) -> float:
    """alpha modulo pi, mapped into [-pi/2, pi/2]."""

    return alpha - math.pi * round(alpha / math.pi)


def _tail_integral(u: float, gamma_s: float) -> float:
    """integral_u^inf dy / (gamma_s^2 + y^2) for u > 0."""

    if gamma_s == 0.0:
        return 1.0 / u
    return math.atan(gamma_s / u) / gamma_s


def truncation_tail(alpha: float, gamma_s: float, l_max: int) -> float:
    """Midpoint-integral estimate of the terms with |l| > l_max."""

    a = _reduce(alpha)
    edge = math.pi * (l_max + 0.5)
    return (_tail_integral(edge - a, gamma_s) + _tail_integral(edge + a, gamma_s)) / math.pi


def tail_bound(l_max: int) -> float:
    """Reported bound on the truncated terms: 2 / (pi^2 l_max)."""

    return 2.0 / (math.pi**2 * l_max)


def eigen_target_sum(
    alpha: float, gamma_s: float, l_max: int = DEFAULT_L_MAX, *, with_tail: bool = False
) -> float:
    """sum_{|l| <= l_max} 1/(gamma_s^2 + (l pi - alpha)^2).

    The sum is pi-periodic in alpha, so the window is centred on alpha mod pi.
    ``with_tail`` adds the integral estimate of the dropped terms.
    """

    if l_max < 1:
        raise ValidationFailure(f"l_max must be >= 1, got {l_max}")
    if gamma_s < 0:
        raise ValidationFailure(f"gamma_s must be >= 0, got {gamma_s}")
    a = _reduce(alpha)
    if gamma_s == 0.0 and a == 0.0:
        raise CertainOutcome(f"alpha={alpha} sits on an eigen-target with gamma_s=0")
    ls = np.arange(-l_max, l_max + 1, dtype=float)
    total = float(np.sum(1.0 / (gamma_s * gamma_s + (ls * math.pi - a) ** 2)))
    if with_tail:
        total += truncation_tail(a, gamma_s, l_max)
    return total


def closed_form_sum(alpha: float, gamma_s: float) -> float:
    """The l_max -> infinity limit of eigen_target_sum."""

    s = math.sin(alpha) ** 2
    if gamma_s == 0.0:
        if s == 0.0:
            raise CertainOutcome(f"alpha={alpha} sits on an eigen-target with gamma_s=0")
        return 1.0 / s
    sh = math.sinh(gamma_s) ** 2
    return math.sinh(2.0 * gamma_s) / (2.0 * gamma_s * (s + sh))


class ClosedFormReport(NamedTuple):
    max_rel_error: float
    points: int
    l_max: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= CLOSED_FORM_TOL


def compare_closed_form(
    alphas: Sequence[float], gammas: Sequence[float], l_max: int
) -> ClosedFormReport:
    """Largest relative gap between the tail-corrected series and the closed form."""

    worst = 0.0
    points = 0
    for g in gammas:
        for a in alphas:
            series = eigen_target_sum(a, g, l_max, with_tail=True)
            exact = closed_form_sum(a, g)
            worst = max(worst, abs(series - exact) / exact)
            points += 1
    return ClosedFormReport(worst, points, l_max)


@lru_cache(maxsize=1)
def validate_closed_form() -> ClosedFormReport:
    """One-time check that gates the closed-form fast path."""

    alphas = np.linspace(0.05, HALF_PI - 0.05, 20)
    gammas = (0.0, 1e-3, 0.01, 0.1, 1.0)
    report = compare_closed_form(alphas, gammas, DEFAULT_L_MAX)
    if report.passed:
        logger.debug("closed form validated, max rel error %.2e", report.max_rel_error)
    else:
        logger.warning(
            "closed form failed validation (max rel error %.2e); using series",
            report.max_rel_error,
        )
    return report


def _check_alpha(alpha: float) -> float:
    if alpha < -_ANGLE_TOL or alpha > HALF_PI + _ANGLE_TOL:
        raise ValidationFailure(f"alpha must lie in [0, pi/2], got {alpha}")
    return min(max(alpha, 0.0), HALF_PI)


def outcome_ratio(alpha: float, gamma_s: float) -> float:
    """P(first eigenstate) / P(orthogonal eigenstate) for a tilt alpha in [0, pi/2].

    Certain outcomes (gamma_s = 0 with alpha on a target) give +inf or 0.
    """

    alpha = _check_alpha(alpha)
    if gamma_s < 0:
        raise ValidationFailure(f"gamma_s must be >= 0, got {gamma_s}")
    if gamma_s == 0.0 and alpha in (0.0, HALF_PI):
        return math.inf if alpha == 0.0 else 0.0
    if validate_closed_form().passed:
        sh = math.sinh(gamma_s) ** 2
        return (math.cos(alpha) ** 2 + sh) / (math.sin(alpha) ** 2 + sh)
    try:
        up = eigen_target_sum(alpha, gamma_s, with_tail=True)
    except CertainOutcome:
        return math.inf
    try:
        down = eigen_target_sum(HALF_PI - alpha, gamma_s, with_tail=True)
    except CertainOutcome:
        return 0.0
    return up / down


def fold_alpha(alpha: float) -> float:
    """Map any tilt angle onto [0, pi/2] with the same |cos| and |sin|."""

    a = abs(_reduce(alpha))
    return min(a, HALF_PI)


def born_probability(alpha: float, gamma_s: float) -> float:
    """P(first eigenstate) = ratio / (1 + ratio)."""

    alpha = fold_alpha(alpha)
    ratio = outcome_ratio(alpha, gamma_s)
    if math.isinf(ratio):
        return 1.0
    if ratio == 0.0:
        return 0.0
    if validate_closed_form().passed:
        sh = math.sinh(gamma_s) ** 2
        num = math.cos(alpha) ** 2 + sh
        return num / (num + math.sin(alpha) ** 2 + sh)
    return ratio / (1.0 + ratio)


class DeviationRow(NamedTuple):
    alpha: float
    born_probability: float
    cos2: float
    difference: float


def deviation_scan(alphas: Sequence[float], gamma_s: float) -> List[DeviationRow]:
    rows = []
    for alpha in alphas:
        p = born_probability(float(alpha), gamma_s)
        c2 = math.cos(alpha) ** 2
        rows.append(DeviationRow(float(alpha), p, c2, p - c2))
    return rows


def scan_grid(k: int) -> np.ndarray:
    """Interior points of (0, pi/2) with step pi/(2k)."""

    if k < 2:
        raise ValidationFailure(f"grid must have k >= 2, got {k}")
    return np.arange(1, k) * (HALF_PI / k)


def largest_deviation(rows: Sequence[DeviationRow]) -> DeviationRow:
    return max(rows, key=lambda r: abs(r.difference))


# -- measurement model ------------------------------------------------------


class PreparedState(NamedTuple):
    alpha: float
    endpoint: SpinVector
    basis: np.ndarray
    m_values: np.ndarray


def outcome_labels(m_values: Sequence[float]) -> Tuple[str, ...]:
    """Labels for measurement eigenstates: up/down for spin 1/2, m=... otherwise."""

    if len(m_values) == 2:
        return ("up", "down")
    return tuple(f"m={_format_m(m)}" for m in m_values)


def _format_m(m: float) -> str:
    twice = int(round(2 * m))
    if twice == 0:
        return "0"
    if twice % 2 == 0:
        return f"{twice // 2:+d}"
    return f"{twice:+d}/2"


def tilt_against(state: SpinVector, basis: np.ndarray, j: int = 0) -> float:
    """Angle between ``state`` and basis column j, in [0, pi/2]."""

    coeff = basis.conj().T @ state.amps
    head = abs(coeff[j])
    rest = math.sqrt(max(float(np.sum(np.abs(coeff) ** 2)) - head * head, 0.0))
    return math.atan2(rest, head)


def _evolve_endpoint(cfg: ExperimentConfig, q0: SpinVector, t0: float, t1: float) -> SpinVector:
    ctx = cfg.lagrangian_context()
    return evolve_plus(ctx, q0, t0, t1, cfg.steps).endpoint


def prepared_vector(cfg: ExperimentConfig, ops: SpinOperatorSet) -> SpinVector:
    _, prep_basis = eigenbasis(ops, cfg.preparation.axis)
    return SpinVector(prep_basis[:, cfg.preparation.outcome])


def preparation_alpha(cfg: ExperimentConfig) -> PreparedState:
    """alpha of the ELE-propagated prepared state against the measurement basis."""

    ctx = cfg.lagrangian_context()
    prep = prepared_vector(cfg, ctx.ops)
    endpoint = _evolve_endpoint(cfg, prep, cfg.preparation.time, cfg.measurement.time)
    m_values, basis = eigenbasis(ctx.ops, cfg.measurement.axis)
    return PreparedState(tilt_against(endpoint, basis), endpoint, basis, m_values)


def state_distribution(
    state: SpinVector, basis: np.ndarray, m_values: Sequence[float], gamma_s: float
) -> OutcomeDistribution:
    """Analytic outcome probabilities of measuring ``state`` in ``basis``.

    Each eigenstate gets born_probability of its own tilt; for n > 2 the
    per-eigenstate values are renormalized to sum to 1.
    """

    n = basis.shape[1]
    raw = [born_probability(tilt_against(state, basis, j), gamma_s) for j in range(n)]
    if n == 2:
        probs = (raw[0], 1.0 - raw[0])
    else:
        total = math.fsum(raw)
        probs = tuple(p / total for p in raw)
    return OutcomeDistribution(
        outcome_labels(m_values),
        probs,
        Method.ANALYTIC,
        metadata={"gamma_s": gamma_s, "renormalized": n > 2},
    )


def _require_single_stage(cfg: ExperimentConfig) -> None:
    if cfg.extra_measurements:
        raise ValidationFailure(
            "config has downstream measurements; use two_stage_outcomes"
        )


def outcome_distribution(cfg: ExperimentConfig) -> OutcomeDistribution:
    _require_single_stage(cfg)
    prepared = preparation_alpha(cfg)
    dist = state_distribution(
        prepared.endpoint, prepared.basis, prepared.m_values, cfg.anomaly.gamma_s
    )
    dist.metadata.update(alpha=prepared.alpha, seed=cfg.seed)
    return dist


# -- Monte Carlo --------------------------------------------------------------


@dataclass(frozen=True)
class TargetTable:
    """Cumulative weights over all anomaly targets for one initial tilt."""

    cdf: np.ndarray
    is_up: np.ndarray
    offsets: np.ndarray
    certain: Optional[bool] = None

    @property
    def total(self) -> float:
        return float(self.cdf[-1])


def target_table(alpha: float, gamma_s: float, l_max: int) -> TargetTable:
    """Targets l*pi - alpha (up) and l*pi + pi/2 - alpha (down), |l| <= l_max.

    At gamma_s = 0 a target at exactly zero makes the outcome certain.
    """

    ls = np.arange(-l_max, l_max + 1, dtype=float)
    up = ls * math.pi - alpha
    down = ls * math.pi + HALF_PI - alpha
    offsets = np.concatenate([up, down])
    is_up = np.concatenate([np.ones(up.size, bool), np.zeros(down.size, bool)])
    if gamma_s == 0.0 and np.any(offsets == 0.0):
        hit = bool(is_up[np.flatnonzero(offsets == 0.0)[0]])
        return TargetTable(np.ones(1), np.array([hit]), np.zeros(1), certain=hit)
    weights = 1.0 / (gamma_s * gamma_s + offsets * offsets)
    return TargetTable(np.cumsum(weights), is_up, offsets)


def choose_target(
    alpha_start: float,
    up: bool,
    gamma_s: float,
    l_max: int = DEFAULT_L_MAX,
    seed: Optional[int] = None,
) -> float:
    """Net anomaly alpha_a taking alpha_start onto an up (or down) eigen-target.

    Without a seed the largest-weight target is taken; with one, a target is
    drawn from that outcome's weighted targets.
    """

    offset = 0.0 if up else HALF_PI
    nearest = round((alpha_start - offset) / math.pi)
    best = nearest * math.pi + offset - alpha_start
    if seed is None or (gamma_s == 0.0 and best == 0.0):
        return best
    ls = np.arange(nearest - l_max, nearest + l_max + 1, dtype=float)
    offsets = ls * math.pi + offset - alpha_start
    weights = 1.0 / (gamma_s * gamma_s + offsets * offsets)
    gen = block_generator(check_seed(seed), 0, stream=1)
    cdf = np.cumsum(weights)
    k = int(np.searchsorted(cdf, gen.random() * cdf[-1], side="right"))
    return float(offsets[min(k, offsets.size - 1)])


def draw_targets(table: TargetTable, gen: np.random.Generator, count: int) -> np.ndarray:
    """Indices into ``table`` drawn with probability proportional to weight."""

    if table.certain is not None:
        return np.zeros(count, dtype=np.intp)
    u = gen.random(count) * table.total
    idx = np.searchsorted(table.cdf, u, side="right")
    return np.minimum(idx, table.cdf.size - 1)


def _categorical_block(table: TargetTable, seed: int, block: int, count: int) -> Tuple[int, int]:
    gen = block_generator(seed, block)
    idx = draw_targets(table, gen, count)
    ups = int(np.count_nonzero(table.is_up[idx]))
    return ups, count


def sample_up_fraction(
    alpha: float,
    gamma_s: float,
    n_samples: int,
    seed: int,
    *,
    l_max: int = DEFAULT_L_MAX,
    workers: int = 1,
) -> Tuple[int, int]:
    """(up count, total) from the discrete-target categorical sampler."""

    check_seed(seed)
    table = target_table(alpha, gamma_s, l_max)
    results = map_blocks(partial(_categorical_block, table, seed), n_samples, workers)
    return sum(r[0] for r in results), sum(r[1] for r in results)


def sample_kicks(
    alpha: float,
    gamma_s: float,
    n_samples: int,
    seed: int,
    *,
    l_max: int = DEFAULT_L_MAX,
    window: float = 1e-3,
    max_blocks: int = 10_000,
) -> Tuple[int, int]:
    """(up count, accepted) from literal Cauchy kicks snapped to nearby targets.

    Blocks are drawn in order until ``n_samples`` kicks have landed within
    ``window`` of a target; the accepted set is truncated to exactly
    ``n_samples`` so the result depends only on the seed.
    """

    if gamma_s <= 0.0:
        raise ValidationFailure("Cauchy kicks need gamma_s > 0")
    check_seed(seed)
    limit = (l_max + 1) * math.pi
    ups = accepted = 0
    for block in range(max_blocks):
        gen = block_generator(seed, block)
        kicks = gamma_s * gen.standard_cauchy(1 << 16)
        kicks = kicks[np.abs(kicks) <= limit]
        landing = kicks + alpha
        k = np.rint(landing / HALF_PI)
        hit = np.abs(landing - k * HALF_PI) <= window
        up_hits = (k[hit] % 2) == 0
        take = min(up_hits.size, n_samples - accepted)
        ups += int(np.count_nonzero(up_hits[:take]))
        accepted += take
        if accepted == n_samples:
            return ups, accepted
    raise NumericalGuardError(
        f"only {accepted} of {n_samples} kicks accepted after {max_blocks} blocks"
    )


def monte_carlo_outcomes(
    cfg: ExperimentConfig,
    n_samples: int,
    seed: int,
    *,
    workers: int = 1,
    method: str = "categorical",
) -> OutcomeDistribution:
    """Empirical outcome frequencies under equal a priori weighting of histories.

    For spin_n > 2 the sampled outcome is binary: first measurement
    eigenstate versus any other.
    """

    _require_single_stage(cfg)
    if n_samples < 1:
        raise ValidationFailure(f"n_samples must be >= 1, got {n_samples}")
    prepared = preparation_alpha(cfg)
    gamma_s = cfg.anomaly.gamma_s
    if method == "categorical":
        ups, total = sample_up_fraction(
            prepared.alpha, gamma_s, n_samples, seed, l_max=cfg.l_max, workers=workers
        )
    elif method == "cauchy_kick":
        ups, total = sample_kicks(prepared.alpha, gamma_s, n_samples, seed, l_max=cfg.l_max)
    else:
        raise ValidationFailure(f"unknown sampling method {method!r}")

    labels = outcome_labels(prepared.m_values)
    if len(labels) > 2:
        labels = (labels[0], "other")
    downs = total - ups
    logger.info("monte carlo: %d/%d up (alpha=%.6g, method=%s)", ups, total, prepared.alpha, method)
    return OutcomeDistribution(
        labels,
        (ups / total, downs / total),
        Method.MONTE_CARLO,
        samples=total,
        seed=seed,
        counts=(ups, downs),
        metadata={
            "alpha": prepared.alpha,
            "gamma_s": gamma_s,
            "l_max": cfg.l_max,
            "sampler": method,
            "analytic_up": born_probability(prepared.alpha, gamma_s),
        },
    )


# -- measurement-model scalars ----------------------------------------------


def periodicity_multiplier(omega: float, delta_t: float) -> float:
    """N = omega * delta_t / (2 pi): rest oscillations inside the timing window."""

    if omega < 0 or delta_t < 0:
        raise ValidationFailure("omega and delta_t must be non-negative")
    return omega * delta_t / (2.0 * math.pi)


def rest_frequency(mass_kev: float) -> float:
    """omega = m c^2 / hbar in rad/s for a rest energy given in keV."""

    if not mass_kev > 0:
        raise ValidationFailure(f"mass must be positive, got {mass_kev}")
    return mass_kev * 1e3 * constants.e / constants.hbar


def compton_period(mass_kev: float) -> float:
    return 2.0 * math.pi / rest_frequency(mass_kev)


def large_anomaly_penalty(alpha_a: float, p: AnomalyParams) -> float:
    """Phase shift of a large anomaly (theta_a ~ alpha_a) over the small-anomaly value."""

    if alpha_a == 0.0:
        raise ValidationFailure("the penalty is defined for non-zero anomalies")
    return abs(alpha_a) / net_phase_anomaly(alpha_a, p)


def windowed_outcome_ratio(
    alpha: float, gamma_s: float, delta_t_up: float, delta_t_down: float
) -> float:
    """outcome_ratio with each outcome weighted by 1/delta_t of its timing window."""

    if not (delta_t_up > 0 and delta_t_down > 0):
        raise ValidationFailure("timing windows must be positive")
    ratio = outcome_ratio(alpha, gamma_s)
    if math.isinf(ratio) or ratio == 0.0:
        return ratio
    return ratio * delta_t_down / delta_t_up


# -- eraser mode --------------------------------------------------------------


def eraser_outcomes(
    cfg: ExperimentConfig, n_samples: int = 1, seed: Optional[int] = None, *, workers: int = 1
) -> OutcomeDistribution:
    """No-collapse record when the device phase constraint is erased.

    With ``erased`` off this is monte_carlo_outcomes.
    """

    seed = cfg.seed if seed is None else seed
    if not cfg.erased:
        return monte_carlo_outcomes(cfg, n_samples, seed, workers=workers)
    ctx = cfg.lagrangian_context()
    prep = prepared_vector(cfg, ctx.ops)
    endpoint = _evolve_endpoint(cfg, prep, cfg.preparation.time, cfg.measurement.time)
    logger.info("erased measurement: returning unitary endpoint")
    return OutcomeDistribution(
        ("no-collapse",),
        (1.0,),
        Method.NO_COLLAPSE,
        seed=seed,
        endpoint=endpoint,
        metadata={"time": cfg.measurement.time},
    )


def remeasure(
    endpoint: SpinVector, ops: SpinOperatorSet, axis: Sequence[float], gamma_s: float
) -> OutcomeDistribution:
    """Analytic distribution for measuring an uncollapsed state along ``axis``."""

    m_values, basis = eigenbasis(ops, axis)
    return state_distribution(endpoint, basis, m_values, gamma_s)


def two_stage_outcomes(cfg: ExperimentConfig) -> OutcomeDistribution:
    """Erased first measurement followed by one downstream measurement.

    The erased stage leaves the ELE state untouched, so the downstream
    probabilities follow from the state evolved straight through.
    """

    if not cfg.erased:
        raise ValidationFailure("two-stage outcomes need the first measurement erased")
    if len(cfg.extra_measurements) != 1:
        raise ValidationFailure("two-stage outcomes need exactly one downstream measurement")
    downstream: Measurement = cfg.extra_measurements[0]
    ctx = cfg.lagrangian_context()
    prep = prepared_vector(cfg, ctx.ops)
    endpoint = _evolve_endpoint(cfg, prep, cfg.preparation.time, downstream.time)
    dist = remeasure(endpoint, ctx.ops, downstream.axis, cfg.anomaly.gamma_s)
    dist.metadata.update(time=downstream.time)
    return OutcomeDistribution(
        dist.labels,
        dist.probs,
        Method.ANALYTIC,
        seed=cfg.seed,
        endpoint=endpoint,
        metadata=dist.metadata,
    )
