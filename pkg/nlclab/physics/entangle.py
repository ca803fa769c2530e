"""Two-particle experiments obtained by time-reversing half of a one-particle one.

A one-particle history on [-t_f, t_f] (prepared at -t_f, measured at +t_f)
is cut at t = 0. The t >= 0 half stays the left particle. The t <= 0 half,
read backward, is the right particle: it lives on the minus branch under the
mirrored field -B(-t), and its preparation becomes a measurement (M1). The
cut itself is the M3 junction, where

    q_L(0) = q_R(0)   and   qdot_L(0) = -qdot_R(0).
"""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from functools import partial, singledispatch
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from nlclab.config import Anomaly, ExperimentConfig, Measurement, Preparation, SegmentSpec
from nlclab.errors import ExperimentShapeError, GridError, InvalidOutcomeError, ValidationFailure
from nlclab.physics.born import (
    HALF_PI,
    TargetTable,
    born_probability,
    choose_target,
    draw_targets,
    target_table,
)
from nlclab.physics.dynamics import Trajectory, evolve_minus, evolve_plus
from nlclab.physics.histories import AnomalyParams, MicroHistory, construct_history
from nlclab.physics.lagrangian import LagrangianContext, SampledPath
from nlclab.physics.spin_algebra import (
    FieldSchedule,
    FieldSegment,
    SpinVector,
    build_spin_operators,
    eigenbasis,
)
from nlclab.utils.rng import block_generator, check_seed, map_blocks


logger = logging.getLogger(__name__)

M3_TOL = 1e-8
_TIME_SLACK = 1e-12
OUTCOME_ORDER = ((1, 1), (1, -1), (-1, 1), (-1, -1))


class PhaseMarker(str, Enum):
    """Boundary phases that are constrained but never given a value."""

    CONSTRAINED_UNKNOWN = "constrained-unknown"


@dataclass(frozen=True)
class JointOutcome:
    left: int
    right: int
    prob: float = 0.0

    def __post_init__(self) -> None:
        if self.left not in (1, -1) or self.right not in (1, -1):
            raise InvalidOutcomeError(f"outcomes are +1/-1, got ({self.left}, {self.right})")

    @property
    def label(self) -> str:
        return _sign(self.left) + _sign(self.right)

    @classmethod
    def parse(cls, label: str) -> "JointOutcome":
        """'+-' style labels, left particle first."""

        signs = {"+": 1, "-": -1}
        if len(label) != 2 or any(ch not in signs for ch in label):
            raise InvalidOutcomeError(f"outcome label must be one of ++, +-, -+, --; got {label!r}")
        return cls(signs[label[0]], signs[label[1]])


def _sign(v: int) -> str:
    return "+" if v > 0 else "-"


def _setting_angle(axis: Sequence[float]) -> float:
    x, y, z = (float(v) for v in axis)
    length = math.sqrt(x * x + y * y + z * z)
    if abs(y) > 1e-12 * length:
        raise ExperimentShapeError("dual construction needs measurement axes in the x-z plane")
    return math.atan2(x, z)


@dataclass(frozen=True)
class DualExperiment:
    """Left particle measured at M2 (t_f), right particle measured at M1 (t_f).

    The M1 axis sits at 2*alpha0 from the M2 axis towards x. ``segments`` is
    the one-particle field description on [-t_f, t_f]; the particles see its
    two halves through ``left_schedule`` and ``right_schedule``.
    """

    m1_axis: Tuple[float, float, float]
    m2_axis: Tuple[float, float, float]
    m1_outcome: int
    t_f: float
    gamma_s: float
    omega: float
    gyro: float
    delta_t: float
    spin_n: int = 2
    segments: Tuple[SegmentSpec, ...] = ()
    seed: int = 0
    steps: int = 2000
    l_max: int = 10_000
    anomaly_t0: Optional[float] = None
    theta_i: PhaseMarker = PhaseMarker.CONSTRAINED_UNKNOWN
    theta_f: PhaseMarker = PhaseMarker.CONSTRAINED_UNKNOWN
    alpha0: float = field(init=False)

    def __post_init__(self) -> None:
        if self.spin_n != 2:
            raise ExperimentShapeError("the dual construction is defined for spin-1/2")
        if not self.t_f > 0:
            raise ExperimentShapeError(f"t_f must be positive, got {self.t_f}")
        if self.m1_outcome not in (0, 1):
            raise ExperimentShapeError("M1 outcome index must be 0 or 1")
        setting_m1 = _setting_angle(self.m1_axis) + math.pi * self.m1_outcome
        object.__setattr__(self, "alpha0", (setting_m1 - _setting_angle(self.m2_axis)) / 2.0)
        object.__setattr__(self, "segments", tuple(self.segments))

    @classmethod
    def for_alpha0(
        cls,
        alpha0: float,
        gamma_s: float,
        *,
        omega: float = 1e6,
        t_f: float = 1.0,
        delta_t: float = 1e-3,
        gyro: float = 1.0,
    ) -> "DualExperiment":
        """Field-free pair with M2 along z and M1 at 2*alpha0 towards x."""

        m1 = (math.sin(2.0 * alpha0), 0.0, math.cos(2.0 * alpha0))
        return cls(m1, (0.0, 0.0, 1.0), 0, t_f, gamma_s, omega, gyro, delta_t)

    @property
    def setting_m2(self) -> float:
        return _setting_angle(self.m2_axis)

    @property
    def setting_m1(self) -> float:
        return self.setting_m2 + 2.0 * self.alpha0

    def one_particle_schedule(self) -> FieldSchedule:
        if not self.segments:
            return FieldSchedule.zero(-self.t_f, self.t_f)
        return FieldSchedule(tuple(s.to_segment() for s in self.segments))

    @property
    def left_schedule(self) -> FieldSchedule:
        return _restricted(self.one_particle_schedule(), 0.0, self.t_f)

    @property
    def right_schedule(self) -> FieldSchedule:
        return _restricted(self.one_particle_schedule(), -self.t_f, 0.0).mirrored()

    def _context(self, schedule: FieldSchedule) -> LagrangianContext:
        return LagrangianContext(build_spin_operators(self.spin_n), schedule, self.omega, self.gyro)

    def one_particle_context(self) -> LagrangianContext:
        return self._context(self.one_particle_schedule())

    def left_context(self) -> LagrangianContext:
        return self._context(self.left_schedule)

    def right_context(self) -> LagrangianContext:
        return self._context(self.right_schedule)

    def m2_basis(self) -> np.ndarray:
        _, basis = eigenbasis(build_spin_operators(self.spin_n), self.m2_axis)
        return basis

    def m1_state(self) -> SpinVector:
        _, basis = eigenbasis(build_spin_operators(self.spin_n), self.m1_axis)
        return SpinVector(basis[:, self.m1_outcome])

    def anomaly_params(self) -> AnomalyParams:
        return AnomalyParams(self.gamma_s, 2.0 * self.t_f, self.delta_t, self.omega)


def _restricted(schedule: FieldSchedule, t0: float, t1: float) -> FieldSchedule:
    segments: List[FieldSegment] = []
    for seg in schedule.segments:
        a, b = max(seg.t_start, t0), min(seg.t_end, t1)
        if b <= a:
            continue
        segments.append(FieldSegment(a, b, tuple(seg.at(a)), tuple(seg.at(b))))
    return FieldSchedule(tuple(segments))


@singledispatch
def dualize(experiment):
    """Map a one-particle config to its two-particle dual, and back."""

    raise ExperimentShapeError(f"cannot dualize {type(experiment).__name__}")


@dualize.register
def _(cfg: ExperimentConfig) -> DualExperiment:
    if cfg.extra_measurements:
        raise ExperimentShapeError("dual construction takes exactly two measurement events")
    t_f = cfg.measurement.time
    if abs(cfg.preparation.time + t_f) > _TIME_SLACK * max(1.0, abs(t_f)):
        raise ExperimentShapeError("preparation must happen at -t_f and measurement at +t_f")
    return DualExperiment(
        m1_axis=tuple(cfg.preparation.axis),
        m2_axis=tuple(cfg.measurement.axis),
        m1_outcome=cfg.preparation.outcome,
        t_f=t_f,
        gamma_s=cfg.anomaly.gamma_s,
        omega=cfg.omega,
        gyro=cfg.gyro,
        delta_t=cfg.measurement.delta_t,
        spin_n=cfg.spin_n,
        segments=tuple(cfg.schedule),
        seed=cfg.seed,
        steps=cfg.steps,
        l_max=cfg.l_max,
        anomaly_t0=cfg.anomaly.t0,
    )


@dualize.register
def _(exp: DualExperiment) -> ExperimentConfig:
    return ExperimentConfig(
        spin_n=exp.spin_n,
        omega=exp.omega,
        gyro=exp.gyro,
        schedule=list(exp.segments),
        preparation=Preparation(time=-exp.t_f, axis=exp.m1_axis, outcome=exp.m1_outcome),
        measurement=Measurement(time=exp.t_f, axis=exp.m2_axis, delta_t=exp.delta_t),
        anomaly=Anomaly(gamma_s=exp.gamma_s, t0=exp.anomaly_t0),
        seed=exp.seed,
        steps=exp.steps,
        l_max=exp.l_max,
    )


def undualize(exp: DualExperiment) -> ExperimentConfig:
    return dualize(exp)


# -- M3 junction --------------------------------------------------------------


@dataclass(frozen=True)
class M3Check:
    passed: bool
    state_residual: float
    derivative_residual: float


def _junction(path: SampledPath) -> Tuple[np.ndarray, np.ndarray]:
    times, q, qdot = path.samples()
    k = int(np.argmin(np.abs(times)))
    if abs(times[k]) > _TIME_SLACK * max(1.0, float(np.max(np.abs(times)))):
        raise GridError("trajectory grid does not contain t = 0")
    return q[k], qdot[k]


def check_m3(
    left: SampledPath, right: SampledPath, omega: Optional[float] = None, tol: float = M3_TOL
) -> M3Check:
    """Continuity of q and reversal of qdot at the t = 0 junction.

    The state residual is relative to |q_L(0)|; the derivative residual is
    relative to omega |q_L(0)|, omega defaulting to |qdot_L(0)| / |q_L(0)|.
    """

    q_l, qdot_l = _junction(left)
    q_r, qdot_r = _junction(right)
    norm = float(np.linalg.norm(q_l)) or 1.0
    if omega is None:
        omega = float(np.linalg.norm(qdot_l)) / norm or 1.0
    state = float(np.linalg.norm(q_l - q_r)) / norm
    deriv = float(np.linalg.norm(qdot_l + qdot_r)) / (omega * norm)
    return M3Check(state <= tol and deriv <= tol, state, deriv)


def dual_trajectories(
    exp: DualExperiment, steps: Optional[int] = None
) -> Tuple[Trajectory, Trajectory]:
    """Best-guess ELE trajectories of the left (plus) and right (minus) particles."""

    steps = exp.steps if steps is None else steps
    q_mid = evolve_plus(exp.one_particle_context(), exp.m1_state(), -exp.t_f, 0.0, steps).endpoint
    left = evolve_plus(exp.left_context(), q_mid, 0.0, exp.t_f, steps)
    right = evolve_minus(exp.right_context(), q_mid, 0.0, exp.t_f, steps)
    return left, right


def best_guess_left(
    exp: DualExperiment, left_outcome: int, steps: Optional[int] = None
) -> Trajectory:
    """M2 eigenstate for ``left_outcome`` evolved backward from t_f to 0."""

    steps = exp.steps if steps is None else steps
    index = 0 if left_outcome == 1 else 1
    v = SpinVector(exp.m2_basis()[:, index])
    return evolve_plus(exp.left_context(), v, exp.t_f, 0.0, steps)


# -- joint statistics ---------------------------------------------------------


def joint_table(alpha0: float, gamma_s: float) -> List[JointOutcome]:
    """Joint distribution for relative half-angle alpha0, order ++, +-, -+, --.

    M1 is unbiased; given a matching M1 result the M2 result follows the
    one-particle probability for tilt alpha0, otherwise the orthogonal tilt.
    """

    b = born_probability(alpha0, gamma_s)
    same, diff = 0.5 * b, 0.5 * (1.0 - b)
    return [
        JointOutcome(1, 1, same),
        JointOutcome(1, -1, diff),
        JointOutcome(-1, 1, diff),
        JointOutcome(-1, -1, same),
    ]


def joint_probabilities(exp: DualExperiment) -> List[JointOutcome]:
    table = joint_table(exp.alpha0, exp.gamma_s)
    total = math.fsum(o.prob for o in table)
    if abs(total - 1.0) > 1e-12:
        raise ValidationFailure(f"joint probabilities sum to {total!r}")
    return table


def correlation(alpha0: float, gamma_s: float) -> float:
    """E = <left * right> = cos(2 alpha0) / cosh(2 gamma_s)."""

    return math.fsum(o.left * o.right * o.prob for o in joint_table(alpha0, gamma_s))


def marginals(outcomes: Sequence[JointOutcome]) -> Dict[str, Tuple[float, float]]:
    """(P(+1), P(-1)) for each side."""

    left_up = math.fsum(o.prob for o in outcomes if o.left == 1)
    right_up = math.fsum(o.prob for o in outcomes if o.right == 1)
    return {"left": (left_up, 1.0 - left_up), "right": (right_up, 1.0 - right_up)}


def chsh(settings: Sequence[float], gamma_s: float) -> float:
    """|E(a,b) + E(a,b') + E(a',b) - E(a',b')| for settings (a, a', b, b')."""

    return chsh_combination(
        [correlation((x - y) / 2.0, gamma_s) for x, y in setting_pairs(settings)]
    )


CANONICAL_SETTINGS = (0.0, HALF_PI, math.pi / 4.0, -math.pi / 4.0)


# -- hidden histories ---------------------------------------------------------


def _start_tilt(alpha0: float, right: int) -> float:
    """alpha of the one-particle state just after M1, in the M2 basis.

    A matching M1 result leaves (cos a0, sin a0); the opposite result leaves
    the orthogonal (-sin a0, cos a0), which is tilt pi/2 + a0.
    """

    return alpha0 if right == 1 else HALF_PI + alpha0


@dataclass(frozen=True)
class HiddenHistory:
    left: MicroHistory
    right: MicroHistory
    alpha_start: float
    alpha_a: float


def hidden_history(
    exp: DualExperiment,
    outcome: JointOutcome,
    seed: Optional[int] = None,
    half_grid: int = 1001,
) -> HiddenHistory:
    """One concrete NLC history pair realizing ``outcome``.

    Built as a single anomaly ramp on the one-particle clock [-t_f, t_f],
    whose grid contains t = 0, then cut at the junction.
    """

    probs = {(o.left, o.right): o.prob for o in joint_probabilities(exp)}
    if probs[(outcome.left, outcome.right)] <= 0.0:
        raise InvalidOutcomeError(f"outcome {outcome.label} has zero probability")
    if half_grid < 51:
        raise GridError("half_grid must be >= 51")

    alpha_start = _start_tilt(exp.alpha0, outcome.right)
    alpha_a = choose_target(alpha_start, outcome.left == 1, exp.gamma_s, exp.l_max, seed)
    tau = np.linspace(0.0, exp.t_f, half_grid)
    times = np.concatenate([-tau[::-1], tau[1:]])
    history = construct_history(
        exp.one_particle_context(),
        exp.anomaly_params(),
        alpha_start,
        alpha_start + alpha_a,
        times.size,
        t_start=-exp.t_f,
        times=times,
        stationary_basis=exp.m2_basis(),
    )
    left = history.window(0.0, exp.t_f)
    right = history.window(-exp.t_f, 0.0).time_reversed()
    logger.info(
        "hidden history %s: alpha_start=%.6g alpha_a=%.6g", outcome.label, alpha_start, alpha_a
    )
    return HiddenHistory(left, right, alpha_start, alpha_a)


# -- hidden-variable sampling ---------------------------------------------------


def _joint_block(
    tables: Tuple[TargetTable, TargetTable], seed: int, stream: int, block: int, count: int
) -> Tuple[int, int, int, int]:
    gen = block_generator(seed, block, stream)
    right_up = gen.random(count) < 0.5
    counts = [0, 0, 0, 0]
    for right, mask in ((1, right_up), (-1, ~right_up)):
        table = tables[0] if right == 1 else tables[1]
        idx = draw_targets(table, gen, int(np.count_nonzero(mask)))
        left_up = int(np.count_nonzero(table.is_up[idx]))
        left_down = idx.size - left_up
        if right == 1:
            counts[0] += left_up
            counts[2] += left_down
        else:
            counts[1] += left_up
            counts[3] += left_down
    return counts[0], counts[1], counts[2], counts[3]


def sample_joint_outcomes(
    alpha0: float,
    gamma_s: float,
    n_samples: int,
    seed: int,
    *,
    l_max: int = 10_000,
    workers: int = 1,
    stream: int = 0,
) -> Tuple[List[JointOutcome], Tuple[int, int, int, int]]:
    """Empirical joint frequencies from sampled hidden-history targets.

    The right result is drawn fair; the left result follows the anomaly
    target drawn for the resulting start tilt. Counts are in the order
    ++, +-, -+, -- (left first).
    """

    tables = (
        target_table(_start_tilt(alpha0, 1), gamma_s, l_max),
        target_table(_start_tilt(alpha0, -1), gamma_s, l_max),
    )
    work = partial(_joint_block, tables, check_seed(seed), stream)
    results = map_blocks(work, n_samples, workers)
    counts = tuple(sum(r[k] for r in results) for k in range(4))
    outcomes = [
        JointOutcome(left, right, counts[k] / n_samples)
        for k, (left, right) in enumerate(OUTCOME_ORDER)
    ]
    return outcomes, counts  # type: ignore[return-value]


def setting_pairs(settings: Sequence[float]) -> Tuple[Tuple[float, float], ...]:
    """(a,b), (a,b'), (a',b), (a',b') for settings (a, a', b, b')."""

    a, a2, b, b2 = (float(s) for s in settings)
    return ((a, b), (a, b2), (a2, b), (a2, b2))


def sampled_correlations(
    settings: Sequence[float],
    gamma_s: float,
    n_samples: int,
    seed: int,
    *,
    l_max: int = 10_000,
    workers: int = 1,
) -> List[float]:
    """Sampled E for each setting pair; pair k draws from RNG stream k."""

    values = []
    for k, (x, y) in enumerate(setting_pairs(settings)):
        outcomes, _ = sample_joint_outcomes(
            (x - y) / 2.0, gamma_s, n_samples, seed, l_max=l_max, workers=workers, stream=k
        )
        values.append(math.fsum(o.left * o.right * o.prob for o in outcomes))
    return values


def chsh_combination(values: Sequence[float]) -> float:
    return abs(values[0] + values[1] + values[2] - values[3])


def sampled_chsh(
    settings: Sequence[float],
    gamma_s: float,
    n_samples: int,
    seed: int,
    *,
    l_max: int = 10_000,
    workers: int = 1,
) -> float:
    """CHSH value from sampled frequencies."""

    return chsh_combination(
        sampled_correlations(settings, gamma_s, n_samples, seed, l_max=l_max, workers=workers)
    )
