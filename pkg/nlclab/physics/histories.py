"""Microhistories in (A, alpha, theta, c_j) form and anomaly bookkeeping.

A history is written against a reference basis (fixed, or time-dependent
special-state frames) as

    q(t) = A e^{i theta} [cos(alpha) b_1(t) + sin(alpha) sum_j c_j b_j(t)]

theta carries the rest-mass phase -omega*t, so it is stored as an offset
from the branch's classical phase line to keep full precision.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from nlclab.errors import (
    AnomalyBudgetError,
    DimensionMismatchError,
    GridError,
    NumericalGuardError,
    ValidationFailure,
    ZeroNormError,
)
from nlclab.physics.dynamics import Branch, PhasePart, Trajectory, evolve_grid, final_eigenbasis
from nlclab.physics.lagrangian import LagrangianContext
from nlclab.physics.spin_algebra import HBAR, SpinVector


logger = logging.getLogger(__name__)

MIN_GRID = 100
# Omega * t0 below this is not a slowly varying anomaly regime.
MIN_PHASE_TURNS = 1e3
# Fraction of omega beyond which the small-anomaly expansion is refused.
RATE_GATE = 0.1
_RECON_TOL = 1e-10
_NORM_TOL = 1e-10
_GAUSS_NODES, _GAUSS_WEIGHTS = np.polynomial.legendre.leggauss(8)

Basis = Union[np.ndarray, Sequence[Sequence[complex]]]


@dataclass(frozen=True)
class AnomalyParams:
    gamma_s: float
    t0: float
    delta_t: float
    omega: float

    def __post_init__(self) -> None:
        problems = []
        if self.gamma_s < 0:
            problems.append(f"gamma_s must be >= 0, got {self.gamma_s}")
        if not self.t0 > 0:
            problems.append(f"t0 must be positive, got {self.t0}")
        if not self.delta_t > 0:
            problems.append(f"delta_t must be positive, got {self.delta_t}")
        if not self.omega > 0:
            problems.append(f"omega must be positive, got {self.omega}")
        elif self.t0 > 0 and self.omega * self.t0 < MIN_PHASE_TURNS:
            problems.append(
                f"omega*t0 = {self.omega * self.t0:.3g} is below {MIN_PHASE_TURNS:g}"
            )
        if problems:
            raise ValidationFailure("; ".join(problems))


def _as_frames(basis: Basis, m: int, n: int) -> np.ndarray:
    frames = np.asarray(basis, dtype=complex)
    if frames.shape == (n, n):
        frames = np.broadcast_to(frames, (m, n, n)).copy()
    if frames.shape != (m, n, n):
        raise DimensionMismatchError(
            f"basis must be ({n}, {n}) or ({m}, {n}, {n}), got {frames.shape}"
        )
    return frames


@dataclass(frozen=True)
class MicroHistory:
    """Sampled (A, alpha, theta, c_j) record of one candidate history.

    ``theta_offset`` is theta minus the classical line rate*(t - t_ref), where
    rate is -omega on the plus branch and +omega on the minus branch.
    """

    times: np.ndarray
    a: np.ndarray
    alpha: np.ndarray
    theta_offset: np.ndarray
    c: np.ndarray
    frames: np.ndarray
    branch: Branch
    omega: float
    t_ref: float
    raw_states: Optional[np.ndarray] = field(default=None, compare=False)

    def __post_init__(self) -> None:
        times = np.asarray(self.times, dtype=float)
        m = times.size
        if m < 2 or np.any(np.diff(times) <= 0):
            raise GridError("history times must be strictly increasing with >= 2 points")
        a = np.asarray(self.a, dtype=float)
        alpha = np.asarray(self.alpha, dtype=float)
        offset = np.asarray(self.theta_offset, dtype=float)
        c = np.asarray(self.c, dtype=complex)
        if c.ndim == 1:
            c = np.broadcast_to(c, (m, c.size)).copy()
        n = c.shape[1] + 1
        for name, arr in (("a", a), ("alpha", alpha), ("theta_offset", offset)):
            if arr.shape != (m,):
                raise DimensionMismatchError(f"{name} must have shape ({m},)")
        if c.shape[0] != m:
            raise DimensionMismatchError(f"c must have {m} rows")
        if np.any(a <= 0):
            raise ValidationFailure("amplitude A must be positive everywhere")
        weights = np.sum(np.abs(c) ** 2, axis=1)
        if np.max(np.abs(weights - 1.0)) > _NORM_TOL:
            raise ValidationFailure("sum of |c_j|^2 must equal 1 at every grid point")
        if self.branch is Branch.MIXED:
            raise ValidationFailure("a microhistory lives on a single branch")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "theta_offset", offset)
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "frames", _as_frames(self.frames, m, n))

    @property
    def n(self) -> int:
        return int(self.c.shape[1] + 1)

    @property
    def phase_rate(self) -> float:
        return self.branch.phase_rate * self.omega / HBAR

    @property
    def theta(self) -> np.ndarray:
        return self.phase_rate * (self.times - self.t_ref) + self.theta_offset

    def coefficients(self) -> np.ndarray:
        """Components against the reference frames, phase included (m, n)."""

        body = np.concatenate(
            [np.cos(self.alpha)[:, None], np.sin(self.alpha)[:, None] * self.c], axis=1
        )
        return (self.a * np.exp(1j * self.theta_offset))[:, None] * body

    def envelope(self) -> np.ndarray:
        return np.einsum("mij,mj->mi", self.frames, self.coefficients())

    def samples(self):
        return reconstruct(self).samples()

    def window(self, t_lo: float, t_hi: float) -> "MicroHistory":
        """Sub-history on the grid points inside [t_lo, t_hi]."""

        slack = 1e-12 * max(1.0, abs(t_lo), abs(t_hi))
        mask = (self.times >= t_lo - slack) & (self.times <= t_hi + slack)
        if np.count_nonzero(mask) < 2:
            raise GridError(f"window [{t_lo}, {t_hi}] holds fewer than 2 grid points")
        raw = None if self.raw_states is None else self.raw_states[mask]
        return MicroHistory(
            self.times[mask],
            self.a[mask],
            self.alpha[mask],
            self.theta_offset[mask],
            self.c[mask],
            self.frames[mask],
            self.branch,
            self.omega,
            self.t_ref,
            raw,
        )

    def time_reversed(self) -> "MicroHistory":
        """The t -> -t image: q'(t) = q(-t), carried by the opposite branch."""

        flipped = Branch.MINUS if self.branch is Branch.PLUS else Branch.PLUS
        raw = None if self.raw_states is None else self.raw_states[::-1].copy()
        return MicroHistory(
            -self.times[::-1],
            self.a[::-1].copy(),
            self.alpha[::-1].copy(),
            self.theta_offset[::-1].copy(),
            self.c[::-1].copy(),
            self.frames[::-1].copy(),
            flipped,
            self.omega,
            -self.t_ref,
            raw,
        )


def reconstruct(history: MicroHistory) -> Trajectory:
    """The q(t) trajectory a microhistory describes."""

    part = PhasePart(history.phase_rate, history.envelope())
    return Trajectory(history.times, (part,), history.branch, history.t_ref)


def parameterize(traj: Trajectory, basis: Basis) -> MicroHistory:
    """Write a single-branch trajectory in (A, alpha, theta, c_j) form.

    ``basis`` is an (n, n) matrix of column vectors or (m, n, n) frames.
    alpha is taken in [0, pi/2]; theta follows the first basis component
    (or the dominant remaining one where the first vanishes) and is unwrapped
    along the grid.
    """

    if traj.branch is Branch.MIXED or len(traj.parts) != 1:
        raise ValidationFailure("mixed trajectories have no single global phase")
    part = traj.parts[0]
    m, n = part.envelope.shape
    frames = _as_frames(basis, m, n)
    gram = np.einsum("mki,mkj->mij", frames.conj(), frames)
    if np.max(np.abs(gram - np.eye(n))) > 1e-8:
        raise ValidationFailure("reference basis must be orthonormal")

    coeff = np.einsum("mji,mj->mi", frames.conj(), part.envelope)
    amp = np.linalg.norm(coeff, axis=1)
    if np.any(amp == 0.0):
        raise ZeroNormError("cannot parameterize a zero-norm state")
    head = coeff[:, 0]
    rest = coeff[:, 1:]
    rest_norm = np.linalg.norm(rest, axis=1)
    alpha = np.arctan2(rest_norm, np.abs(head))

    use_head = np.abs(head) > 1e-12 * amp
    dominant = rest[np.arange(m), np.argmax(np.abs(rest), axis=1)]
    phase = np.unwrap(np.angle(np.where(use_head, head, dominant)))

    canonical = np.zeros(n - 1, dtype=complex)
    canonical[0] = 1.0
    tilted = rest_norm > 1e-12 * amp
    safe = np.where(tilted, rest_norm, 1.0)[:, None]
    c = np.where(tilted[:, None], rest * np.exp(-1j * phase)[:, None] / safe, canonical)
    c = c / np.linalg.norm(c, axis=1)[:, None]

    history = MicroHistory(
        traj.times,
        amp,
        alpha,
        phase,
        c,
        frames,
        traj.branch,
        abs(part.rate) * HBAR,
        traj.t_ref,
        traj.states(),
    )
    scale = max(1.0, float(np.max(amp)))
    error = float(np.max(np.abs(history.envelope() - part.envelope))) / scale
    if error > _RECON_TOL:
        raise NumericalGuardError(f"parameterization round trip error {error:.3e}")
    return history


def special_state_frames(
    ctx: LagrangianContext,
    times: np.ndarray,
    stationary_basis: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Orthonormal frames b_j(t) on ``times`` built from the special states.

    The final eigenstates at times[-1] are evolved backward along the q+
    branch; frame columns are their slow envelopes. When the field vanishes
    over the span there is no preferred final basis, so the stationary basis
    (identity unless given) is used at every grid point.
    """

    times = np.asarray(times, dtype=float)
    t_f = float(times[-1])
    n = ctx.n
    if ctx.gyro == 0.0 or ctx.schedule.is_zero_on(float(times[0]), t_f):
        basis = np.eye(n, dtype=complex) if stationary_basis is None else stationary_basis
        return _as_frames(basis, times.size, n)
    _, vectors = final_eigenbasis(ctx, t_f)
    frames = np.empty((times.size, n, n), dtype=complex)
    for j in range(n):
        traj = evolve_grid(ctx, SpinVector(vectors[:, j]), times[::-1], Branch.PLUS)
        frames[:, :, j] = traj.parts[0].envelope
    return frames


def mean_phase_anomaly_rate(sigma: float, mean_alphadot: float, omega: float) -> float:
    """Time-averaged anomalous phase rate (sigma^2 + <alphadot>^2) / (2 omega)."""

    if not omega > 0:
        raise ValidationFailure(f"omega must be positive, got {omega}")
    if abs(mean_alphadot) >= RATE_GATE * omega or abs(sigma) >= RATE_GATE * omega:
        raise AnomalyBudgetError(
            f"anomaly rates must stay below {RATE_GATE}*omega = {RATE_GATE * omega:g}"
        )
    return (sigma**2 + mean_alphadot**2) / (2.0 * omega)


def net_phase_anomaly(alpha_a: float, p: AnomalyParams) -> float:
    return (p.gamma_s**2 + alpha_a**2) / (2.0 * p.omega * p.t0)


def phase_uncertainty(alpha_a: float, p: AnomalyParams) -> float:
    """Global-phase spread accumulated over the timing window delta_t."""

    if p.delta_t > p.t0:
        logger.warning(
            "delta_t=%g exceeds t0=%g; small-window phase estimate extrapolated",
            p.delta_t,
            p.t0,
        )
    return p.delta_t * (p.gamma_s**2 + alpha_a**2) / (2.0 * p.omega * p.t0**2)


@dataclass(frozen=True)
class RaisedCosineRamp:
    """alpha(tau) = a0 + (a1 - a0) (1 - cos(pi tau / t0)) / 2 on [0, t0]."""

    alpha_start: float
    alpha_end: float
    t0: float
    omega: float

    @property
    def peak_rate(self) -> float:
        return abs(self.alpha_end - self.alpha_start) * np.pi / (2.0 * self.t0)

    def alpha(self, tau: np.ndarray) -> np.ndarray:
        delta = self.alpha_end - self.alpha_start
        return self.alpha_start + delta * (1.0 - np.cos(np.pi * tau / self.t0)) / 2.0

    def alphadot(self, tau: np.ndarray) -> np.ndarray:
        delta = self.alpha_end - self.alpha_start
        return delta * np.pi / (2.0 * self.t0) * np.sin(np.pi * tau / self.t0)

    def thetadot(self, tau: np.ndarray) -> np.ndarray:
        """Negative root of thetadot^2 + alphadot^2 = omega^2."""

        return -np.sqrt(self.omega**2 - self.alphadot(tau) ** 2)

    def anomaly_rate(self, tau: np.ndarray) -> np.ndarray:
        """thetadot + omega, written without cancellation."""

        rate2 = self.alphadot(tau) ** 2
        return rate2 / (self.omega + np.sqrt(self.omega**2 - rate2))

    def cumulative_anomaly(self, tau: np.ndarray) -> np.ndarray:
        """integral_0^tau (thetadot + omega) on an ascending grid starting at 0."""

        lo, hi = tau[:-1], tau[1:]
        mid, half = (hi + lo) / 2.0, (hi - lo) / 2.0
        nodes = mid[:, None] + half[:, None] * _GAUSS_NODES[None, :]
        pieces = half * (self.anomaly_rate(nodes) @ _GAUSS_WEIGHTS)
        return np.concatenate([[0.0], np.cumsum(pieces)])


def construct_history(
    ctx: LagrangianContext,
    p: AnomalyParams,
    alpha_start: float,
    alpha_end: float,
    grid_size: int,
    *,
    t_start: float = 0.0,
    times: Optional[np.ndarray] = None,
    c: Optional[Sequence[complex]] = None,
    theta_start: float = 0.0,
    stationary_basis: Optional[np.ndarray] = None,
) -> MicroHistory:
    """NLC-satisfying plus-branch history ramping alpha over [t_start, t_start + t0].

    A stays 1, the c_j stay at their ELE values and theta spends exactly the
    phase budget the alpha ramp leaves: thetadot = -sqrt(omega^2 - alphadot^2).
    """

    if grid_size < MIN_GRID:
        raise GridError(f"grid_size must be >= {MIN_GRID}, got {grid_size}")
    if abs(p.omega - ctx.omega) > 1e-12 * ctx.omega:
        raise ValidationFailure("anomaly omega does not match the Lagrangian context")

    if times is None:
        times = t_start + np.linspace(0.0, p.t0, grid_size)
    else:
        times = np.asarray(times, dtype=float)
        if times.size != grid_size:
            raise GridError(f"explicit grid has {times.size} points, expected {grid_size}")
        if abs(times[0] - t_start) > 1e-12 * max(1.0, abs(t_start)) or abs(
            times[-1] - (t_start + p.t0)
        ) > 1e-12 * max(1.0, abs(t_start + p.t0)):
            raise GridError("explicit grid must span [t_start, t_start + t0]")

    ramp = RaisedCosineRamp(alpha_start, alpha_end, p.t0, p.omega)
    if ramp.peak_rate >= p.omega:
        raise AnomalyBudgetError(
            f"ramp needs |alphadot| up to {ramp.peak_rate:.3g}, budget is omega={p.omega:g}"
        )

    tau = times - t_start
    alpha = ramp.alpha(tau)
    alpha[-1] = alpha_end
    offset = theta_start + ramp.cumulative_anomaly(tau)

    n = ctx.n
    if c is None:
        c_vec = np.zeros(n - 1, dtype=complex)
        c_vec[0] = 1.0
    else:
        c_vec = np.asarray(c, dtype=complex)
        if c_vec.shape != (n - 1,):
            raise DimensionMismatchError(f"c must have {n - 1} components")
        c_vec = c_vec / np.linalg.norm(c_vec)

    frames = special_state_frames(ctx, times, stationary_basis)
    logger.debug(
        "constructed history: alpha %g -> %g over t0=%g, net anomaly %.3e",
        alpha_start,
        alpha_end,
        p.t0,
        offset[-1] - offset[0],
    )
    return MicroHistory(
        times,
        np.ones(times.size),
        alpha,
        offset,
        c_vec,
        frames,
        Branch.PLUS,
        ctx.omega,
        float(times[0]),
    )


def ramp_phase_anomaly(history: MicroHistory) -> float:
    """Net deviation of theta from its classical line over the history."""

    return float(history.theta_offset[-1] - history.theta_offset[0])
