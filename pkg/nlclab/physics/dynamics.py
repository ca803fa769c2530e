"""Euler-Lagrange branches q+ and q- of the spin Lagrangian.

Both branches carry a rest-mass oscillation e^{-/+ i omega t} that is many
orders of magnitude faster than spin precession. Trajectories therefore store
the oscillation analytically and integrate only the slow envelope chi:

    q+(t) = e^{-i omega (t - t_ref)} chi(t)
    q-(t) = e^{+i omega (t - t_ref)} chi(t)
    i chi' = -gyro S.B(t) chi              (both branches)

Time derivatives of q are rebuilt from the analytic phase plus second-order
finite differences of the envelope.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import List, Tuple

import numpy as np
from scipy.linalg import expm

from nlclab.errors import (
    DegenerateBasisError,
    DimensionMismatchError,
    GridError,
    NumericalGuardError,
    SingularSystemError,
    ValidationFailure,
)
from nlclab.physics.lagrangian import LagrangianContext
from nlclab.physics.spin_algebra import HBAR, SpinVector, eigenbasis


logger = logging.getLogger(__name__)

# Endpoint branch-condition tolerance, relative to hbar*omega*|q|.
ENDPOINT_TOL = 1e-8
# Spacing below which two final eigenvalues count as degenerate.
_DEGENERACY_TOL = 1e-12
# Largest |gyro S.B| / (hbar omega) the branch decomposition accepts.
_MAX_STIFFNESS = 1e12


class Branch(str, Enum):
    PLUS = "plus"
    MINUS = "minus"
    MIXED = "mixed"

    @property
    def phase_rate(self) -> float:
        """Sign of the rest-mass phase rate in units of omega."""

        if self is Branch.PLUS:
            return -1.0
        if self is Branch.MINUS:
            return 1.0
        raise ValidationFailure("mixed trajectories have no single phase rate")


@dataclass(frozen=True)
class PhasePart:
    """One e^{i rate (t - t_ref)} * envelope(t) term of a trajectory."""

    rate: float
    envelope: np.ndarray


def envelope_rate(times: np.ndarray, values: np.ndarray) -> np.ndarray:
    """d/dt along axis 0: central in the interior, one-sided second order at the ends."""

    if times.size < 2:
        raise GridError(f"need at least 2 grid points, got {times.size}")
    edge = 2 if times.size >= 3 else 1
    return np.gradient(values, times, axis=0, edge_order=edge)


@dataclass(frozen=True)
class Trajectory:
    """Sampled history |q(t)> on an ascending time grid."""

    times: np.ndarray
    parts: Tuple[PhasePart, ...]
    branch: Branch
    t_ref: float

    def __post_init__(self) -> None:
        times = np.asarray(self.times, dtype=float)
        if times.ndim != 1 or times.size < 2:
            raise GridError("trajectory needs a 1-d grid with at least 2 points")
        if np.any(np.diff(times) <= 0):
            raise GridError("trajectory times must be strictly increasing")
        shapes = {p.envelope.shape for p in self.parts}
        if len(shapes) != 1 or next(iter(shapes))[0] != times.size:
            raise DimensionMismatchError("phase parts must share the trajectory grid")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "parts", tuple(self.parts))

    @property
    def n(self) -> int:
        return int(self.parts[0].envelope.shape[1])

    def _phases(self, rate: float) -> np.ndarray:
        return np.exp(1j * rate * (self.times - self.t_ref))[:, None]

    def states(self) -> np.ndarray:
        """q(t) stacked as (m, n)."""

        return sum(self._phases(p.rate) * p.envelope for p in self.parts)

    def derivatives(self) -> np.ndarray:
        """qdot(t) stacked as (m, n)."""

        return sum(
            self._phases(p.rate)
            * (1j * p.rate * p.envelope + envelope_rate(self.times, p.envelope))
            for p in self.parts
        )

    def samples(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.times, self.states(), self.derivatives()

    def state_at(self, k: int) -> SpinVector:
        return SpinVector(self.states()[k])

    @property
    def start(self) -> SpinVector:
        return self.state_at(0)

    @property
    def endpoint(self) -> SpinVector:
        return self.state_at(-1)

    def norms(self) -> np.ndarray:
        q = self.states()
        return np.einsum("mi,mi->m", q.conj(), q).real

    def index_of(self, t: float, tol: float = 1e-12) -> int:
        """Grid index holding time ``t``; GridError if it is not on the grid."""

        k = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[k] - t) > tol * max(1.0, abs(t)):
            raise GridError(f"t={t} is not on the trajectory grid")
        return k


def _rk4_step(ctx: LagrangianContext, chi: np.ndarray, t: float, t1: float) -> np.ndarray:
    h = t1 - t
    mid = t + 0.5 * h
    g0 = ctx.coupling(t, near=mid) / HBAR
    g_mid = ctx.coupling(mid) / HBAR
    g1 = ctx.coupling(t1, near=mid) / HBAR
    k1 = 1j * (g0 @ chi)
    k2 = 1j * (g_mid @ (chi + 0.5 * h * k1))
    k3 = 1j * (g_mid @ (chi + 0.5 * h * k2))
    k4 = 1j * (g1 @ (chi + h * k3))
    return chi + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _rk4_envelope(ctx: LagrangianContext, chi0: np.ndarray, path: np.ndarray) -> np.ndarray:
    """Classic RK4 for chi' = i gyro S.B(t) chi along ``path`` (any direction).

    Steps that straddle a schedule boundary are split there, so every
    sub-step sees one smooth segment of B.
    """

    cuts = np.asarray(ctx.schedule.boundaries, dtype=float)
    out = np.empty((path.size, chi0.size), dtype=complex)
    out[0] = chi0
    chi = chi0.astype(complex)
    for k in range(path.size - 1):
        t, t1 = float(path[k]), float(path[k + 1])
        lo, hi = min(t, t1), max(t, t1)
        slack = 1e-12 * max(1.0, abs(lo), abs(hi))
        inner = cuts[(cuts > lo + slack) & (cuts < hi - slack)]
        stops = [t, *(inner if t1 > t else inner[::-1]), t1]
        for a, b in zip(stops[:-1], stops[1:]):
            chi = _rk4_step(ctx, chi, float(a), float(b))
        out[k + 1] = chi
    return out


def _integrate(
    ctx: LagrangianContext,
    q0: SpinVector,
    path: np.ndarray,
    branch: Branch,
) -> Trajectory:
    if q0.n != ctx.n:
        raise DimensionMismatchError(f"state has n={q0.n}, context has n={ctx.n}")
    ctx.schedule.require(float(path[0]), float(path[-1]))
    t_ref = float(path[0])
    envelope = _rk4_envelope(ctx, q0.amps, path)
    times = path
    if path[-1] < path[0]:
        times = path[::-1].copy()
        envelope = envelope[::-1].copy()
    rate = branch.phase_rate * ctx.omega / HBAR
    traj = Trajectory(times, (PhasePart(rate, envelope),), branch, t_ref)
    _check_endpoint(ctx, traj, float(path[-1]))
    return traj


def evolve_grid(
    ctx: LagrangianContext, q0: SpinVector, path: np.ndarray, branch: Branch = Branch.PLUS
) -> Trajectory:
    """Integrate one branch along an explicit grid starting at ``path[0]``."""

    path = np.asarray(path, dtype=float)
    if path.size < 2:
        raise GridError("integration path needs at least 2 points")
    return _integrate(ctx, q0, path, branch)


def evolve_plus(
    ctx: LagrangianContext, q0: SpinVector, t0: float, t1: float, steps: int
) -> Trajectory:
    """q+ branch: i hbar qdot = (hbar omega - gyro S.B) q, starting from q(t0) = q0.

    ``t1 < t0`` integrates backward; the result is still on an ascending grid.
    """

    if steps < 1:
        raise ValidationFailure(f"steps must be >= 1, got {steps}")
    if t1 == t0:
        raise GridError("integration span must be non-zero")
    return _integrate(ctx, q0, np.linspace(t0, t1, steps + 1), Branch.PLUS)


def evolve_minus(
    ctx: LagrangianContext, q0: SpinVector, t0: float, t1: float, steps: int
) -> Trajectory:
    """q- branch: i hbar qdot = (-hbar omega - gyro S.B) q, so that p = 2 hbar omega q."""

    if steps < 1:
        raise ValidationFailure(f"steps must be >= 1, got {steps}")
    if t1 == t0:
        raise GridError("integration span must be non-zero")
    return _integrate(ctx, q0, np.linspace(t0, t1, steps + 1), Branch.MINUS)


def endpoint_residual(ctx: LagrangianContext, traj: Trajectory, t: float) -> float:
    """|p - p_branch| / (hbar omega |q|) at grid time ``t`` using the ODE slope.

    p_branch is 0 on the plus branch and 2 hbar omega q on the minus branch.
    """

    part = traj.parts[0]
    k = traj.index_of(t)
    env = part.envelope[k]
    phase = np.exp(1j * part.rate * (t - traj.t_ref))
    q = phase * env
    qdot = phase * (1j * part.rate * env + 1j * (ctx.coupling(t) @ env) / HBAR)
    p = ctx.hamiltonian(t) @ q - 1j * HBAR * qdot
    target = np.zeros_like(q) if traj.branch is Branch.PLUS else 2.0 * HBAR * ctx.omega * q
    norm = float(np.linalg.norm(q))
    if norm == 0.0:
        return 0.0
    return float(np.linalg.norm(p - target)) / (HBAR * ctx.omega * norm)


def _check_endpoint(ctx: LagrangianContext, traj: Trajectory, t_end: float) -> None:
    residual = endpoint_residual(ctx, traj, t_end)
    if residual > ENDPOINT_TOL:
        raise NumericalGuardError(
            f"{traj.branch.value} branch endpoint residual {residual:.3e} exceeds {ENDPOINT_TOL}"
        )


def decompose(
    ctx: LagrangianContext, q0: SpinVector, qdot0: SpinVector, t: float
) -> Tuple[SpinVector, SpinVector]:
    """Split (q, qdot) at time t into its q+ and q- branch components.

    Solves  q+ + q- = q0  and  -i H q+ - i (H - 2 hbar omega) q- = hbar qdot0,
    whose solution is  q- = (qdot0 + i H q0 / hbar) / (2 i omega),  q+ = q0 - q-.
    """

    if q0.n != ctx.n or qdot0.n != ctx.n:
        raise DimensionMismatchError("q0 and qdot0 must match the context dimension")
    n = ctx.n
    h = ctx.hamiltonian(t) / HBAR
    # The branches are 2 omega apart; the field coupling must not swamp that gap.
    stiffness = float(np.linalg.norm(ctx.coupling(t), 2)) / (HBAR * ctx.omega)
    if not np.isfinite(stiffness) or stiffness > _MAX_STIFFNESS:
        raise SingularSystemError(
            f"branch gap 2*omega is unresolved against the coupling (ratio {stiffness:.3e})"
        )

    minus = (qdot0.amps + 1j * (h @ q0.amps)) / (2j * ctx.omega)
    plus = q0.amps - minus
    rebuilt = -1j * (h @ plus) - 1j * ((h - 2.0 * ctx.omega * np.eye(n)) @ minus)
    scale = max(
        1.0, float(np.linalg.norm(qdot0.amps)), ctx.omega * float(np.linalg.norm(q0.amps))
    )
    residual = float(np.linalg.norm(rebuilt - qdot0.amps)) / scale
    if not residual <= 1e-10:
        raise SingularSystemError(f"branch decomposition residual {residual:.3e}")
    return SpinVector(plus), SpinVector(minus)


def combine(plus: Trajectory, minus: Trajectory) -> Trajectory:
    """q+ + q- on a shared grid; the sum is tagged ``mixed``."""

    if plus.times.shape != minus.times.shape or not np.allclose(
        plus.times, minus.times, rtol=0.0, atol=1e-12
    ):
        raise GridError("branches must share the same grid to be combined")
    # Re-reference each part to the plus trajectory's t_ref.
    parts: List[PhasePart] = list(plus.parts)
    shift = minus.t_ref - plus.t_ref
    for part in minus.parts:
        parts.append(PhasePart(part.rate, part.envelope * np.exp(-1j * part.rate * shift)))
    return Trajectory(plus.times, tuple(parts), Branch.MIXED, plus.t_ref)


def final_eigenbasis(ctx: LagrangianContext, t_f: float) -> Tuple[np.ndarray, np.ndarray]:
    """Eigenpairs of H(t_f), eigenvectors sorted by descending m along B(t_f)."""

    b = ctx.schedule.field_at(t_f)
    if ctx.gyro == 0.0 or not np.any(b):
        energies = np.full(ctx.n, HBAR * ctx.omega)
        raise DegenerateBasisError(energies)
    _, vectors = eigenbasis(ctx.ops, b)
    energies = np.real(np.einsum("ij,ik,kj->j", vectors.conj(), ctx.hamiltonian(t_f), vectors))
    gaps = np.abs(np.diff(np.sort(energies)))
    if np.any(gaps <= _DEGENERACY_TOL * max(1.0, float(np.max(np.abs(energies))))):
        raise DegenerateBasisError(energies)
    return energies, vectors


def special_states(
    ctx: LagrangianContext, t_f: float, t: float, steps: int
) -> List[Trajectory]:
    """Final eigenstates of H(t_f) evolved backward along q+ to time t."""

    if not t < t_f:
        raise ValidationFailure(f"special states need t < t_f, got t={t}, t_f={t_f}")
    _, vectors = final_eigenbasis(ctx, t_f)
    logger.debug("special states: %d eigenvectors from t_f=%g back to %g", ctx.n, t_f, t)
    return [evolve_plus(ctx, SpinVector(vectors[:, j]), t_f, t, steps) for j in range(ctx.n)]


def second_order_residual(ctx: LagrangianContext, traj: Trajectory) -> float:
    """Apply (hbar omega + gyro S.B + i hbar d/dt) to p(t) and report the largest
    interior value normalized by hbar^2 omega^2 |q|.

    Each phase part is handled on its envelope, so the operator's derivative
    never sees the rest-mass oscillation.
    """

    times = traj.times
    if times.size < 3:
        raise GridError("second-order check needs at least 3 grid points")
    g = ctx.couplings(times)
    total = np.zeros((times.size, traj.n), dtype=complex)
    for part in traj.parts:
        env = part.envelope
        shift = HBAR * ctx.omega - HBAR * part.rate
        p_env = (
            (HBAR * ctx.omega + HBAR * part.rate) * env
            - np.einsum("mij,mj->mi", g, env)
            - 1j * HBAR * envelope_rate(times, env)
        )
        applied = (
            shift * p_env
            + np.einsum("mij,mj->mi", g, p_env)
            + 1j * HBAR * envelope_rate(times, p_env)
        )
        total += np.exp(1j * part.rate * (times - traj.t_ref))[:, None] * applied
    q_norm = np.linalg.norm(traj.states(), axis=1)
    q_norm = np.where(q_norm > 0.0, q_norm, 1.0)
    profile = np.linalg.norm(total, axis=1) / ((HBAR * ctx.omega) ** 2 * q_norm)
    return float(np.max(profile[1:-1]))


def matrix_exponential_endpoint(
    ctx: LagrangianContext,
    q0: SpinVector,
    t0: float,
    t1: float,
    branch: Branch = Branch.PLUS,
) -> SpinVector:
    """Exact propagator for schedules that are piecewise constant on [t0, t1].

    The rest-mass phase is applied separately as e^{-/+ i omega (t1 - t0)}.
    """

    if branch is Branch.MIXED:
        raise ValidationFailure("the exact propagator needs a definite branch")
    if q0.n != ctx.n:
        raise DimensionMismatchError(f"state has n={q0.n}, context has n={ctx.n}")
    ctx.schedule.require(t0, t1)
    lo, hi = min(t0, t1), max(t0, t1)
    chi = q0.amps.astype(complex)
    pieces: List[Tuple[float, float, np.ndarray]] = []
    for seg in ctx.schedule.segments:
        a, b = max(seg.t_start, lo), min(seg.t_end, hi)
        if b <= a:
            continue
        if not np.allclose(seg.b_start, seg.b_end, rtol=0.0, atol=0.0):
            raise ValidationFailure("exact propagation needs piecewise-constant fields")
        pieces.append((a, b, ctx.gyro * ctx.ops.dot(seg.b_start) / HBAR))
    if t1 < t0:
        pieces = [(b, a, g) for a, b, g in reversed(pieces)]
    for a, b, g in pieces:
        chi = expm(1j * g * (b - a)) @ chi
    phase = np.exp(1j * branch.phase_rate * ctx.omega * (t1 - t0) / HBAR)
    return SpinVector(phase * chi)


def fidelity(a: SpinVector, b: SpinVector) -> float:
    """|<a|b>|^2 / (<a|a><b|b>)."""

    overlap = abs(np.vdot(a.amps, b.amps)) ** 2
    return float(overlap / (a.norm2 * b.norm2))
