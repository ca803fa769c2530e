"""The toy spin Lagrangian, its |p> vector, and null-Lagrangian residuals.

    |p> = [hbar*omega - gyro S.B(t)] |q> - i hbar |qdot>
    L   = <p|p> - hbar*omega (<q|p> + <p|q>)

Residuals are normalized by hbar^2 omega^2 <q|q>, the dominant Lagrangian
scale, so that the static state q = e1 scores exactly 1.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Protocol, Tuple

import numpy as np

from nlclab.errors import DimensionMismatchError, GridError, NumericalGuardError, ValidationFailure
from nlclab.physics.spin_algebra import HBAR, FieldSchedule, SpinOperatorSet, SpinVector


logger = logging.getLogger(__name__)

# Imaginary residue allowed in L, relative to its magnitude scale.
_REALITY_TOL = 1e-12


@dataclass(frozen=True)
class LagrangianContext:
    """Everything the Lagrangian needs besides the state: S, B(t), omega, gyro."""

    ops: SpinOperatorSet
    schedule: FieldSchedule
    omega: float
    gyro: float

    def __post_init__(self) -> None:
        if not self.omega > 0:
            raise ValidationFailure(f"omega must be positive, got {self.omega}")

    @property
    def n(self) -> int:
        return self.ops.n

    def coupling(self, t: float, near: Optional[float] = None) -> np.ndarray:
        """gyro * S.B(t); with ``near``, B follows the segment holding that time."""

        b = self.schedule.field_at(t) if near is None else self.schedule.field_on(t, near)
        return self.gyro * self.ops.dot(b)

    def hamiltonian(self, t: float) -> np.ndarray:
        return HBAR * self.omega * np.eye(self.n, dtype=complex) - self.coupling(t)

    def couplings(self, times: np.ndarray) -> np.ndarray:
        """gyro * S.B(t) stacked over a grid, shape (m, n, n)."""

        fields = np.array([self.schedule.field_at(float(t)) for t in times])
        stacked = np.stack([self.ops.sx, self.ops.sy, self.ops.sz])
        return self.gyro * np.einsum("mk,kij->mij", fields, stacked)


class SampledPath(Protocol):
    """Anything that can report q(t) and qdot(t) on a time grid."""

    def samples(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return (times, q, qdot) with q and qdot of shape (m, n)."""


def _check_dims(ctx: LagrangianContext, *vectors: SpinVector) -> None:
    for v in vectors:
        if v.n != ctx.n:
            raise DimensionMismatchError(f"state has n={v.n}, context has n={ctx.n}")


def p_vector(ctx: LagrangianContext, q: SpinVector, qdot: SpinVector, t: float) -> SpinVector:
    """|p> = H(t)|q> - i hbar |qdot>."""

    _check_dims(ctx, q, qdot)
    return SpinVector(ctx.hamiltonian(t) @ q.amps - 1j * HBAR * qdot.amps)


def _lagrangian(omega: float, q: np.ndarray, p: np.ndarray) -> complex:
    pp = np.vdot(p, p)
    qp = np.vdot(q, p)
    pq = np.vdot(p, q)
    return complex(pp - HBAR * omega * (qp + pq))


def lagrangian_value(
    ctx: LagrangianContext, q: SpinVector, qdot: SpinVector, t: float
) -> float:
    """L(q, qdot, t); raises if the evaluation is not real to rounding."""

    p = p_vector(ctx, q, qdot, t).amps
    value = _lagrangian(ctx.omega, q.amps, p)
    scale = max(
        float(np.vdot(p, p).real),
        HBAR * ctx.omega * 2.0 * abs(np.vdot(q.amps, p)),
        np.finfo(float).tiny,
    )
    if abs(value.imag) > _REALITY_TOL * scale:
        raise NumericalGuardError(f"Lagrangian has imaginary residue {value.imag:.3e}")
    return value.real


def lagrangian_profile(
    ctx: LagrangianContext, times: np.ndarray, q: np.ndarray, qdot: np.ndarray
) -> np.ndarray:
    """L on every grid point for stacked states q, qdot of shape (m, n)."""

    h = HBAR * ctx.omega * np.eye(ctx.n)[None, :, :] - ctx.couplings(times)
    p = np.einsum("mij,mj->mi", h, q) - 1j * HBAR * qdot
    pp = np.einsum("mi,mi->m", p.conj(), p).real
    qp = np.einsum("mi,mi->m", q.conj(), p)
    return pp - 2.0 * HBAR * ctx.omega * qp.real


def residual_profile(ctx: LagrangianContext, path: SampledPath) -> Tuple[np.ndarray, np.ndarray]:
    """(times, |L| / (hbar^2 omega^2 <q|q>)) over the path's grid."""

    times, q, qdot = path.samples()
    if times.size < 2:
        raise GridError(f"need at least 2 grid points, got {times.size}")
    lag = lagrangian_profile(ctx, times, q, qdot)
    norms = np.einsum("mi,mi->m", q.conj(), q).real
    norms = np.where(norms > 0.0, norms, 1.0)
    return times, np.abs(lag) / ((HBAR * ctx.omega) ** 2 * norms)


def nlc_residual(ctx: LagrangianContext, history: SampledPath) -> float:
    """Largest normalized |L| along a sampled history.

    qdot comes from second-order finite differences of the history's slowly
    varying envelope (one-sided at the ends), so the rest-mass oscillation
    never has to be resolved by the grid.
    """

    _, profile = residual_profile(ctx, history)
    return float(np.max(profile))


def trajectory_nlc_residual(ctx: LagrangianContext, traj: SampledPath) -> float:
    """nlc_residual for raw ELE trajectories."""

    return nlc_residual(ctx, traj)


def parametric_nlc_residual(
    omega: float, a: float, adot: float, alphadot: float, thetadot: float
) -> float:
    """hbar^2 omega^2 - (hbar thetadot)^2 - (hbar adot / a)^2 - (hbar alphadot)^2.

    Equals -L / A^2 for a history written in the special-state
    parameterization with constant c_j.
    """

    if not a > 0:
        raise ValidationFailure(f"amplitude A must be positive, got {a}")
    return (
        (HBAR * omega) ** 2
        - (HBAR * thetadot) ** 2
        - (HBAR * adot / a) ** 2
        - (HBAR * alphadot) ** 2
    )
