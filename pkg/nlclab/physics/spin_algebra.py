"""Dense linear algebra for n-dimensional spin spaces.

Units: hbar = 1 throughout. The rest energy only enters as the rest frequency
``omega`` (mc^2 / hbar), so every Hamiltonian here reads
``H = omega * I - gyro * (S . B)``.
"""

import bisect
import logging
from dataclasses import dataclass, field
from typing import Iterable, List, Sequence, Tuple

import numpy as np

from nlclab.errors import (
    DimensionMismatchError,
    InvalidDimensionError,
    ScheduleCoverageError,
    ValidationFailure,
)


logger = logging.getLogger(__name__)

HBAR = 1.0

# Relative slack used when matching segment boundaries and coverage ends.
_TIME_TOL = 1e-12


def _readonly(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class SpinVector:
    """n complex amplitudes representing |q(t)> at one instant."""

    amps: np.ndarray

    def __post_init__(self) -> None:
        amps = np.array(self.amps, dtype=complex).reshape(-1)
        if amps.size < 2:
            raise InvalidDimensionError(f"spin vectors need n >= 2, got n={amps.size}")
        if not np.all(np.isfinite(amps)):
            raise ValidationFailure("spin vector amplitudes must be finite")
        object.__setattr__(self, "amps", _readonly(amps))

    @classmethod
    def basis(cls, n: int, j: int) -> "SpinVector":
        """Unit vector e_{j+1} (zero-based ``j``) of an n-dimensional space."""

        amps = np.zeros(n, dtype=complex)
        amps[j] = 1.0
        return cls(amps)

    @property
    def n(self) -> int:
        return int(self.amps.size)

    @property
    def norm2(self) -> float:
        return float(np.vdot(self.amps, self.amps).real)

    def normalized(self) -> "SpinVector":
        return SpinVector(self.amps / np.sqrt(self.norm2))

    def __add__(self, other: "SpinVector") -> "SpinVector":
        _check_same_dim(self.n, other.n)
        return SpinVector(self.amps + other.amps)

    def __sub__(self, other: "SpinVector") -> "SpinVector":
        _check_same_dim(self.n, other.n)
        return SpinVector(self.amps - other.amps)

    def __mul__(self, scalar: complex) -> "SpinVector":
        return SpinVector(self.amps * scalar)

    __rmul__ = __mul__

    def __neg__(self) -> "SpinVector":
        return SpinVector(-self.amps)


def _check_same_dim(a: int, b: int) -> None:
    if a != b:
        raise DimensionMismatchError(f"dimension mismatch: {a} vs {b}")


def inner(a: SpinVector, b: SpinVector) -> complex:
    """<a|b>, conjugate-linear in the first slot."""

    _check_same_dim(a.n, b.n)
    return complex(np.vdot(a.amps, b.amps))


@dataclass(frozen=True)
class SpinOperatorSet:
    """Spin operators sx, sy, sz in units of hbar."""

    sx: np.ndarray
    sy: np.ndarray
    sz: np.ndarray

    @property
    def n(self) -> int:
        return int(self.sz.shape[0])

    @property
    def spin(self) -> float:
        return (self.n - 1) / 2.0

    def dot(self, b: Sequence[float]) -> np.ndarray:
        """S . b for a 3-vector b."""

        bx, by, bz = (float(v) for v in b)
        return bx * self.sx + by * self.sy + bz * self.sz

    def commutator_residuals(self) -> Tuple[float, float, float]:
        """Max-abs residuals of [sx,sy]-i sz, [sy,sz]-i sx, [sz,sx]-i sy."""

        def resid(a: np.ndarray, b: np.ndarray, c: np.ndarray) -> float:
            return float(np.max(np.abs(a @ b - b @ a - 1j * HBAR * c)))

        return (
            resid(self.sx, self.sy, self.sz),
            resid(self.sy, self.sz, self.sx),
            resid(self.sz, self.sx, self.sy),
        )


def build_spin_operators(n: int) -> SpinOperatorSet:
    """Standard ladder construction of the spin-(n-1)/2 operators."""

    if n < 2:
        raise InvalidDimensionError(f"spin operators need n >= 2, got n={n}")

    s = (n - 1) / 2.0
    m = s - np.arange(n)
    sz = np.diag(m).astype(complex) * HBAR

    # S+ |m> = sqrt(s(s+1) - m(m+1)) |m+1>; index i-1 holds m_i + 1.
    splus = np.zeros((n, n), dtype=complex)
    for i in range(1, n):
        splus[i - 1, i] = np.sqrt(s * (s + 1) - m[i] * (m[i] + 1)) * HBAR
    sminus = splus.conj().T

    sx = (splus + sminus) / 2.0
    sy = (splus - sminus) / 2.0j
    return SpinOperatorSet(_readonly(sx), _readonly(sy), _readonly(sz))


def hamiltonian(
    ops: SpinOperatorSet, b: Sequence[float], omega: float, gyro: float
) -> np.ndarray:
    """H = hbar*omega*I - gyro*(S . b)."""

    return HBAR * omega * np.eye(ops.n, dtype=complex) - gyro * ops.dot(b)


def eigenbasis(ops: SpinOperatorSet, axis: Sequence[float]) -> Tuple[np.ndarray, np.ndarray]:
    """Eigenpairs of S . n_hat sorted by descending m.

    Columns of the returned matrix are the eigenvectors, each with its
    largest-magnitude component made real and positive.
    """

    direction = np.asarray(axis, dtype=float)
    length = float(np.linalg.norm(direction))
    if length == 0.0:
        raise ValidationFailure("axis must be a non-zero 3-vector")
    values, vectors = np.linalg.eigh(ops.dot(direction / length))
    order = np.argsort(values)[::-1]
    values = values[order]
    vectors = vectors[:, order]
    for k in range(vectors.shape[1]):
        col = vectors[:, k]
        pivot = int(np.argmax(np.abs(col)))
        vectors[:, k] = col * (abs(col[pivot]) / col[pivot])
    return values, vectors


@dataclass(frozen=True)
class FieldSegment:
    """Linear ramp of the field from ``b_start`` at ``t_start`` to ``b_end`` at ``t_end``."""

    t_start: float
    t_end: float
    b_start: Tuple[float, float, float]
    b_end: Tuple[float, float, float]

    def at(self, t: float) -> np.ndarray:
        span = self.t_end - self.t_start
        w = 0.0 if span == 0.0 else (t - self.t_start) / span
        return (1.0 - w) * np.asarray(self.b_start) + w * np.asarray(self.b_end)

    @property
    def is_zero(self) -> bool:
        return not any(self.b_start) and not any(self.b_end)


@dataclass(frozen=True)
class FieldSchedule:
    """Piecewise-linear magnetic field history B(t).

    Segments are contiguous and ordered; a time on a shared boundary belongs
    to the later segment, so jumps happen only at boundaries.
    """

    segments: Tuple[FieldSegment, ...]
    _starts: Tuple[float, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        segments = tuple(self.segments)
        if not segments:
            raise ValidationFailure("a field schedule needs at least one segment")
        problems: List[str] = []
        for k, seg in enumerate(segments):
            if not seg.t_end > seg.t_start:
                problems.append(f"segment {k}: t_end must exceed t_start")
            if k and not _close(seg.t_start, segments[k - 1].t_end):
                problems.append(
                    f"segment {k}: starts at {seg.t_start}, previous ends at "
                    f"{segments[k - 1].t_end}"
                )
        if problems:
            raise ValidationFailure("; ".join(problems))
        object.__setattr__(self, "segments", segments)
        object.__setattr__(self, "_starts", tuple(s.t_start for s in segments))

    @classmethod
    def constant(
        cls, b: Sequence[float], t_start: float, t_end: float
    ) -> "FieldSchedule":
        vec = tuple(float(v) for v in b)
        return cls((FieldSegment(float(t_start), float(t_end), vec, vec),))

    @classmethod
    def zero(cls, t_start: float, t_end: float) -> "FieldSchedule":
        return cls.constant((0.0, 0.0, 0.0), t_start, t_end)

    @classmethod
    def from_pieces(
        cls,
        pieces: Iterable[Tuple[float, float, Sequence[float], Sequence[float]]],
    ) -> "FieldSchedule":
        return cls(
            tuple(
                FieldSegment(
                    float(t0),
                    float(t1),
                    tuple(float(v) for v in b0),
                    tuple(float(v) for v in b1),
                )
                for t0, t1, b0, b1 in pieces
            )
        )

    @property
    def t_start(self) -> float:
        return self.segments[0].t_start

    @property
    def t_end(self) -> float:
        return self.segments[-1].t_end

    def covers(self, t0: float, t1: float) -> bool:
        lo, hi = min(t0, t1), max(t0, t1)
        return _at_least(lo, self.t_start) and _at_most(hi, self.t_end)

    def require(self, t0: float, t1: float) -> None:
        if not self.covers(t0, t1):
            raise ScheduleCoverageError(
                f"schedule covers [{self.t_start}, {self.t_end}], "
                f"requested [{min(t0, t1)}, {max(t0, t1)}]"
            )

    def field_at(self, t: float) -> np.ndarray:
        if not self.covers(t, t):
            raise ScheduleCoverageError(
                f"t={t} outside schedule [{self.t_start}, {self.t_end}]"
            )
        k = max(bisect.bisect_right(self._starts, t) - 1, 0)
        return self.segments[k].at(t)

    def field_on(self, t: float, near: float) -> np.ndarray:
        """B(t) from the linear law of the segment holding ``near``.

        Lets an integrator stay on one side of a jump at a segment boundary.
        """

        if not self.covers(near, near):
            raise ScheduleCoverageError(
                f"t={near} outside schedule [{self.t_start}, {self.t_end}]"
            )
        k = max(bisect.bisect_right(self._starts, near) - 1, 0)
        return self.segments[k].at(t)

    @property
    def boundaries(self) -> Tuple[float, ...]:
        """Interior segment boundaries, where B or its slope may jump."""

        return self._starts[1:]

    def max_field(self) -> float:
        return max(
            max(float(np.linalg.norm(s.b_start)), float(np.linalg.norm(s.b_end)))
            for s in self.segments
        )

    def is_zero_on(self, t0: float, t1: float) -> bool:
        lo, hi = min(t0, t1), max(t0, t1)
        return all(s.is_zero for s in self.segments if s.t_end > lo and s.t_start < hi)

    def mirrored(self) -> "FieldSchedule":
        """Time-reversed schedule t -> -t; B is odd under time reversal."""

        def flip(b: Tuple[float, float, float]) -> Tuple[float, float, float]:
            return tuple(-v for v in b)  # type: ignore[return-value]

        return FieldSchedule(
            tuple(
                FieldSegment(-s.t_end, -s.t_start, flip(s.b_end), flip(s.b_start))
                for s in reversed(self.segments)
            )
        )


def _scale(*values: float) -> float:
    return max(1.0, *(abs(v) for v in values))


def _close(a: float, b: float) -> bool:
    return abs(a - b) <= _TIME_TOL * _scale(a, b)


def _at_least(t: float, bound: float) -> bool:
    return t >= bound or _close(t, bound)


def _at_most(t: float, bound: float) -> bool:
    return t <= bound or _close(t, bound)
