import math

import numpy as np
import pytest

from nlclab.errors import (
    DimensionMismatchError,
    InvalidDimensionError,
    ScheduleCoverageError,
    ValidationFailure,
)
from nlclab.physics.spin_algebra import (
    HBAR,
    FieldSchedule,
    FieldSegment,
    SpinVector,
    build_spin_operators,
    eigenbasis,
    hamiltonian,
    inner,
)
from tests.helpers import random_schedule


@pytest.mark.parametrize("n", range(2, 7))
def test_operator_set_is_an_su2_representation(n):
    ops = build_spin_operators(n)
    s = (n - 1) / 2.0

    for mat in (ops.sx, ops.sy, ops.sz):
        assert np.max(np.abs(mat - mat.conj().T)) <= 1e-12
        values = np.sort(np.linalg.eigvalsh(mat))
        assert np.allclose(values, HBAR * (np.arange(n) - s), atol=1e-12)
    assert max(ops.commutator_residuals()) <= 1e-12

    casimir = ops.sx @ ops.sx + ops.sy @ ops.sy + ops.sz @ ops.sz
    assert np.allclose(casimir, s * (s + 1) * np.eye(n), atol=1e-12)


def test_spin_half_matches_pauli_matrices():
    ops = build_spin_operators(2)

    assert np.allclose(ops.sz, np.diag([0.5, -0.5]))
    assert np.allclose(ops.sx, 0.5 * np.array([[0, 1], [1, 0]]))
    assert np.allclose(ops.sy, 0.5 * np.array([[0, -1j], [1j, 0]]))


def test_spin_one_sz_spectrum():
    assert np.allclose(np.diag(build_spin_operators(3).sz).real, [1.0, 0.0, -1.0])


@pytest.mark.parametrize("n", [0, 1])
def test_build_spin_operators_rejects_small_dimension(n):
    with pytest.raises(InvalidDimensionError):
        build_spin_operators(n)


def test_hamiltonian_zero_field_is_rest_energy():
    ops = build_spin_operators(3)
    assert np.allclose(hamiltonian(ops, (0, 0, 0), 7.0, 2.0), 7.0 * np.eye(3))


def test_hamiltonian_along_z_is_diagonal():
    ops = build_spin_operators(2)
    omega, gyro, bz = 1e3, 2.5, 4.0

    h = hamiltonian(ops, (0.0, 0.0, bz), omega, gyro)

    expected = np.diag([omega - gyro * bz / 2, omega + gyro * bz / 2])
    assert np.allclose(h, expected, atol=1e-12)


def test_hamiltonian_transverse_field_eigenvalues():
    ops = build_spin_operators(2)
    omega, gyro, bx = 50.0, 1.5, 3.0

    values = np.linalg.eigvalsh(hamiltonian(ops, (bx, 0.0, 0.0), omega, gyro))

    assert np.allclose(values, [omega - gyro * bx / 2, omega + gyro * bx / 2], atol=1e-12)


def test_hamiltonian_is_hermitian_for_random_draws(rng):
    for _ in range(100):
        ops = build_spin_operators(int(rng.integers(2, 7)))
        h = hamiltonian(ops, rng.normal(size=3) * 10, rng.uniform(1, 1e6), rng.normal())
        assert np.max(np.abs(h - h.conj().T)) <= 1e-12


def test_inner_product_convention():
    e1, e2 = SpinVector.basis(2, 0), SpinVector.basis(2, 1)

    assert inner(e1, e1) == 1
    assert inner(e1, e2) == 0
    assert inner(1j * e1, e1) == -1j


def test_inner_rejects_dimension_mismatch():
    with pytest.raises(DimensionMismatchError):
        inner(SpinVector.basis(2, 0), SpinVector.basis(3, 0))


def test_spin_vector_validation():
    with pytest.raises(InvalidDimensionError):
        SpinVector([1.0])
    with pytest.raises(ValidationFailure):
        SpinVector([1.0, math.nan])

    v = SpinVector([3.0, 4.0j])
    assert v.norm2 == pytest.approx(25.0)
    assert v.normalized().norm2 == pytest.approx(1.0)


@pytest.mark.parametrize("n", [2, 3, 5])
def test_eigenbasis_sorted_by_descending_m(n, rng):
    ops = build_spin_operators(n)
    axis = rng.normal(size=3)

    values, vectors = eigenbasis(ops, axis)

    s = (n - 1) / 2.0
    assert np.allclose(values, s - np.arange(n), atol=1e-10)
    assert np.allclose(vectors.conj().T @ vectors, np.eye(n), atol=1e-12)
    op = ops.dot(axis / np.linalg.norm(axis))
    assert np.allclose(op @ vectors, vectors * values, atol=1e-10)
    for k in range(n):
        pivot = vectors[np.argmax(np.abs(vectors[:, k])), k]
        assert pivot.imag == pytest.approx(0.0, abs=1e-15)
        assert pivot.real > 0


def test_eigenbasis_rejects_zero_axis():
    with pytest.raises(ValidationFailure):
        eigenbasis(build_spin_operators(2), (0, 0, 0))


def test_schedule_linear_interpolation_and_boundaries():
    schedule = FieldSchedule.from_pieces(
        [
            (0.0, 1.0, (0, 0, 0), (0, 0, 2)),
            (1.0, 2.0, (5, 0, 0), (5, 0, 0)),
        ]
    )

    assert np.allclose(schedule.field_at(0.5), [0, 0, 1])
    # A shared boundary belongs to the later segment.
    assert np.allclose(schedule.field_at(1.0), [5, 0, 0])
    assert schedule.max_field() == pytest.approx(5.0)
    assert not schedule.is_zero_on(0.0, 1.5)
    assert FieldSchedule.zero(0.0, 3.0).is_zero_on(0.5, 2.0)


def test_schedule_rejects_gaps():
    with pytest.raises(ValidationFailure, match="segment 1"):
        FieldSchedule(
            (
                FieldSegment(0.0, 1.0, (0, 0, 1), (0, 0, 1)),
                FieldSegment(1.5, 2.0, (0, 0, 1), (0, 0, 1)),
            )
        )


def test_schedule_coverage_errors():
    schedule = FieldSchedule.constant((0, 0, 1), 0.0, 1.0)

    assert schedule.covers(0.0, 1.0)
    with pytest.raises(ScheduleCoverageError):
        schedule.field_at(1.5)
    with pytest.raises(ScheduleCoverageError):
        schedule.require(-0.1, 0.5)


def test_mirrored_schedule_flips_time_and_field(rng):
    schedule = random_schedule(rng, -1.0, 2.0)
    mirrored = schedule.mirrored()

    assert mirrored.t_start == pytest.approx(-2.0)
    assert mirrored.t_end == pytest.approx(1.0)
    for t in rng.uniform(-0.99, 1.99, 20):
        assert np.allclose(mirrored.field_at(-t), -schedule.field_at(t), atol=1e-12)
