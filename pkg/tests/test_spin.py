"""Spinor algebra: rotations, Stern-Gerlach amplitudes, singlet statistics."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lhvlab.spin import (
    Axis,
    PAULI,
    SIGMA_Z,
    Spinor,
    TwoSpinorState,
    euler_rotation_3x3,
    field_matrix,
    measurement_probs,
    quantum_joint_probs,
    rotation_matrix,
    singlet_correlation,
    spin_operator,
    transform_spinor,
)

angles = st.floats(0.0, 2 * math.pi, allow_nan=False)


def trace_rotation(q):
    """Independent 3x3 extraction: R_ij = tr(sigma_i Q sigma_j Q+) / 2."""
    r = np.zeros((3, 3))
    for i in range(3):
        for j in range(3):
            r[i, j] = 0.5 * np.real(np.trace(PAULI[i] @ q @ PAULI[j] @ q.conj().T))
    return r


class TestRotationMatrix:
    def test_zero_angles_identity(self):
        assert np.allclose(rotation_matrix(0, 0, 0), np.eye(2), atol=1e-15)

    @given(psi=angles, phi=angles, theta=angles)
    @settings(max_examples=100)
    def test_unitary(self, psi, phi, theta):
        q = rotation_matrix(psi, phi, theta)
        assert np.abs(q @ q.conj().T - np.eye(2)).max() <= 1e-12

    def test_unit_determinant(self):
        q = rotation_matrix(math.pi / 4, math.pi / 3, math.pi / 5)
        assert abs(np.linalg.det(q) - 1.0) <= 1e-12

    @given(psi=angles, phi=angles, theta=angles)
    @settings(max_examples=50)
    def test_matches_euler_3x3(self, psi, phi, theta):
        q = rotation_matrix(psi, phi, theta)
        assert np.abs(trace_rotation(q) - euler_rotation_3x3(psi, phi, theta)).max() <= 1e-10


class TestFieldMatrix:
    def test_z_field(self):
        assert np.allclose(field_matrix([0, 0, 2.5]), np.diag([2.5, -2.5]))

    def test_x_field(self):
        m = field_matrix([1.5, 0, 0])
        assert m[0, 1] == 1.5 and m[1, 0] == 1.5 and m[0, 0] == 0

    def test_hermitian(self):
        m = field_matrix([0.3, -1.2, 0.7])
        assert np.abs(m - m.conj().T).max() == 0.0

    @given(
        psi=angles, phi=angles, theta=angles,
        bx=st.floats(-2, 2), by=st.floats(-2, 2), bz=st.floats(-2, 2),
    )
    @settings(max_examples=50)
    def test_conjugation_matches_rotated_field(self, psi, phi, theta, bx, by, bz):
        b = np.array([bx, by, bz])
        q = rotation_matrix(psi, phi, theta)
        lhs = q @ field_matrix(b) @ q.conj().T
        rhs = field_matrix(euler_rotation_3x3(psi, phi, theta) @ b)
        assert np.abs(lhs - rhs).max() <= 1e-12


class TestTransformSpinor:
    def test_aligned_axis_keeps_up(self):
        out = transform_spinor(Spinor.plus(), theta=0.0, varphi=0.8)
        p_up, p_down = out.probabilities()
        assert p_up == pytest.approx(1.0, abs=1e-15)
        assert abs(out.up - np.exp(-0.4j)) <= 1e-12

    def test_opposite_axis_flips(self):
        out = transform_spinor(Spinor.plus(), theta=math.pi)
        assert out.probabilities()[1] == pytest.approx(1.0, abs=1e-15)

    def test_minus_at_right_angle_is_even(self):
        out = transform_spinor(Spinor.minus(), theta=math.pi / 2)
        p_up, p_down = out.probabilities()
        assert p_up == pytest.approx(0.5, abs=1e-12)
        assert p_down == pytest.approx(0.5, abs=1e-12)

    def test_amplitude_form(self):
        theta, varphi = 1.1, 0.7
        out = transform_spinor(Spinor.plus(), theta, varphi)
        assert abs(out.up - np.exp(-0.5j * varphi) * math.cos(theta / 2)) <= 1e-12
        assert abs(out.down - np.exp(0.5j * varphi) * math.sin(theta / 2)) <= 1e-12

    @given(theta=angles, varphi=angles)
    @settings(max_examples=100)
    def test_norm_preserved(self, theta, varphi):
        out = transform_spinor(Spinor.plus(), theta, varphi)
        assert abs(abs(out.up) ** 2 + abs(out.down) ** 2 - 1.0) <= 1e-12

    @given(theta=st.floats(0.0, math.pi), varphi=angles)
    @settings(max_examples=50)
    def test_transformed_plus_is_axis_eigenvector(self, theta, varphi):
        v = transform_spinor(Spinor.plus(), theta, varphi).as_array()
        op = spin_operator(Axis(theta, varphi))
        assert np.abs(op @ v - 0.5 * v).max() <= 1e-12


class TestMeasurementProbs:
    def test_aligned_up(self):
        assert measurement_probs("up", 0.0) == (1.0, 0.0)

    def test_aligned_down(self):
        assert measurement_probs("down", 0.0) == (0.0, 1.0)

    def test_120_degrees(self):
        p_up, p_down = measurement_probs("up", 2 * math.pi / 3)
        assert p_up == pytest.approx(0.25, abs=1e-12)
        assert p_down == pytest.approx(0.75, abs=1e-12)

    @given(theta=st.floats(0.0, math.pi))
    @settings(max_examples=200)
    def test_sums_to_one_exactly(self, theta):
        for label in ("up", "down"):
            p_up, p_down = measurement_probs(label, theta)
            assert p_up + p_down == 1.0

    def test_bad_label(self):
        with pytest.raises(ValueError, match="spin label"):
            measurement_probs("sideways", 0.0)


class TestSpinOperator:
    def test_z_axis(self):
        assert np.allclose(spin_operator(Axis(0.0)), 0.5 * SIGMA_Z)

    @given(theta=st.floats(0.0, math.pi), phi=angles)
    @settings(max_examples=100)
    def test_eigenvalues_and_trace(self, theta, phi):
        op = spin_operator(Axis(theta, phi))
        evals = np.linalg.eigvalsh(op)
        assert np.abs(np.sort(evals) - [-0.5, 0.5]).max() <= 1e-12
        assert abs(np.trace(op)) <= 1e-12

    def test_hbar_scaling(self):
        op = spin_operator(Axis(0.3, 0.4), hbar=2.0)
        assert np.abs(np.sort(np.linalg.eigvalsh(op)) - [-1.0, 1.0]).max() <= 1e-12


class TestSinglet:
    def test_equal_axes(self):
        a = Axis(0.7, 1.3)
        assert singlet_correlation(a, a) == pytest.approx(-1.0, abs=1e-12)

    def test_orthogonal_axes(self):
        assert singlet_correlation(Axis(0.0), Axis(math.pi / 2)) == pytest.approx(
            0.0, abs=1e-12
        )

    def test_sixty_degrees(self):
        assert singlet_correlation(Axis(0.0), Axis(math.pi / 3)) == pytest.approx(
            -0.5, abs=1e-12
        )

    def test_hundred_random_pairs(self):
        rng = np.random.default_rng(1234)
        for _ in range(100):
            mu = Axis(rng.uniform(0, math.pi), rng.uniform(0, 2 * math.pi))
            nu = Axis(rng.uniform(0, math.pi), rng.uniform(0, 2 * math.pi))
            expected = -float(mu.unit_vector() @ nu.unit_vector())
            assert singlet_correlation(mu, nu) == pytest.approx(expected, abs=1e-10)

    def test_singlet_state_normalized(self):
        psi = TwoSpinorState.singlet().as_array()
        assert abs(np.linalg.norm(psi) - 1.0) <= 1e-15


class TestQuantumJointProbs:
    def test_aligned(self):
        t = quantum_joint_probs(Axis(0.0), Axis(0.0))
        assert np.allclose(t, [[0.0, 0.5], [0.5, 0.0]], atol=1e-15)

    def test_right_angle(self):
        t = quantum_joint_probs(Axis(0.0), Axis(math.pi / 2))
        assert np.allclose(t, 0.25, atol=1e-12)

    def test_marginals_exactly_half(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            mu = Axis(rng.uniform(0, math.pi), rng.uniform(0, 2 * math.pi))
            nu = Axis(rng.uniform(0, math.pi), rng.uniform(0, 2 * math.pi))
            t = quantum_joint_probs(mu, nu)
            assert t[0, 0] + t[0, 1] == 0.5
            assert t[0, 0] + t[1, 0] == 0.5
            assert t[1, 0] + t[1, 1] == 0.5
            assert t[0, 1] + t[1, 1] == 0.5
            assert float(t.sum()) == pytest.approx(1.0, abs=1e-15)

    def test_recombination_matches_correlation(self):
        mu, nu = Axis(0.0), Axis(math.pi / 4)
        t = quantum_joint_probs(mu, nu)
        e = t[0, 0] + t[1, 1] - t[0, 1] - t[1, 0]
        assert e == pytest.approx(singlet_correlation(mu, nu), abs=1e-12)
        assert e == pytest.approx(-math.cos(math.pi / 4), abs=1e-12)


class TestValueTypes:
    def test_spinor_norm_enforced(self):
        with pytest.raises(ValueError, match="norm"):
            Spinor(1.0, 1.0)

    def test_two_spinor_norm_enforced(self):
        with pytest.raises(ValueError, match="normalized"):
            TwoSpinorState((1.0, 1.0, 0.0, 0.0))

    def test_axis_unit_vector(self):
        v = Axis(1.1, 2.2).unit_vector()
        assert abs(np.linalg.norm(v) - 1.0) <= 1e-12
