"""Spinor algebra: Pauli matrices, Euler rotations, and singlet statistics.

Pure complex linear algebra on 2- and 4-component amplitude vectors.  The
joint outcome tables consumed elsewhere are machine-derived here from
explicit projectors, never hand-typed.  Thread-safe without qualification.

The magnitude of the spin angular momentum is hbar/2; the uncertainty
heuristic that motivates it is recorded as ``SPIN_MAGNITUDE_FACTOR`` rather
than as an operation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .probspace import _complement

#: Unit constant; tests run in natural units.
HBAR_DEFAULT = 1.0

#: Spin magnitude in units of hbar.
SPIN_MAGNITUDE_FACTOR = 0.5

SIGMA_X = np.array([[0.0, 1.0], [1.0, 0.0]], dtype=complex)
SIGMA_Y = np.array([[0.0, -1.0j], [1.0j, 0.0]], dtype=complex)
SIGMA_Z = np.array([[1.0, 0.0], [0.0, -1.0]], dtype=complex)
PAULI = (SIGMA_X, SIGMA_Y, SIGMA_Z)

KET_PLUS = np.array([1.0, 0.0], dtype=complex)
KET_MINUS = np.array([0.0, 1.0], dtype=complex)

NORM_TOL = 1e-12


@dataclass(frozen=True)
class Spinor:
    """A normalized two-component complex amplitude vector."""

    up: complex
    down: complex

    def __post_init__(self):
        n = abs(self.up) ** 2 + abs(self.down) ** 2
        if abs(n - 1.0) > 1e-9:
            raise ValueError(f"spinor norm^2 = {n!r}, not 1")

    @classmethod
    def plus(cls) -> "Spinor":
        return cls(1.0 + 0.0j, 0.0j)

    @classmethod
    def minus(cls) -> "Spinor":
        return cls(0.0j, 1.0 + 0.0j)

    @classmethod
    def from_array(cls, a: np.ndarray) -> "Spinor":
        a = np.asarray(a, dtype=complex)
        a = a / np.linalg.norm(a)
        return cls(complex(a[0]), complex(a[1]))

    def as_array(self) -> np.ndarray:
        return np.array([self.up, self.down], dtype=complex)

    def probabilities(self) -> tuple[float, float]:
        p_up = abs(self.up) ** 2
        return (p_up, _complement(1.0, min(p_up, 1.0)))


@dataclass(frozen=True)
class Axis:
    """A measurement direction: polar angle theta, azimuth phi."""

    theta: float
    phi: float = 0.0

    def unit_vector(self) -> np.ndarray:
        st, ct = math.sin(self.theta), math.cos(self.theta)
        return np.array([math.cos(self.phi) * st, math.sin(self.phi) * st, ct])

    @classmethod
    def from_planar(cls, angle: float) -> "Axis":
        """Axis rotated by ``angle`` from z within the x-z plane."""
        return cls(theta=angle, phi=0.0)


@dataclass(frozen=True)
class TwoSpinorState:
    """A normalized four-component state over the basis (++, +-, -+, --)."""

    amplitudes: tuple

    def __post_init__(self):
        a = np.asarray(self.amplitudes, dtype=complex)
        if a.shape != (4,):
            raise ValueError("need exactly four amplitudes")
        if abs(np.linalg.norm(a) - 1.0) > 1e-9:
            raise ValueError("two-spinor state must be normalized")

    def as_array(self) -> np.ndarray:
        return np.asarray(self.amplitudes, dtype=complex)

    @classmethod
    def singlet(cls) -> "TwoSpinorState":
        """(|-+> - |+->)/sqrt(2): opposite spins in every basis."""
        s = 1.0 / math.sqrt(2.0)
        return cls((0.0j, -s + 0.0j, s + 0.0j, 0.0j))


# ---------------------------------------------------------------------------
# rotations
# ---------------------------------------------------------------------------


def rotation_matrix(psi: float, phi: float, theta: float) -> np.ndarray:
    """The 2x2 unitary for Euler angles (psi, phi, theta), z-x-z convention."""
    c, s = math.cos(theta / 2.0), math.sin(theta / 2.0)
    return np.array(
        [
            [np.exp(0.5j * (psi + phi)) * c, 1j * np.exp(0.5j * (psi - phi)) * s],
            [1j * np.exp(-0.5j * (psi - phi)) * s, np.exp(-0.5j * (psi + phi)) * c],
        ]
    )


def euler_rotation_3x3(psi: float, phi: float, theta: float) -> np.ndarray:
    """The 3x3 rotation whose action on field vectors matches rotation_matrix.

    Composition Rz(psi) Rx(theta) Rz(phi) with row-convention rotations, so
    that Q (B.sigma) Q+ = (R B).sigma holds identically.
    """

    def rz(a):
        ca, sa = math.cos(a), math.sin(a)
        return np.array([[ca, sa, 0.0], [-sa, ca, 0.0], [0.0, 0.0, 1.0]])

    def rx(a):
        ca, sa = math.cos(a), math.sin(a)
        return np.array([[1.0, 0.0, 0.0], [0.0, ca, sa], [0.0, -sa, ca]])

    return rz(psi) @ rx(theta) @ rz(phi)


def field_matrix(b: np.ndarray) -> np.ndarray:
    """B . sigma as a Hermitian 2x2 matrix."""
    bx, by, bz = (float(c) for c in np.asarray(b, dtype=float))
    return bx * SIGMA_X + by * SIGMA_Y + bz * SIGMA_Z


def transform_spinor(
    s: Spinor, theta: float, varphi: float = 0.0, psi: float = -math.pi / 2.0
) -> Spinor:
    """Express a spinor in the frame of a detector rotated by (theta, varphi).

    Applies the adjoint of the Euler rotation with the measurement
    convention psi = -pi/2 and phi = varphi + pi/2, under which |+> maps to
    (e^{-i varphi/2} cos(theta/2), e^{i varphi/2} sin(theta/2)).  ``psi``
    is exposed for callers that need the unreduced three-angle form.
    """
    q = rotation_matrix(psi, varphi + math.pi / 2.0, theta)
    out = q.conj().T @ s.as_array()
    return Spinor(complex(out[0]), complex(out[1]))


def measurement_probs(spin: str, theta: float) -> tuple[float, float]:
    """Born probabilities for a z-prepared spin measured at relative angle theta.

    ``spin`` is "up" or "down"; returns (p_up, p_down) summing to one
    exactly.
    """
    c2 = math.cos(theta / 2.0) ** 2
    c2 = min(max(c2, 0.0), 1.0)
    s2 = _complement(1.0, c2)
    if spin == "up":
        return (c2, s2)
    if spin == "down":
        return (s2, c2)
    raise ValueError(f"spin label must be 'up' or 'down', got {spin!r}")


def spin_operator(a: Axis, hbar: float = HBAR_DEFAULT) -> np.ndarray:
    """(hbar/2) a.sigma: Hermitian, traceless, eigenvalues +-hbar/2."""
    return (hbar / 2.0) * field_matrix(a.unit_vector())


# ---------------------------------------------------------------------------
# singlet statistics
# ---------------------------------------------------------------------------


def _projector(a: Axis, sign: int) -> np.ndarray:
    """Projector onto the +-1 eigenspace of a.sigma."""
    return 0.5 * (np.eye(2, dtype=complex) + sign * field_matrix(a.unit_vector()))


def singlet_correlation(mu: Axis, nu: Axis) -> float:
    """<(mu.sigma) x (nu.sigma)> on the singlet, by explicit 4x4 expectation."""
    psi = TwoSpinorState.singlet().as_array()
    op = np.kron(field_matrix(mu.unit_vector()), field_matrix(nu.unit_vector()))
    val = np.conj(psi) @ op @ psi
    return float(val.real)


def quantum_joint_probs(mu: Axis, nu: Axis) -> np.ndarray:
    """Joint outcome probabilities P(s1, s2) on the singlet via projectors.

    Returns a 2x2 table indexed (out1, out2) with 0 = up, 1 = down.  The
    raw projector expectations are canonicalized (within a few ulps) so
    that each wing marginal is exactly one half.
    """
    psi = TwoSpinorState.singlet().as_array()
    raw = np.empty((2, 2))
    for i, s1 in enumerate((+1, -1)):
        for j, s2 in enumerate((+1, -1)):
            op = np.kron(_projector(mu, s1), _projector(nu, s2))
            raw[i, j] = float((np.conj(psi) @ op @ psi).real)
    a = 0.5 * (raw[0, 0] + raw[1, 1])
    a = min(max(a, 0.0), 0.5)
    b = _complement(0.5, a)
    table = np.array([[a, b], [b, a]])
    if np.max(np.abs(table - raw)) > 1e-12:
        raise ArithmeticError("projector table deviates from singlet symmetry")
    return table
