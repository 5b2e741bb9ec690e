"""Independent 1-D Schrödinger oracle used to validate the ensemble engine.

A Crank-Nicolson propagator on a uniform grid with hard-wall boundaries,
plus density-comparison metrics and an Ehrenfest residual check.  Nothing
here touches the stochastic engine: the two routes to the packet evolution
stay independent so one can audit the other.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_banded

from .dynamics import FieldEstimate, PhysParams

NORM_TOL = 1e-9


@dataclass(frozen=True)
class Grid1D:
    """A uniform spatial grid with at least 16 points."""

    x_min: float
    x_max: float
    n: int

    def __post_init__(self):
        if self.n < 16:
            raise ValueError("grid needs at least 16 points")
        if not self.x_max > self.x_min:
            raise ValueError("x_max must exceed x_min")

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / (self.n - 1)

    @property
    def x(self) -> np.ndarray:
        return np.linspace(self.x_min, self.x_max, self.n)


@dataclass(frozen=True)
class WaveFunction:
    """Complex amplitudes on a Grid1D, normalized in the discrete L2 sense."""

    grid: Grid1D
    psi: np.ndarray

    def __post_init__(self):
        psi = np.asarray(self.psi, dtype=complex)
        if psi.shape != (self.grid.n,):
            raise ValueError("psi must have one amplitude per grid point")
        norm = math.sqrt(float(np.sum(np.abs(psi) ** 2) * self.grid.dx))
        if abs(norm - 1.0) > NORM_TOL:
            raise ValueError(f"wavefunction norm {norm!r} deviates from 1")
        object.__setattr__(self, "psi", psi)

    @classmethod
    def normalized(cls, grid: Grid1D, amplitudes: np.ndarray) -> "WaveFunction":
        a = np.asarray(amplitudes, dtype=complex)
        norm = math.sqrt(float(np.sum(np.abs(a) ** 2) * grid.dx))
        if norm == 0.0:
            raise ValueError("cannot normalize the zero function")
        return cls(grid, a / norm)

    def density(self) -> np.ndarray:
        return np.abs(self.psi) ** 2

    def norm(self) -> float:
        return math.sqrt(float(np.sum(np.abs(self.psi) ** 2) * self.grid.dx))

    def position_mean(self) -> float:
        return float(np.sum(self.grid.x * self.density()) * self.grid.dx)

    def position_variance(self) -> float:
        m = self.position_mean()
        return float(np.sum((self.grid.x - m) ** 2 * self.density()) * self.grid.dx)

    def velocity_mean(self, p: PhysParams) -> float:
        """<v> = (hbar/m) Im(psi* dpsi/dx) integrated over the grid.

        Fourth-order interior stencil; the hard-wall boundary cells fall
        back to the second-order form (psi vanishes there anyway).
        """
        psi = self.psi
        h = self.grid.dx
        dpsi = np.gradient(psi, h)
        dpsi[2:-2] = (
            -psi[4:] + 8.0 * psi[3:-1] - 8.0 * psi[1:-3] + psi[:-4]
        ) / (12.0 * h)
        val = np.sum(np.conj(psi) * dpsi) * h
        return float(p.hbar / p.m0 * val.imag)

    def to_csv(self) -> str:
        lines = ["x,re_psi,im_psi,density"]
        rho = self.density()
        for xi, a, r in zip(self.grid.x, self.psi, rho):
            lines.append(f"{xi!r},{a.real!r},{a.imag!r},{r!r}")
        return "\n".join(lines) + "\n"


def gaussian_packet(
    grid: Grid1D, sigma0: float, x0: float = 0.0, velocity: float = 0.0,
    p: PhysParams | None = None,
) -> WaveFunction:
    """A minimum-uncertainty packet: position spread sigma0, group velocity."""
    p = p or PhysParams()
    k0 = p.m0 * velocity / p.hbar
    x = grid.x
    amp = np.exp(-((x - x0) ** 2) / (4.0 * sigma0**2) + 1j * k0 * x)
    return WaveFunction.normalized(grid, amp)


def free_packet_variance(t: float, sigma0: float, p: PhysParams) -> float:
    """Analytic spread of a free packet: sigma0^2 + (hbar t / (2 m sigma0))^2."""
    return sigma0**2 + (p.hbar * t / (2.0 * p.m0 * sigma0)) ** 2


# ---------------------------------------------------------------------------
# propagation
# ---------------------------------------------------------------------------


def _banded_factors(grid: Grid1D, V: np.ndarray, p: PhysParams, dt: float):
    """The Cayley pair (A, B) with A psi' = B psi, A = 1 + i dt H / (2 hbar)."""
    n = grid.n
    dx = grid.dx
    kin = p.hbar**2 / (2.0 * p.m0 * dx**2)
    diag_h = 2.0 * kin + np.asarray(V, dtype=float)
    off_h = -kin
    lam = 1j * dt / (2.0 * p.hbar)
    ab = np.zeros((3, n), dtype=complex)
    ab[0, 1:] = lam * off_h
    ab[1, :] = 1.0 + lam * diag_h
    ab[2, :-1] = lam * off_h
    return ab, diag_h, off_h, lam


def crank_nicolson_step(
    psi: WaveFunction, V: np.ndarray, p: PhysParams, dt: float
) -> WaveFunction:
    """One unconditionally norm-preserving implicit step under potential V."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    V = np.asarray(V, dtype=float)
    if V.shape != (psi.grid.n,) or not np.all(np.isfinite(V)):
        raise ValueError("V must be finite with one value per grid point")
    ab, diag_h, off_h, lam = _banded_factors(psi.grid, V, p, dt)
    rhs = (1.0 - lam * diag_h) * psi.psi
    rhs[:-1] += -lam * off_h * psi.psi[1:]
    rhs[1:] += -lam * off_h * psi.psi[:-1]
    out = solve_banded((1, 1), ab, rhs)
    if not np.all(np.isfinite(out)):
        raise ArithmeticError("tridiagonal solve produced non-finite values")
    return WaveFunction(psi.grid, out)


def evolve_schrodinger(
    psi0: WaveFunction,
    V: np.ndarray,
    p: PhysParams,
    t_final: float,
    dt: float,
    snapshot_every: int | None = None,
) -> tuple[WaveFunction, list[WaveFunction]]:
    """Repeated Crank-Nicolson stepping; optionally keeps periodic snapshots."""
    if t_final < dt:
        raise ValueError("t_final must be at least dt")
    steps = int(round(t_final / dt))
    V = np.asarray(V, dtype=float)
    ab, diag_h, off_h, lam = _banded_factors(psi0.grid, V, p, dt)
    psi = psi0.psi.copy()
    snapshots = [WaveFunction(psi0.grid, psi.copy())] if snapshot_every else []
    for k in range(steps):
        rhs = (1.0 - lam * diag_h) * psi
        rhs[:-1] += -lam * off_h * psi[1:]
        rhs[1:] += -lam * off_h * psi[:-1]
        psi = solve_banded((1, 1), ab, rhs)
        if snapshot_every and (k + 1) % snapshot_every == 0:
            snapshots.append(WaveFunction(psi0.grid, psi.copy()))
    return WaveFunction(psi0.grid, psi), snapshots


# ---------------------------------------------------------------------------
# comparisons
# ---------------------------------------------------------------------------


def compare_density(ensemble_rho: FieldEstimate, psi: WaveFunction) -> dict:
    """L1 and Kolmogorov-Smirnov distances: binned ensemble vs |psi|^2.

    The wavefunction density is integrated over the ensemble's bins
    (trapezoid rule on the fine grid); probability mass of |psi|^2 outside
    the binned range enters the L1 distance and the KS envelope.  The
    ensemble bins must lie inside the oracle grid.
    """
    edges = np.asarray(ensemble_rho.edges, dtype=float)
    if edges[0] < psi.grid.x_min - 1e-12 or edges[-1] > psi.grid.x_max + 1e-12:
        raise ValueError("ensemble bins extend beyond the oracle grid")
    widths = np.diff(edges)
    p_ens = ensemble_rho.rho * widths
    x = psi.grid.x
    rho = psi.density()
    cdf = np.concatenate([[0.0], np.cumsum(0.5 * (rho[1:] + rho[:-1]) * np.diff(x))])
    total = cdf[-1]
    cdf_at = np.interp(edges, x, cdf)
    p_psi = np.diff(cdf_at)
    below = cdf_at[0]
    above = total - cdf_at[-1]
    l1 = float(np.abs(p_ens - p_psi).sum() + below + above)
    ens_cdf = np.concatenate([[0.0], np.cumsum(p_ens)])
    ks = float(np.max(np.abs(ens_cdf - (cdf_at - cdf_at[0]))))
    ks = max(ks, float(below), float(above))
    return {"l1_distance": l1, "ks_distance": ks}


def ehrenfest_check(
    snapshots: list[WaveFunction], V: np.ndarray, p: PhysParams, dt: float
) -> dict:
    """Residual of d<v>/dt - <F>/m over interior snapshots (centered in time)."""
    if len(snapshots) < 3:
        raise ValueError("need at least three snapshots")
    V = np.asarray(V, dtype=float)
    grid = snapshots[0].grid
    force = -np.gradient(V, grid.dx)
    v_mean = np.array([w.velocity_mean(p) for w in snapshots])
    residuals = []
    for k in range(1, len(snapshots) - 1):
        dvdt = (v_mean[k + 1] - v_mean[k - 1]) / (2.0 * dt)
        f_mean = float(np.sum(force * snapshots[k].density()) * grid.dx)
        residuals.append(abs(dvdt - f_mean / p.m0))
    return {"max_residual": float(max(residuals)), "residuals": residuals}
