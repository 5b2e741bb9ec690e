"""Ensemble Langevin engine: A/B sub-ensembles, field estimation, exchange.

The A ensemble runs with negative friction (it gains kinetic energy), the B
ensemble with positive friction; after every step the bin-local exchange
procedure swaps trajectories between them until the two mean velocities
cannot be brought closer, flipping spin labels along with ensemble labels
when superpositions are simulated.

Randomness is counter-based: every force component is a pure function of
(seed, step index, component), so results are bit-identical regardless of
how work is scheduled and any stream position can be addressed directly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import ndtri

ENSEMBLE_A = 0
ENSEMBLE_B = 1
SPIN_UP = 1
SPIN_DOWN = -1

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)

#: Stream layout: index = step * N_CHANNELS + channel.  Channels 0-2 carry
#: the Brownian force components; the rest are reserved for callers
#: (initial conditions at step 0, detection and disturbance draws).
N_CHANNELS = 8
CH_FORCE = (0, 1, 2)
CH_SHARED_DETECT = 3
CH_LOCAL_DETECT_1 = 4
CH_LOCAL_DETECT_2 = 5
CH_DISTURB = (5, 6, 7)


def _mix64(x: np.ndarray) -> np.ndarray:
    x = x.copy()
    x ^= x >> np.uint64(30)
    x *= _MIX1
    x ^= x >> np.uint64(27)
    x *= _MIX2
    x ^= x >> np.uint64(31)
    return x


def stream_uniform(seeds, step: int, channel) -> np.ndarray:
    """Uniform (0,1) draws, a pure function of (seed, step, channel).

    ``seeds`` and ``channel`` broadcast against each other; the underlying
    generator is the splitmix64 output function over a per-seed counter.
    """
    seeds = np.asarray(seeds, dtype=np.uint64)
    channel = np.asarray(channel, dtype=np.uint64)
    with np.errstate(over="ignore"):
        idx = np.uint64(step) * np.uint64(N_CHANNELS) + channel + np.uint64(1)
        state = seeds + idx * _GOLDEN
        z = _mix64(state)
    return ((z >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53


def stream_normal(seeds, step: int, channel) -> np.ndarray:
    """Standard normal draws via the inverse CDF of stream_uniform."""
    return ndtri(stream_uniform(seeds, step, channel))


# ---------------------------------------------------------------------------
# physics parameters
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PhysParams:
    """Unit system and Brownian-bath parameters.

    The diffusion coefficient is nu = hbar / (2 m0) and must equal
    kB * temperature * tau / m0, which ties temperature and tau together;
    the constructor checks the two parameterizations against each other.
    """

    m0: float = 1.0
    tau: float = 1.0
    tau_coll: float = 0.15811388300841897  # sqrt(0.1 * 1.0) / 2
    kB: float = 1.0
    hbar: float = 1.0
    temperature: float | None = None

    def __post_init__(self):
        if self.m0 <= 0 or self.tau <= 0 or self.tau_coll <= 0:
            raise ValueError("m0, tau and tau_coll must be positive")
        if self.temperature is None:
            object.__setattr__(self, "temperature", self._natural_temperature())
        else:
            expect = self._natural_temperature()
            if math.isfinite(expect) and abs(self.temperature - expect) > 1e-9 * max(
                1.0, expect
            ):
                raise ValueError(
                    f"temperature {self.temperature} inconsistent with "
                    f"kB*T*tau/m0 = hbar/(2 m0); expected {expect}"
                )

    def _natural_temperature(self) -> float:
        # from nu = kB T tau / m0 = hbar / (2 m0)
        return self.hbar / (2.0 * self.kB * self.tau) if math.isfinite(self.tau) else 0.0

    @classmethod
    def fluctuation_matched(
        cls, m0: float = 1.0, tau: float = 1.0, dt: float = 0.1,
        kB: float = 1.0, hbar: float = 1.0,
    ) -> "PhysParams":
        """Parameters whose per-step kicks equilibrate the damped ensemble.

        Matching the discrete velocity recursion's stationary variance to
        kB*T/m0 fixes the momentum-transfer time at sqrt(dt * tau) / 2.
        """
        return cls(m0=m0, tau=tau, tau_coll=math.sqrt(dt * tau) / 2.0, kB=kB, hbar=hbar)

    @property
    def nu(self) -> float:
        """Diffusion coefficient hbar / (2 m0)."""
        return self.hbar / (2.0 * self.m0)

    @property
    def force_sigma(self) -> float:
        """Std dev of each Brownian force component."""
        return math.sqrt(self.m0 * self.kB * self.temperature / 2.0) / self.tau_coll

    @property
    def thermal_speed(self) -> float:
        """Per-component thermal velocity scale sqrt(kB T / m0)."""
        return math.sqrt(self.kB * self.temperature / self.m0)


@dataclass(frozen=True)
class BrownianSource:
    """A seeded force stream: same seed, same sequence, on any schedule."""

    seed: int
    sigma: float

    def sample(self, step: int) -> np.ndarray:
        return sample_brownian_force(self, step)


def sample_brownian_force(src: BrownianSource, step: int) -> np.ndarray:
    """One 3-vector force draw; components independent zero-mean Gaussians.

    The variance per component is m0 kB T / (2 tau_coll^2) when ``sigma``
    comes from PhysParams.force_sigma.
    """
    if step < 0:
        raise ValueError("step index must be nonnegative")
    g = stream_normal(np.uint64(src.seed), step, np.asarray(CH_FORCE))
    return src.sigma * g


def _force_block(seeds: np.ndarray, sigmas: np.ndarray, step: int) -> np.ndarray:
    """(n, 3) force draws for n trajectories at one step."""
    g = stream_normal(seeds[:, None], step, np.asarray(CH_FORCE)[None, :])
    return sigmas[:, None] * g


# ---------------------------------------------------------------------------
# trajectories and ensembles
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Trajectory:
    """One hidden sample path at an instant."""

    id: int
    position: tuple[float, float, float]
    velocity: tuple[float, float, float]
    ensemble: str  # "A" | "B"
    spin: str      # "up" | "down"


@dataclass(frozen=True)
class BinGrid:
    """Uniform 1-D spatial binning along one coordinate axis.

    "Located at the same point" is discretized to bins of this width; the
    grid expands automatically to cover all positions.
    """

    width: float
    axis: int = 0
    origin: float = 0.0

    def __post_init__(self):
        if self.width <= 0:
            raise ValueError("bin width must be positive")

    def indices(self, positions: np.ndarray) -> np.ndarray:
        x = positions[:, self.axis]
        return np.floor((x - self.origin) / self.width).astype(np.int64)


class EnsembleState:
    """Mutable array-of-columns state for one trajectory ensemble."""

    def __init__(
        self,
        ids: np.ndarray,
        positions: np.ndarray,
        velocities: np.ndarray,
        ensembles: np.ndarray,
        spins: np.ndarray,
        grid: BinGrid,
        time: float = 0.0,
        c_max: float = math.inf,
    ):
        self.ids = np.asarray(ids, dtype=np.int64)
        if len(np.unique(self.ids)) != len(self.ids):
            raise ValueError("trajectory ids must be unique")
        self.positions = np.array(positions, dtype=float)
        self.velocities = np.array(velocities, dtype=float)
        self.ensembles = np.asarray(ensembles, dtype=np.int8)
        self.spins = np.asarray(spins, dtype=np.int8)
        self.grid = grid
        self.time = float(time)
        self.c_max = float(c_max)
        n = len(self.ids)
        for name, arr, shape in (
            ("positions", self.positions, (n, 3)),
            ("velocities", self.velocities, (n, 3)),
            ("ensembles", self.ensembles, (n,)),
            ("spins", self.spins, (n,)),
        ):
            if arr.shape != shape:
                raise ValueError(f"{name} must have shape {shape}")

    def __len__(self) -> int:
        return len(self.ids)

    def copy(self) -> "EnsembleState":
        return EnsembleState(
            self.ids.copy(), self.positions.copy(), self.velocities.copy(),
            self.ensembles.copy(), self.spins.copy(), self.grid, self.time,
            self.c_max,
        )

    def trajectory(self, row: int) -> Trajectory:
        return Trajectory(
            id=int(self.ids[row]),
            position=tuple(float(x) for x in self.positions[row]),
            velocity=tuple(float(v) for v in self.velocities[row]),
            ensemble="A" if self.ensembles[row] == ENSEMBLE_A else "B",
            spin="up" if self.spins[row] == SPIN_UP else "down",
        )

    def mean_velocity(self, ensemble: int) -> np.ndarray:
        mask = self.ensembles == ensemble
        if not mask.any():
            return np.full(3, np.nan)
        return self.velocities[mask].mean(axis=0)

    def snapshot_csv(self) -> str:
        lines = ["id,x,y,z,vx,vy,vz,ensemble,spin"]
        for i in range(len(self)):
            p, v = self.positions[i], self.velocities[i]
            lines.append(
                f"{self.ids[i]},{p[0]!r},{p[1]!r},{p[2]!r},"
                f"{v[0]!r},{v[1]!r},{v[2]!r},"
                f"{'A' if self.ensembles[i] == ENSEMBLE_A else 'B'},"
                f"{'up' if self.spins[i] == SPIN_UP else 'down'}"
            )
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Langevin step
# ---------------------------------------------------------------------------


def step_langevin(
    traj: Trajectory,
    f_ext: Sequence[float],
    f_brown: Sequence[float],
    p: PhysParams,
    dt: float,
    c_max: float = math.inf,
) -> Trajectory:
    """Advance one trajectory: velocity first (explicit), then position.

    Ensemble B feels friction -(m0/tau) v, ensemble A the same term with
    opposite sign; the speed is capped at ``c_max`` afterwards.
    """
    if dt <= 0 or dt > p.tau:
        raise ValueError("need 0 < dt <= tau")
    f = np.asarray(f_ext, dtype=float) + np.asarray(f_brown, dtype=float)
    if not np.all(np.isfinite(f)):
        raise ValueError("non-finite force input")
    v = np.asarray(traj.velocity, dtype=float)
    sign = 1.0 if traj.ensemble == "A" else -1.0
    friction = (sign / p.tau) * v if math.isfinite(p.tau) else 0.0
    v_new = v + dt * (friction + f / p.m0)
    speed = float(np.linalg.norm(v_new))
    if speed > c_max:
        v_new *= c_max / speed
    x_new = np.asarray(traj.position, dtype=float) + dt * v_new
    return Trajectory(
        id=traj.id,
        position=tuple(float(x) for x in x_new),
        velocity=tuple(float(u) for u in v_new),
        ensemble=traj.ensemble,
        spin=traj.spin,
    )


def _step_langevin_arrays(state: EnsembleState, forces: np.ndarray, p: PhysParams, dt: float) -> int:
    """Vectorized Langevin update of the whole ensemble; returns cap count."""
    if not np.all(np.isfinite(forces)):
        raise ValueError("non-finite force input")
    sign = np.where(state.ensembles == ENSEMBLE_A, 1.0, -1.0)[:, None]
    if math.isfinite(p.tau):
        state.velocities += dt * (sign * state.velocities / p.tau + forces / p.m0)
    else:
        state.velocities += dt * (forces / p.m0)
    capped = 0
    if math.isfinite(state.c_max):
        speeds = np.linalg.norm(state.velocities, axis=1)
        over = speeds > state.c_max
        capped = int(over.sum())
        if capped:
            state.velocities[over] *= (state.c_max / speeds[over])[:, None]
    state.positions += dt * state.velocities
    state.time += dt
    return capped


# ---------------------------------------------------------------------------
# field estimation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FieldEstimate:
    """Binned density, mean velocity and osmotic velocity estimates.

    ``u`` is -nu * d(ln rho)/dx along the binned axis (central differences,
    one-sided at the edges); the off-axis components are zero because the
    grid resolves only that axis.  Bins with no members have rho = 0 and
    their v and u entries are flagged absent via ``occupied``; an occupied
    bin with no occupied neighbor has no gradient stencil and reports NaN.
    """

    edges: np.ndarray
    centers: np.ndarray
    counts: np.ndarray
    rho: np.ndarray
    v: np.ndarray
    u: np.ndarray
    occupied: np.ndarray


def estimate_fields(state: EnsembleState, p: PhysParams) -> FieldEstimate:
    """Histogram density, per-bin mean velocity, and the osmotic field."""
    n = len(state)
    if n == 0:
        raise ValueError("cannot estimate fields of an empty ensemble")
    grid = state.grid
    idx = grid.indices(state.positions)
    lo, hi = int(idx.min()), int(idx.max())
    nb = hi - lo + 1
    counts = np.bincount(idx - lo, minlength=nb).astype(np.int64)
    occupied = counts > 0
    if not occupied.any():
        raise ValueError("all bins empty")

    rho = counts / (n * grid.width)
    v = np.full((nb, 3), np.nan)
    for k in range(3):
        sums = np.bincount(idx - lo, weights=state.velocities[:, k], minlength=nb)
        v[occupied, k] = sums[occupied] / counts[occupied]

    u = np.zeros((nb, 3))
    log_rho = np.full(nb, np.nan)
    log_rho[occupied] = np.log(rho[occupied])
    dx = grid.width
    grad = np.full(nb, np.nan)
    for i in np.nonzero(occupied)[0]:
        left = i - 1 if i - 1 >= 0 and occupied[i - 1] else None
        right = i + 1 if i + 1 < nb and occupied[i + 1] else None
        if left is not None and right is not None:
            grad[i] = (log_rho[right] - log_rho[left]) / (2 * dx)
        elif right is not None:
            grad[i] = (log_rho[right] - log_rho[i]) / dx
        elif left is not None:
            grad[i] = (log_rho[i] - log_rho[left]) / dx
    u[:, grid.axis] = -p.nu * grad
    u[~occupied] = np.nan
    v[~occupied] = np.nan

    edges = grid.origin + dx * np.arange(lo, hi + 2)
    centers = edges[:-1] + 0.5 * dx
    return FieldEstimate(edges, centers, counts, rho, v, u, occupied)


# ---------------------------------------------------------------------------
# exchange procedure
# ---------------------------------------------------------------------------


@dataclass
class SwapLog:
    """Record of executed exchanges: trajectory id pair, bin, step index."""

    id_a: list = field(default_factory=list)
    id_b: list = field(default_factory=list)
    bin: list = field(default_factory=list)
    step: list = field(default_factory=list)
    #: swap decisions whose undisturbed speed was within ``proof_delta`` of
    #: the bin's reference speed (the small-interval census).
    near_threshold: int = 0

    @property
    def n_swaps(self) -> int:
        return len(self.id_a)

    def as_arrays(self) -> dict:
        return {
            "id_a": np.asarray(self.id_a, dtype=np.int64),
            "id_b": np.asarray(self.id_b, dtype=np.int64),
            "bin": np.asarray(self.bin, dtype=np.int64),
            "step": np.asarray(self.step, dtype=np.int64),
        }


def exchange_procedure(
    state: EnsembleState,
    superposition_mode: bool = False,
    step_index: int = 0,
    eligibility_velocities: np.ndarray | None = None,
    proof_delta: float = 0.0,
    log: SwapLog | None = None,
) -> SwapLog:
    """Bin-local velocity-ordered exchange between the A and B ensembles.

    Within each bin, candidates are A members faster than |v_bar| and B
    members slower than |v_bar|, where v_bar is the arithmetic mean of the
    two sub-ensemble mean velocities before any swap.  Swaps are chosen to
    minimize the remaining imbalance along its initial direction, scanning
    ties from the extreme speeds inward with highest-id preference, and a
    swap is executed only if it strictly reduces |v_bar_A - v_bar_B|; the
    pass over a bin stops at the first non-improving candidate.  Each swap
    exchanges only the ensemble labels (and, in superposition mode, flips
    both spin labels), so per-bin and total counts are conserved.

    ``eligibility_velocities`` (disturbance studies) replace the dynamical
    velocities in the above-versus-below-|v_bar| candidate filter only:
    a perturbation enters a swap decision exactly through the placement
    threshold, which is the pathway the small-interval robustness argument
    is about.  When ``proof_delta`` is positive the log also counts the
    executed swap decisions whose dynamical speed sat within that margin
    of the bin's reference speed.
    """
    if log is None:
        log = SwapLog()
    dv = state.velocities
    ev = state.velocities if eligibility_velocities is None else eligibility_velocities
    bins = state.grid.indices(state.positions)
    order = np.argsort(bins, kind="stable")
    sorted_bins = bins[order]
    boundaries = np.flatnonzero(np.diff(sorted_bins)) + 1
    groups = np.split(order, boundaries)

    for members in groups:
        a_rows = members[state.ensembles[members] == ENSEMBLE_A]
        b_rows = members[state.ensembles[members] == ENSEMBLE_B]
        if len(a_rows) == 0 or len(b_rows) == 0:
            continue
        _exchange_bin(
            state, dv, ev, a_rows, b_rows, int(bins[members[0]]),
            superposition_mode, step_index, log, proof_delta,
        )
    return log


def _exchange_bin(
    state: EnsembleState,
    dv: np.ndarray,
    ev: np.ndarray,
    a_rows: np.ndarray,
    b_rows: np.ndarray,
    bin_id: int,
    superposition_mode: bool,
    step_index: int,
    log: SwapLog,
    proof_delta: float,
) -> None:
    n_a, n_b = len(a_rows), len(b_rows)
    vbar_a = dv[a_rows].mean(axis=0)
    vbar_b = dv[b_rows].mean(axis=0)
    vbar = 0.5 * (vbar_a + vbar_b)
    vbar_mag = float(np.linalg.norm(vbar))

    delta = vbar_a - vbar_b
    delta_mag = float(np.linalg.norm(delta))
    if delta_mag == 0.0:
        return
    dhat = delta / delta_mag
    c = 1.0 / n_a + 1.0 / n_b

    speeds_a = np.linalg.norm(ev[a_rows], axis=1)
    speeds_b = np.linalg.norm(ev[b_rows], axis=1)
    cand_a = a_rows[speeds_a > vbar_mag]
    cand_b = b_rows[speeds_b < vbar_mag]
    if len(cand_a) == 0 or len(cand_b) == 0:
        return

    # scan order: extreme speeds first, highest trajectory id on ties
    p_a = dv[cand_a] @ dhat
    sp_a = np.linalg.norm(dv[cand_a], axis=1)
    ids_a = state.ids[cand_a]
    q_b = dv[cand_b] @ dhat
    ids_b = state.ids[cand_b]
    b_order = np.lexsort((-ids_b, q_b))
    q_sorted = q_b[b_order]
    rows_b = cand_b[b_order]

    active = np.ones(len(cand_a), dtype=bool)
    delta_vec = delta.copy()

    while q_sorted.size and active.any():
        delta_proj = float(delta_vec @ dhat)
        target = p_a - delta_proj / c  # want q_b closest to this, per a
        pos = np.searchsorted(q_sorted, target)
        left = np.clip(pos - 1, 0, q_sorted.size - 1)
        right = np.clip(pos, 0, q_sorted.size - 1)
        d_left = np.abs(q_sorted[left] - target)
        d_right = np.abs(q_sorted[right] - target)
        use_left = d_left <= d_right  # tie goes to the slower candidate
        b_pick = np.where(use_left, left, right)
        dist = np.where(use_left, d_left, d_right)
        dist = np.where(active, dist, np.inf)

        best = float(dist.min())
        if not math.isfinite(best):
            break
        tied = np.flatnonzero(dist == best)
        if len(tied) > 1:  # extreme speed first, then highest id
            key = np.lexsort((-ids_a[tied], -sp_a[tied]))
            a_i = int(tied[key[0]])
        else:
            a_i = int(tied[0])
        b_i = int(b_pick[a_i])
        # among duplicate projections pick the highest id (first in run)
        b_i = int(np.searchsorted(q_sorted, q_sorted[b_i], side="left"))

        row_a = int(cand_a[a_i])
        row_b = int(rows_b[b_i])
        new_delta = delta_vec + c * (dv[row_b] - dv[row_a])
        if float(np.linalg.norm(new_delta)) >= float(np.linalg.norm(delta_vec)):
            break

        state.ensembles[row_a] = ENSEMBLE_B
        state.ensembles[row_b] = ENSEMBLE_A
        if superposition_mode:
            state.spins[row_a] = -state.spins[row_a]
            state.spins[row_b] = -state.spins[row_b]
        log.id_a.append(int(state.ids[row_a]))
        log.id_b.append(int(state.ids[row_b]))
        log.bin.append(bin_id)
        log.step.append(step_index)
        if proof_delta > 0.0:
            for row in (row_a, row_b):
                if abs(float(np.linalg.norm(dv[row])) - vbar_mag) < proof_delta:
                    log.near_threshold += 1

        delta_vec = new_delta
        active[a_i] = False
        keep = np.ones(q_sorted.size, dtype=bool)
        keep[b_i] = False
        q_sorted = q_sorted[keep]
        rows_b = rows_b[keep]


# ---------------------------------------------------------------------------
# evolution loop
# ---------------------------------------------------------------------------


@dataclass
class Diagnostics:
    """Per-step ensemble means, imbalance, swap and capping counters."""

    time: list = field(default_factory=list)
    vbar_a: list = field(default_factory=list)
    vbar_b: list = field(default_factory=list)
    imbalance: list = field(default_factory=list)
    swaps: list = field(default_factory=list)
    capped: list = field(default_factory=list)

    def to_csv(self) -> str:
        lines = ["time,vax,vay,vaz,vbx,vby,vbz,imbalance,swaps,capped"]
        for i in range(len(self.time)):
            va, vb = self.vbar_a[i], self.vbar_b[i]
            lines.append(
                f"{self.time[i]!r},{va[0]!r},{va[1]!r},{va[2]!r},"
                f"{vb[0]!r},{vb[1]!r},{vb[2]!r},"
                f"{self.imbalance[i]!r},{self.swaps[i]},{self.capped[i]}"
            )
        return "\n".join(lines) + "\n"


def evolve(
    state: EnsembleState,
    sources: Sequence[BrownianSource],
    f_ext: Callable[[np.ndarray, float], np.ndarray] | None,
    p: PhysParams,
    steps: int,
    dt: float,
    superposition_mode: bool = False,
    start_step: int = 1,
    decision_jitter: Callable[[int], np.ndarray] | None = None,
    proof_delta: float = 0.0,
    spin_history: np.ndarray | None = None,
) -> tuple[EnsembleState, Diagnostics, SwapLog]:
    """Run the force-sampling / Langevin / exchange loop in place.

    ``sources`` supplies one force stream per trajectory (aligned with
    state rows); step k draws its forces at stream step ``start_step + k``
    so callers can reserve step 0 for initial-condition draws.  When
    ``spin_history`` is given (shape (steps+1, n)) the spin labels are
    recorded before the first and after every step.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    n = len(state)
    if len(sources) != n:
        raise ValueError("need exactly one BrownianSource per trajectory")
    seeds = np.asarray([s.seed for s in sources], dtype=np.uint64)
    sigmas = np.asarray([s.sigma for s in sources], dtype=float)

    diag = Diagnostics()
    log = SwapLog()
    if spin_history is not None:
        spin_history[0] = state.spins

    for k in range(steps):
        forces = _force_block(seeds, sigmas, start_step + k)
        if f_ext is not None:
            forces = forces + f_ext(state.positions, state.time)
        capped = _step_langevin_arrays(state, forces, p, dt)

        eligibility_v = None
        if decision_jitter is not None:
            jitter = decision_jitter(start_step + k)
            if jitter is not None:
                eligibility_v = state.velocities + jitter

        swaps_before = log.n_swaps
        exchange_procedure(
            state,
            superposition_mode=superposition_mode,
            step_index=start_step + k,
            eligibility_velocities=eligibility_v,
            proof_delta=proof_delta,
            log=log,
        )
        if spin_history is not None:
            spin_history[k + 1] = state.spins

        va = state.mean_velocity(ENSEMBLE_A)
        vb = state.mean_velocity(ENSEMBLE_B)
        diag.time.append(state.time)
        diag.vbar_a.append(va)
        diag.vbar_b.append(vb)
        diag.imbalance.append(float(np.linalg.norm(va - vb)))
        diag.swaps.append(log.n_swaps - swaps_before)
        diag.capped.append(capped)

    return state, diag, log
