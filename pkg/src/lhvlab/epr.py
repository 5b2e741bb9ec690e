"""The Bohm-EPR harness: shared-seed pair simulation and its test battery.

Each particle pair j draws a hidden value lambda_j at the source; both
wings derive their Brownian force sequences, initial conditions and
detection randomness from it, so equal settings and equal external forces
make the two wings evolve as exact mirrors with opposite spin labels.
Detection is pluggable because the underlying account fixes the locality
structure but not the quantitative response at unequal axes:

* ``independent_born`` draws each wing's outcome from the Born
  probabilities for its final spin label with station-local fresh
  randomness (an honest local model; CHSH stays below 2).
* ``shared_stream_threshold`` computes each wing's outcome as a
  deterministic function of (final spin, local axis, the pair's shared
  stream value at arrival): the wing flips its spin label iff the shared
  uniform falls below sin^2(theta_local / 2).  Equal axes then flip both
  wings identically, reproducing exact anticorrelation for every run
  size, and marginals stay at one half because the shared value is never
  consumed by the flight dynamics.  The unequal-axis response of this
  construction is reported, not asserted.
* ``analytic_quantum_oracle`` samples the two outcomes jointly from the
  singlet table; it is not a wing-local procedure and is used only to
  validate estimators.

Pairs are independent given their lambda_j, statistics merge monoidally,
and every result is a pure function of (master seed, config).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import dynamics
from .dynamics import (
    CH_DISTURB,
    CH_FORCE,
    CH_LOCAL_DETECT_1,
    CH_LOCAL_DETECT_2,
    CH_SHARED_DETECT,
    ENSEMBLE_A,
    ENSEMBLE_B,
    SPIN_DOWN,
    SPIN_UP,
    BinGrid,
    BrownianSource,
    Diagnostics,
    EnsembleState,
    PhysParams,
    SwapLog,
    stream_normal,
    stream_uniform,
)
from .probspace import PreconditionError, SettingPair, normalize_angle

MODEL_INDEPENDENT_BORN = "independent_born"
MODEL_SHARED_STREAM = "shared_stream_threshold"
MODEL_QUANTUM_ORACLE = "analytic_quantum_oracle"
MEASUREMENT_MODELS = (
    MODEL_INDEPENDENT_BORN,
    MODEL_SHARED_STREAM,
    MODEL_QUANTUM_ORACLE,
)

#: Detection draws are addressed past the flight steps; distinct local
#: axes map to distinct stream steps at 1/8 degree resolution.
_ANGLE_SLOTS = 2880


def _angle_slot(angle: float) -> int:
    return int(round(math.degrees(normalize_angle(angle)) * 8.0)) % _ANGLE_SLOTS


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PairConfig:
    """Source, flight and detection parameters for one EPR run.

    The wing ensembles have exactly one trajectory per pair; trajectories
    start at a source of spatial extent ``source_sigma`` with a common
    drift plus thermal velocity spread, so the bin-local exchange has a
    healthy candidate population on both sides of |v_bar|.
    """

    pairs: int
    master_seed: int
    flight_time: float = 2.0
    dt: float = 0.1
    measurement_model: str = MODEL_SHARED_STREAM
    physics: PhysParams = field(default_factory=PhysParams)
    drift_speed: float = 2.0
    source_sigma: float = 1.0
    bin_width: float = 0.2
    c_max: float | None = None

    def __post_init__(self):
        if self.pairs < 1:
            raise ValueError("pairs must be >= 1")
        if self.dt <= 0 or self.dt > self.flight_time:
            raise ValueError("need 0 < dt <= flight_time")
        if self.dt > self.physics.tau:
            raise ValueError("dt must not exceed the coarse timescale tau")
        if self.measurement_model not in MEASUREMENT_MODELS:
            raise ValueError(
                f"unknown measurement model {self.measurement_model!r}; "
                f"choose from {MEASUREMENT_MODELS}"
            )

    @property
    def flight_steps(self) -> int:
        return max(1, int(round(self.flight_time / self.dt)))

    @property
    def speed_cap(self) -> float:
        if self.c_max is not None:
            return self.c_max
        return 100.0 * (self.physics.thermal_speed + abs(self.drift_speed))


@dataclass(frozen=True)
class DisturbanceSpec:
    """Zero-mean velocity fluctuations injected into one wing's decisions."""

    target_wing: int = 2
    law: str = "gaussian"  # or "uniform"

    def __post_init__(self):
        if self.target_wing not in (1, 2):
            raise ValueError("target_wing must be 1 or 2")
        if self.law not in ("gaussian", "uniform"):
            raise ValueError("law must be 'gaussian' or 'uniform'")


def generate_pair_seeds(master_seed: int, pairs: int) -> np.ndarray:
    """One independent hidden value lambda_j per pair, from the master seed."""
    if pairs < 1:
        raise ValueError("pairs must be >= 1")
    ss = np.random.SeedSequence(master_seed)
    return ss.generate_state(pairs, dtype=np.uint64)


# ---------------------------------------------------------------------------
# run statistics
# ---------------------------------------------------------------------------


def _setting_key(s: SettingPair) -> tuple[float, float]:
    return (round(math.degrees(s.mu), 9), round(math.degrees(s.nu), 9))


@dataclass
class RunStats:
    """Per-setting outcome counts split by source event; mergeable.

    ``counts[key]`` has shape (2, 2, 2): source cell (S1 = wing 1 started
    up, S2 = started down), outcome at 1, outcome at 2, with index 0 = up.
    """

    counts: dict = field(default_factory=dict)

    def add_outcomes(
        self,
        s: SettingPair,
        source_labels: np.ndarray,
        out1: np.ndarray,
        out2: np.ndarray,
    ) -> None:
        key = _setting_key(s)
        i1 = (out1 < 0).astype(np.int64)
        i2 = (out2 < 0).astype(np.int64)
        flat = (np.asarray(source_labels, dtype=np.int64) * 4 + i1 * 2 + i2)
        block = np.bincount(flat, minlength=8).reshape(2, 2, 2)
        if key in self.counts:
            self.counts[key] = self.counts[key] + block
        else:
            self.counts[key] = block

    def settings(self) -> list[tuple[float, float]]:
        return sorted(self.counts.keys())

    def table(self, s: SettingPair) -> np.ndarray:
        key = _setting_key(s)
        if key not in self.counts:
            raise KeyError(f"setting {key} not sampled")
        return self.counts[key]

    def total(self, s: SettingPair) -> int:
        return int(self.table(s).sum())

    def anticorrelated_fraction(self, s: SettingPair) -> float:
        t = self.table(s).sum(axis=0)
        return float((t[0, 1] + t[1, 0]) / t.sum())

    def wing_marginal(self, s: SettingPair, wing: int) -> float:
        """Empirical P(outcome = up) at the given wing."""
        t = self.table(s).sum(axis=0)
        n = t.sum()
        return float(t[0, :].sum() / n) if wing == 1 else float(t[:, 0].sum() / n)

    def source_marginal(self, s: SettingPair) -> np.ndarray:
        t = self.table(s)
        return t.sum(axis=(1, 2)) / t.sum()


def merge_stats(a: RunStats, b: RunStats) -> RunStats:
    """Componentwise sum of counts; associative and commutative."""
    out = RunStats()
    for src in (a, b):
        for key, block in src.counts.items():
            if key in out.counts:
                out.counts[key] = out.counts[key] + block
            else:
                out.counts[key] = block.copy()
    return out


# ---------------------------------------------------------------------------
# flight simulation
# ---------------------------------------------------------------------------


def _initial_state(config: PairConfig, lam: np.ndarray, wing: int) -> EnsembleState:
    n = config.pairs
    p = config.physics
    vel = config.physics.thermal_speed * stream_normal(
        lam[:, None], 0, np.asarray(CH_FORCE)[None, :]
    )
    vel[:, 0] += config.drift_speed
    pos = config.source_sigma * stream_normal(
        lam[:, None], 0, np.asarray((3, 4, 5))[None, :]
    )
    u_spin = stream_uniform(lam, 0, 6)
    spin_wing1 = np.where(u_spin < 0.5, SPIN_UP, SPIN_DOWN).astype(np.int8)
    spins = spin_wing1 if wing == 1 else (-spin_wing1).astype(np.int8)
    u_ab = stream_uniform(lam, 0, 7)
    ensembles = np.where(u_ab < 0.5, ENSEMBLE_A, ENSEMBLE_B).astype(np.int8)
    return EnsembleState(
        ids=np.arange(n, dtype=np.int64),
        positions=pos,
        velocities=vel,
        ensembles=ensembles,
        spins=spins,
        grid=BinGrid(width=config.bin_width),
        time=0.0,
        c_max=config.speed_cap,
    )


def _fly_wing(
    config: PairConfig,
    lam: np.ndarray,
    wing: int,
    disturbance: DisturbanceSpec | None = None,
    delta_mag: float = 0.0,
) -> tuple[EnsembleState, np.ndarray, Diagnostics, SwapLog]:
    """Evolve one wing from the source to the detectors (zero external force)."""
    state = _initial_state(config, lam, wing)
    sources = [
        BrownianSource(int(s), config.physics.force_sigma) for s in lam
    ]
    steps = config.flight_steps
    history = np.empty((steps + 1, config.pairs), dtype=np.int8)

    jitter = None
    if disturbance is not None and disturbance.target_wing == wing and delta_mag > 0.0:
        comp_scale = delta_mag / math.sqrt(3.0)

        def jitter(step: int) -> np.ndarray:
            if disturbance.law == "gaussian":
                g = stream_normal(lam[:, None], step, np.asarray(CH_DISTURB)[None, :])
                return comp_scale * g
            u = stream_uniform(lam[:, None], step, np.asarray(CH_DISTURB)[None, :])
            return delta_mag * (2.0 * u - 1.0)

    state, diag, log = dynamics.evolve(
        state,
        sources,
        None,
        config.physics,
        steps=steps,
        dt=config.dt,
        superposition_mode=True,
        start_step=1,
        decision_jitter=jitter,
        proof_delta=delta_mag,
        spin_history=history,
    )
    return state, history, diag, log


# ---------------------------------------------------------------------------
# detection models
# ---------------------------------------------------------------------------


def _detect_wing_local(
    config: PairConfig,
    lam: np.ndarray,
    spins_T: np.ndarray,
    angle: float,
    wing: int,
) -> np.ndarray:
    """Outcome of one wing's detector: a function of local data only."""
    steps = config.flight_steps
    if config.measurement_model == MODEL_SHARED_STREAM:
        u = stream_uniform(lam, steps + 1, CH_SHARED_DETECT)
        flip = u < math.sin(0.5 * angle) ** 2
        return np.where(flip, -spins_T, spins_T).astype(np.int8)
    if config.measurement_model == MODEL_INDEPENDENT_BORN:
        ch = CH_LOCAL_DETECT_1 if wing == 1 else CH_LOCAL_DETECT_2
        u = stream_uniform(lam, steps + 1 + _angle_slot(angle), ch)
        c2 = math.cos(0.5 * angle) ** 2
        p_up = np.where(spins_T == SPIN_UP, c2, 1.0 - c2)
        return np.where(u < p_up, SPIN_UP, SPIN_DOWN).astype(np.int8)
    raise ValueError(f"{config.measurement_model} has no wing-local detector")


def _detect_oracle(
    config: PairConfig, lam: np.ndarray, setting: SettingPair
) -> tuple[np.ndarray, np.ndarray]:
    """Joint sampling from the singlet table; not a wing-local procedure."""
    from .spin import Axis, quantum_joint_probs

    table = quantum_joint_probs(
        Axis.from_planar(setting.mu), Axis.from_planar(setting.nu)
    ).reshape(-1)
    cum = np.cumsum(table)
    step = (
        config.flight_steps
        + 1
        + _angle_slot(setting.mu) * _ANGLE_SLOTS
        + _angle_slot(setting.nu)
    )
    u = stream_uniform(lam, step, CH_SHARED_DETECT)
    cell = np.searchsorted(cum, u)
    cell = np.clip(cell, 0, 3)
    out1 = np.where(cell < 2, SPIN_UP, SPIN_DOWN).astype(np.int8)
    out2 = np.where(cell % 2 == 0, SPIN_UP, SPIN_DOWN).astype(np.int8)
    return out1, out2


def _detect(
    config: PairConfig,
    lam1: np.ndarray,
    lam2: np.ndarray,
    spins1: np.ndarray,
    spins2: np.ndarray,
    setting: SettingPair,
) -> tuple[np.ndarray, np.ndarray]:
    if config.measurement_model == MODEL_QUANTUM_ORACLE:
        return _detect_oracle(config, lam1, setting)
    out1 = _detect_wing_local(config, lam1, spins1, setting.mu, wing=1)
    out2 = _detect_wing_local(config, lam2, spins2, setting.nu, wing=2)
    return out1, out2


# ---------------------------------------------------------------------------
# the experiment
# ---------------------------------------------------------------------------


@dataclass
class EPRResult:
    """Everything one run produces: statistics, hidden records, logs."""

    stats: RunStats
    source_labels: np.ndarray
    spin_history_1: np.ndarray
    spin_history_2: np.ndarray
    swap_log_1: SwapLog
    swap_log_2: SwapLog
    diagnostics_1: Diagnostics
    diagnostics_2: Diagnostics
    outcomes: dict
    final_positions_1: np.ndarray | None = None
    final_positions_2: np.ndarray | None = None
    assignments: np.ndarray | None = None


def run_epr(
    config: PairConfig,
    assignments: Sequence[SettingPair] | None = None,
    settings: Sequence[SettingPair] | None = None,
    second_master_seed: int | None = None,
    disturbance: DisturbanceSpec | None = None,
    delta_mag: float = 0.0,
    keep_outcomes: bool | None = None,
) -> EPRResult:
    """Simulate S pairs and detect them.

    Exactly one of ``assignments`` (one setting per pair) or ``settings``
    (every listed setting evaluated on the full flight) must be given.
    Both wings fly under zero external force with the force sequences of
    their hidden values, so detection is the only place a setting enters;
    wing 1's outcome list is bit-identical under any change of wing 2's
    axis (and vice versa) for the wing-local measurement models.

    ``second_master_seed`` gives wing 2 its own hidden-value list
    (entanglement-swapping setups); the default shares wing 1's list.
    """
    if (assignments is None) == (settings is None):
        raise ValueError("provide exactly one of assignments / settings")

    lam1 = generate_pair_seeds(config.master_seed, config.pairs)
    lam2 = (
        lam1
        if second_master_seed is None
        else generate_pair_seeds(second_master_seed, config.pairs)
    )

    state1, hist1, diag1, log1 = _fly_wing(config, lam1, 1, disturbance, delta_mag)
    state2, hist2, diag2, log2 = _fly_wing(config, lam2, 2, disturbance, delta_mag)
    source_labels = (hist1[0] == SPIN_DOWN).astype(np.int8)  # 0 = S1 (up), 1 = S2

    stats = RunStats()
    outcomes: dict = {}
    if settings is not None:
        if keep_outcomes is None:
            keep_outcomes = len(settings) <= 16
        for s in settings:
            out1, out2 = _detect(config, lam1, lam2, state1.spins, state2.spins, s)
            stats.add_outcomes(s, source_labels, out1, out2)
            if keep_outcomes:
                outcomes[_setting_key(s)] = (out1, out2)
        assign_arr = None
    else:
        assignments = list(assignments)
        if len(assignments) != config.pairs:
            raise ValueError("need one setting assignment per pair")
        keys = [_setting_key(s) for s in assignments]
        unique = sorted(set(keys))
        key_index = {k: i for i, k in enumerate(unique)}
        assign_arr = np.asarray([key_index[k] for k in keys], dtype=np.int64)
        out1_all = np.empty(config.pairs, dtype=np.int8)
        out2_all = np.empty(config.pairs, dtype=np.int8)
        for k, key in enumerate(unique):
            rows = np.flatnonzero(assign_arr == k)
            s = next(s for s, kk in zip(assignments, keys) if kk == key)
            o1, o2 = _detect(
                config, lam1[rows], lam2[rows], state1.spins[rows],
                state2.spins[rows], s,
            )
            out1_all[rows] = o1
            out2_all[rows] = o2
            stats.add_outcomes(s, source_labels[rows], o1, o2)
        outcomes["assigned"] = (out1_all, out2_all)

    return EPRResult(
        stats=stats,
        source_labels=source_labels,
        spin_history_1=hist1,
        spin_history_2=hist2,
        swap_log_1=log1,
        swap_log_2=log2,
        diagnostics_1=diag1,
        diagnostics_2=diag2,
        outcomes=outcomes,
        final_positions_1=state1.positions,
        final_positions_2=state2.positions,
        assignments=assign_arr,
    )


def entanglement_swap_scenario(
    config: PairConfig,
    settings: Sequence[SettingPair],
    second_master_seed: int | None = None,
) -> EPRResult:
    """Two spatially disjoint sources feeding the two wings.

    With ``second_master_seed`` left at None the hidden values are
    established once in the sources' intersected past and both streams
    derive from them (exact equal-axis anticorrelation); passing a
    different seed severs the common past and decorrelates the wings.
    """
    return run_epr(config, settings=settings, second_master_seed=second_master_seed)


# ---------------------------------------------------------------------------
# estimators and hypothesis tests
# ---------------------------------------------------------------------------


def estimate_correlation(stats: RunStats, s: SettingPair) -> dict:
    """Plug-in correlation estimate with binomially propagated stderr."""
    t = stats.table(s).sum(axis=0)
    n = int(t.sum())
    if n < 100:
        raise PreconditionError("counts", f"need >= 100 samples at {_setting_key(s)}, have {n}")
    e = float((t[0, 0] + t[1, 1] - t[0, 1] - t[1, 0]) / n)
    stderr = math.sqrt(max(1.0 - e * e, 0.0) / n)
    return {"E_hat": e, "stderr": stderr, "n": n}


def chsh_estimate(
    stats: RunStats, mu: float, mu_p: float, nu: float, nu_p: float
) -> dict:
    """CHSH combination of estimated correlations with propagated error."""
    parts = [
        estimate_correlation(stats, SettingPair(mu, nu)),
        estimate_correlation(stats, SettingPair(mu, nu_p)),
        estimate_correlation(stats, SettingPair(mu_p, nu)),
        estimate_correlation(stats, SettingPair(mu_p, nu_p)),
    ]
    s_hat = abs(
        parts[0]["E_hat"] + parts[1]["E_hat"] + parts[2]["E_hat"] - parts[3]["E_hat"]
    )
    stderr = math.sqrt(sum(p["stderr"] ** 2 for p in parts))
    return {"S_hat": s_hat, "stderr": stderr}


@dataclass(frozen=True)
class NoSignalingReport:
    max_marginal_shift: float
    passes: bool
    comparisons: tuple


def no_signaling_test(stats: RunStats) -> NoSignalingReport:
    """Marginal-shift audit across remote-setting changes.

    For every local axis that appears with at least two remote settings,
    compares the local outcome frequencies; a comparison passes when the
    shift stays below four standard errors.
    """
    keys = stats.settings()
    comparisons = []
    for wing, axis_pos in ((1, 0), (2, 1)):
        groups: dict = {}
        for key in keys:
            groups.setdefault(key[axis_pos], []).append(key)
        for local_angle, members in sorted(groups.items()):
            for i in range(len(members)):
                for k in range(i + 1, len(members)):
                    ka, kb = members[i], members[k]
                    sa = SettingPair.from_degrees(*ka)
                    sb = SettingPair.from_degrees(*kb)
                    pa = stats.wing_marginal(sa, wing)
                    pb = stats.wing_marginal(sb, wing)
                    na, nb = stats.total(sa), stats.total(sb)
                    shift = abs(pa - pb)
                    se = math.sqrt(pa * (1 - pa) / na + pb * (1 - pb) / nb)
                    comparisons.append(
                        {
                            "wing": wing,
                            "local_angle_deg": local_angle,
                            "setting_a": ka,
                            "setting_b": kb,
                            "shift": shift,
                            "stderr": se,
                            "pass": shift <= 4.0 * se,
                        }
                    )
    if not comparisons:
        raise PreconditionError(
            "remote settings",
            "need at least two settings sharing a local axis",
        )
    max_shift = max(c["shift"] for c in comparisons)
    return NoSignalingReport(
        max_marginal_shift=max_shift,
        passes=all(c["pass"] for c in comparisons),
        comparisons=tuple(comparisons),
    )


@dataclass(frozen=True)
class FactorizationReport:
    max_gap: float
    passes: bool
    rows: tuple


def passive_factorization_test(stats: RunStats) -> FactorizationReport:
    """Source-conditioned factorization audit (expected to fail when entangled).

    For each setting and source event, compares the conditional joint
    frequencies against the product of the wing conditionals; ``passes``
    means every gap is within four (delta-method) standard errors, i.e.
    the data are consistent with factorization.
    """
    rows = []
    for key in stats.settings():
        s = SettingPair.from_degrees(*key)
        t = stats.table(s)
        for cell in range(2):
            n_i = int(t[cell].sum())
            if n_i == 0:
                continue
            joint = t[cell] / n_i
            p1 = joint.sum(axis=1)
            p2 = joint.sum(axis=0)
            gap_tab = np.abs(joint - np.outer(p1, p2))
            i1, i2 = np.unravel_index(int(gap_tab.argmax()), (2, 2))
            j = float(joint[i1, i2])
            se = (
                math.sqrt(max(j * (1 - j), 0.0) / n_i)
                + p2[i2] * math.sqrt(max(p1[i1] * (1 - p1[i1]), 0.0) / n_i)
                + p1[i1] * math.sqrt(max(p2[i2] * (1 - p2[i2]), 0.0) / n_i)
            )
            rows.append(
                {
                    "setting": key,
                    "source_cell": cell,
                    "n": n_i,
                    "gap": float(gap_tab.max()),
                    "stderr": se,
                    "pass": float(gap_tab.max()) <= 4.0 * se,
                }
            )
    if not rows:
        raise PreconditionError("source labels", "no source-labelled counts present")
    max_gap = max(r["gap"] for r in rows)
    return FactorizationReport(
        max_gap=max_gap, passes=all(r["pass"] for r in rows), rows=tuple(rows)
    )


# ---------------------------------------------------------------------------
# disturbance robustness
# ---------------------------------------------------------------------------


def disturbance_sweep(
    config: PairConfig,
    spec: DisturbanceSpec,
    magnitudes: Sequence[float],
    setting: SettingPair | None = None,
) -> list[dict]:
    """Equal-axis anticorrelation efficiency under decision-level jitter.

    Each magnitude re-runs the experiment with per-step zero-mean velocity
    fluctuations applied to the target wing's exchange decisions.  Rows
    report the anticorrelation efficiency, the fraction of executed swap
    decisions whose undisturbed speed sat within |delta| of the bin's
    reference speed (the small-interval census), and smallness flags
    comparing |delta| to the speed-distribution half width and to the
    distance between |v_bar| and the bulk of the A-ensemble speeds.
    """
    if setting is None:
        setting = SettingPair(0.0, 0.0)
    if not _same_setting_axes(setting):
        raise ValueError("disturbance sweep is defined for equal-axis settings")

    lam = generate_pair_seeds(config.master_seed, config.pairs)
    probe = _initial_state(config, lam, wing=spec.target_wing)
    speeds = np.linalg.norm(probe.velocities, axis=1)
    half_width = math.sqrt(2.0 * math.log(2.0)) * float(speeds.std())
    vbar_mag = float(np.linalg.norm(probe.velocities.mean(axis=0)))
    a_speeds = speeds[probe.ensembles == ENSEMBLE_A]
    center_gap = abs(vbar_mag - float(np.median(a_speeds)))

    rows = []
    for delta in magnitudes:
        delta = float(delta)
        result = run_epr(
            config, settings=[setting], disturbance=spec, delta_mag=delta
        )
        eff = result.stats.anticorrelated_fraction(setting)
        log = result.swap_log_2 if spec.target_wing == 2 else result.swap_log_1
        decisions = 2 * log.n_swaps
        altered = log.near_threshold / decisions if decisions else 0.0
        rows.append(
            {
                "delta": delta,
                "efficiency": eff,
                "efficiency_drop": 1.0 - eff,
                "altered_swap_fraction": altered,
                "swaps": log.n_swaps,
                "half_width": half_width,
                "center_gap": center_gap,
                "smallness_ok": bool(
                    delta <= 0.1 * half_width and delta <= 0.1 * center_gap
                ),
            }
        )
    return rows


def _same_setting_axes(s: SettingPair) -> bool:
    return abs(normalize_angle(s.mu) - normalize_angle(s.nu)) <= 1e-12
