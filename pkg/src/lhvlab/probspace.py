"""Finite probability spaces, partition conditioning, and locality predicates.

Everything here is finite and exhaustively checkable: outcome spaces are
lists of opaque labels, sigma-algebras are generated by partitions, and the
no-signaling / factorization conditions and the CHSH-type functionals are
evaluated by direct enumeration.  All functions are pure and operate on
immutable value types, so they are safe to call from any thread.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Sequence

import numpy as np

TWO_PI = 2.0 * math.pi

#: Default tolerance for equality checks on probabilities.
EQ_TOL = 1e-12

#: Default tolerance for the determinism (indicator-function) check.
DET_TOL = 1e-9


class PreconditionError(ValueError):
    """A declared precondition of an operation does not hold.

    ``which`` names the failed precondition so callers (and tests) can tell
    a genuine violation from an unrelated error.
    """

    def __init__(self, which: str, message: str):
        super().__init__(f"precondition '{which}' failed: {message}")
        self.which = which


def _complement(total: float, x: float) -> float:
    """Return d such that ``x + d == total`` exactly in float arithmetic.

    Starts from the rounded difference and walks at most a few ulps.  Used
    to build probability tables whose marginals are exact by construction.
    """
    d = total - x
    if x + d == total:
        return d
    for _ in range(4):
        d_up = math.nextafter(d, math.inf)
        if x + d_up == total:
            return d_up
        d_dn = math.nextafter(d, -math.inf)
        if x + d_dn == total:
            return d_dn
        # widen the search one ulp at a time in the direction of the error
        d = d_up if x + d < total else d_dn
    raise ArithmeticError(f"no exact complement of {x} to {total}")


# ---------------------------------------------------------------------------
# probability spaces and partitions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FiniteProbSpace:
    """A finite probability space: outcome labels plus one weight each."""

    outcomes: tuple[Hashable, ...]
    weights: tuple[float, ...]

    def __post_init__(self):
        if len(self.outcomes) != len(self.weights):
            raise ValueError("outcomes and weights must have equal length")
        if len(set(self.outcomes)) != len(self.outcomes):
            raise ValueError("outcome labels must be unique")
        w = np.asarray(self.weights, dtype=float)
        if np.any(w < 0.0):
            raise ValueError("weights must be nonnegative")
        if abs(float(w.sum()) - 1.0) > EQ_TOL:
            raise ValueError(f"weights sum to {w.sum()!r}, not 1")

    @classmethod
    def uniform(cls, outcomes: Iterable[Hashable]) -> "FiniteProbSpace":
        outcomes = tuple(outcomes)
        n = len(outcomes)
        return cls(outcomes, tuple([1.0 / n] * n))

    def index(self, outcome: Hashable) -> int:
        return self.outcomes.index(outcome)

    def probability(self, event: Iterable[Hashable]) -> float:
        ev = set(event)
        return float(sum(w for o, w in zip(self.outcomes, self.weights) if o in ev))


@dataclass(frozen=True)
class Partition:
    """Disjoint outcome sets covering a space; generates the sigma-algebra."""

    cells: tuple[frozenset, ...]

    def __post_init__(self):
        seen: set = set()
        for cell in self.cells:
            if not cell:
                raise ValueError("partition cells must be nonempty")
            if seen & cell:
                raise ValueError("partition cells must be pairwise disjoint")
            seen |= cell

    @classmethod
    def of(cls, *cells: Iterable[Hashable]) -> "Partition":
        return cls(tuple(frozenset(c) for c in cells))

    def covers(self, space: FiniteProbSpace) -> bool:
        union: set = set()
        for cell in self.cells:
            union |= cell
        return union == set(space.outcomes)

    def cell_of(self, outcome: Hashable) -> int:
        for i, cell in enumerate(self.cells):
            if outcome in cell:
                return i
        raise KeyError(outcome)


@dataclass(frozen=True)
class ConditionalRV:
    """P(A | F) as a random variable: one value per outcome of the space.

    The values are constant on each cell of the conditioning partition
    (measurability) and the expectation reproduces the unconditional
    probability of the conditioned event.
    """

    space: FiniteProbSpace
    partition: Partition
    values: tuple[float, ...]

    def value_at(self, outcome: Hashable) -> float:
        return self.values[self.space.index(outcome)]

    def cell_value(self, cell_index: int) -> float:
        outcome = next(iter(self.partition.cells[cell_index]))
        return self.value_at(outcome)

    def expectation(self) -> float:
        return float(np.dot(self.values, self.space.weights))


def conditional_probability(
    space: FiniteProbSpace, event: Iterable[Hashable], partition: Partition
) -> ConditionalRV:
    """Revised probability of ``event`` given the partition-generated algebra.

    On each cell C the value is P(event & C) / P(C).  Cells of zero
    probability are rejected (the conditioning is undefined there).
    """
    if not partition.covers(space):
        raise ValueError("partition does not cover the outcome space")
    ev = set(event)
    unknown = ev - set(space.outcomes)
    if unknown:
        raise ValueError(f"event contains unknown outcomes: {sorted(map(str, unknown))}")

    cell_values = []
    for i, cell in enumerate(partition.cells):
        p_cell = space.probability(cell)
        if p_cell <= 0.0:
            raise ZeroDivisionError(
                f"cell {i} ({sorted(map(str, cell))}) has zero probability"
            )
        cell_values.append(space.probability(ev & cell) / p_cell)

    values = tuple(cell_values[partition.cell_of(o)] for o in space.outcomes)
    return ConditionalRV(space, partition, values)


# ---------------------------------------------------------------------------
# setting-indexed measure families
# ---------------------------------------------------------------------------

UP, DOWN = 0, 1
OUTCOME_LABELS = ("up", "down")


def normalize_angle(angle: float) -> float:
    """Map an angle in radians onto [0, 2*pi)."""
    a = math.fmod(angle, TWO_PI)
    if a < 0.0:
        a += TWO_PI
    if a >= TWO_PI:  # fmod artifacts near the boundary
        a -= TWO_PI
    return a


@dataclass(frozen=True)
class SettingPair:
    """Detector axis angles (radians, in-plane) for stations 1 and 2."""

    mu: float
    nu: float

    def __post_init__(self):
        object.__setattr__(self, "mu", normalize_angle(self.mu))
        object.__setattr__(self, "nu", normalize_angle(self.nu))

    @classmethod
    def from_degrees(cls, mu_deg: float, nu_deg: float) -> "SettingPair":
        return cls(math.radians(mu_deg), math.radians(nu_deg))

    @property
    def delta(self) -> float:
        """Relative angle between the two axes."""
        return self.nu - self.mu

    def degrees(self) -> tuple[float, float]:
        return (math.degrees(self.mu), math.degrees(self.nu))


def _same_angle(a: float, b: float, tol: float = 1e-12) -> bool:
    d = abs(normalize_angle(a) - normalize_angle(b))
    return d <= tol or abs(d - TWO_PI) <= tol


@dataclass(frozen=True)
class SettingIndexedModel:
    """A family of joint-outcome measures indexed by detector settings.

    For each setting pair the model carries a distribution over
    (source event, outcome at 1, outcome at 2): a ``(n_cells, 2, 2)`` table
    whose entries sum to one.  The source marginal must be the same for
    every setting (the source cannot react to future axis choices).
    """

    settings: tuple[SettingPair, ...]
    tables: tuple  # of (n_cells, 2, 2) float arrays
    source_weights: tuple[float, ...]
    settings_deg: tuple[tuple[float, float], ...] = field(default=())

    def __post_init__(self):
        if not self.settings:
            raise ValueError("model needs at least one setting pair")
        if len(self.settings) != len(self.tables):
            raise ValueError("one table per setting required")
        w = np.asarray(self.source_weights, dtype=float)
        if np.any(w <= 0.0):
            raise ValueError("degenerate source cell: every source weight must be > 0")
        if abs(float(w.sum()) - 1.0) > EQ_TOL:
            raise ValueError("source weights must sum to 1")
        for s, t in zip(self.settings, self.tables):
            t = np.asarray(t, dtype=float)
            if t.shape != (len(w), 2, 2):
                raise ValueError(f"table for {s} has shape {t.shape}")
            if np.any(t < -EQ_TOL):
                raise ValueError(f"negative probability in table for {s}")
            if abs(float(t.sum()) - 1.0) > EQ_TOL:
                raise ValueError(f"table for {s} does not sum to 1")
            marg = t.sum(axis=(1, 2))
            if np.max(np.abs(marg - w)) > EQ_TOL:
                raise ValueError(
                    f"source marginal of table for {s} deviates from the "
                    f"declared source weights by {np.max(np.abs(marg - w))!r}"
                )
        if not self.settings_deg:
            object.__setattr__(
                self, "settings_deg", tuple(s.degrees() for s in self.settings)
            )

    # -- lookups ------------------------------------------------------------

    @property
    def n_cells(self) -> int:
        return len(self.source_weights)

    def _find(self, s: SettingPair) -> int:
        for i, cand in enumerate(self.settings):
            if _same_angle(cand.mu, s.mu) and _same_angle(cand.nu, s.nu):
                return i
        raise KeyError(f"setting {s.degrees()} deg not present in model")

    def table(self, s: SettingPair) -> np.ndarray:
        """The (n_cells, 2, 2) joint table for one setting pair."""
        return np.asarray(self.tables[self._find(s)], dtype=float)

    def joint(self, s: SettingPair) -> np.ndarray:
        """Unconditional 2x2 joint outcome table, source summed out."""
        return self.table(s).sum(axis=0)

    def conditional_joint(self, s: SettingPair, cell: int) -> np.ndarray:
        """2x2 joint table conditioned on one source cell."""
        return self.table(s)[cell] / self.source_weights[cell]

    # -- serialization -------------------------------------------------------

    def to_document(self) -> str:
        """Serialize to the structured text document (JSON).

        Schema: ``settings_deg`` (list of [mu, nu] in degrees),
        ``source_weights`` (one per source cell), ``tables`` (per setting,
        flattened row-major over (cell, out1, out2); 8 entries for the
        default two-cell source).  Round-trips are bit-stable because JSON
        emits shortest-representation floats.
        """
        doc = {
            "format": "setting-indexed-model/1",
            "settings_deg": [list(sd) for sd in self.settings_deg],
            "source_weights": list(self.source_weights),
            "tables": [
                np.asarray(t, dtype=float).reshape(-1).tolist() for t in self.tables
            ],
        }
        return json.dumps(doc, indent=2) + "\n"

    @classmethod
    def from_document(cls, text: str) -> "SettingIndexedModel":
        doc = json.loads(text)
        if doc.get("format") != "setting-indexed-model/1":
            raise ValueError("unrecognized model document format")
        weights = tuple(float(x) for x in doc["source_weights"])
        n = len(weights)
        settings_deg = tuple((float(m), float(v)) for m, v in doc["settings_deg"])
        settings = tuple(SettingPair.from_degrees(m, v) for m, v in settings_deg)
        tables = tuple(
            np.asarray(t, dtype=float).reshape(n, 2, 2) for t in doc["tables"]
        )
        return cls(settings, tables, weights, settings_deg)


# ---------------------------------------------------------------------------
# locality predicates
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LocalityReport:
    """Result of a locality audit: worst deviation plus where it occurred."""

    ok: bool
    max_deviation: float
    witness: tuple | None


def is_actively_local(model: SettingIndexedModel, tol: float = EQ_TOL) -> LocalityReport:
    """No-signaling audit: local outcome marginals must ignore the remote axis.

    Compares, for every pair of settings sharing an axis, the kept wing's
    outcome probabilities, both unconditionally and cellwise given the
    source partition.  The report's witness identifies the worst pair.
    """
    n = len(model.settings)
    pairs_checked = 0
    worst = 0.0
    witness = None
    w = np.asarray(model.source_weights, dtype=float)

    for i in range(n):
        for k in range(i + 1, n):
            a, b = model.settings[i], model.settings[k]
            ta = np.asarray(model.tables[i], dtype=float)
            tb = np.asarray(model.tables[k], dtype=float)
            for side, shared in (("detector1", _same_angle(a.mu, b.mu)),
                                 ("detector2", _same_angle(a.nu, b.nu))):
                if not shared:
                    continue
                pairs_checked += 1
                axis_out = 1 if side == "detector1" else 2
                # unconditional marginals of the kept wing
                ma = ta.sum(axis=(0, 2)) if axis_out == 1 else ta.sum(axis=(0, 1))
                mb = tb.sum(axis=(0, 2)) if axis_out == 1 else tb.sum(axis=(0, 1))
                # cellwise conditional marginals over the source algebra
                ca = (ta.sum(axis=2) if axis_out == 1 else ta.sum(axis=1)) / w[:, None]
                cb = (tb.sum(axis=2) if axis_out == 1 else tb.sum(axis=1)) / w[:, None]
                for dev, where in (
                    (float(np.max(np.abs(ma - mb))), "marginal"),
                    (float(np.max(np.abs(ca - cb))), "conditional"),
                ):
                    if dev > worst:
                        worst = dev
                        witness = (side, where, a.degrees(), b.degrees())

    if pairs_checked == 0:
        raise PreconditionError(
            "shared-axis settings",
            "model must cover at least two settings sharing one axis",
        )
    return LocalityReport(ok=worst <= tol, max_deviation=worst, witness=witness)


def is_passively_local(model: SettingIndexedModel, tol: float = EQ_TOL) -> LocalityReport:
    """Factorization audit: source-conditioned joints vs product of wings."""
    worst = 0.0
    witness = None
    for s in model.settings:
        for cell in range(model.n_cells):
            joint = model.conditional_joint(s, cell)
            p1 = joint.sum(axis=1)  # P(out1 | cell)
            p2 = joint.sum(axis=0)  # P(out2 | cell)
            gap = np.abs(joint - np.outer(p1, p2))
            dev = float(gap.max())
            if dev > worst:
                worst = dev
                s1, s2 = np.unravel_index(int(gap.argmax()), (2, 2))
                witness = (
                    s.degrees(),
                    cell,
                    (OUTCOME_LABELS[s1], OUTCOME_LABELS[s2]),
                )
    return LocalityReport(ok=worst <= tol, max_deviation=worst, witness=witness)


# ---------------------------------------------------------------------------
# correlation functionals
# ---------------------------------------------------------------------------


def correlation_coefficient(model: SettingIndexedModel, s: SettingPair) -> float:
    """E(mu, nu) = P(uu) + P(dd) - P(ud) - P(du) from unconditional joints."""
    j = model.joint(s)
    return float(j[UP, UP] + j[DOWN, DOWN] - j[UP, DOWN] - j[DOWN, UP])


def chsh(
    model: SettingIndexedModel, mu: float, mu_p: float, nu: float, nu_p: float
) -> float:
    """|E(mu,nu) + E(mu,nu') + E(mu',nu) - E(mu',nu')| for model settings."""
    e = lambda m, v: correlation_coefficient(model, SettingPair(m, v))
    return abs(e(mu, nu) + e(mu, nu_p) + e(mu_p, nu) - e(mu_p, nu_p))


def bell_original(model: SettingIndexedModel, mu: float, nu: float, nu_p: float) -> float:
    """|E(mu,nu) - E(mu,nu')| - E(nu,nu'), the original three-axis combination."""
    e = lambda m, v: correlation_coefficient(model, SettingPair(m, v))
    return abs(e(mu, nu) - e(mu, nu_p)) - e(nu, nu_p)


def conditional_chsh_bound_scan(grid_step: float) -> dict:
    """Exhaustive grid scan of the conditional CHSH combination.

    The conditioned correlation for wing probabilities p, q in [0, 1] is
    E = p(1-q) + (1-p)q - pq - (1-p)(1-q); the scan maximizes the CHSH
    combination over a grid of (P_mu, P_mu', P_nu, P_nu') in [0, 1]^4 and
    must stay below 2 (+ float headroom) everywhere.
    """
    if not (0.0 < grid_step <= 0.5):
        raise PreconditionError("grid_step", "need 0 < grid_step <= 0.5")
    n = int(round(1.0 / grid_step))
    g = np.linspace(0.0, 1.0, n + 1)

    def corr(p, q):
        return p * (1 - q) + (1 - p) * q - p * q - (1 - p) * (1 - q)

    e = corr(g[:, None], g[None, :])  # e[i, j] = E(P_mu=g[i], P_nu=g[j])
    best = -np.inf
    arg = None
    # S = e[m,n] + e[m,n'] + e[m',n] - e[m',n']; chunk over m to bound memory
    for m in range(n + 1):
        s = np.abs(
            e[m][None, :, None]
            + e[m][None, None, :]
            + e[:, :, None]
            - e[:, None, :]
        )  # axes: (m', n, n')
        k = int(np.argmax(s))
        if s.reshape(-1)[k] > best:
            best = float(s.reshape(-1)[k])
            mp, nn, npp = np.unravel_index(k, s.shape)
            arg = (float(g[m]), float(g[mp]), float(g[nn]), float(g[npp]))
    return {"max_value": best, "argmax": arg, "grid_points": n + 1}


# ---------------------------------------------------------------------------
# deterministic passive locality (source-event equivalence)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DeterminismReport:
    is_deterministic: bool
    #: per equal-axis setting: (setting degrees, witness cell indices,
    #: worst |conditional - nearest indicator value|)
    witnesses: tuple


def deterministic_passive_locality_check(
    model: SettingIndexedModel,
    det_tol: float = DET_TOL,
    eq_tol: float = EQ_TOL,
) -> DeterminismReport:
    """Verify the indicator-function consequence of equivalence + factorization.

    For a model whose equal-axis outcomes are perfectly anticorrelated and
    which factorizes given the source partition, every equal-axis
    conditional outcome probability must be 0 or 1, and the cells where it
    is 1 form a source event equivalent to both detector events.
    """
    equal_axis = [s for s in model.settings if _same_angle(s.mu, s.nu)]
    if not equal_axis:
        raise PreconditionError(
            "equal-axis setting", "model has no setting with mu = nu"
        )
    for s in equal_axis:
        j = model.joint(s)
        if abs(j[UP, DOWN] + j[DOWN, UP] - 1.0) > eq_tol:
            raise PreconditionError(
                "equal-axis equivalence",
                f"outcomes at {s.degrees()} deg are not perfectly anticorrelated",
            )
    passive = is_passively_local(model, tol=eq_tol)
    if not passive.ok:
        raise PreconditionError(
            "passive locality",
            f"factorization gap {passive.max_deviation:.6g} at {passive.witness}",
        )

    w = np.asarray(model.source_weights, dtype=float)
    witnesses = []
    deterministic = True
    for s in equal_axis:
        t = model.table(s)
        cond_up1 = t[:, UP, :].sum(axis=1) / w     # P(out1=up | cell)
        cond_dn2 = t[:, :, DOWN].sum(axis=1) / w   # P(out2=down | cell)
        dist = np.minimum(np.abs(cond_up1), np.abs(cond_up1 - 1.0))
        dist = np.maximum(dist, np.minimum(np.abs(cond_dn2), np.abs(cond_dn2 - 1.0)))
        worst = float(dist.max())
        if worst > det_tol:
            deterministic = False
        witness_cells = tuple(int(i) for i in np.nonzero(cond_up1 > 0.5)[0])
        # equivalence of the witness event with the detector events
        p_event = float(w[list(witness_cells)].sum()) if witness_cells else 0.0
        p_up1 = float(t[:, UP, :].sum())
        p_int = float(t[list(witness_cells), UP, :].sum()) if witness_cells else 0.0
        if abs(p_event - p_up1) > det_tol or abs(p_int - p_event) > det_tol:
            deterministic = False
        witnesses.append((s.degrees(), witness_cells, worst))
    return DeterminismReport(deterministic, tuple(witnesses))


def sample_anticorrelated_model(
    rng: np.random.Generator,
    n_cells: int = 2,
    endpoint_prob: float = 0.8,
) -> SettingIndexedModel:
    """Draw a random equal-axis model with exact outcome anticorrelation.

    Each source cell carries a joint table (0, c, 1-c, 0) over the four
    outcome pairs; c is drawn from a mixture of the endpoints {0, 1} and
    the open interval.  Interior values of c violate factorization, so the
    sampled family exercises both branches of the determinism lemma.
    """
    raw = rng.uniform(0.2, 1.0, size=n_cells)
    weights = raw / raw.sum()
    weights[-1] = _complement(1.0, float(weights[:-1].sum()))
    cells = []
    for i in range(n_cells):
        if rng.uniform() < endpoint_prob:
            c = float(rng.integers(0, 2))
        else:
            c = float(rng.uniform(0.05, 0.95))
        block = np.array([[0.0, c], [1.0 - c, 0.0]]) * weights[i]
        cells.append(block)
    angle = float(rng.uniform(0.0, TWO_PI))
    setting = SettingPair(angle, angle)
    return SettingIndexedModel(
        settings=(setting,),
        tables=(np.stack(cells),),
        source_weights=tuple(float(x) for x in weights),
    )


# ---------------------------------------------------------------------------
# the quantum joint-table model
# ---------------------------------------------------------------------------


def quantum_joint_table(delta: float) -> np.ndarray:
    """Singlet joint outcome table at relative angle delta.

    P(uu) = P(dd) = sin^2(delta/2)/2 and P(ud) = P(du) = cos^2(delta/2)/2,
    arranged so both wing marginals are exactly one half in float
    arithmetic (the off-diagonal is the exact complement to 1/2).
    """
    a = 0.5 * math.sin(0.5 * delta) ** 2
    a = min(max(a, 0.0), 0.5)
    b = _complement(0.5, a)
    return np.array([[a, b], [b, a]])


def build_quantum_epr_model(settings: Sequence[SettingPair]) -> SettingIndexedModel:
    """Quantum singlet statistics attached to a two-cell source partition.

    Each source cell receives half of the same joint table, so the model
    is actively local by construction at both the value and the cell level,
    while the source conditioning buys nothing: factorization fails for
    every relative angle.
    """
    settings = tuple(settings)
    if not settings:
        raise PreconditionError("settings", "need at least one setting pair")
    tables = []
    for s in settings:
        joint = quantum_joint_table(s.delta)
        tables.append(np.stack([0.5 * joint, 0.5 * joint]))
    return SettingIndexedModel(
        settings=settings,
        tables=tuple(tables),
        source_weights=(0.5, 0.5),
    )
