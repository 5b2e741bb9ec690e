"""Ensemble engine: force streams, Langevin steps, fields, exchange, evolve."""

import math

import numpy as np
import pytest

from lhvlab.dynamics import (
    BinGrid,
    BrownianSource,
    ENSEMBLE_A,
    ENSEMBLE_B,
    EnsembleState,
    PhysParams,
    Trajectory,
    estimate_fields,
    evolve,
    exchange_procedure,
    sample_brownian_force,
    step_langevin,
    stream_normal,
    stream_uniform,
)


def make_state(positions, velocities, ensembles, spins=None, width=1.0, ids=None, c_max=math.inf):
    n = len(positions)
    if spins is None:
        spins = np.ones(n, dtype=np.int8)
    if ids is None:
        ids = np.arange(n)
    return EnsembleState(
        ids=np.asarray(ids),
        positions=np.asarray(positions, dtype=float),
        velocities=np.asarray(velocities, dtype=float),
        ensembles=np.asarray(ensembles, dtype=np.int8),
        spins=np.asarray(spins, dtype=np.int8),
        grid=BinGrid(width=width),
        c_max=c_max,
    )


def xvel(values):
    """Embed scalar speeds as velocities along +x."""
    v = np.zeros((len(values), 3))
    v[:, 0] = values
    return v


class TestStreams:
    def test_pure_function_of_inputs(self):
        seeds = np.arange(10, dtype=np.uint64)
        a = stream_uniform(seeds, 5, 2)
        b = stream_uniform(seeds, 5, 2)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, stream_uniform(seeds, 6, 2))
        assert not np.array_equal(a, stream_uniform(seeds, 5, 3))

    def test_open_unit_interval(self):
        u = stream_uniform(np.arange(10000, dtype=np.uint64), 0, 0)
        assert u.min() > 0.0 and u.max() < 1.0

    def test_brownian_moments(self):
        p = PhysParams.fluctuation_matched(dt=0.1)
        seeds = np.arange(10**6, dtype=np.uint64)
        draws = p.force_sigma * stream_normal(seeds, 3, 0)
        sigma2 = p.m0 * p.kB * p.temperature / (2.0 * p.tau_coll**2)
        assert abs(draws.mean()) <= 4.0 * math.sqrt(sigma2) / 1e3
        assert abs(draws.var() / sigma2 - 1.0) <= 0.01

    def test_cross_component_independence(self):
        seeds = np.arange(10**6, dtype=np.uint64)
        a = stream_normal(seeds, 2, 0)
        b = stream_normal(seeds, 2, 1)
        assert abs(np.corrcoef(a, b)[0, 1]) < 0.005

    def test_sample_brownian_force_contract(self):
        src = BrownianSource(seed=42, sigma=2.0)
        f1 = sample_brownian_force(src, 7)
        assert f1.shape == (3,)
        assert np.array_equal(f1, src.sample(7))
        with pytest.raises(ValueError, match="nonnegative"):
            sample_brownian_force(src, -1)


class TestPhysParams:
    def test_nu_relation(self):
        p = PhysParams(m0=2.0, tau=1.0, tau_coll=0.1)
        assert p.nu == 0.25
        # nu = kB T tau / m0 consistency
        assert p.kB * p.temperature * p.tau / p.m0 == pytest.approx(p.nu, rel=1e-12)

    def test_inconsistent_temperature_rejected(self):
        with pytest.raises(ValueError, match="inconsistent"):
            PhysParams(tau=1.0, tau_coll=0.1, temperature=3.0)

    def test_consistent_temperature_accepted(self):
        p = PhysParams(tau=1.0, tau_coll=0.1, temperature=0.5)
        assert p.temperature == 0.5

    def test_fluctuation_matched_tau_coll(self):
        p = PhysParams.fluctuation_matched(tau=2.0, dt=0.2)
        assert p.tau_coll == pytest.approx(math.sqrt(0.4) / 2.0, rel=1e-12)

    def test_positivity(self):
        with pytest.raises(ValueError):
            PhysParams(m0=-1.0)


class TestStepLangevin:
    def setup_method(self):
        self.p = PhysParams.fluctuation_matched(tau=1.0, dt=0.1)

    def test_damped_wing(self):
        t = Trajectory(0, (0, 0, 0), (1, 0, 0), "B", "up")
        out = step_langevin(t, (0, 0, 0), (0, 0, 0), self.p, dt=0.1)
        assert out.velocity == pytest.approx((0.9, 0.0, 0.0), abs=1e-15)
        assert out.position == pytest.approx((0.09, 0.0, 0.0), abs=1e-15)

    def test_antidamped_wing(self):
        t = Trajectory(0, (0, 0, 0), (1, 0, 0), "A", "up")
        out = step_langevin(t, (0, 0, 0), (0, 0, 0), self.p, dt=0.1)
        assert out.velocity == pytest.approx((1.1, 0.0, 0.0), abs=1e-15)

    def test_newtonian_limit(self):
        p = PhysParams(tau=math.inf, tau_coll=1.0)
        t = Trajectory(0, (0, 0, 0), (1, 0, 0), "B", "up")
        out = step_langevin(t, (2.0, 0, 0), (0, 0, 0), p, dt=0.25)
        assert out.velocity == pytest.approx((1.5, 0.0, 0.0), abs=1e-15)

    def test_nonfinite_force_rejected(self):
        t = Trajectory(0, (0, 0, 0), (1, 0, 0), "B", "up")
        with pytest.raises(ValueError, match="non-finite"):
            step_langevin(t, (math.nan, 0, 0), (0, 0, 0), self.p, dt=0.1)

    def test_dt_bounds(self):
        t = Trajectory(0, (0, 0, 0), (1, 0, 0), "B", "up")
        with pytest.raises(ValueError, match="dt"):
            step_langevin(t, (0, 0, 0), (0, 0, 0), self.p, dt=2.0)

    def test_speed_cap(self):
        t = Trajectory(0, (0, 0, 0), (10, 0, 0), "A", "up")
        out = step_langevin(t, (0, 0, 0), (0, 0, 0), self.p, dt=0.1, c_max=5.0)
        assert np.linalg.norm(out.velocity) == pytest.approx(5.0, rel=1e-12)

    def test_matches_vectorized_path(self):
        p = self.p
        state = make_state([[0.1, 0.2, 0.3]], [[1.0, -2.0, 0.5]], [ENSEMBLE_A])
        traj = state.trajectory(0)
        single = step_langevin(traj, (0.3, 0.1, -0.2), (0.05, 0, 0), p, dt=0.1)
        from lhvlab.dynamics import _step_langevin_arrays

        _step_langevin_arrays(state, np.array([[0.35, 0.1, -0.2]]), p, 0.1)
        assert np.allclose(state.velocities[0], single.velocity, atol=1e-15)
        assert np.allclose(state.positions[0], single.position, atol=1e-15)


class TestEstimateFields:
    def test_uniform_density_zero_osmotic(self):
        n = 1000
        x = np.linspace(0.0005, 0.9995, n)
        pos = np.zeros((n, 3))
        pos[:, 0] = x
        state = make_state(pos, np.zeros((n, 3)), np.zeros(n), width=0.1)
        f = estimate_fields(state, PhysParams.fluctuation_matched())
        interior = slice(1, -1)
        assert np.allclose(f.u[interior, 0], 0.0, atol=1e-12)
        assert float((f.rho * np.diff(f.edges)).sum()) == pytest.approx(1.0, abs=1e-9)

    def test_gaussian_osmotic_profile(self):
        rng = np.random.default_rng(77)
        n = 100_000
        sigma = 1.0
        w = sigma / 5
        p = PhysParams.fluctuation_matched()
        pos = np.zeros((n, 3))
        pos[:, 0] = rng.normal(0.0, sigma, n)
        state = make_state(pos, np.zeros((n, 3)), np.zeros(n), width=w)
        f = estimate_fields(state, p)
        mean_x = pos[:, 0].mean()
        xs, us, expects = [], [], []
        for i in np.nonzero(f.occupied)[0]:
            x = f.centers[i]
            if not (0.3 * sigma < abs(x - mean_x) < 1.5 * sigma):
                continue
            if not (f.occupied[i - 1] and f.occupied[i + 1]):
                continue
            expected = p.nu * (x - mean_x) / sigma**2
            # histogram-gradient sampling noise for the central difference
            noise = p.nu * math.sqrt(1.0 / f.counts[i - 1] + 1.0 / f.counts[i + 1]) / (2 * w)
            assert f.u[i, 0] == pytest.approx(expected, abs=max(0.05 * abs(expected), 4 * noise))
            xs.append(x - mean_x)
            us.append(f.u[i, 0])
            expects.append(expected)
        assert len(xs) >= 8
        slope = np.polyfit(xs, us, 1)[0]
        assert slope == pytest.approx(p.nu / sigma**2, rel=0.05)

    def test_constant_velocity_field(self):
        n = 64
        pos = np.zeros((n, 3))
        pos[:, 0] = np.linspace(0, 3, n)
        w = np.tile([0.5, -1.0, 2.0], (n, 1))
        state = make_state(pos, w, np.zeros(n), width=0.5)
        f = estimate_fields(state, PhysParams.fluctuation_matched())
        for i in np.nonzero(f.occupied)[0]:
            assert np.array_equal(f.v[i], [0.5, -1.0, 2.0])

    def test_empty_ensemble_rejected(self):
        state = make_state(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0))
        with pytest.raises(ValueError, match="empty"):
            estimate_fields(state, PhysParams.fluctuation_matched())


class TestExchangeProcedure:
    def test_spec_example_pairs_five_with_two(self):
        state = make_state(
            np.zeros((4, 3)), xvel([5, 3, 2, 0]),
            [ENSEMBLE_A, ENSEMBLE_A, ENSEMBLE_B, ENSEMBLE_B],
            spins=[1, 1, -1, -1],
        )
        log = exchange_procedure(state, superposition_mode=True)
        assert list(zip(log.id_a, log.id_b)) == [(0, 2)]
        assert np.allclose(state.mean_velocity(ENSEMBLE_A), [2.5, 0, 0])
        assert np.allclose(state.mean_velocity(ENSEMBLE_B), [2.5, 0, 0])
        # both participants flipped spin with their ensemble
        assert state.spins.tolist() == [-1, 1, 1, -1]
        assert state.ensembles.tolist() == [ENSEMBLE_B, ENSEMBLE_A, ENSEMBLE_A, ENSEMBLE_B]

    def test_equal_means_no_swaps(self):
        state = make_state(
            np.zeros((4, 3)), xvel([2, 1, 2, 1]),
            [ENSEMBLE_A, ENSEMBLE_A, ENSEMBLE_B, ENSEMBLE_B],
        )
        log = exchange_procedure(state)
        assert log.n_swaps == 0

    def test_no_cross_bin_pairs(self):
        # two clusters far apart; candidate structure exists in each
        pos = np.zeros((8, 3))
        pos[4:, 0] = 100.0
        vel = xvel([5, 3, 2, 0, 7, 4, 3, 1])
        ens = [ENSEMBLE_A, ENSEMBLE_A, ENSEMBLE_B, ENSEMBLE_B] * 2
        state = make_state(pos, vel, ens)
        log = exchange_procedure(state)
        bins = state.grid.indices(pos)
        for ia, ib in zip(log.id_a, log.id_b):
            assert bins[ia] == bins[ib]

    def test_highest_index_tie_break(self):
        # identical A speeds: the higher trajectory id must swap
        state = make_state(
            np.zeros((4, 3)), xvel([4.0, 4.0, 1.0, 1.0]),
            [ENSEMBLE_A, ENSEMBLE_A, ENSEMBLE_B, ENSEMBLE_B],
            ids=[10, 11, 20, 21],
        )
        log = exchange_procedure(state)
        assert log.n_swaps >= 1
        assert log.id_a[0] == 11
        assert log.id_b[0] == 21

    def test_strict_decrease_property(self):
        rng = np.random.default_rng(3)
        for _ in range(25):
            n = int(rng.integers(4, 40))
            state = make_state(
                np.zeros((n, 3)),
                rng.normal(1.0, 1.0, (n, 3)),
                rng.integers(0, 2, n),
            )
            before = np.linalg.norm(
                state.mean_velocity(ENSEMBLE_A) - state.mean_velocity(ENSEMBLE_B)
            )
            if not np.isfinite(before):
                continue
            counts_before = (
                (state.ensembles == ENSEMBLE_A).sum(),
                (state.ensembles == ENSEMBLE_B).sum(),
            )
            log = exchange_procedure(state)
            after = np.linalg.norm(
                state.mean_velocity(ENSEMBLE_A) - state.mean_velocity(ENSEMBLE_B)
            )
            assert after <= before + 1e-12
            if log.n_swaps:
                assert after < before
            counts_after = (
                (state.ensembles == ENSEMBLE_A).sum(),
                (state.ensembles == ENSEMBLE_B).sum(),
            )
            assert counts_before == counts_after

    def test_spin_flip_coupled_to_ensemble_change(self):
        rng = np.random.default_rng(11)
        n = 60
        state = make_state(
            np.zeros((n, 3)),
            rng.normal(1.5, 1.0, (n, 3)),
            rng.integers(0, 2, n),
            spins=rng.choice([-1, 1], n),
        )
        ens0, spin0 = state.ensembles.copy(), state.spins.copy()
        exchange_procedure(state, superposition_mode=True)
        changed_ens = state.ensembles != ens0
        changed_spin = state.spins != spin0
        assert np.array_equal(changed_ens, changed_spin)

    def test_without_superposition_spins_fixed(self):
        rng = np.random.default_rng(12)
        n = 40
        state = make_state(
            np.zeros((n, 3)),
            rng.normal(1.5, 1.0, (n, 3)),
            rng.integers(0, 2, n),
        )
        spin0 = state.spins.copy()
        exchange_procedure(state, superposition_mode=False)
        assert np.array_equal(state.spins, spin0)


class TestEvolve:
    def _setup(self, n=400, seed=9, tau=1.0, dt=0.1, drift=2.0):
        p = PhysParams.fluctuation_matched(tau=tau, dt=dt)
        seeds = np.random.SeedSequence(seed).generate_state(n, dtype=np.uint64)
        vel = p.thermal_speed * stream_normal(
            seeds[:, None], 0, np.asarray((0, 1, 2))[None, :]
        )
        vel[:, 0] += drift
        pos = stream_normal(seeds[:, None], 0, np.asarray((3, 4, 5))[None, :])
        ens = np.where(stream_uniform(seeds, 0, 7) < 0.5, 0, 1).astype(np.int8)
        state = make_state(pos, vel, ens, width=0.5)
        sources = [BrownianSource(int(s), p.force_sigma) for s in seeds]
        return state, sources, p

    def test_bit_identical_reruns(self):
        s1, src, p = self._setup()
        s2 = s1.copy()
        out1, d1, l1 = evolve(s1, src, None, p, steps=10, dt=0.1)
        out2, d2, l2 = evolve(s2, src, None, p, steps=10, dt=0.1)
        assert np.array_equal(out1.positions, out2.positions)
        assert np.array_equal(out1.velocities, out2.velocities)
        assert np.array_equal(out1.ensembles, out2.ensembles)
        assert l1.id_a == l2.id_a and l1.id_b == l2.id_b and l1.step == l2.step

    def test_imbalance_shrinks_at_exchange(self):
        state, src, p = self._setup()
        _, diag, _ = evolve(state, src, None, p, steps=8, dt=0.1)
        assert len(diag.time) == 8
        assert all(np.isfinite(diag.imbalance))
        assert sum(diag.swaps) > 0

    def test_newtonian_reproduction(self):
        # friction off (tau = inf) and heat bath at T = 0: pure Newton
        p = PhysParams(tau=math.inf, tau_coll=1.0)
        assert p.temperature == 0.0
        n = 50
        rng = np.random.default_rng(4)
        pos0 = rng.normal(0, 1, (n, 3))
        vel0 = rng.normal(0, 1, (n, 3))
        state = make_state(pos0.copy(), vel0.copy(), np.zeros(n), width=100.0)
        sources = [BrownianSource(i, p.force_sigma) for i in range(n)]
        f = np.array([0.5, 0.0, -0.25])
        steps, dt = 20, 0.05
        state, diag, _ = evolve(
            state, sources, lambda x, t: np.tile(f, (len(x), 1)), p, steps=steps, dt=dt
        )
        # symplectic Euler closed form: v_k = v0 + k f dt, x advances with v_{k+1}
        k = np.arange(1, steps + 1)[:, None]
        v_expect = vel0[None, :, :] + (k * dt)[:, :, None][:, :1, :] * f  # broadcast helper
        v_final = vel0 + steps * dt * f
        x_final = pos0 + dt * np.sum(
            vel0[None, :, :] + (np.arange(1, steps + 1) * dt)[:, None, None] * f, axis=0
        )
        assert np.allclose(state.velocities, v_final, atol=1e-12)
        assert np.allclose(state.positions, x_final, atol=1e-12)

    def test_remote_cluster_perturbation_leaves_local_swaps(self):
        """Altering a disjoint cluster's forces must not change this bin's log."""
        p = PhysParams.fluctuation_matched(tau=1.0, dt=0.1)
        n_half = 120
        rng = np.random.SeedSequence(21)
        seeds_a = rng.generate_state(n_half, dtype=np.uint64)
        seeds_b1 = np.random.SeedSequence(22).generate_state(n_half, dtype=np.uint64)
        seeds_b2 = np.random.SeedSequence(23).generate_state(n_half, dtype=np.uint64)

        def build(far_seeds):
            seeds = np.concatenate([seeds_a, far_seeds])
            vel = p.thermal_speed * stream_normal(
                seeds[:, None], 0, np.asarray((0, 1, 2))[None, :]
            )
            vel[:, 0] += 2.0
            pos = 0.3 * stream_normal(seeds[:, None], 0, np.asarray((3, 4, 5))[None, :])
            pos[n_half:, 0] += 500.0  # spatially disjoint cluster
            ens = np.where(stream_uniform(seeds, 0, 7) < 0.5, 0, 1).astype(np.int8)
            state = make_state(pos, vel, ens, width=1.0)
            sources = [BrownianSource(int(s), p.force_sigma) for s in seeds]
            return state, sources

        logs = []
        for far in (seeds_b1, seeds_b2):
            state, sources = build(far)
            _, _, log = evolve(state, sources, None, p, steps=6, dt=0.1)
            near = [
                (a, b, s)
                for a, b, bb, s in zip(log.id_a, log.id_b, log.bin, log.step)
                if bb < 250
            ]
            logs.append(near)
        assert logs[0] == logs[1]
        assert len(logs[0]) > 0

    def test_spin_history_marks_swaps_only(self):
        state, src, p = self._setup(n=200)
        hist = np.empty((11, 200), dtype=np.int8)
        state, diag, log = evolve(
            state, src, None, p, steps=10, dt=0.1,
            superposition_mode=True, spin_history=hist,
        )
        flips = np.nonzero(np.diff(hist.astype(np.int16), axis=0))
        flip_events = set(zip(flips[0] + 1, flips[1]))  # (step, trajectory)
        swap_events = set()
        for a, b, s in zip(log.id_a, log.id_b, log.step):
            swap_events.add((s, a))
            swap_events.add((s, b))
        assert flip_events == swap_events

    def test_source_count_mismatch(self):
        state, src, p = self._setup(n=10)
        with pytest.raises(ValueError, match="one BrownianSource per"):
            evolve(state, src[:5], None, p, steps=1, dt=0.1)


class TestCsvExports:
    def test_snapshot_round_shape(self):
        state = make_state(
            [[1.0, 2.0, 3.0]], [[0.5, 0.0, -1.0]], [ENSEMBLE_B], spins=[-1]
        )
        text = state.snapshot_csv()
        lines = text.strip().split("\n")
        assert lines[0] == "id,x,y,z,vx,vy,vz,ensemble,spin"
        assert lines[1].endswith("B,down")

    def test_unique_ids_enforced(self):
        with pytest.raises(ValueError, match="unique"):
            make_state(np.zeros((2, 3)), np.zeros((2, 3)), [0, 1], ids=[5, 5])
