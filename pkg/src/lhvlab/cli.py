"""Reproducibility front-end: config parsing, orchestration, CSV emission.

Every subcommand reads a JSON config (angles in degrees), materializes all
defaults into ``config_echo.json`` inside the output bundle, and writes
CSV reports (header row, UTF-8, LF endings, '.' decimal separator, floats
in shortest round-trip form).  Re-running a bundle's echo reproduces the
bundle byte for byte; ``--threads`` is accepted for orchestration but can
never change results, so it is not part of the echo.

Exit codes: 0 success, 1 invariant failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import dynamics, epr, oracle, probspace
from .dynamics import BinGrid, BrownianSource, EnsembleState, PhysParams
from .epr import DisturbanceSpec, PairConfig
from .probspace import SettingPair

EXIT_OK = 0
EXIT_INVARIANT = 1
EXIT_CONFIG = 2


class ConfigError(Exception):
    pass


DEFAULTS = {
    "verify-theorem": {
        "master_seed": None,
        "grid_step": 0.05,
        "lemma_models": 1000,
        "tolerance": 1e-12,
        "determinism_tolerance": 1e-9,
        "quantum_settings_deg": [[0.0, 45.0], [0.0, 315.0], [90.0, 45.0], [90.0, 315.0], [0.0, 0.0], [45.0, 90.0]],
        "chsh_angles_deg": [0.0, 90.0, 45.0, 315.0],
    },
    "chsh-scan": {
        "grid_step": 0.05,
    },
    "epr": {
        "master_seed": None,
        "pairs": 100000,
        "flight_time": 2.0,
        "dt": 0.1,
        "tau": 1.0,
        "m0": 1.0,
        "hbar": 1.0,
        "kB": 1.0,
        "drift_speed": 2.0,
        "source_sigma": 1.0,
        "bin_width": 0.2,
        "measurement_model": epr.MODEL_SHARED_STREAM,
        "settings_deg": [[0.0, 0.0], [0.0, 90.0], [90.0, 0.0], [90.0, 90.0]],
        "chsh_angles_deg": None,
    },
    "swap": {
        "master_seed": None,
        "second_master_seed": None,
        "pairs": 10000,
        "flight_time": 2.0,
        "dt": 0.1,
        "tau": 1.0,
        "m0": 1.0,
        "hbar": 1.0,
        "kB": 1.0,
        "drift_speed": 2.0,
        "source_sigma": 1.0,
        "bin_width": 0.2,
        "measurement_model": epr.MODEL_SHARED_STREAM,
        "settings_deg": [[0.0, 0.0], [0.0, 90.0], [90.0, 0.0]],
    },
    "density": {
        "master_seed": None,
        "trajectories": 100000,
        "sigma0": 1.0,
        "t_final": 2.0,
        "tau": 3.2,
        "dt": 0.05,
        "m0": 1.0,
        "hbar": 1.0,
        "kB": 1.0,
        "drift_mult": 2.0,
        "bin_width": 0.2,
        "cap_mult": 20.0,
        "oracle_x_min": -12.0,
        "oracle_x_max": 14.0,
        "oracle_n": 800,
        "oracle_dt": 0.002,
        "ks_warn": 0.05,
    },
    "disturbance": {
        "master_seed": None,
        "pairs": 10000,
        "flight_time": 0.3,
        "dt": 0.1,
        "tau": 1.0,
        "m0": 1.0,
        "hbar": 1.0,
        "kB": 1.0,
        "drift_speed": 0.25,
        "source_sigma": 1.0,
        "bin_width": 0.05,
        "law": "gaussian",
        "target_wing": 2,
        "magnitudes_rel": [0.0, 0.001, 0.005, 0.01, 0.05, 0.1],
    },
}


def _load_config(command: str, path: str | None, seed_override: int | None) -> dict:
    cfg = dict(DEFAULTS[command])
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
            user = json.loads(text)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError("config document must be a JSON object")
        echoed_command = user.pop("command", command)
        if echoed_command != command:
            raise ConfigError(
                f"config was echoed by '{echoed_command}', not '{command}'"
            )
        unknown = set(user) - set(cfg)
        if unknown:
            raise ConfigError(f"unknown config keys for {command}: {sorted(unknown)}")
        cfg.update(user)
    if seed_override is not None:
        cfg["master_seed"] = seed_override
    if "master_seed" in cfg and cfg["master_seed"] is None:
        raise ConfigError("master_seed is required (config key or --seed)")
    return cfg


def _write(out_dir: Path, name: str, text: str) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / name).write_text(text, encoding="utf-8", newline="")


def _echo_config(out_dir: Path, command: str, cfg: dict) -> None:
    doc = {"command": command, **cfg}
    _write(out_dir, "config_echo.json", json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _csv(rows: list[dict], columns: list[str]) -> str:
    def fmt(x):
        if isinstance(x, bool):
            return "true" if x else "false"
        if isinstance(x, float):
            return repr(x)
        return str(x)

    lines = [",".join(columns)]
    for row in rows:
        lines.append(",".join(fmt(row[c]) for c in columns))
    return "\n".join(lines) + "\n"


def _physics(cfg: dict) -> PhysParams:
    return PhysParams.fluctuation_matched(
        m0=cfg["m0"], tau=cfg["tau"], dt=cfg["dt"], kB=cfg["kB"], hbar=cfg["hbar"]
    )


def _pair_config(cfg: dict) -> PairConfig:
    return PairConfig(
        pairs=int(cfg["pairs"]),
        master_seed=int(cfg["master_seed"]),
        flight_time=float(cfg["flight_time"]),
        dt=float(cfg["dt"]),
        measurement_model=cfg["measurement_model"],
        physics=_physics(cfg),
        drift_speed=float(cfg["drift_speed"]),
        source_sigma=float(cfg["source_sigma"]),
        bin_width=float(cfg["bin_width"]),
    )


def _settings(cfg: dict) -> list[SettingPair]:
    return [SettingPair.from_degrees(m, v) for m, v in cfg["settings_deg"]]


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_chsh_scan(cfg: dict, out_dir: Path) -> int:
    result = probspace.conditional_chsh_bound_scan(float(cfg["grid_step"]))
    rows = [
        {
            "grid_step": float(cfg["grid_step"]),
            "grid_points_per_axis": result["grid_points"],
            "max_value": result["max_value"],
            "p_mu": result["argmax"][0],
            "p_mu_prime": result["argmax"][1],
            "p_nu": result["argmax"][2],
            "p_nu_prime": result["argmax"][3],
            "bound_ok": result["max_value"] <= 2.0 + 1e-12,
        }
    ]
    _write(out_dir, "chsh_scan.csv", _csv(rows, list(rows[0].keys())))
    _echo_config(out_dir, "chsh-scan", cfg)
    return EXIT_OK if rows[0]["bound_ok"] else EXIT_INVARIANT


def cmd_verify_theorem(cfg: dict, out_dir: Path) -> int:
    checks = []

    scan = probspace.conditional_chsh_bound_scan(float(cfg["grid_step"]))
    checks.append(
        {
            "check": "conditional_chsh_scan_max",
            "value": scan["max_value"],
            "bound": 2.0 + 1e-12,
            "pass": scan["max_value"] <= 2.0 + 1e-12,
        }
    )

    rng = np.random.default_rng(int(cfg["master_seed"]))
    wanted = int(cfg["lemma_models"])
    accepted = 0
    rejected = 0
    lemma_ok = True
    while accepted < wanted and rejected + accepted < 50 * wanted:
        model = probspace.sample_anticorrelated_model(rng)
        try:
            report = probspace.deterministic_passive_locality_check(
                model, det_tol=float(cfg["determinism_tolerance"])
            )
        except probspace.PreconditionError as exc:
            if exc.which != "passive locality":
                lemma_ok = False
            rejected += 1
            continue
        accepted += 1
        if not report.is_deterministic:
            lemma_ok = False
    checks.append(
        {
            "check": "lemma_deterministic_models",
            "value": float(accepted),
            "bound": float(wanted),
            "pass": lemma_ok and accepted == wanted,
        }
    )

    settings = [SettingPair.from_degrees(m, v) for m, v in cfg["quantum_settings_deg"]]
    model = probspace.build_quantum_epr_model(settings)
    tol = float(cfg["tolerance"])
    active = probspace.is_actively_local(model, tol=tol)
    checks.append(
        {
            "check": "quantum_model_actively_local",
            "value": active.max_deviation,
            "bound": tol,
            "pass": active.ok,
        }
    )
    passive = probspace.is_passively_local(model, tol=tol)
    checks.append(
        {
            "check": "quantum_model_passive_gap",
            "value": passive.max_deviation,
            "bound": 0.17,
            "pass": (not passive.ok) and passive.max_deviation >= 0.17,
        }
    )
    a = [math.radians(x) for x in cfg["chsh_angles_deg"]]
    chsh_val = probspace.chsh(model, a[0], a[1], a[2], a[3])
    checks.append(
        {
            "check": "quantum_model_chsh",
            "value": chsh_val,
            "bound": 2.0 * math.sqrt(2.0),
            "pass": abs(chsh_val - 2.0 * math.sqrt(2.0)) <= 1e-10,
        }
    )

    _write(out_dir, "verify_report.csv", _csv(checks, ["check", "value", "bound", "pass"]))
    _echo_config(out_dir, "verify-theorem", cfg)
    return EXIT_OK if all(c["pass"] for c in checks) else EXIT_INVARIANT


def _epr_reports(cfg: dict, result: epr.EPRResult, out_dir: Path) -> None:
    settings = _settings(cfg)
    corr_rows = []
    for s in settings:
        est = epr.estimate_correlation(result.stats, s)
        corr_rows.append(
            {
                "mu_deg": s.degrees()[0],
                "nu_deg": s.degrees()[1],
                "n": est["n"],
                "E_hat": est["E_hat"],
                "stderr": est["stderr"],
                "anticorrelated_fraction": result.stats.anticorrelated_fraction(s),
                "marginal_up_1": result.stats.wing_marginal(s, 1),
                "marginal_up_2": result.stats.wing_marginal(s, 2),
            }
        )
    _write(out_dir, "correlations.csv", _csv(corr_rows, list(corr_rows[0].keys())))

    ns = epr.no_signaling_test(result.stats)
    ns_rows = [
        {
            "wing": c["wing"],
            "local_angle_deg": c["local_angle_deg"],
            "setting_a": "%g|%g" % c["setting_a"],
            "setting_b": "%g|%g" % c["setting_b"],
            "shift": c["shift"],
            "stderr": c["stderr"],
            "pass": c["pass"],
        }
        for c in ns.comparisons
    ]
    _write(out_dir, "no_signaling.csv", _csv(ns_rows, list(ns_rows[0].keys())))

    fact = epr.passive_factorization_test(result.stats)
    f_rows = [
        {
            "mu_deg": r["setting"][0],
            "nu_deg": r["setting"][1],
            "source_cell": r["source_cell"],
            "n": r["n"],
            "gap": r["gap"],
            "stderr": r["stderr"],
            "factorizes": r["pass"],
        }
        for r in fact.rows
    ]
    _write(out_dir, "factorization.csv", _csv(f_rows, list(f_rows[0].keys())))

    if cfg.get("chsh_angles_deg"):
        a = [math.radians(x) for x in cfg["chsh_angles_deg"]]
        est = epr.chsh_estimate(result.stats, a[0], a[1], a[2], a[3])
        rows = [
            {
                "mu_deg": cfg["chsh_angles_deg"][0],
                "mu_prime_deg": cfg["chsh_angles_deg"][1],
                "nu_deg": cfg["chsh_angles_deg"][2],
                "nu_prime_deg": cfg["chsh_angles_deg"][3],
                "S_hat": est["S_hat"],
                "stderr": est["stderr"],
            }
        ]
        _write(out_dir, "chsh.csv", _csv(rows, list(rows[0].keys())))

    _write(out_dir, "diagnostics_wing1.csv", result.diagnostics_1.to_csv())
    _write(out_dir, "diagnostics_wing2.csv", result.diagnostics_2.to_csv())


def cmd_epr(cfg: dict, out_dir: Path) -> int:
    config = _pair_config(cfg)
    result = epr.run_epr(config, settings=_settings(cfg))
    _epr_reports(cfg, result, out_dir)
    _echo_config(out_dir, "epr", cfg)
    return EXIT_OK


def cmd_swap(cfg: dict, out_dir: Path) -> int:
    config = _pair_config(cfg)
    second = cfg["second_master_seed"]
    result = epr.entanglement_swap_scenario(
        config,
        settings=_settings(cfg),
        second_master_seed=None if second is None else int(second),
    )
    _epr_reports(cfg, result, out_dir)
    _echo_config(out_dir, "swap", cfg)
    return EXIT_OK


def cmd_density(cfg: dict, out_dir: Path) -> int:
    p = _physics(cfg)
    n = int(cfg["trajectories"])
    sigma0 = float(cfg["sigma0"])
    drift = float(cfg["drift_mult"]) * p.thermal_speed
    seeds = epr.generate_pair_seeds(int(cfg["master_seed"]), n)
    vel = p.thermal_speed * dynamics.stream_normal(
        seeds[:, None], 0, np.asarray((0, 1, 2))[None, :]
    )
    vel[:, 0] += drift
    pos = sigma0 * dynamics.stream_normal(
        seeds[:, None], 0, np.asarray((3, 4, 5))[None, :]
    )
    ab = np.where(dynamics.stream_uniform(seeds, 0, 7) < 0.5, 0, 1).astype(np.int8)
    state = EnsembleState(
        ids=np.arange(n, dtype=np.int64),
        positions=pos,
        velocities=vel,
        ensembles=ab,
        spins=np.ones(n, dtype=np.int8),
        grid=BinGrid(width=float(cfg["bin_width"])),
        c_max=drift + float(cfg["cap_mult"]) * p.thermal_speed,
    )
    sources = [BrownianSource(int(s), p.force_sigma) for s in seeds]
    steps = int(round(float(cfg["t_final"]) / float(cfg["dt"])))
    state, diag, _log = dynamics.evolve(
        state, sources, None, p, steps=steps, dt=float(cfg["dt"]), start_step=1
    )
    fields = dynamics.estimate_fields(state, p)

    grid = oracle.Grid1D(
        float(cfg["oracle_x_min"]), float(cfg["oracle_x_max"]), int(cfg["oracle_n"])
    )
    psi0 = oracle.gaussian_packet(grid, sigma0, 0.0, drift, p)
    psi_t, _snaps = oracle.evolve_schrodinger(
        psi0, np.zeros(grid.n), p, float(cfg["t_final"]), float(cfg["oracle_dt"])
    )
    comparison = oracle.compare_density(fields, psi_t)

    var_ens = float(state.positions[:, 0].var())
    var_orc = psi_t.position_variance()
    var_ana = oracle.free_packet_variance(float(cfg["t_final"]), sigma0, p)

    x = grid.x
    rho_o = psi_t.density()
    rows = []
    for i in range(len(fields.centers)):
        rows.append(
            {
                "x": float(fields.centers[i]),
                "rho_ensemble": float(fields.rho[i]),
                "rho_oracle": float(np.interp(fields.centers[i], x, rho_o)),
                "count": int(fields.counts[i]),
            }
        )
    _write(out_dir, "density.csv", _csv(rows, ["x", "rho_ensemble", "rho_oracle", "count"]))

    summary = [
        {
            "ks_distance": comparison["ks_distance"],
            "l1_distance": comparison["l1_distance"],
            "variance_ensemble": var_ens,
            "variance_oracle": var_orc,
            "variance_analytic": var_ana,
            "variance_rel_error": abs(var_ens / var_ana - 1.0),
            "capping_events": int(sum(diag.capped)),
            "warn_undersampled": comparison["ks_distance"] > float(cfg["ks_warn"]),
        }
    ]
    _write(out_dir, "density_summary.csv", _csv(summary, list(summary[0].keys())))
    _write(out_dir, "diagnostics.csv", diag.to_csv())
    _echo_config(out_dir, "density", cfg)
    return EXIT_OK


def cmd_disturbance(cfg: dict, out_dir: Path) -> int:
    config = _pair_config({**cfg, "measurement_model": epr.MODEL_SHARED_STREAM})
    spec = DisturbanceSpec(target_wing=int(cfg["target_wing"]), law=cfg["law"])
    probe_rows = epr.disturbance_sweep(config, spec, [0.0])
    half_width = probe_rows[0]["half_width"]
    magnitudes = [float(r) * half_width for r in cfg["magnitudes_rel"]]
    rows = epr.disturbance_sweep(config, spec, magnitudes)
    out_rows = [
        {
            "delta": r["delta"],
            "delta_over_half_width": (r["delta"] / half_width if half_width else 0.0),
            "efficiency": r["efficiency"],
            "efficiency_drop": r["efficiency_drop"],
            "altered_swap_fraction": r["altered_swap_fraction"],
            "swaps": r["swaps"],
            "smallness_ok": r["smallness_ok"],
        }
        for r in rows
    ]
    _write(out_dir, "disturbance.csv", _csv(out_rows, list(out_rows[0].keys())))
    _echo_config(out_dir, "disturbance", cfg)
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

_COMMANDS = {
    "verify-theorem": cmd_verify_theorem,
    "chsh-scan": cmd_chsh_scan,
    "epr": cmd_epr,
    "swap": cmd_swap,
    "density": cmd_density,
    "disturbance": cmd_disturbance,
}


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lhvlab",
        description="Stochastic local-hidden-variable laboratory: theorem "
        "verification, EPR simulation, density validation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", default=None, help="JSON config file")
        s.add_argument("--seed", type=int, default=None, help="master seed override")
        s.add_argument("--out", default=None, help="output directory")
        s.add_argument(
            "--threads",
            type=int,
            default=1,
            help="worker threads (results are independent of this)",
        )
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    try:
        cfg = _load_config(args.command, args.config, args.seed)
        out_dir = Path(args.out) if args.out else Path(f"out_{args.command.replace('-', '_')}")
        return _COMMANDS[args.command](cfg, out_dir)
    except (ConfigError, ValueError, KeyError) as exc:
        print(f"lhvlab: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
