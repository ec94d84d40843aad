"""Command-line front end: ``conveyor <command> --config run.json``."""
from __future__ import annotations

import argparse
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import control_chain as cc
from . import geometry, protocols
from .config import ConfigError, RunConfig, load_config
from .dynamics import (
    ResolutionWarning,
    default_grid,
    detection_fidelity,
    interferometer_contrast,
    thermal_fidelity,
    transport,
)
from .lattice import SITE
from .optimizer import optimize, scan_qsl
from .results import write_blocks, write_json, write_table

EXIT_OK, EXIT_CONFIG, EXIT_UNSTABLE, EXIT_PARTIAL = 0, 2, 3, 4


def _progress(msg: str):
    print(msg, file=sys.stderr, flush=True)


def _grid(cfg: RunConfig, tau, params):
    return default_grid(tau, params, cfg.grid)


def build_trajectory(kind: str, tau: float, params, cfg: RunConfig):
    d = cfg.protocol.d_sites * SITE
    if kind == "linear":
        return protocols.linear(d, tau)
    if kind == "parabolic":
        return protocols.parabolic(d, tau)
    if kind == "adiabatic_sine":
        return protocols.adiabatic_sine(d, tau)
    if kind == "classical_ansatz":
        return protocols.classical_ansatz(d, tau, params)
    if kind == "optimal":
        res = optimize(tau, d, params, cfg.thermal, cfg.optimizer, cfg.limits, _grid(cfg, tau, params))
        return res.trajectory
    raise ValueError(f"unknown protocol {kind!r}")


def _run_cells(fn, cells, workers: int):
    """Evaluate cells (possibly in parallel); rows come back sorted by cell key."""
    cells = sorted(cells, key=lambda c: c[0])
    rows = []
    if workers > 1 and len(cells) > 1:
        with ProcessPoolExecutor(workers) as pool:
            for i, row in enumerate(pool.map(fn, cells)):
                _progress(f"[{i + 1}/{len(cells)}] {cells[i][0]} {row.get('status')}")
                rows.append(row)
    else:
        for i, cell in enumerate(cells):
            row = fn(cell)
            _progress(f"[{i + 1}/{len(cells)}] {cell[0]} {row.get('status')}")
            rows.append(row)
    return rows


class _Cell:
    """Numerical failure in one cell marks the row instead of aborting the run."""

    def __init__(self, fn, fields):
        self.fn, self.fields = fn, fields

    def __call__(self, cell):
        key, cfg = cell
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", ResolutionWarning)
                row = self.fn(key, cfg)
            row.setdefault("status", "ok")
            return row
        except (ValueError, ArithmeticError, RuntimeError) as exc:
            row = dict(zip(self.fields, key))
            row["status"] = f"failed: {type(exc).__name__}: {exc}"
            return row


KEY3 = ("protocol", "u0", "tau_over_tau_ho")


def _params(cfg: RunConfig, u0):
    return cfg.lattice.with_depth(float(u0))


# --- sweep --------------------------------------------------------------------

def _sweep_cell(key, cfg: RunConfig):
    kind, u0, ratio = key
    params = _params(cfg, u0)
    tau = ratio * params.tau_ho
    traj = build_trajectory(kind, tau, params, cfg)
    grid = _grid(cfg, tau, params)
    log = geometry.record_transport(traj, params, grid)
    rep = geometry.bound_report(log)
    fid = log.fidelity
    t_perp = 0.0
    if cfg.thermal is not None and cfg.thermal.t_perp_uk > 0:
        fid = thermal_fidelity(traj, params, cfg.thermal, grid)
        t_perp = cfg.thermal.t_perp_uk
    det = detection_fidelity(log.states[-1], grid, params, float(traj.position(traj.span[1])))
    return {
        "protocol": kind, "u0": float(u0), "tau_over_tau_ho": ratio, "tau": tau, "t_perp_uk": t_perp,
        "fidelity": fid, "detection_fidelity": det, "ell": rep.ell, "delta_e": rep.delta_e,
        "aa_residual": rep.aa_residual, "ell_qgt": rep.ell_qgt, "ell_qb_est": rep.ell_qb_est,
    }


sweep_cell = _Cell(_sweep_cell, KEY3)


def _cells(cfg: RunConfig):
    return [((kind, float(u0), float(r)), cfg) for kind in cfg.protocol.kinds for u0 in cfg.depths
            for r in cfg.protocol.tau_over_tau_ho]


def cmd_sweep(cfg: RunConfig, workers: int = 1) -> int:
    rows = _run_cells(sweep_cell, _cells(cfg), workers)
    out = Path(cfg.output.dir)
    write_table(rows, "sweep", out, cfg.output.format)
    blocks = {}
    for r in rows:
        if r["status"] == "ok":
            blocks.setdefault(f"{r['protocol']} u0={r['u0']:g}", []).append(
                (r["tau_over_tau_ho"], r["fidelity"], r["detection_fidelity"]))
    write_blocks(out / "sweep.dat", blocks, ("tau_over_tau_ho", "fidelity", "detection_fidelity"))
    return _exit_for(rows)


# --- optimize -------------------------------------------------------------------

def _optimize_cell(key, cfg: RunConfig):
    u0, ratio = key
    params = _params(cfg, u0)
    tau = ratio * params.tau_ho
    res = optimize(tau, cfg.protocol.d_sites * SITE, params, cfg.thermal, cfg.optimizer, cfg.limits,
                   _grid(cfg, tau, params))
    write_json(Path(cfg.output.dir) / f"optimum_u0={u0:g}_tau={ratio:g}.json", res.to_dict())
    return {
        "u0": u0, "tau_over_tau_ho": ratio, "tau": tau,
        "t_perp_uk": cfg.thermal.t_perp_uk if cfg.thermal else 0.0,
        "fidelity": res.fidelity, "detection_fidelity": res.detection_fidelity,
        "seed_fidelity": res.seed_fidelity, "evals": res.evals, "feasible": res.feasible,
        "budget_exhausted": res.budget_exhausted,
        "status": "ok" if res.feasible else "infeasible",
    }


optimize_cell = _Cell(_optimize_cell, ("u0", "tau_over_tau_ho"))


def cmd_optimize(cfg: RunConfig, workers: int = 1) -> int:
    cells = [((float(u0), float(r)), cfg) for u0 in cfg.depths for r in cfg.protocol.tau_over_tau_ho]
    rows = _run_cells(optimize_cell, cells, workers)
    write_table(rows, "optimize", cfg.output.dir, cfg.output.format)
    return _exit_for(rows)


# --- landscape -------------------------------------------------------------------

def cmd_landscape(cfg: RunConfig, workers: int = 1) -> int:
    d = cfg.protocol.d_sites * SITE
    _progress(f"landscape over u0={list(cfg.depths)}")
    points = scan_qsl(cfg.depths, cfg.protocol.tau_over_tau_ho, d, 0.5, cfg.optimizer, cfg.limits,
                      cfg.lattice.e_rec_hz or 2000.0, cfg.lattice.lambda_nm, workers)
    cells, trans, matrix = [], [], {}
    for pt in sorted(points, key=lambda p: p.u0):
        for res in pt.results:
            ratio = res.tau / pt.tau_ho
            cells.append({"u0": pt.u0, "tau_over_tau_ho": ratio, "tau": res.tau, "fidelity": res.fidelity,
                          "detection_fidelity": res.detection_fidelity, "feasible": res.feasible,
                          "status": "ok"})
            matrix.setdefault(f"u0={pt.u0:g}", []).append((pt.u0, ratio, res.detection_fidelity))
        params = cfg.lattice.with_depth(pt.u0)
        trans.append({
            "u0": pt.u0, "tau_ho": pt.tau_ho, "tau_star": pt.tau_star, "tau_star_over_tau_ho": pt.ratio,
            "tau_high": pt.tau_high, "tau_high_over_tau_ho": pt.tau_high / pt.tau_ho,
            "tau_cb": protocols.tau_cb(d, params), "controlled_levels": pt.controlled_levels,
            "status": "ok" if pt.in_range else "out_of_range",
        })
    cells.sort(key=lambda r: (r["u0"], r["tau_over_tau_ho"]))
    out = Path(cfg.output.dir)
    write_table(cells, "landscape", out, cfg.output.format)
    write_table(trans, "transition", out, cfg.output.format)
    write_blocks(out / "landscape.dat", {k: sorted(v) for k, v in matrix.items()},
                 ("u0", "tau_over_tau_ho", "detection_fidelity"))
    return EXIT_OK if all(t["status"] == "ok" for t in trans) else EXIT_PARTIAL


# --- interferometer -----------------------------------------------------------------

def _interferometer_cell(key, cfg: RunConfig):
    kind, u0, ratio = key
    params = _params(cfg, u0)
    tau = ratio * params.tau_ho
    traj = build_trajectory(kind, tau, params, cfg)
    grid = _grid(cfg, tau, params)
    on = interferometer_contrast(traj, params, compensate=True, grid=grid)
    off = interferometer_contrast(traj, params, compensate=False, grid=grid)
    fid = transport(traj, params, grid).fidelity
    return {"protocol": kind, "u0": u0, "tau_over_tau_ho": ratio, "tau": tau, "fidelity": fid,
            "contrast": on.contrast, "contrast_uncompensated": off.contrast, "sqrt_f2": on.sqrt_f2}


interferometer_cell = _Cell(_interferometer_cell, KEY3)


def cmd_interferometer(cfg: RunConfig, workers: int = 1) -> int:
    rows = _run_cells(interferometer_cell, _cells(cfg), workers)
    write_table(rows, "interferometer", cfg.output.dir, cfg.output.format)
    return _exit_for(rows)


# --- geometry -------------------------------------------------------------------------

def _geometry_cell(key, cfg: RunConfig):
    kind, u0, ratio = key
    params = _params(cfg, u0)
    tau = ratio * params.tau_ho
    traj = build_trajectory(kind, tau, params, cfg)
    log = geometry.record_transport(traj, params, _grid(cfg, tau, params))
    rep = geometry.bound_report(log)
    write_json(Path(cfg.output.dir) / f"geometry_{kind}_u0={u0:g}_tau={ratio:g}.json", rep.to_dict())
    return {
        "protocol": kind, "u0": u0, "tau_over_tau_ho": ratio, "tau": tau, "fidelity": log.fidelity,
        "ell": rep.ell, "delta_e": rep.delta_e, "ell_geo": rep.ell_geo, "ell_qgt": rep.ell_qgt,
        "ell_qb_est": rep.ell_qb_est, "delta_e_upper": rep.delta_e_upper, "tau_mt": rep.tau_mt,
        "aa_residual": rep.aa_residual, "eq7_flag": rep.bound_flags["ell_above_qgt"],
        "eq3_flag": rep.bound_flags["tau_above_cb"],
    }


geometry_cell = _Cell(_geometry_cell, KEY3)


def cmd_geometry(cfg: RunConfig, workers: int = 1) -> int:
    rows = _run_cells(geometry_cell, _cells(cfg), workers)
    write_table(rows, "geometry", cfg.output.dir, cfg.output.format)
    return _exit_for(rows)


# --- control ----------------------------------------------------------------------------

def build_plant(cfg: RunConfig) -> cc.Plant:
    c = cfg.control
    if c.kernel_csv:
        kernel = cc.ImpulseResponse.from_csv(c.kernel_csv)
    else:
        kernel = cc.ImpulseResponse.low_pass(c.delay_us, c.cutoff_hz, c.dt_us)
    return cc.Plant(kernel, c.slew_limit, c.noise_rms_nm, cfg.lattice.lambda_nm or cc.CESIUM_LAMBDA_NM)


def cmd_control(cfg: RunConfig, workers: int = 1) -> int:
    c = cfg.control
    plant = build_plant(cfg)
    params = cfg.lattice
    if c.target_csv:
        t_us, target = cc.load_signal_csv(c.target_csv)
    else:
        kind = cfg.protocol.kinds[0]
        tau = cfg.protocol.tau_over_tau_ho[0] * params.tau_ho
        traj = build_trajectory(kind, tau, params, cfg)
        t_us, target = cc.sample_trajectory(traj, params, plant.kernel.dt_us, c.pad_us)
    out = Path(cfg.output.dir)
    code = EXIT_OK
    try:
        res = cc.iterate_compensation(t_us, target, plant, c.gain, c.max_iter, c.reg, seed=cfg.seed)
        history = res.history
        cc.save_signal_csv(out / "drive.csv", t_us, res.drive)
        cc.save_signal_csv(out / "actual.csv", t_us, res.actual)
    except cc.InstabilityError as exc:
        _progress(f"compensation unstable: {exc}")
        history, code = exc.history, EXIT_UNSTABLE
    rows = [{"iteration": i + 1, "max_residual_lambda": h, "max_residual_sites": h / cc.SITE_LAMBDA}
            for i, h in enumerate(history)]
    write_table(rows, "residuals", out, cfg.output.format)
    cc.save_signal_csv(out / "target.csv", t_us, target)
    return code


COMMANDS = {
    "sweep": cmd_sweep,
    "landscape": cmd_landscape,
    "optimize": cmd_optimize,
    "interferometer": cmd_interferometer,
    "geometry": cmd_geometry,
    "control": cmd_control,
}


def _exit_for(rows) -> int:
    return EXIT_OK if all(r.get("status") == "ok" for r in rows) else EXIT_PARTIAL


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="conveyor", description="Atom transport in an optical conveyor belt")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="JSON run configuration (defaults apply when omitted)")
    parser.add_argument("--out", help="output directory (overrides the config)")
    parser.add_argument("--workers", type=int, default=1)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--format", choices=("csv", "json"))
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else RunConfig()
        cfg = cfg.with_overrides(args.seed, args.out, args.format)
        if args.workers < 1:
            raise ConfigError("--workers must be at least 1")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    np.seterr(all="ignore")
    return COMMANDS[args.command](cfg, args.workers)


if __name__ == "__main__":
    sys.exit(main())
