"""Command line front end: ``ghzclock <command> [--config PATH] [--seed S] [--out DIR] [--format F]``.

Every command writes a JSON report plus its tables (CSV or JSON) into the
output directory, re-reads them to validate, and exits 0 only if all of that
succeeded. Exit codes: 2 for configuration errors, 3 when an optimizer
missed its target (the best artifact is still written), 1 otherwise.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from . import cascade, geometry, lattice, metrology, noisysim, pulsegen
from .config import COMMANDS, RunConfig, default_config, validate

log = logging.getLogger("ghzclock")

WORKERS_ENV = "GHZCLOCK_WORKERS"


class OptimizerShortfall(RuntimeError):
    pass


# -- output helpers --------------------------------------------------------------------------


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, float)):
        return None if not math.isfinite(float(x)) else float(x)
    if isinstance(x, np.integer):
        return int(x)
    return x


class Writer:
    """Writes artifacts and remembers them for the final validation pass."""

    def __init__(self, out: Path, fmt: str):
        self.out = out
        self.fmt = fmt
        self.written: list[Path] = []
        out.mkdir(parents=True, exist_ok=True)

    def report(self, name: str, data: dict) -> Path:
        path = self.out / f"{name}.json"
        path.write_text(json.dumps(_jsonable(data), indent=2, sort_keys=True) + "\n")
        self.written.append(path)
        return path

    def table(self, name: str, columns: dict) -> Path:
        """Columns are ``{header_with_unit: sequence}`` of equal length."""
        lengths = {len(v) for v in columns.values()}
        if len(lengths) != 1:
            raise ValueError(f"table {name} has ragged columns")
        if self.fmt == "json":
            path = self.out / f"{name}.json"
            path.write_text(json.dumps(_jsonable(columns), indent=1) + "\n")
        else:
            path = self.out / f"{name}.csv"
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(list(columns))
                for row in zip(*columns.values()):
                    w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
        self.written.append(path)
        return path

    def file(self, path: Path) -> Path:
        self.written.append(path)
        return path

    def validate(self) -> None:
        for path in self.written:
            if not path.exists() or path.stat().st_size == 0:
                raise RuntimeError(f"artifact {path} missing or empty")
            if path.suffix == ".json":
                json.loads(path.read_text())
            elif path.suffix == ".csv":
                with open(path, newline="") as fh:
                    rows = list(csv.reader(fh))
                if not rows or any(len(r) != len(rows[0]) for r in rows):
                    raise RuntimeError(f"artifact {path} is malformed")


# -- builders --------------------------------------------------------------------------------


def noise_from_block(block) -> noisysim.NoiseConfig:
    if block is None:
        return noisysim.NoiseConfig()
    if block.preset in ("ideal", "blockade_only"):
        return noisysim.NoiseConfig.ideal()
    if block.preset == "decay_only":
        return noisysim.NoiseConfig.decay_only()
    return noisysim.NoiseConfig(
        block.sigma_omega_frac, block.sigma_delta, block.gamma_dark, block.gamma_bright, tuple(block.raman_rates_hz),
        block.raman_time, block.recoil_loss, block.lattice_depth_er, block.lattice_off, block.per_atom_detuning,
        block.per_atom_rabi,
    )


def arrangement_from_block(block, num_atoms: int) -> geometry.Arrangement:
    if block is None or (block.preset is None and block.positions is None and block.file is None):
        return geometry.standard_arrangement(num_atoms)
    if block.preset is not None:
        arr = geometry.arrangement_from_name(block.preset)
    elif block.positions is not None:
        arr = geometry.Arrangement(tuple(tuple(p) for p in block.positions))
    else:
        arr = geometry.load_arrangement(block.file)
    if arr.num_atoms != num_atoms:
        raise ValueError(f"arrangement has {arr.num_atoms} atoms, expected {num_atoms}")
    return arr


def clock_noise(block) -> metrology.NoiseProcess:
    parts = []
    if block.white_fm_adev_1s > 0:
        parts.append(metrology.WhiteFM(block.white_fm_adev_1s))
    if block.random_walk_rate > 0:
        parts.append(metrology.RandomWalkFM(block.random_walk_rate))
    if block.flicker_level > 0:
        parts.append(metrology.FlickerFM(block.flicker_level))
    if block.line_amplitude > 0:
        parts.append(metrology.Sinusoid(block.line_amplitude, block.line_frequency_hz))
    return metrology.CompositeNoise(parts)


def _workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


# -- commands --------------------------------------------------------------------------------


def cmd_optimize_pulse(cfg: RunConfig, w: Writer) -> dict:
    p = cfg.pulse
    if p.search_duration:
        res = pulsegen.find_minimal_duration(p.n_max, p.f_target, p.gamma, p.dt, p.rabi, p.tau_rise, cfg.seed,
                                             p.restarts)
        pulse, fid = res.pulse, res.fidelity
        alpha = pulsegen.gate_fidelity(pulse, p.n_max, p.gamma)[1]
        trials = res.trials
    else:
        res = pulsegen.grape_optimize(p.n_max, dt=p.dt, rabi=p.rabi, gamma=p.gamma, seed=cfg.seed,
                                      tau_rise=p.tau_rise, restarts=p.restarts, maxiter=p.maxiter,
                                      target=p.f_target, num_steps=p.num_steps)
        pulse, fid, alpha = res.pulse, res.fidelity, res.alpha
        trials = {pulse.num_steps: fid}
    pulsegen.save_pulse(pulse, w.file(w.out / "pulse.txt"))
    report = {
        "n_max": p.n_max, "fidelity": fid, "T_G_s": pulse.duration, "num_steps": pulse.num_steps,
        "alpha_c_rad": alpha, "f_target": p.f_target, "reached_target": fid >= p.f_target,
        "trials_steps_to_fidelity": trials, "pulse_file": "pulse.txt",
    }
    w.report("report", report)
    if fid < p.f_target:
        w.validate()
        raise OptimizerShortfall(f"best fidelity {fid:.6f} below target {p.f_target}")
    return report


def _shot_chunk(args):
    setup, noise, shots, phases, seed, max_ryd, start = args
    out = []
    trial = start
    for phi in phases:
        for _ in range(shots):
            bits, flags = noisysim.simulate_shot(setup, noise, phi, noisysim.shot_rng(seed, trial), max_ryd)
            out.append(noisysim.ShotRecord(trial, 0, float("nan") if phi is None else float(phi), bits, flags, seed))
            trial += 1
    return out


def cmd_simulate_ghz(cfg: RunConfig, w: Writer) -> dict:
    g = cfg.ghz
    n = g.num_atoms
    pulse = pulsegen.load_pulse(g.pulse_file) if g.pulse_file else pulsegen.reference_pulse(max(2, n))
    noise = noise_from_block(cfg.noise)
    arr = arrangement_from_block(cfg.geometry, n) if n > 1 else None
    phases = [None] + list(np.arange(g.num_phases) * 2 * np.pi / (n * g.num_phases))
    workers = _workers()
    # trials are numbered globally so the records do not depend on the worker count
    setup = noisysim.prepare_setup(n, pulse, noise, arr, None, g.max_rydberg)
    jobs = [(setup, noise, g.shots, [phi], cfg.seed, g.max_rydberg, i * g.shots) for i, phi in enumerate(phases)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            chunks = list(ex.map(_shot_chunk, jobs))
    else:
        chunks = [_shot_chunk(j) for j in jobs]
    records = [r for c in chunks for r in c]
    est = noisysim.estimate_fidelity(records)
    if cfg.format == "csv":
        noisysim.write_records(records, w.file(w.out / "shots.csv"))
    else:
        w.table("shots", {
            "shot": [r.shot for r in records], "ensemble_id": [r.ensemble_id for r in records],
            "phi_c_rad": [r.phi_c for r in records], "outcome_bits": ["".join(map(str, r.bits)) for r in records],
            "n": [r.n for r in records], "leaked": [";".join(f or "-" for f in r.leaked) for r in records],
        })
    report = {
        "num_atoms": n, "shots_per_phase": g.shots, "num_phases": g.num_phases, "rows": len(records),
        "p0_plus_pN": est.p0_plus_pn, "contrast": est.fit.contrast, "contrast_stderr": float(est.fit.stderr[0]),
        "phase_rad": est.fit.phase, "offset": est.fit.offset, "F_raw": est.fidelity,
        "T_G_s": pulse.duration,
    }
    if g.finite_blockade_check and n > 1:
        fb, alpha = noisysim.finite_blockade_fidelity(n, pulse, arr, max_rydberg=g.max_rydberg)
        viol = noisysim.blockade_violation(n, pulse, arr, max_rydberg=g.max_rydberg)
        report.update({"finite_blockade_fidelity": fb, "alpha_c_rad": alpha,
                       "blockade_violation_final": viol["final"], "blockade_violation_peak": viol["peak"],
                       "decay_infidelity": pulsegen.decay_infidelity(n, pulse, noise_from_block(None).gamma)})
    w.report("fidelity", report)
    return report


def cmd_run_clock(cfg: RunConfig, w: Writer) -> dict:
    c = cfg.clock
    base = metrology.ClockConfig(c.num_ensembles, c.num_atoms, c.dark_time, c.t_cycle, c.cycles, c.gain, c.nu0_hz,
                                 False, c.fill, c.contrast_mode, c.projection_noise)
    noise = clock_noise(c)
    contrast = c.contrast if isinstance(c.contrast, float) else dict(c.contrast)
    run = metrology.run_clock_lock(base, noise, contrast, cfg.seed)
    taus = c.taus
    al = run.allan(taus)
    sql, hl = metrology.sql_hl_reference(c.num_ensembles, c.num_atoms, c.dark_time, c.t_cycle, c.nu0_hz, al.taus)
    w.table("yseries", {
        "cycle": list(range(len(run.delta_est))), "delta_est_hz": run.delta_est,
        "delta_corr_hz": run.delta_corr[: len(run.delta_est)], "y": run.y,
    })
    table = {"tau_s": al.taus, "adev": al.adev, "adev_lo": al.lo, "adev_hi": al.hi, "edf": al.edf,
             "sigma_sql": sql, "sigma_hl": hl}
    report = {"cycles": c.cycles, "skipped_cycles": run.skipped, "total_atoms": base.total_atoms, "allan": table}
    if c.compare_css:
        css_cfg = metrology.ClockConfig(c.num_ensembles, c.num_atoms, c.dark_time, c.t_cycle, c.cycles, c.gain,
                                        c.nu0_hz, True, c.fill, "max", c.projection_noise)
        css = metrology.run_clock_lock(css_cfg, noise, 1.0, cfg.seed)
        alc = css.allan(taus)
        ratio = (alc.adev / al.adev) ** 2
        report["css_allan"] = {"tau_s": alc.taus, "adev": alc.adev}
        report["variance_ratio_css_over_ghz"] = ratio
        sel = (alc.taus >= 10 * c.t_cycle) & (alc.taus <= 100 * c.t_cycle)
        report["mean_variance_ratio_10_100_cycles"] = float(np.mean(ratio[sel])) if sel.any() else None
    w.report("allan", report)
    return report


def cmd_cascade(cfg: RunConfig, w: Writer) -> dict:
    b = cfg.cascade
    if b.sizes is not None:
        spec = cascade.CascadeSpec.ideal(b.sizes, b.copies, b.sigma)
    else:
        spec = cascade.CascadeSpec.linear(b.num_sizes, b.last_copies, b.slope, b.sigma)
    if b.contrasts is not None:
        spec = spec.with_contrasts(b.contrasts)
    if b.degraded:
        spec = cascade.degraded_contrast_model(spec, readout=b.readout)
    phis = np.linspace(-np.pi, np.pi, b.phase_points)
    enumerable = spec.num_outcomes <= cascade.ENUMERATION_LIMIT
    est = cascade.build_estimator(spec) if enumerable else None
    curve = cascade.mean_and_mse(spec, phis, est, draws=None if enumerable else b.draws, seed=cfg.seed)
    bm = cascade.bayesian_mse(spec, est, draws=None if enumerable else b.draws, seed=cfg.seed)
    try:
        eff = bm.effective
    except cascade.NoInformation:
        eff = float("inf")
    w.table("mse", {"phi_rad": phis, "mean_rad": curve.mean, "mse_rad2": curve.mse, "mean_se_rad": curve.mean_se,
                    "mse_se_rad2": curve.mse_se})
    report = {
        "sizes": spec.sizes, "copies": spec.copies, "contrasts": spec.contrasts, "sigma_rad": spec.sigma,
        "n_total": spec.n_total, "num_outcomes": spec.num_outcomes, "method": bm.method,
        "bmse_rad": bm.value, "bmse_stderr_rad": bm.stderr, "eff_rad": eff, "eff2_ntot": eff**2 * spec.n_total,
        "log_reference": float(cascade.log_reference(spec.n_total)),
    }
    if b.mc_check and enumerable:
        check_phis = np.array([-1.0, -0.3, 0.0, 0.4])
        mc = cascade.mean_and_mse(spec, check_phis, est, draws=b.draws, seed=cfg.seed + 1)
        exact = cascade.mean_and_mse(spec, check_phis, est)
        z = np.abs(mc.mse - exact.mse) / np.maximum(mc.mse_se, 1e-300)
        report["mc_check"] = {"phi_rad": check_phis, "enumeration_mse": exact.mse, "mc_mse": mc.mse,
                              "mc_stderr": mc.mse_se, "agree_3sigma": bool((z < 3).all())}
    w.report("cascade", report)
    return report


def cmd_recapture(cfg: RunConfig, w: Writer) -> dict:
    b = cfg.lattice
    times = np.linspace(0.0, b.t_max_us * 1e-6, b.points)
    curve = lattice.recapture_curve(b.depth_er, times, b.with_recoil, b.q_points, b.m_cutoff)
    w.table("curve", {"t_us": times * 1e6, "survival": curve.survival, "mean_phonon": curve.phonons})
    short = np.geomspace(10e-9, 100e-9, 8)
    short_curve = lattice.recapture_curve(b.depth_er, short, False, b.q_points, b.m_cutoff)
    sweep = {}
    for depth in b.depth_sweep_er:
        c = lattice.recapture_curve(depth, times, b.with_recoil, b.q_points, b.m_cutoff)
        sweep[str(depth)] = lattice.gaussian_decay_time(c.times, c.survival) * 1e6
    report = {
        "depth_er": b.depth_er, "with_recoil": b.with_recoil, "p_at_zero": float(curve.survival[0]),
        "gaussian_time_us": lattice.gaussian_decay_time(curve.times, curve.survival) * 1e6,
        "short_time_exponent": lattice.short_time_exponent(short_curve.times, short_curve.survival),
        "mean_phonon_2us": float(lattice.recapture_curve(b.depth_er, [2e-6], b.with_recoil).phonons[0]),
        "gaussian_time_us_by_depth": sweep,
    }
    w.report("recapture", report)
    return report


HANDLERS = {
    "optimize-pulse": cmd_optimize_pulse,
    "simulate-ghz": cmd_simulate_ghz,
    "run-clock": cmd_run_clock,
    "cascade": cmd_cascade,
    "recapture": cmd_recapture,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ghzclock", description="GHZ clock pulse design, simulation and analysis")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="JSON run configuration (defaults if omitted)")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--out", type=Path, help="output directory (default: ./out/<command>)")
        p.add_argument("--format", choices=("csv", "json"), help="table format")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * args.verbose, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.config is not None:
            doc = json.loads(args.config.read_text())
        else:
            doc = default_config(args.command)
        if args.seed is not None:
            doc["seed"] = args.seed
        if args.format is not None:
            doc["format"] = args.format
        cfg = validate(doc, args.command)
    except (ValidationError, ValueError, OSError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    out = args.out or Path(cfg.out or Path("out") / args.command)
    writer = Writer(Path(out), cfg.format)
    try:
        report = HANDLERS[args.command](cfg, writer)
        writer.validate()
    except OptimizerShortfall as exc:
        print(f"optimizer shortfall: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # surfaced as a non-zero exit code
        log.exception("command failed")
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(_jsonable({k: v for k, v in report.items() if not isinstance(v, (dict, list, tuple))}),
                     sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
