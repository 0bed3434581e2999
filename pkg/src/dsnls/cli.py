"""Command line entry point: config parsing, dispatch, artifact output."""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import experiments as exps
from ._report import ExperimentReport, write_trajectory_csv, write_series_csv, Series
from .errors import ConfigError, NumericsError
from .functionals import hamiltonian_batch
from .integrator import simulate
from .noise import NoiseStream, sample_path
from .spectral import SpectralField

SUBCOMMANDS = (
    "simulate", "foias-prodi", "lyapunov", "energy-growth",
    "small-ball", "couple", "mixing", "calibrate",
)


def _parser():
    p = argparse.ArgumentParser(
        prog="dsnls",
        description="Damped stochastic cubic NLS: spectral solver and "
        "coupling diagnostics",
    )
    p.add_argument("subcommand", choices=SUBCOMMANDS)
    p.add_argument("--config", default=None, help="path to a JSON config file")
    p.add_argument("--jobs", type=int, default=1, help="worker pool size")
    p.add_argument("--seed", type=int, default=None, help="override rng.master_seed")
    p.add_argument("--out", default=None, help="override output.dir")
    return p


def _run_simulate(cfg: dict, out: Path, jobs: int) -> int:
    ctx = cfgmod.build_context(cfg, out, jobs)
    sc = cfg["simulate"]
    space, solver, spec = ctx.space, ctx.cfg, ctx.spec
    c0 = np.zeros(space.n_modes, complex)
    mode = int(sc["u0_mode"])
    if mode > 0:
        c0[mode - 1] = sc["u0_amplitude"]
    u0 = SpectralField(c0, space)
    T = float(sc["T"])
    K = int(round(T / solver.dt))
    noise = None
    if not sc["noise_off"]:
        noise = sample_path(
            spec, K, solver.dt, NoiseStream(ctx.seed, 0),
            real_only=cfg["noise"]["real_only"],
        )
    traj = simulate(u0, T, solver, noise, spec=spec)

    write_trajectory_csv(out / "trajectory.csv", traj)
    l2 = np.sqrt((np.abs(traj.coeffs) ** 2).sum(axis=1))
    write_series_csv(out / "series_l2norm.csv", Series(traj.times, l2))
    np.savez_compressed(
        out / "trajectory.npz",
        times=traj.times,
        coeffs=traj.coeffs,
        increments=noise.increments if noise is not None else np.zeros((0,)),
        dt=solver.dt,
        alpha=solver.alpha,
        seed_id=np.array(noise.seed_id) if noise is not None else np.zeros(0, int),
    )
    report = ExperimentReport("simulate", cfg)
    report.add_scalar("final_l2_norm", float(l2[-1]))
    h_series = hamiltonian_batch(traj.coeffs, space, ctx.consts.c0)
    report.add_series("hamiltonian", traj.times, h_series)
    report.add_series("l2norm", traj.times, l2)
    report.write(out)
    for line in report.summary_lines():
        print(line)
    return 0


def _run_calibrate(cfg: dict, out: Path, jobs: int) -> int:
    consts, report = cfgmod.load_or_calibrate(cfg, out)
    ctx = cfgmod.build_context(cfg, out, jobs)
    fitted = exps.pilot_fit_constants(ctx)
    payload = {
        "calibration": report,
        "fitted_coupling_constants": fitted,
        "constants": {"c0": consts.c0, "c1": consts.c1, "lambda": consts.lam},
    }
    path = out / "calibrate.json"
    path.write_text(json.dumps(payload, indent=2) + "\n")
    print(f"c0 = {consts.c0:.6g}")
    print(f"c1 = {consts.c1:.6g}")
    print(f"lambda = {consts.lam:.6g}")
    for k, v in fitted.items():
        print(f"{k} = {v:.6g}")
    print(f"wrote {path}")
    return 0


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        overrides = {}
        if args.seed is not None:
            overrides["rng"] = {"master_seed": args.seed}
        if args.out is not None:
            overrides["output"] = {"dir": args.out}
        cfg = cfgmod.load_config(args.config, overrides)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2

    out = Path(cfg["output"]["dir"])
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    try:
        if args.subcommand == "simulate":
            return _run_simulate(cfg, out, args.jobs)
        if args.subcommand == "calibrate":
            return _run_calibrate(cfg, out, args.jobs)
        ctx = cfgmod.build_context(cfg, out, args.jobs)
        fn = exps.EXPERIMENTS[args.subcommand]
        if args.subcommand in ("mixing", "couple"):
            report = fn(ctx, out_dir=out)
        else:
            report = fn(ctx)
        report.wall_clock = time.perf_counter() - t0
        report.write(out)
        for line in report.summary_lines():
            print(line)
        return 0 if report.all_passed else 1
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except NumericsError as e:
        dump = out / "blowup_state.json"
        dump.write_text(json.dumps({"error": str(e), "step": e.step}) + "\n")
        print(f"numeric blow-up: {e} (state dump: {dump})", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
