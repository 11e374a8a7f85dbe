"""Command-line front end: ``simulate``, ``restore``, ``evaluate`` and ``sweep``.

Exit codes are a stable contract for scripts: 0 success, 2 configuration or
usage error, 3 data error (unreadable or malformed stacks, mismatched dims),
4 solver divergence.

Flags can also come from the environment: ``STAIC_CONFIG``, ``STAIC_SEED``,
``STAIC_OUT_DIR``, ``STAIC_THREADS`` and ``STAIC_LOG_EVERY``. Config keys
are overridden by ``STAIC_<SECTION>_<KEY>``. Command-line flags win over the
environment, which wins over the config file.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import tempfile
import time
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .baselines import BaselineConfig, restore_cst, restore_ictv, restore_tv2_3d
from .config import ENV_PREFIX, apply_env, load_config, snapshot
from .errors import ConfigError, DataError, DivergenceError, StaicError
from .harness import (SOLVERS, ExperimentSpec, NoiseSpec, PhantomSpec, PsfSpec, corrupt,
                      make_phantom, make_psf, run_experiment, snr_db, ssim_mean,
                      write_results_csv)
from .solver import SolverConfig, restore_staic
from .tensor import Stack, read_stack, write_stack

log = logging.getLogger("staic")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4


# --------------------------------------------------------------------------
# manifests


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_json_atomic(doc: dict, path: str) -> None:
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".manifest-", dir=d)
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def run_manifest(command: str, cfg: dict, inputs: Dict[str, str], outputs: Dict[str, str],
                 seeds: Dict[str, int], wall_s: float, argv: Sequence[str]) -> dict:
    """Everything needed to repeat a run: the resolved config plus file digests."""
    return {
        "command": command,
        "argv": list(argv),
        "config": snapshot(cfg),
        "inputs": {k: {"path": p, "sha256": _sha256(p)} for k, p in inputs.items()},
        "outputs": {k: {"path": p, "sha256": _sha256(p)} for k, p in outputs.items()},
        "seeds": seeds,
        "version": __version__,
        "wall_time_s": round(wall_s, 3),
    }


# --------------------------------------------------------------------------
# helpers


def _resolve(path: str, out_dir: str) -> str:
    return path if os.path.isabs(path) else os.path.join(out_dir, path)


def _phantom_spec(cfg: dict) -> PhantomSpec:
    p = cfg["phantom"]
    return PhantomSpec(kind=p["kind"], dims=tuple(p["dims"]), n_static=p["n_static"],
                       n_moving=p["n_moving"], speed=p["speed"], background=p["background"],
                       seed=p["seed"])


def _psf(cfg: dict) -> np.ndarray:
    p = cfg["psf"]
    return make_psf(PsfSpec(p["na"], p["wavelength_px"], p["kernel_radius"]))


def _solver_config(cfg: dict):
    s = cfg["solver"]
    name = s["name"]
    if name not in SOLVERS:
        raise ConfigError(f"unknown solver {name!r}; choose from {', '.join(SOLVERS)}")
    common = dict(rho=s["rho"], max_iters=s["max_iters"], tol_primal=s["tol_primal"],
                  tol_dual=s["tol_dual"], lb=s["lb"], ub=s["ub"], log_every=s["log_every"])
    if name == "staic":
        return SolverConfig(alpha_s=s["alpha_s"], alpha_t=s["alpha_t"], **common)
    return BaselineConfig(lam=s["lam"], kappa1=s["kappa1"], kappa2=s["kappa2"], **common)


def restore(m: Stack, h: np.ndarray, cfg: dict, logfile=None):
    name = cfg["solver"]["name"]
    scfg = _solver_config(cfg)
    fn = {"staic": restore_staic, "ictv": restore_ictv, "cst": restore_cst,
          "tv2_3d": restore_tv2_3d}[name]
    return fn(m, h, scfg, logfile)


def experiment_spec(cfg: dict) -> ExperimentSpec:
    e = cfg["experiment"]
    for s in e["solvers"]:
        if s not in SOLVERS:
            raise ConfigError(f"unknown solver {s!r}; choose from {', '.join(SOLVERS)}")
    return ExperimentSpec(
        phantoms=(_phantom_spec(cfg),), nas=tuple(e["nas"]), gammas=tuple(e["gammas"]),
        solvers=tuple(e["solvers"]), wavelength_px=cfg["psf"]["wavelength_px"],
        kernel_radius=cfg["psf"]["kernel_radius"], sigma_g_rel=cfg["noise"]["sigma_g_rel"],
        staic_grid=tuple(tuple(p) for p in e["staic_grid"]),
        lambda_grid={"ictv": tuple(e["ictv_grid"]), "cst": tuple(e["cst_grid"]),
                     "tv2_3d": tuple(e["tv2_3d_grid"])},
        kappa1=cfg["solver"]["kappa1"], kappa2=cfg["solver"]["kappa2"],
        rho=cfg["solver"]["rho"], max_iters=e["max_iters"], tol=e["tol"],
        lb=cfg["solver"]["lb"], seed=e["seed"],
        report_all=e["report_all"])


# --------------------------------------------------------------------------
# commands


def cmd_simulate(args, cfg: dict) -> int:
    t0 = time.perf_counter()
    if args.seed is not None:
        cfg["noise"]["seed"] = args.seed
    ph = make_phantom(_phantom_spec(cfg))
    h = _psf(cfg)
    n = cfg["noise"]
    peak = float(ph.image.data.max())
    sigma = n["sigma_g"] if n["sigma_g"] >= 0 else n["sigma_g_rel"] * peak
    m = corrupt(ph.image, h, NoiseSpec(n["gamma_p"], sigma, n["seed"]))
    os.makedirs(args.out_dir, exist_ok=True)
    outputs = {"measurement": _resolve(cfg["io"]["measurement"], args.out_dir)}
    write_stack(m, outputs["measurement"])
    if cfg["io"]["write_phantom"]:
        outputs["phantom"] = _resolve(cfg["io"]["phantom"], args.out_dir)
        write_stack(ph.image, outputs["phantom"])
    man = run_manifest("simulate", cfg, {}, outputs,
                       {"phantom": cfg["phantom"]["seed"], "noise": n["seed"]},
                       time.perf_counter() - t0, args.argv)
    write_json_atomic(man, os.path.join(args.out_dir, "simulate_manifest.json"))
    print(f"measurement {outputs['measurement']} snr_db={snr_db(ph.image, m):.4f}")
    return EXIT_OK


def cmd_restore(args, cfg: dict) -> int:
    t0 = time.perf_counter()
    if args.log_every is not None:
        cfg["solver"]["log_every"] = args.log_every
    _solver_config(cfg)  # validate before touching data
    src = _resolve(cfg["io"]["measurement"], args.out_dir)
    m = read_stack(src)
    h = _psf(cfg)
    os.makedirs(args.out_dir, exist_ok=True)
    log_path = os.path.join(args.out_dir, "residuals.log")
    name = cfg["solver"]["name"]
    with open(log_path, "w", encoding="utf-8") as lf:
        try:
            res = restore(m, h, cfg, lf)
        except DivergenceError as exc:
            lf.write(f"solver={name} diverged at iter={exc.iteration}\n")
            raise
    outputs = {"g": os.path.join(args.out_dir, "g.stk")}
    write_stack(res.g, outputs["g"])
    if res.v is not None:
        outputs["v"] = os.path.join(args.out_dir, "v.stk")
        write_stack(res.v, outputs["v"])
    outputs["log"] = log_path
    man = run_manifest("restore", cfg, {"measurement": src}, outputs, {},
                       time.perf_counter() - t0, args.argv)
    man["iterations"] = res.iterations
    man["converged"] = res.converged
    write_json_atomic(man, os.path.join(args.out_dir, "restore_manifest.json"))
    print(f"solver={name} iters={res.iterations} converged={res.converged} g={outputs['g']}")
    return EXIT_OK


EVAL_COLUMNS = ("truth", "estimate", "snr_db", "ssim")


def cmd_evaluate(args, cfg: dict) -> int:
    truth = read_stack(args.truth)
    est = read_stack(args.estimate)
    if truth.dims != est.dims:
        raise DataError(f"dims differ: {truth.dims} vs {est.dims}")
    row = [args.truth, args.estimate, f"{snr_db(truth, est):.6f}", f"{ssim_mean(truth, est):.8f}"]
    print(",".join(f"{c}={v}" for c, v in zip(EVAL_COLUMNS[2:], row[2:])))
    if args.csv:
        new = not os.path.exists(args.csv) or os.path.getsize(args.csv) == 0
        with open(args.csv, "a", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            if new:
                w.writerow(EVAL_COLUMNS)
            w.writerow(row)
    return EXIT_OK


def cmd_sweep(args, cfg: dict) -> int:
    from .plotting import render_figures, write_plot_data

    t0 = time.perf_counter()
    if args.seed is not None:
        cfg["experiment"]["seed"] = args.seed
    spec = experiment_spec(cfg)
    os.makedirs(args.out_dir, exist_ok=True)
    progress = (lambda s: print(s, file=sys.stderr)) if args.verbose else None
    rows = run_experiment(spec, progress=progress, threads=args.threads)
    results = os.path.join(args.out_dir, "results.csv")
    write_results_csv(rows, results, timing=args.timing)
    outputs = {"results": results}
    for p in write_plot_data(rows, args.out_dir):
        outputs[os.path.basename(p)] = p
    if cfg["experiment"]["figures"]:
        for p in render_figures(rows, args.out_dir):
            outputs[os.path.basename(p)] = p
    failed = [r for r in rows if r.get("error")]
    man = run_manifest("sweep", cfg, {}, outputs, {"master": spec.seed},
                       time.perf_counter() - t0, args.argv)
    man["threads"] = args.threads
    man["failed_cells"] = len(failed)
    write_json_atomic(man, os.path.join(args.out_dir, "sweep_manifest.json"))
    print(f"{len(rows)} rows -> {results}" + (f" ({len(failed)} failed)" if failed else ""))
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point


def _env_default(name: str, cast=str, fallback=None):
    raw = os.environ.get(ENV_PREFIX + name)
    if raw is None:
        return fallback
    try:
        return cast(raw)
    except ValueError:
        raise ConfigError(f"environment {ENV_PREFIX}{name}: bad value {raw!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file, or a run manifest to replay")
    common.add_argument("--seed", type=int, help="noise seed (simulate) or master seed (sweep)")
    common.add_argument("--out-dir", help="directory for outputs (default: current directory)")
    common.add_argument("--threads", type=int, help="worker threads for sweep cells")
    common.add_argument("--log-every", type=int, help="residual log period in iterations")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="staic", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="make a phantom and a noisy measurement")
    sub.add_parser("restore", parents=[common], help="restore a measurement")
    ev = sub.add_parser("evaluate", parents=[common], help="score an estimate against truth")
    ev.add_argument("truth")
    ev.add_argument("estimate")
    ev.add_argument("--csv", help="append the metrics row to this CSV file")
    sw = sub.add_parser("sweep", parents=[common], help="run the solver comparison grid")
    sw.add_argument("--timing", action="store_true",
                    help="fill wall_ms in results.csv (makes the file run-dependent)")
    return p


COMMANDS = {"simulate": cmd_simulate, "restore": cmd_restore, "evaluate": cmd_evaluate,
            "sweep": cmd_sweep}


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.config is None:
            args.config = _env_default("CONFIG")
        if args.seed is None:
            args.seed = _env_default("SEED", int)
        if args.out_dir is None:
            args.out_dir = _env_default("OUT_DIR", fallback=".")
        if args.threads is None:
            args.threads = _env_default("THREADS", int, 1)
        if args.log_every is None:
            args.log_every = _env_default("LOG_EVERY", int)
        if args.threads < 1:
            raise ConfigError("--threads must be at least 1")
        cfg = apply_env(load_config(args.config))
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"staic: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"staic: diverged at iteration {exc.iteration}", file=sys.stderr)
        return EXIT_DIVERGED
    except (StaicError, OSError) as exc:
        print(f"staic: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
