"""Command line entry point: ``vortexlab <command> [options]``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure
(CFL / contraction / density), 4 I/O error.
"""

import argparse
import csv
import json
import os
import platform
import sys
import time

import numpy as np

from . import __version__, chaos, checkpoint, plotting, sde, tns
from .config import COMMANDS, ConfigError, ExperimentConfig, parse_config, serialize
from .kernel import KernelError, build_kernel_model, selftest_table
from .ns2d import (InitialConditionError, NumericalError, SpectralField2D, evaluate_at,
                   extremum_trace, field_from_spec, grid, h1_seminorm, picard_mild_solve,
                   solve_ns2d)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4

ENV_OUTPUT_DIR = "VORTEXLAB_OUTPUT_DIR"
ENV_WORKERS = "VORTEXLAB_WORKERS"


# -- small helpers -----------------------------------------------------------

def _num(x):
    return repr(float(x))


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_num(v) if isinstance(v, (float, np.floating)) else v for v in row])
    return path


class Context:
    """Resolved run settings shared by the command implementations."""

    def __init__(self, cfg, out_dir, workers, out_path=None, init_field=None):
        self.cfg = cfg
        self.out_dir = out_dir
        self.workers = workers
        self.out_path = out_path
        self.init_field = init_field
        self.outputs = []

    @property
    def p(self):
        return self.cfg.params

    def path(self, name):
        full = os.path.join(self.out_dir, name)
        self.outputs.append(name)
        return full

    def omega0(self, m):
        if self.init_field is not None:
            return self.init_field
        return field_from_spec(self.p["initial"], m)


# -- commands ----------------------------------------------------------------

def cmd_kernel_selftest(ctx):
    p = ctx.p
    rows = selftest_table(p["resolutions"], p["spectral_cutoff"], p["probe"], p["lattice_radius"])
    keys = list(rows[0])
    write_csv(ctx.path("selftest.csv"), keys, [[r[k] for k in keys] for r in rows])
    res = max(p["resolutions"])
    build_kernel_model(min(p["spectral_cutoff"], res // 2), res).save(ctx.path("kernel.vxkt"))
    plotting.kernel_selftest(rows, ctx.path("selftest.png"))


def cmd_ns2d(ctx):
    p = ctx.p
    w0 = ctx.omega0(p["resolution"])
    snaps = solve_ns2d(w0, p["nu"], p["t_final"], p["dt"], p["snapshot_every"])
    rows = [(s.t, float(s.omega.values.min()), float(s.omega.values.max()), s.omega.mean(),
             h1_seminorm(s.omega)) for s in snaps]
    write_csv(ctx.path("trace.csv"), ["t", "min", "max", "mean", "h1"], rows)
    if ctx.out_path:
        ctx.outputs.append(os.path.basename(ctx.out_path))
    snaps[-1].omega.save(ctx.out_path or ctx.path("omega_final.vxf2"))
    if p["picard_horizon"] > 0:
        H = p["picard_horizon"]
        mild, rep = picard_mild_solve(w0, p["nu"], H)
        ref = solve_ns2d(w0, p["nu"], H, min(p["dt"], H / 8))[-1].omega
        write_csv(ctx.path("picard.csv"),
                  ["horizon", "iterations", "contraction_estimate", "sup_diff_vs_solver"],
                  [(H, rep.iterations, rep.contraction_estimate, (mild - ref).sup())])
    plotting.field2d(snaps[-1].omega.values, ctx.path("omega_final.png"), f"t = {snaps[-1].t:g}")
    trace = extremum_trace(snaps)
    plotting.extrema([r[0] for r in trace], [r[1] for r in trace], [r[2] for r in trace],
                     ctx.path("extrema.png"))


def _kernel(p):
    return build_kernel_model(p["spectral_cutoff"], p["table_resolution"])


def cmd_simulate(ctx):
    p = ctx.p
    cfg = ctx.cfg
    w0 = ctx.omega0(p["marginal_resolution"])
    rho_p, rho_m = chaos._marginals(w0, p["pad"])
    ap, am = chaos._alphas(w0, p["pad"])
    ens = sde.sample_initial(rho_p, rho_m, p["n"], cfg.seed, ap, am)
    scfg = sde.SimConfig(p["nu"], p["dt"], p["t_final"], p["snapshot_stride"], cfg.seed)
    snaps = sde.simulate(ens, scfg, _kernel(p))
    out = ctx.out_path or ctx.path("trajectory.vxtr")
    if ctx.out_path:
        ctx.outputs.append(os.path.basename(out))
    sde.save_trajectory(out, snaps, scfg)
    rows = [(s.time, lab, sde.empirical_pairing(s, phi))
            for s in snaps for lab, phi in chaos.TEST_FUNCTIONS.items()]
    write_csv(ctx.path("pairings.csv"), ["t", "phi_label", "value"], rows)
    plotting.particles(snaps[-1].x_plus, snaps[-1].x_minus, ctx.path("particles.png"))


def cmd_tns(ctx):
    p = ctx.p
    w0 = ctx.omega0(p["resolution"])
    f0, ap, am = tns.tensorize_initial(w0, p["pad"])
    run = tns.solve_tns(f0, ap, am, p["nu"], p["dt"], p["t_final"], p["snapshot_every"])
    ref = {round(s.t, 12): s.omega
           for s in solve_ns2d(w0, p["nu"], p["t_final"], p["dt"], p["snapshot_every"])}
    rows = []
    for t, f in run.snapshots:
        P = tns.apply_P(f, ap, am)
        w = ref.get(round(t, 12))
        rows.append((t, f.integral(), float(f.values.min()), float(f.values.max()),
                     (P - w).sup() if w is not None else float("nan")))
    write_csv(ctx.path("tns.csv"), ["t", "mass", "min", "max", "sup_projection_error"], rows)
    write_csv(ctx.path("mass_drift.csv"), ["step", "drift"],
              [(i + 1, d) for i, d in enumerate(run.mass_drift)])
    out = ctx.out_path or ctx.path("omegabar_final.vxf4")
    if ctx.out_path:
        ctx.outputs.append(os.path.basename(out))
    run.snapshots[-1][1].save(out)
    plotting.field2d(tns.apply_P(run.snapshots[-1][1], ap, am).values,
                     ctx.path("projection_final.png"), "P(omegabar)")


def cmd_pairliouville(ctx):
    p = ctx.p
    w0 = ctx.omega0(p["resolution"])
    f0, ap0, am0 = tns.tensorize_initial(w0, p["pad"])
    ap = p["alpha_plus"] if p["alpha_plus"] >= 0 else ap0
    am = p["alpha_minus"] if p["alpha_minus"] >= 0 else am0
    run = tns.pair_liouville_solve(f0, ap, am, p["nu"], p["dt"], p["t_final"],
                                   snapshot_every=p["snapshot_every"])
    bal = tns.entropy_balance(run, p["nu"])
    rows = [(t, h, fi, b, lo, hi) for t, h, fi, b, lo, hi in
            zip(run.times, run.entropy, run.fisher, bal, run.minimum, run.maximum)]
    write_csv(ctx.path("entropy.csv"), ["t", "entropy", "fisher", "balance", "min", "max"], rows)
    write_csv(ctx.path("mass_drift.csv"), ["step", "drift"],
              [(i + 1, d) for i, d in enumerate(run.mass_drift)])
    ref = tns.solve_tns(f0, ap0, am0, p["nu"], p["dt"], p["t_final"], p["snapshot_every"])
    rel = [(t, tns.relative_entropy_1(f, g)) for (t, f), (_, g) in zip(run.snapshots, ref.snapshots)]
    write_csv(ctx.path("relative_entropy.csv"), ["t", "relative_entropy_1"], rel)
    out = ctx.out_path or ctx.path("rho_final.vxf4")
    if ctx.out_path:
        ctx.outputs.append(os.path.basename(out))
    run.snapshots[-1][1].save(out)
    plotting.entropy_balance(run.times, run.entropy, bal, ctx.path("entropy.png"))


def cmd_chaos_rate(ctx):
    p = ctx.p
    cfg = ctx.cfg
    w0 = ctx.omega0(p["reference_resolution"])
    ccfg = chaos.ChaosConfig(w0, nu=p["nu"], t_final=p["t_final"], dt=p["dt"],
                             epsilon_pad=p["pad"], seed=cfg.seed,
                             snapshot_times=tuple(p["snapshot_times"]),
                             kde_resolution=p["kde_resolution"],
                             bandwidth=p["bandwidth"] or None, reference_dt=p["reference_dt"])
    times = tuple(sorted(set(ccfg.snapshot_times) | {0.0, ccfg.t_final}))
    tref = None
    if p["kde"]:
        tref = chaos.tns_reference(_resample(w0, p["kde_resolution"]), p["pad"], p["nu"], times,
                                   p["tns_dt"])
    stats = chaos.run_ensemble(ccfg, list(p["n_values"]), p["replicas"], _kernel(p),
                               workers=ctx.workers, tns_reference=tref)
    chaos.write_rate_csv(ctx.path("rate.csv"), stats)
    chaos.write_marginal_csv(ctx.path("marginal.csv"), stats)
    fit = chaos.fit_rate(stats, "weak", seed=cfg.seed)
    chaos.write_fit_csv(ctx.path("fit.csv"), fit)
    plotting.rate(stats, fit, ctx.path("rate.png"))


def _resample(omega, m):
    x1, x2 = grid(m)
    return SpectralField2D(evaluate_at(omega, np.stack([x1, x2], axis=-1)))


def project_check(initial, pad, nu, t_final, resolutions, dt_coefficient, reference_resolution,
                  reference_dt, init_field=None):
    """Projection consistency table: rows ``(m, dt, sup error, ratio, max |mass drift|)``."""
    w_ref0 = init_field if init_field is not None else field_from_spec(initial, reference_resolution)
    ref = solve_ns2d(w_ref0, nu, t_final, reference_dt)[-1].omega
    rows = []
    prev = None
    for m in resolutions:
        w0 = _resample(w_ref0, m)
        f0, ap, am = tns.tensorize_initial(w0, pad)
        dt = t_final / max(1, round(t_final / (dt_coefficient / m ** 2)))
        run = tns.solve_tns(f0, ap, am, nu, dt, t_final)
        x1, x2 = grid(m)
        err = float(np.max(np.abs(tns.apply_P(run.snapshots[-1][1], ap, am).values
                                  - evaluate_at(ref, np.stack([x1, x2], axis=-1)))))
        rows.append((m, dt, err, prev / err if prev else float("nan"),
                     max(abs(d) for d in run.mass_drift)))
        prev = err
    return rows


def cmd_project_check(ctx):
    p = ctx.p
    rows = project_check(p["initial"], p["pad"], p["nu"], p["t_final"], p["resolutions"],
                         p["dt_coefficient"], p["reference_resolution"], p["reference_dt"],
                         ctx.init_field)
    write_csv(ctx.path("projection.csv"), ["m", "dt", "sup_error", "ratio", "max_mass_drift"], rows)
    plotting.convergence([r[0] for r in rows], [r[2] for r in rows], ctx.path("projection.png"))


DISPATCH = {
    "kernel-selftest": cmd_kernel_selftest,
    "simulate": cmd_simulate,
    "ns2d": cmd_ns2d,
    "tns": cmd_tns,
    "pairliouville": cmd_pairliouville,
    "chaos-rate": cmd_chaos_rate,
    "project-check": cmd_project_check,
}


# -- orchestration -----------------------------------------------------------

def _versions():
    import numba
    import scipy

    return {"vortexlab": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__, "numba": numba.__version__}


def run(cfg, out_dir=None, workers=1, out_path=None, init_field=None, argv=None):
    """Execute a parsed config; returns the list of artifact names written."""
    out_dir = out_dir or cfg.output_dir
    os.makedirs(out_dir, exist_ok=True)
    if not os.access(out_dir, os.W_OK):
        raise PermissionError(f"output directory {out_dir!r} is not writable")
    ctx = Context(cfg, out_dir, workers, out_path, init_field)
    start = time.perf_counter()
    DISPATCH[cfg.command](ctx)
    manifest = {
        "command": cfg.command,
        "argv": list(argv) if argv is not None else None,
        "config": serialize(cfg),
        "config_sha256": cfg.sha256(),
        "seed": cfg.seed,
        "workers": workers,
        "versions": _versions(),
        "wall_time_s": time.perf_counter() - start,
        "outputs": ctx.outputs,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    return ctx.outputs


# -- argument handling -------------------------------------------------------

_FLAG_KEYS = {"init": "initial", "nu": "nu", "dt": "dt", "T": "t_final", "pad": "pad",
              "alpha_plus": "alpha_plus", "alpha_minus": "alpha_minus"}


def build_parser():
    ap = argparse.ArgumentParser(prog="vortexlab", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"vortexlab {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="experiment config file")
        sp.add_argument("--out-dir", help="artifact directory (overrides config and env)")
        sp.add_argument("--workers", type=int, help="worker processes (default: logical CPUs)")
        sp.add_argument("--seed", type=int, help="override the config seed")
        if name in ("simulate", "ns2d", "tns", "pairliouville"):
            sp.add_argument("--out", help="path of the main binary output")
        if name in ("ns2d", "tns", "pairliouville"):
            sp.add_argument("--nu", type=float)
            sp.add_argument("--dt", type=float)
            sp.add_argument("--T", type=float)
        if name == "ns2d":
            sp.add_argument("--init", help="initial-condition expression")
        if name in ("tns", "pairliouville"):
            sp.add_argument("--init-from-omega", help="VXF2 file with the 2D vorticity")
            sp.add_argument("--pad", type=float)
        if name == "pairliouville":
            sp.add_argument("--alpha-plus", dest="alpha_plus", type=float)
            sp.add_argument("--alpha-minus", dest="alpha_minus", type=float)
    return ap


def _load_config(args):
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            text = fh.read()
    else:
        text = f"[run]\ncommand = {args.command}\n"
    cfg = parse_config(text)
    if cfg.command != args.command:
        raise ConfigError([(0, f"config is for {cfg.command!r}, not {args.command!r}")])
    overrides = {key: getattr(args, flag) for flag, key in _FLAG_KEYS.items()
                 if getattr(args, flag, None) is not None}
    if args.seed is not None:
        cfg.seed = args.seed
    if overrides:
        # re-validate through the text form so flag values obey the same ranges
        params = dict(cfg.params, **overrides)
        cfg = parse_config(serialize(ExperimentConfig(cfg.command, cfg.seed, cfg.output_dir, params)))
    return cfg


def _workers(args):
    if args.workers is not None:
        n = args.workers
    elif os.environ.get(ENV_WORKERS):
        try:
            n = int(os.environ[ENV_WORKERS])
        except ValueError:
            raise ConfigError([(0, f"{ENV_WORKERS} must be an integer")]) from None
    else:
        n = os.cpu_count() or 1
    if n < 1:
        raise ConfigError([(0, "workers must be >= 1")])
    return n


def _fail(kind, exc, code):
    msg = " ".join(str(exc).split())
    print(f"vortexlab: error={kind} exit={code} detail={json.dumps(msg)}", file=sys.stderr)
    return code


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = _load_config(args)
        workers = _workers(args)
        out_dir = args.out_dir or os.environ.get(ENV_OUTPUT_DIR) or cfg.output_dir
        out_path = getattr(args, "out", None)
        if out_path and not args.out_dir:
            out_dir = os.path.dirname(os.path.abspath(out_path))
        init_field = None
        if getattr(args, "init_from_omega", None):
            init_field = SpectralField2D(checkpoint.read_field2d(args.init_from_omega))
            cfg.params["resolution"] = init_field.resolution
        run(cfg, out_dir, workers, out_path, init_field, argv=sys.argv if argv is None else argv)
    except ConfigError as exc:
        return _fail("ConfigError", exc, EXIT_CONFIG)
    except (InitialConditionError, KernelError, sde.EnsembleError, chaos.ChaosError) as exc:
        return _fail(type(exc).__name__, exc, EXIT_CONFIG)
    except (NumericalError, tns.DensityError) as exc:
        return _fail(type(exc).__name__, exc, EXIT_NUMERICAL)
    except (OSError, checkpoint.CheckpointError) as exc:
        return _fail(type(exc).__name__, exc, EXIT_IO)
    except ValueError as exc:
        return _fail("ValueError", exc, EXIT_CONFIG)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
