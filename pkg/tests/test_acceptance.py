"""Exit criteria. Each test records one PASS/FAIL line, repeated in the
terminal summary under "acceptance criteria".

Run alone with ``pytest -m acceptance -s``.
"""

import os
import time

import numpy as np
import pytest

from vortexlab import chaos, cli, kernel as kn, ns2d, sde, tns
from vortexlab.config import DEFAULT_IC
from vortexlab.ns2d import NonContractionError, SpectralField2D
from vortexlab.tns import Field4D

pytestmark = pytest.mark.acceptance


def probe_points(m=64):
    g = (np.arange(m) + 0.5) / m - 0.5
    return np.stack(np.meshgrid(g, g, indexing="ij"), -1).reshape(-1, 2)


# -- 1. kernel fidelity ---------------------------------------------------------

def test_c1_kernel_fidelity(report):
    t0 = time.perf_counter()
    model = kn.build_kernel_model(32, 256)
    X = probe_points()
    X = X[np.hypot(*X.T) >= 0.05]
    err = float(np.max(np.abs(kn.eval_K(model, X) - kn.lattice_sum_K(X, 30))))
    zeros = (np.all(kn.eval_K(model, np.zeros(2)) == 0.0)
             and np.all(kn.eval_K(model, np.array([0.5, 0.0])) == 0.0))
    wall = time.perf_counter() - t0
    ok = err <= 1e-6 and zeros and wall < 60
    report("C1 kernel fidelity", ok,
           f"max|K - lattice| = {err:.3e} (<= 1e-6) on {len(X)} probes, exact zeros = {zeros}, "
           f"{wall:.1f} s")
    assert ok


# -- 2. V0 representation ---------------------------------------------------

def test_c2_v0_divergence(report):
    t0 = time.perf_counter()
    model = kn.build_kernel_model(32, 256)
    v0 = kn.build_v0_field(32, 256)
    hs = (0.01, 0.005, 0.0025)
    X = probe_points()
    # keep every stencil point outside the excluded disc
    X = X[np.hypot(*X.T) >= 0.05 + hs[0]]
    K = kn.eval_K(model, X)
    errs = [float(np.max(np.abs(kn.fd_divergence(lambda p: kn.eval_V0(v0, p), X, h) - K)))
            for h in hs]
    ratios = [errs[i] / errs[i + 1] for i in range(len(hs) - 1)]
    wall = time.perf_counter() - t0
    ok = all(3.5 <= r <= 4.5 for r in ratios) and wall < 60
    report("C2 V0 representation", ok,
           f"FD errors {', '.join(f'{e:.2e}' for e in errs)} at h = {hs}; "
           f"ratios {', '.join(f'{r:.3f}' for r in ratios)} (in [3.5, 4.5]), {wall:.1f} s")
    assert ok


# -- 3. 2D solver exactness and maximum principle ------------------------------

def random_smooth(gen, m, kmax=4):
    x1, x2 = ns2d.grid(m)
    vals = np.zeros((m, m))
    for a in range(-kmax, kmax + 1):
        for b in range(-kmax, kmax + 1):
            if (a, b) != (0, 0) and a * a + b * b <= kmax * kmax:
                c, s = gen.normal(size=2) / (a * a + b * b)
                ph = 2 * np.pi * (a * x1 + b * x2)
                vals += c * np.cos(ph) + s * np.sin(ph)
    return SpectralField2D(vals / np.abs(vals).max())


def test_c3_ns2d_exactness(report):
    t0 = time.perf_counter()
    nu, T = 0.01, 0.1
    w0 = SpectralField2D.from_function(
        lambda x, y: np.sin(2 * np.pi * x) * np.sin(2 * np.pi * y), 128)
    w = ns2d.solve_ns2d(w0, nu, T, 1e-3)[-1].omega
    eig_err = float(np.max(np.abs(w.values - np.exp(-8 * np.pi ** 2 * nu * T) * w0.values)))

    gen = np.random.default_rng(2026)
    worst = -np.inf
    for _ in range(20):
        f0 = random_smooth(gen, 256)
        dt = 0.5 * ns2d.cfl_bound(f0)
        trace = ns2d.extremum_trace(ns2d.solve_ns2d(f0, nu, 50 * dt, dt, snapshot_every=1))
        # monotone between successive snapshots
        worst = max(worst, max(max(b[2] - a[2], a[1] - b[1]) for a, b in zip(trace, trace[1:])))
    wall = time.perf_counter() - t0
    ok = eig_err <= 1e-8 and worst <= 1e-6 and wall < 300
    report("C3 2D solver exactness", ok,
           f"eigenmode sup error {eig_err:.3e} (<= 1e-8); worst extremum increase over 20 "
           f"random 256^2 fields {max(worst, 0.0):.3e} (<= 1e-6), {wall:.1f} s")
    assert ok


# -- 4. mild-solution equivalence ---------------------------------------------

def strong_field(m=64):
    x1, x2 = ns2d.grid(m)
    return SpectralField2D(5 * np.sin(2 * np.pi * x1) + 2.5 * np.cos(4 * np.pi * x2)
                           + 1.5 * np.sin(2 * np.pi * (x1 + x2)))


def test_c4_mild_solution(report):
    t0 = time.perf_counter()
    nu, H = 0.01, 0.02
    w0 = strong_field()
    coarse, rep = ns2d.picard_mild_solve(w0, nu, H, inner_steps=64)
    fine, rep_fine = ns2d.picard_mild_solve(w0, nu, H, inner_steps=128)
    ref = ns2d.solve_ns2d(w0, nu, H, 1e-4)[-1].omega
    self_conv = float(np.max(np.abs(coarse.values - fine.values)))
    diff = float(np.max(np.abs(fine.values - ref.values)))
    tol = max(1e-6, self_conv)

    horizon, failure, log = H, None, []
    while failure is None and horizon < 10.0:
        horizon *= 2
        try:
            _, r = ns2d.picard_mild_solve(w0, nu, horizon, inner_steps=64)
            log.append(f"{horizon:g}:{r.contraction_estimate:.3f}")
        except NonContractionError as exc:
            failure = exc
    wall = time.perf_counter() - t0
    ok = diff <= tol and rep_fine.contraction_estimate < 1 and failure is not None and wall < 300
    report("C4 mild-solution equivalence", ok,
           f"|picard - solver| = {diff:.3e} <= max(1e-6, self-conv {self_conv:.3e}); "
           f"contraction {rep_fine.contraction_estimate:.3f} (< 1); doubling {' '.join(log)} -> "
           f"{type(failure).__name__ if failure else 'no failure'} at H = {horizon:g}, {wall:.1f} s")
    assert ok


# -- 5. projection theorem --------------------------------------------------

def test_c5_projection(report):
    t0 = time.perf_counter()
    rows = cli.project_check(DEFAULT_IC, pad=0.05, nu=0.05, t_final=0.25,
                             resolutions=(24, 32, 48), dt_coefficient=2.3,
                             reference_resolution=96, reference_dt=5e-4)
    errs = [r[2] for r in rows]
    ratios = [errs[i] / errs[i + 1] for i in range(len(errs) - 1)]
    wall = time.perf_counter() - t0
    ok = all(r >= 2 for r in ratios) and errs[-1] <= 1e-2 and wall < 1800
    report("C5 projection theorem", ok,
           "sup|P(omegabar) - omega| at m = 24, 32, 48: "
           f"{', '.join(f'{e:.3e}' for e in errs)}; ratios {', '.join(f'{r:.2f}' for r in ratios)}"
           f" (>= 2); final <= 1e-2; {wall:.1f} s")
    assert ok


# -- 6 and 7. pair Liouville ------------------------------------------------

NU6, M6, DT6, T6 = 0.05, 32, 1e-3, 0.1


def rho0_functions():
    fp = lambda x, y: 1 + 0.8 * np.sin(2 * np.pi * x)  # noqa: E731
    fm = lambda x, y: 1 + 0.8 * np.cos(2 * np.pi * y)  # noqa: E731
    return fp, fm


@pytest.fixture(scope="module")
def liouville_run():
    fp, fm = rho0_functions()
    rho0 = Field4D.product(SpectralField2D.from_function(fp, M6),
                           SpectralField2D.from_function(fm, M6))
    t0 = time.perf_counter()
    run = tns.pair_liouville_solve(rho0, 1.0, 1.0, NU6, DT6, T6, kernel=kn.build_kernel_model(),
                                   snapshot_every=10)
    return run, time.perf_counter() - t0


def bin_masses(rho, m, bins):
    # bins of (m/bins)^4 nodes; node-sum quadrature of each bin
    g = m // bins
    return rho.reshape(bins, g, bins, g, bins, g, bins, g).sum(axis=(1, 3, 5, 7)) / m ** 4


def test_c6_liouville_vs_particles(report, liouville_run):
    run, pde_wall = liouville_run
    t0 = time.perf_counter()
    n_rep, bins = 100_000, 8
    fp, fm = rho0_functions()
    fine = 512
    mp = SpectralField2D.from_function(fp, fine)
    mm = SpectralField2D.from_function(fm, fine)
    seed = 20261016
    X0 = np.empty((n_rep, 2, 2))
    # one particle per species per replica; slots are replicas here
    X0[:, 0] = sde._sample_grid(mp.values, n_rep, seed, 0, 1)
    X0[:, 1] = sde._sample_grid(mm.values, n_rep, seed, 0, 2)
    cfg = sde.SimConfig(NU6, DT6, T6, seed=seed)
    _, states = sde.simulate_batch(X0, 1, 1.0, 1.0, cfg, kn.build_kernel_model(),
                                   np.arange(n_rep))
    pts = states[-1].reshape(n_rep, 4)
    # bin b covers nodes 4b..4b+3, i.e. edges half a cell below node 4b
    h = 1.0 / M6
    idx = np.floor((kn.wrap(pts + 0.5 * h) + 0.5) * bins).astype(int) % bins
    flat = np.ravel_multi_index(idx.T, (bins,) * 4)
    counts = np.bincount(flat, minlength=bins ** 4).astype(float)
    p_hat = counts / n_rep
    p_pde = bin_masses(run.snapshots[-1][1].values, M6, bins).ravel()
    p_pde = p_pde / p_pde.sum()
    l1 = float(np.abs(p_hat - p_pde).sum())
    gen = np.random.default_rng(seed)
    boot = gen.multinomial(n_rep, p_hat, size=200) / n_rep
    stat = float(np.mean(np.abs(boot - p_hat).sum(axis=1)))
    wall = pde_wall + time.perf_counter() - t0
    ok = l1 <= 3 * stat and wall < 1200
    report("C6 pair-Liouville vs particles", ok,
           f"L1(PDE, histogram) = {l1:.4f} <= 3 x {stat:.4f} = {3 * stat:.4f} (bootstrap stat error) "
           f"({bins}^4 bins, {n_rep} runs); {wall:.1f} s")
    assert ok


def test_c7_entropy_inequality(report, liouville_run):
    run, _ = liouville_run
    bal = tns.entropy_balance(run, NU6)
    rho0 = run.snapshots[0][1]
    ref = tns.solve_tns(rho0, 1.0, 1.0, NU6, DT6, T6, snapshot_every=10)
    rel = [tns.relative_entropy_1(f, g) for (_, f), (_, g) in zip(run.snapshots, ref.snapshots)]
    ok = float(np.max(bal)) <= 1e-3 and min(rel) >= -1e-8
    report("C7 entropy inequality", ok,
           f"max_t [H(t) + nu int Fisher - H(0)] = {np.max(bal):.3e} (<= 1e-3) over "
           f"{len(bal)} steps; min relative entropy {min(rel):.3e} (>= -1e-8), "
           f"max {max(rel):.3e}")
    assert ok


# -- 8. chaos rate ------------------------------------------------------------

N8 = (64, 128, 256, 512, 1024, 2048, 4096)
M8, T8, DT8, NU8 = 200, 0.5, 1e-3, 0.05


def measure_pair_rate(kernel, n=512, repeats=3):
    gen = np.random.default_rng(0)
    X = gen.uniform(-0.5, 0.5, (1, 2 * n, 2))
    sde.em_update(X, n, 1.0, 1.0, NU8, DT8, kernel, 0, [0], 0)  # warm up
    t0 = time.perf_counter()
    for k in range(repeats):
        X = sde.em_update(X, n, 1.0, 1.0, NU8, DT8, kernel, 0, [0], k)
    return repeats * 4 * n * n / (time.perf_counter() - t0)


def test_c8_chaos_rate_full_scale(report):
    kernel = kn.build_kernel_model()
    rate = measure_pair_rate(kernel)
    steps = int(round(T8 / DT8))
    pairs = sum(4 * n * n for n in N8) * steps * M8
    cores = min(8, os.cpu_count() or 1)
    projected = pairs / (rate * cores)
    budget = 3600.0
    feasible = projected < budget
    detail = (f"needs {pairs:.3e} pair evaluations; measured {rate:.3e} pairs/s per core; "
              f"projected {projected / 3600:.1f} h on {cores} core(s) vs 1 h budget")
    if not feasible:
        report("C8 chaos rate (full scale)", False, detail + "; not run")
        pytest.fail("full-scale chaos-rate run is infeasible here: " + detail)
    # reachable only on hardware that can meet the budget
    cfg = chaos.ChaosConfig(ns2d.field_from_spec(DEFAULT_IC, 256), nu=NU8, t_final=T8, dt=DT8)
    stats = chaos.run_ensemble(cfg, list(N8), M8, kernel, workers=cores)
    fit = chaos.fit_rate(stats)
    ok = -0.65 <= fit.slope <= -0.35 and fit.confidence_halfwidth <= 0.1
    report("C8 chaos rate (full scale)", ok,
           f"slope {fit.slope:.3f} +- {fit.confidence_halfwidth:.3f}; " + detail)
    assert ok


def test_c8_chaos_rate_reduced_scale(report):
    t0 = time.perf_counter()
    cfg = chaos.ChaosConfig(ns2d.field_from_spec(DEFAULT_IC, 256), nu=NU8, t_final=0.2,
                            dt=2e-3, seed=0)
    ns = [8, 16, 32, 64, 128]
    stats = chaos.run_ensemble(cfg, ns, 64, kn.build_kernel_model(),
                               workers=min(8, os.cpu_count() or 1))
    fit = chaos.fit_rate(stats)
    wall = time.perf_counter() - t0
    ok = -0.65 <= fit.slope <= -0.35 and fit.confidence_halfwidth <= 0.1
    report("C8 chaos rate (reduced scale, supplementary)", ok,
           f"N = {ns}, M = 64, T = 0.2, dt = 2e-3: slope {fit.slope:.3f} +- "
           f"{fit.confidence_halfwidth:.3f} (band [-0.65, -0.35], halfwidth <= 0.1); {wall:.1f} s")
    assert ok


# -- 9. determinism ---------------------------------------------------------

DET = {
    "kernel-selftest": "resolutions = 64, 128\nprobe = 16\nlattice_radius = 10\n",
    "simulate": "n = 32\ndt = 0.005\nt_final = 0.05\nsnapshot_stride = 5\n",
    "ns2d": "resolution = 32\ndt = 0.002\nt_final = 0.02\nsnapshot_every = 5\n"
            "picard_horizon = 0.01\n",
    "tns": "resolution = 12\ndt = 0.005\nt_final = 0.02\nsnapshot_every = 2\n",
    "pairliouville": "resolution = 12\ndt = 0.005\nt_final = 0.02\nsnapshot_every = 2\n",
    "chaos-rate": "n_values = 4, 8, 16, 64\nreplicas = 640\ndt = 0.01\nt_final = 0.02\n"
                  "reference_resolution = 32\nreference_dt = 0.005\nkde = true\n"
                  "kde_resolution = 4\ntns_dt = 0.01\nbandwidth = 0.25\n",
    "project-check": "resolutions = 8, 12\nt_final = 0.02\nreference_resolution = 32\n"
                     "reference_dt = 0.002\n",
}


def test_c9_determinism(report, tmp_path, monkeypatch):
    monkeypatch.delenv(cli.ENV_OUTPUT_DIR, raising=False)
    monkeypatch.delenv(cli.ENV_WORKERS, raising=False)
    t0 = time.perf_counter()
    mismatches, checked = [], 0
    for command, body in DET.items():
        cfg = tmp_path / f"{command}.ini"
        cfg.write_text(f"[run]\ncommand = {command}\nseed = 11\n[{command}]\n{body}")
        dirs = []
        for k, workers in enumerate((1, 1, 2)):
            d = tmp_path / f"{command}-{k}"
            code = cli.main([command, "--config", str(cfg), "--out-dir", str(d),
                             "--workers", str(workers)])
            assert code == 0, command
            dirs.append(d)
        for name in sorted(p.name for p in dirs[0].glob("*.csv")):
            data = [(d / name).read_bytes() for d in dirs]
            checked += 1
            if not data[0] == data[1] == data[2]:
                mismatches.append(f"{command}/{name}")
    wall = time.perf_counter() - t0
    ok = not mismatches and checked >= len(DET) and wall < 300
    report("C9 determinism", ok,
           f"{checked} CSVs from {len(DET)} commands byte-identical across reruns and "
           f"--workers 1/2; mismatches: {mismatches or 'none'}; {wall:.1f} s")
    assert ok
