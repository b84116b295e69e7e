"""Propagation-of-chaos measurements: weak errors of empirical pairings
against the 2D reference, KDE pair marginals against the tensorized
density, and log-log rate fits in the particle number.
"""

import csv
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import rng, sde
from .ns2d import SpectralField2D, grid, solve_ns2d
from .tns import Field4D, tensorize_initial

MIN_REPLICAS = 30
MIN_KDE_SAMPLES = 10_000


class ChaosError(ValueError):
    pass


# -- test functions ----------------------------------------------------------

def _trig(kind, a, b):
    f = np.sin if kind == "sin" else np.cos

    def phi(x):
        x = np.asarray(x)
        return f(2.0 * np.pi * (a * x[..., 0] + b * x[..., 1]))
    return phi


TEST_FUNCTIONS = {
    "sin_x1": _trig("sin", 1, 0),
    "cos_x1": _trig("cos", 1, 0),
    "sin_x2": _trig("sin", 0, 1),
    "cos_x2": _trig("cos", 0, 1),
    "sin_x1+x2": _trig("sin", 1, 1),
    "cos_x1-x2": _trig("cos", 1, -1),
}


def pairing_reference(omega, phi):
    """``int phi omega`` by grid quadrature."""
    x1, x2 = grid(omega.resolution)
    return float(np.mean(phi(np.stack([x1, x2], axis=-1)) * omega.values))


# -- data types --------------------------------------------------------------

@dataclass
class EnsembleStats:
    n_values: list
    replicas: int
    test_functions: list
    times: list
    weak_errors: dict            # (N, label, t) -> RMS over replicas
    marginal_l1: dict = field(default_factory=dict)   # (N, t) -> L1(KDE, reference)
    weak_ci: dict = field(default_factory=dict)       # (N, label, t) -> bootstrap halfwidth

    def __post_init__(self):
        if self.replicas < MIN_REPLICAS:
            raise ChaosError(f"at least {MIN_REPLICAS} replicas are required, got {self.replicas}")
        if any(v < 0 for v in self.weak_errors.values()):
            raise ChaosError("weak errors must be nonnegative")


@dataclass
class RateFit:
    slope: float
    intercept: float
    confidence_halfwidth: float
    n_range: tuple


@dataclass
class ChaosConfig:
    omega0: SpectralField2D           # target vorticity on the reference grid
    nu: float = 0.05
    t_final: float = 0.5
    dt: float = 1e-3
    epsilon_pad: float = 0.05
    seed: int = 0
    snapshot_times: tuple = ()
    kde_resolution: int = 16
    bandwidth: float = None
    reference_dt: float = 1e-3


# -- ensemble runs -----------------------------------------------------------

_WORKER_KERNEL = None


def _init_worker(kernel):
    global _WORKER_KERNEL
    _WORKER_KERNEL = kernel


def _run_chunk(task):
    (n, reps, seed, rho_plus, rho_minus, ap, am, nu, dt, t_final, times) = task
    kernel = _WORKER_KERNEL
    X0 = np.empty((len(reps), 2 * n, 2))
    for b, r in enumerate(reps):
        ens = sde.sample_initial(rho_plus, rho_minus, n, seed, ap, am, replica=r)
        X0[b] = ens.positions
    cfg = sde.SimConfig(nu=nu, dt=dt, t_final=t_final, seed=seed)
    got_times, states = sde.simulate_batch(X0, n, ap, am, cfg, kernel, reps, snapshot_times=times)
    pair = np.stack([[sde.pairing_batch(X, n, ap, am, phi) for phi in TEST_FUNCTIONS.values()]
                     for X in states], axis=0)           # (t, phi, replica)
    pools = [np.concatenate([X[:, :n], X[:, n:]], axis=-1).reshape(-1, 4) for X in states]
    return got_times, pair, pools


def _chunks(replicas, size):
    return [list(range(i, min(i + size, replicas))) for i in range(0, replicas, size)]


def run_ensemble(cfg, n_values, replicas, kernel, workers=1, omega_ref_snapshots=None,
                 tns_reference=None, chunk_pairs=2_000_000):
    """Weak errors (and KDE marginal distances when a 4D reference is given).

    Seeds are derived per particle number from ``cfg.seed``; replica ``r``
    uses counter word ``r``, so results do not depend on ``workers``.
    """
    if replicas < MIN_REPLICAS:
        raise ChaosError(f"at least {MIN_REPLICAS} replicas are required, got {replicas}")
    omega0 = cfg.omega0
    ap, am = _alphas(omega0, cfg.epsilon_pad)
    rho_plus, rho_minus = _marginals(omega0, cfg.epsilon_pad)
    times = tuple(sorted(set(cfg.snapshot_times) | {0.0, cfg.t_final}))
    if omega_ref_snapshots is None:
        omega_ref_snapshots = reference_snapshots(omega0, cfg.nu, times, cfg.reference_dt)
    exact = {t: {lab: pairing_reference(w, phi) for lab, phi in TEST_FUNCTIONS.items()}
             for t, w in omega_ref_snapshots}

    tasks = []
    for n in n_values:
        seed = rng.derive_seed(cfg.seed, n)
        size = max(1, chunk_pairs // (4 * n * n))
        for reps in _chunks(replicas, size):
            tasks.append((n, reps, seed, rho_plus, rho_minus, ap, am, cfg.nu, cfg.dt,
                          cfg.t_final, times))
    if workers > 1:
        with ProcessPoolExecutor(workers, initializer=_init_worker, initargs=(kernel,)) as pool:
            results = list(pool.map(_run_chunk, tasks))
    else:
        _init_worker(kernel)
        results = [_run_chunk(t) for t in tasks]

    weak, marg, ci = {}, {}, {}
    labels = list(TEST_FUNCTIONS)
    for n in n_values:
        parts = [res for task, res in zip(tasks, results) if task[0] == n]
        got_times = parts[0][0]
        pair = np.concatenate([p[1] for p in parts], axis=2)
        for k, t in enumerate(got_times):
            tkey = _match_time(t, exact)
            for j, lab in enumerate(labels):
                dev = pair[k, j] - exact[tkey][lab]
                weak[(n, lab, t)] = float(np.sqrt(np.mean(dev * dev)))
                ci[(n, lab, t)] = bootstrap_rms_halfwidth(dev, rng.derive_seed(cfg.seed, n, j, k))
            if tns_reference is not None and tkey in tns_reference:
                pool_k = np.concatenate([p[2][k] for p in parts])
                if len(pool_k) >= MIN_KDE_SAMPLES:
                    ref = tns_reference[tkey]
                    est = kde_marginal(pool_k, cfg.bandwidth, ref.resolution)
                    marg[(n, t)] = float(np.mean(np.abs(est.values - ref.values)))
    return EnsembleStats(list(n_values), replicas, labels, list(times), weak, marg, ci)


def bootstrap_rms_halfwidth(dev, seed, resamples=1000):
    """95% percentile-bootstrap halfwidth of the RMS of ``dev`` over replicas."""
    gen = np.random.default_rng(seed)
    sq = np.asarray(dev) ** 2
    idx = gen.integers(0, len(sq), size=(resamples, len(sq)))
    rms = np.sqrt(sq[idx].mean(axis=1))
    lo, hi = np.percentile(rms, [2.5, 97.5])
    return float(0.5 * (hi - lo))


def _match_time(t, table):
    return min(table, key=lambda s: abs(s - t))


def _alphas(omega0, pad):
    w = omega0.values
    return float((np.maximum(w, 0) + pad).mean()), float((np.maximum(-w, 0) + pad).mean())


def _marginals(omega0, pad):
    w = omega0.values
    ap, am = _alphas(omega0, pad)
    return (SpectralField2D((np.maximum(w, 0) + pad) / ap),
            SpectralField2D((np.maximum(-w, 0) + pad) / am))


def reference_snapshots(omega0, nu, times, dt):
    """2D reference solution at the requested times (each hit exactly)."""
    out = [(0.0, omega0)]
    w, t = omega0, 0.0
    for target in sorted(times):
        if target <= t:
            continue
        w = solve_ns2d(w, nu, target - t, dt)[-1].omega
        t = target
        out.append((t, w))
    return out


def tns_reference(omega0_coarse, pad, nu, times, dt):
    """Tensorized density at the requested times, from the 4D solver."""
    from .tns import solve_tns

    f0, ap, am = tensorize_initial(omega0_coarse, pad)
    out = {0.0: f0}
    f, t = f0, 0.0
    for target in sorted(times):
        if target <= t:
            continue
        f = solve_tns(f, ap, am, nu, dt, target - t).snapshots[-1][1]
        t = target
        out[t] = f
    return out


# -- KDE ---------------------------------------------------------------------

def default_bandwidth(n_samples, m):
    h = 1.0 / m
    return float(np.clip(0.3 * n_samples ** (-1.0 / 8.0), h, 0.25))


def _periodic_gauss(m, bw):
    x = (np.arange(m) - m * (np.arange(m) > m // 2)) / m
    g = sum(np.exp(-0.5 * ((x - j) / bw) ** 2) for j in range(-3, 4))
    return g / g.sum()


def kde_marginal(samples, bandwidth, m):
    """Periodic Gaussian KDE of 4D samples on the ``m^4`` node grid.

    Samples are deposited on the grid by multilinear weights and convolved
    with a sampled, periodized product Gaussian; the estimate has mean 1.
    """
    samples = np.asarray(samples, dtype=np.float64).reshape(-1, 4)
    if len(samples) == 0:
        raise ChaosError("no samples")
    h = 1.0 / m
    bw = default_bandwidth(len(samples), m) if bandwidth is None else float(bandwidth)
    if not h <= bw <= 0.25:
        raise ChaosError(f"bandwidth {bw:g} outside [{h:g}, 0.25]")
    t = (samples + 0.5) * m
    i0 = np.floor(t).astype(np.int64)
    f = t - i0
    counts = np.zeros(m ** 4)
    for corner in range(16):
        bits = [(corner >> a) & 1 for a in range(4)]
        w = np.ones(len(samples))
        flat = np.zeros(len(samples), dtype=np.int64)
        for a, bit in enumerate(bits):
            w = w * (f[:, a] if bit else 1.0 - f[:, a])
            flat = flat * m + (i0[:, a] + bit) % m
        counts += np.bincount(flat, weights=w, minlength=m ** 4)
    dens = counts.reshape((m,) * 4) * (m ** 4 / len(samples))
    g = np.fft.rfft(_periodic_gauss(m, bw))
    gf = np.fft.fft(_periodic_gauss(m, bw))
    mult = gf[:, None, None, None] * gf[None, :, None, None] * gf[None, None, :, None] * g
    out = np.fft.irfftn(np.fft.rfftn(dens) * mult, s=dens.shape, axes=tuple(range(dens.ndim)))
    out = np.maximum(out, 0.0)
    return Field4D(out / out.mean())


# -- rate fits ---------------------------------------------------------------

def fit_rate(stats, which="weak", t=None, resamples=1000, seed=0):
    """Log-log least squares in ``N`` with one intercept per test function.

    The 95% halfwidth on the slope comes from a residual bootstrap.
    """
    t = max(stats.times) if t is None else t
    if which == "weak":
        rows = [(n, lab, e) for (n, lab, s), e in stats.weak_errors.items() if abs(s - t) < 1e-12]
    elif which == "marginal":
        rows = [(n, "kde", e) for (n, s), e in stats.marginal_l1.items() if abs(s - t) < 1e-12]
    else:
        raise ValueError("which must be 'weak' or 'marginal'")
    if not rows:
        raise ChaosError(f"no {which} errors at t={t:g}")
    if any(e <= 0 for _, _, e in rows):
        raise ChaosError("zero error values cannot be fitted on a log scale")
    ns = sorted({n for n, _, _ in rows})
    if len(ns) < 4 or ns[-1] < 16 * ns[0]:
        raise ChaosError("rate fit needs >= 4 particle numbers spanning a factor >= 16")
    labels = sorted({lab for _, lab, _ in rows})
    A = np.zeros((len(rows), 1 + len(labels)))
    y = np.empty(len(rows))
    for i, (n, lab, e) in enumerate(rows):
        A[i, 0] = np.log(n)
        A[i, 1 + labels.index(lab)] = 1.0
        y[i] = np.log(e)
    coef = np.linalg.lstsq(A, y, rcond=None)[0]
    fitted = A @ coef
    resid = y - fitted
    gen = np.random.default_rng(seed)
    slopes = np.empty(resamples)
    for b in range(resamples):
        yb = fitted + gen.choice(resid, size=len(resid), replace=True)
        slopes[b] = np.linalg.lstsq(A, yb, rcond=None)[0][0]
    lo, hi = np.percentile(slopes, [2.5, 97.5])
    return RateFit(float(coef[0]), float(np.mean(coef[1:])), float(0.5 * (hi - lo)),
                   (ns[0], ns[-1]))


# -- CSV ---------------------------------------------------------------------

def _writer(path):
    fh = open(path, "w", newline="")
    return fh, csv.writer(fh, lineterminator="\n")


def _num(x):
    return repr(float(x))


def write_rate_csv(path, stats):
    """``N, phi_label, t, rms_error, ci``; ``ci`` is a bootstrap 95% halfwidth of the RMS."""
    fh, w = _writer(path)
    with fh:
        w.writerow(["N", "phi_label", "t", "rms_error", "ci"])
        order = {lab: i for i, lab in enumerate(stats.test_functions)}
        for (n, lab, t), e in sorted(stats.weak_errors.items(),
                                     key=lambda kv: (kv[0][0], kv[0][2], order[kv[0][1]])):
            ci = stats.weak_ci.get((n, lab, t), float("nan"))
            w.writerow([n, lab, _num(t), _num(e), _num(ci)])


def write_marginal_csv(path, stats):
    fh, w = _writer(path)
    with fh:
        w.writerow(["N", "t", "l1"])
        for (n, t), e in sorted(stats.marginal_l1.items()):
            w.writerow([n, _num(t), _num(e)])


def write_fit_csv(path, fit):
    fh, w = _writer(path)
    with fh:
        w.writerow(["slope", "halfwidth", "n_min", "n_max"])
        w.writerow([_num(fit.slope), _num(fit.confidence_halfwidth), fit.n_range[0], fit.n_range[1]])


def ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return path
