"""Two-species viscous point vortex system on the torus (Euler-Maruyama).

Each species carries ``n`` particles. Particle ``i`` of either species moves by

    dX = [(a+/n) sum_j K(X - X+_j) - (a-/n) sum_j K(X - X-_j)] dt + sqrt(2 nu) dW

with the same-particle term skipped (``K(0) = 0``). Noise for particle slot
``s`` at step ``k`` of replica ``r`` is a pure function of
``(seed, r, s, k)``, so runs are reproducible under any scheduling.
"""

from dataclasses import dataclass, replace

import numba as nb
import numpy as np

from . import checkpoint, rng
from .kernel import kernel_at, wrap


class EnsembleError(ValueError):
    pass


@dataclass(frozen=True)
class SimConfig:
    nu: float
    dt: float
    t_final: float
    snapshot_stride: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.nu < 0:
            raise EnsembleError("nu must be >= 0")
        if not self.dt > 0:
            raise EnsembleError("dt must be > 0")
        if self.t_final < self.dt:
            raise EnsembleError("t_final must be >= dt")
        if self.snapshot_stride < 1:
            raise EnsembleError("snapshot_stride must be >= 1")


@dataclass(frozen=True, eq=False)
class SignedEnsemble:
    """State of the ``2n``-particle system; ``step`` is the RNG counter."""

    n: int
    alpha_plus: float
    alpha_minus: float
    x_plus: np.ndarray
    x_minus: np.ndarray
    time: float = 0.0
    seed: int = 0
    replica: int = 0
    step: int = 0

    def __post_init__(self):
        if self.n < 1:
            raise EnsembleError("n must be >= 1")
        for name in ("x_plus", "x_minus"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != (self.n, 2):
                raise EnsembleError(f"{name} must have shape ({self.n}, 2), got {arr.shape}")
            object.__setattr__(self, name, wrap(arr))

    @property
    def positions(self):
        """Stacked ``(2n, 2)`` array, plus species first."""
        return np.concatenate([self.x_plus, self.x_minus])


def _validate_marginal(marginal, label):
    v = marginal.values
    if v.min() < -1e-12:
        raise EnsembleError(f"{label} marginal has negative values (min {v.min():.3g})")
    mass = float(v.mean())
    if abs(mass - 1.0) > 1e-8:
        raise EnsembleError(f"{label} marginal integrates to {mass:.12g}, expected 1")


def _sample_grid(values, n, seed, replica, stream):
    m = values.shape[0]
    h = 1.0 / m
    p = np.clip(values, 0.0, None).ravel()
    cdf = np.cumsum(p)
    slots = np.arange(n)
    u = rng.uniform_pairs(seed, slots, 0, replica, stream)
    cell = np.searchsorted(cdf, u[:, 0] * cdf[-1], side="right")
    cell = np.minimum(cell, p.size - 1)
    jitter = rng.uniform_pairs(seed, slots, 1, replica, stream)
    i1, i2 = np.divmod(cell, m)
    x = np.stack([-0.5 + (i1 + jitter[:, 0] - 0.5) * h, -0.5 + (i2 + jitter[:, 1] - 0.5) * h], -1)
    return wrap(x)


def sample_initial(marginal_plus, marginal_minus, n, seed, alpha_plus=1.0, alpha_minus=1.0,
                   replica=0):
    """Draw ``n`` i.i.d. particles per species from grid marginals.

    Cell ``j`` is the square of side ``1/M`` centred on grid node ``j``; a cell
    is chosen by inverse CDF and the particle is placed uniformly inside it.
    """
    _validate_marginal(marginal_plus, "plus")
    _validate_marginal(marginal_minus, "minus")
    xp = _sample_grid(marginal_plus.values, n, seed, replica, rng.STREAM_INIT_PLUS)
    xm = _sample_grid(marginal_minus.values, n, seed, replica, rng.STREAM_INIT_MINUS)
    return SignedEnsemble(n, float(alpha_plus), float(alpha_minus), xp, xm,
                          seed=seed, replica=replica)


# -- drift -------------------------------------------------------------------

@nb.njit(cache=True)
def _tree_sum(buf, count, c):
    # pairwise reduction in a fixed order; clobbers buf
    width = count
    while width > 1:
        half = width // 2
        for k in range(half):
            buf[k, c] = buf[2 * k, c] + buf[2 * k + 1, c]
        if width % 2:
            buf[half, c] = buf[width - 1, c]
            width = half + 1
        else:
            width = half
    return buf[0, c] if count > 0 else 0.0


@nb.njit(cache=True)
def _drift_batch(gpad, res, X, n, ap, am, out):
    # X: (B, 2n, 2); plus species occupy slots [0, n)
    kv = np.empty(2)
    bp = np.empty((n, 2))
    bm = np.empty((n, 2))
    B = X.shape[0]
    for b in range(B):
        for i in range(2 * n):
            x1 = X[b, i, 0]
            x2 = X[b, i, 1]
            for j in range(n):
                kernel_at(gpad, res, x1 - X[b, j, 0], x2 - X[b, j, 1], kv)
                bp[j, 0] = kv[0]
                bp[j, 1] = kv[1]
                kernel_at(gpad, res, x1 - X[b, n + j, 0], x2 - X[b, n + j, 1], kv)
                bm[j, 0] = kv[0]
                bm[j, 1] = kv[1]
            # same particle of the same species: skipped by zeroing its slot
            if i < n:
                bp[i, 0] = 0.0
                bp[i, 1] = 0.0
            else:
                bm[i - n, 0] = 0.0
                bm[i - n, 1] = 0.0
            for c in range(2):
                out[b, i, c] = (ap / n) * _tree_sum(bp, n, c) - (am / n) * _tree_sum(bm, n, c)


def drift_batch(X, n, alpha_plus, alpha_minus, kernel):
    """Drift for a batch of configurations ``X`` of shape ``(B, 2n, 2)``."""
    X = np.ascontiguousarray(X, dtype=np.float64)
    out = np.empty_like(X)
    _drift_batch(kernel.gamma_padded, kernel.table_resolution, X, n,
                 float(alpha_plus), float(alpha_minus), out)
    return out


def drift(ens, kernel):
    """Drift of every particle; returns ``(drift_plus, drift_minus)``."""
    d = drift_batch(ens.positions[None], ens.n, ens.alpha_plus, ens.alpha_minus, kernel)[0]
    return d[:ens.n], d[ens.n:]


def _noise(seed, replicas, n, step):
    slots = np.arange(2 * n)
    reps = np.asarray(replicas, dtype=np.uint64)[:, None]
    return rng.normal_pairs(seed, slots[None, :], step, reps, rng.STREAM_NOISE)


def em_update(X, n, alpha_plus, alpha_minus, nu, dt, kernel, seed, replicas, step):
    """Euler-Maruyama update of a batch ``(B, 2n, 2)``; pure function of its inputs."""
    X = X + dt * drift_batch(X, n, alpha_plus, alpha_minus, kernel)
    if nu > 0:
        X = X + np.sqrt(2.0 * nu * dt) * _noise(seed, replicas, n, step)
    return wrap(X)


def em_step(ens, cfg, kernel, dt=None):
    dt = cfg.dt if dt is None else dt
    X = em_update(ens.positions[None], ens.n, ens.alpha_plus, ens.alpha_minus, cfg.nu, dt,
                  kernel, ens.seed, [ens.replica], ens.step)[0]
    return replace(ens, x_plus=X[:ens.n], x_minus=X[ens.n:], time=ens.time + dt,
                   step=ens.step + 1)


def step_sizes(dt, t_final):
    """Uniform steps of ``dt`` with the last one shortened to land on ``t_final``."""
    n_full = int(np.floor(t_final / dt + 1e-9))
    steps = [dt] * n_full
    rest = t_final - n_full * dt
    if rest > 1e-12 * max(1.0, t_final):
        steps.append(rest)
    return steps


def simulate(ens, cfg, kernel):
    """Snapshots at ``t=0``, every ``snapshot_stride`` steps and at ``t_final``."""
    snaps = [ens]
    steps = step_sizes(cfg.dt, cfg.t_final)
    for i, h in enumerate(steps, 1):
        ens = em_step(ens, cfg, kernel, h)
        if i == len(steps):
            ens = replace(ens, time=snaps[0].time + cfg.t_final)
            snaps.append(ens)
        elif i % cfg.snapshot_stride == 0:
            snaps.append(ens)
    return snaps


def simulate_batch(X0, n, alpha_plus, alpha_minus, cfg, kernel, replicas, snapshot_times=None):
    """Advance many independent replicas at once.

    Returns ``(times, states)`` where ``states[k]`` has shape ``(B, 2n, 2)``;
    snapshots follow the same rule as :func:`simulate`, or are taken at the
    step indices closest to ``snapshot_times`` when given.
    """
    steps = step_sizes(cfg.dt, cfg.t_final)
    keep = set()
    if snapshot_times is not None:
        acc = np.concatenate([[0.0], np.cumsum(steps)])
        keep = {int(np.argmin(np.abs(acc - t))) for t in snapshot_times}
    X = wrap(np.asarray(X0, dtype=np.float64))
    times, states = [0.0], [X]
    t = 0.0
    for i, h in enumerate(steps, 1):
        X = em_update(X, n, alpha_plus, alpha_minus, cfg.nu, h, kernel, cfg.seed, replicas, i - 1)
        t = cfg.t_final if i == len(steps) else t + h
        if snapshot_times is not None:
            if i in keep:
                times.append(t)
                states.append(X)
        elif i == len(steps) or i % cfg.snapshot_stride == 0:
            times.append(t)
            states.append(X)
    return times, states


def empirical_pairing(ens, phi):
    """``(1/n) [a+ sum phi(X+_i) - a- sum phi(X-_i)]``."""
    return float((ens.alpha_plus * np.sum(phi(ens.x_plus))
                  - ens.alpha_minus * np.sum(phi(ens.x_minus))) / ens.n)


def pairing_batch(X, n, alpha_plus, alpha_minus, phi):
    """Empirical pairing for every configuration in a batch ``(B, 2n, 2)``."""
    vals = phi(X)
    return (alpha_plus * vals[:, :n].sum(axis=1) - alpha_minus * vals[:, n:].sum(axis=1)) / n


def save_trajectory(path, snapshots, cfg):
    first = snapshots[0]
    checkpoint.write_trajectory(path, first.n, first.alpha_plus, first.alpha_minus, cfg.nu,
                                cfg.dt, [(s.time, s.x_plus, s.x_minus) for s in snapshots])


def load_trajectory(path):
    header, snaps = checkpoint.read_trajectory(path)
    ens = [SignedEnsemble(header["n"], header["alpha_plus"], header["alpha_minus"], xp, xm, t)
           for t, xp, xm in snaps]
    return header, ens
