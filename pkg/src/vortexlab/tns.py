"""Tensorized Navier-Stokes on T^2 x T^2, the one-pair Liouville equation,
and the projection / entropy functionals linking them to 2D vorticity.

Fields live on an ``m^4`` node grid with axes ``(x+1, x+2, x-1, x-2)``.
Both evolutions use Strang splitting: exact spectral heat flow for half a
step, semi-Lagrangian transport with cubic B-splines for a full step, then
another half step of heat flow. Mass is renormalized to one after each step
and the correction is recorded.
"""

import logging
from dataclasses import dataclass, field

import numba as nb
import numpy as np
import scipy.sparse as sp

from . import checkpoint
from .kernel import build_kernel_model, kernel_at, wrap
from .ns2d import CFLError, SpectralField2D, grid, velocity_modes

log = logging.getLogger(__name__)

DENSITY_FLOOR = 1e-14
COURANT_MAX = 1.0


class DensityError(ValueError):
    pass


class Field4D:
    """Real field on the ``m^4`` node grid of ``[-1/2, 1/2)^4``."""

    def __init__(self, values):
        values = np.array(values, dtype=np.float64)
        if values.ndim != 4 or len(set(values.shape)) != 1:
            raise ValueError("Field4D needs an (m, m, m, m) array")
        if values.shape[0] % 2 or values.shape[0] < 4:
            raise ValueError("resolution must be even and >= 4")
        if not np.all(np.isfinite(values)):
            raise ValueError("Field4D values must be finite")
        values.setflags(write=False)
        self.values = values

    @property
    def resolution(self):
        return self.values.shape[0]

    def integral(self):
        return float(self.values.mean())

    def save(self, path):
        checkpoint.write_field4d(path, self.values)

    @classmethod
    def load(cls, path):
        return cls(checkpoint.read_field4d(path))

    @classmethod
    def product(cls, f_plus, f_minus):
        """Tensor product ``f+(x+) f-(x-)`` of two 2D fields."""
        a = f_plus.values if isinstance(f_plus, SpectralField2D) else np.asarray(f_plus)
        b = f_minus.values if isinstance(f_minus, SpectralField2D) else np.asarray(f_minus)
        return cls(a[:, :, None, None] * b[None, None, :, :])


@dataclass
class ProjectionPair:
    omega_plus: SpectralField2D
    omega_minus: SpectralField2D


# -- projections -------------------------------------------------------------

def pr(fld, sign):
    """Marginal on the ``sign`` factor: grid sum over the other pair of axes."""
    v = fld.values
    m = v.shape[0]
    if sign == "+":
        return SpectralField2D(v.sum(axis=(2, 3)) / m ** 2)
    if sign == "-":
        return SpectralField2D(v.sum(axis=(0, 1)) / m ** 2)
    raise ValueError("sign must be '+' or '-'")


def projections(fld):
    return ProjectionPair(pr(fld, "+"), pr(fld, "-"))


def apply_P(fld, alpha_plus, alpha_minus):
    """Associated signed vorticity ``a+ pr+ - a- pr-``."""
    return SpectralField2D(alpha_plus * pr(fld, "+").values - alpha_minus * pr(fld, "-").values)


def tensorize_initial(omega_target, epsilon_pad):
    """Positive product density whose projection is ``omega_target``.

    Returns ``(field, alpha_plus, alpha_minus)``.
    """
    if epsilon_pad < 0:
        raise ValueError("epsilon_pad must be >= 0")
    w = omega_target.values
    wp = np.maximum(w, 0.0) + epsilon_pad
    wm = np.maximum(-w, 0.0) + epsilon_pad
    if wp.min() <= 0.0 or wm.min() <= 0.0:
        raise ValueError("epsilon_pad = 0 leaves zero cells; the tensorized density "
                         "would not be strictly positive")
    ap = float(wp.mean())
    am = float(wm.mean())
    return Field4D.product(wp / ap, wm / am), ap, am


# -- velocity ----------------------------------------------------------------

def _full_modes(values):
    m = values.shape[-1]
    return np.fft.fft2(values, axes=(-2, -1)) / m ** 2


def _eval_full_modes(modes, pts):
    """Trigonometric interpolation of stacked full-FFT modes ``(C, m, m)`` at ``(P, 2)``."""
    m = modes.shape[-1]
    k = np.fft.fftfreq(m, 1.0 / m)
    e1 = np.exp(2j * np.pi * (pts[:, 0:1] + 0.5) * k[None, :])
    e2 = np.exp(2j * np.pi * (pts[:, 1:2] + 0.5) * k[None, :])
    # Nyquist terms become cosines through the real part
    return np.stack([np.sum((e1 @ c) * e2, axis=1).real for c in modes], axis=-1)


@dataclass(eq=False)
class TNSVelocity:
    """Factored 4D velocity ``(u(x+), u(x-))`` carried as a single 2D field."""

    omega: SpectralField2D
    u1: SpectralField2D
    u2: SpectralField2D

    @property
    def grid_values(self):
        """``(m*m, 2)`` velocity at the 2D nodes."""
        return np.stack([self.u1.values.ravel(), self.u2.values.ravel()], axis=-1)

    def at(self, pts):
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
        return _eval_full_modes(_full_modes(np.stack([self.u1.values, self.u2.values])), pts)

    def max_speed(self):
        return float(np.sqrt(np.max(self.u1.values ** 2 + self.u2.values ** 2)))

    def at_4d(self, x):
        """Materialize ``(u(x+), u(x-))`` at a few 4D points ``(P, 4)``."""
        x = np.asarray(x, dtype=np.float64).reshape(-1, 4)
        return np.concatenate([self.at(x[:, :2]), self.at(x[:, 2:])], axis=-1)


def _velocity_from_omega(omega):
    m = omega.resolution
    u1, u2 = velocity_modes(omega.modes, m)
    return TNSVelocity(omega, SpectralField2D.from_modes(u1, m), SpectralField2D.from_modes(u2, m))


def tns_velocity(fld, alpha_plus, alpha_minus):
    return _velocity_from_omega(apply_P(fld, alpha_plus, alpha_minus))


# -- spectral pieces ---------------------------------------------------------

def _freqs4(m):
    k = np.fft.fftfreq(m, 1.0 / m)
    kr = np.fft.rfftfreq(m, 1.0 / m)
    return (k[:, None, None, None], k[None, :, None, None], k[None, None, :, None],
            kr[None, None, None, :])


def heat_factor_4d(m, nu, t):
    a, b, c, d = _freqs4(m)
    return np.exp(-4.0 * np.pi ** 2 * nu * t * (a ** 2 + b ** 2 + c ** 2 + d ** 2))


def _bspline_symbol(k, m):
    return (4.0 + 2.0 * np.cos(2.0 * np.pi * k / m)) / 6.0


def prefilter_4d(m):
    """Multiplier turning grid values into cubic B-spline coefficients."""
    a, b, c, d = _freqs4(m)
    return 1.0 / (_bspline_symbol(a, m) * _bspline_symbol(b, m)
                  * _bspline_symbol(c, m) * _bspline_symbol(d, m))


_CACHE = {}


def _spectral_ops(m, nu, dt):
    key = (m, nu, dt)
    if key not in _CACHE:
        if len(_CACHE) > 4:
            _CACHE.clear()
        E = heat_factor_4d(m, nu, dt / 2.0)
        _CACHE[key] = (E, E * prefilter_4d(m))
    return _CACHE[key]


def _bspline_weights(f):
    f2 = f * f
    f3 = f2 * f
    return np.stack([(1.0 - f) ** 3 / 6.0,
                     (3.0 * f3 - 6.0 * f2 + 4.0) / 6.0,
                     (-3.0 * f3 + 3.0 * f2 + 3.0 * f + 1.0) / 6.0,
                     f3 / 6.0], axis=-1)


def bspline_matrix(points, m):
    """Sparse ``(P, m*m)`` matrix evaluating a periodic cubic B-spline at ``points``."""
    pts = wrap(np.asarray(points, dtype=np.float64))
    t = (pts + 0.5) * m
    i = np.floor(t).astype(np.int64)
    w1 = _bspline_weights(t[:, 0] - i[:, 0])
    w2 = _bspline_weights(t[:, 1] - i[:, 1])
    off = np.arange(-1, 3)
    r1 = (i[:, 0:1] + off[None, :]) % m
    r2 = (i[:, 1:2] + off[None, :]) % m
    cols = (r1[:, :, None] * m + r2[:, None, :]).reshape(len(pts), 16)
    data = (w1[:, :, None] * w2[:, None, :]).reshape(len(pts), 16)
    rows = np.repeat(np.arange(len(pts)), 16)
    return sp.csr_matrix((data.ravel(), (rows, cols.ravel())), shape=(len(pts), m * m))


def _departures(vel_modes, nodes, dt):
    # midpoint rule backwards along a frozen velocity
    mid = nodes - 0.5 * dt * _eval_full_modes(vel_modes, nodes)
    return nodes - dt * _eval_full_modes(vel_modes, mid)


def _projected_omega(W, c2, alpha_plus, alpha_minus, m):
    # projections of W c W^T without forming it
    v = np.asarray(W.sum(axis=0)).ravel()
    p_plus = W @ (c2 @ v) / m ** 2
    p_minus = W @ (c2.T @ v) / m ** 2
    return SpectralField2D((alpha_plus * p_plus - alpha_minus * p_minus).reshape(m, m))


def _renormalize(F, m):
    mass = F[0, 0, 0, 0].real / m ** 4
    if not np.isfinite(mass) or mass <= 0:
        raise DensityError(f"mass became {mass}")
    return F / mass, mass - 1.0


def _step_tns(values, alpha_plus, alpha_minus, nu, dt, courant_max=COURANT_MAX):
    m = values.shape[0]
    E, EP = _spectral_ops(m, nu, dt)
    F = np.fft.rfftn(values)
    # projection after the first half diffusion, read off the k- = 0 / k+ = 0 slices
    Fh = F * E
    omega = SpectralField2D.from_modes(
        (alpha_plus * Fh[:, :m // 2 + 1, 0, 0] - alpha_minus * Fh[0, 0]) / m ** 2, m)
    vel = _velocity_from_omega(omega)
    speed = vel.max_speed()
    if speed * dt * m > courant_max * (1.0 + 1e-12):
        raise CFLError(f"dt={dt:.6g} gives Courant number {speed * dt * m:.3g} > {courant_max:g}")
    c2 = np.fft.irfftn(F * EP, s=values.shape, axes=(0, 1, 2, 3)).reshape(m * m, m * m)
    x1, x2 = grid(m)
    nodes = np.stack([x1.ravel(), x2.ravel()], axis=-1)
    un = _full_modes(np.stack([vel.u1.values, vel.u2.values]))
    # predictor: advect with u^n, take the projection of the result
    W = bspline_matrix(_departures(un, nodes, dt), m)
    pred = _velocity_from_omega(_projected_omega(W, c2, alpha_plus, alpha_minus, m))
    uh = 0.5 * (un + _full_modes(np.stack([pred.u1.values, pred.u2.values])))
    # corrector: midpoint velocity
    W = bspline_matrix(_departures(uh, nodes, dt), m)
    G = np.asarray(W @ c2)
    G = np.asarray(W @ G.T).T
    F = np.fft.rfftn(G.reshape(values.shape)) * E
    F, drift = _renormalize(F, m)
    return np.fft.irfftn(F, s=values.shape, axes=(0, 1, 2, 3)), drift


def step_tns(fld, alpha_plus, alpha_minus, nu, dt):
    """One Strang step; raises :class:`CFLError` past a unit Courant number."""
    values, drift = _step_tns(fld.values, alpha_plus, alpha_minus, nu, dt)
    log.debug("tns mass drift %.3e", drift)
    return Field4D(values)


def _steps(dt, t_final):
    n_full = int(np.floor(t_final / dt + 1e-9))
    steps = [dt] * n_full
    rest = t_final - n_full * dt
    if rest > 1e-12 * max(1.0, t_final):
        steps.append(rest)
    return steps


@dataclass
class Run4D:
    """Snapshots and per-step diagnostics of a 4D solve."""

    snapshots: list
    mass_drift: list = field(default_factory=list)
    times: list = field(default_factory=list)
    entropy: list = field(default_factory=list)
    fisher: list = field(default_factory=list)
    minimum: list = field(default_factory=list)
    maximum: list = field(default_factory=list)


def _record(run, t, values, diagnostics):
    run.times.append(t)
    run.minimum.append(float(values.min()))
    run.maximum.append(float(values.max()))
    if diagnostics:
        run.entropy.append(_entropy(values))
        run.fisher.append(_fisher(values))


def solve_tns(field0, alpha_plus, alpha_minus, nu, dt, t_final, snapshot_every=None,
              diagnostics=False, on_step=None):
    """Integrate to ``t_final`` exactly; snapshots at 0, every ``snapshot_every`` steps and the end."""
    values = field0.values
    run = Run4D([(0.0, field0)])
    _record(run, 0.0, values, diagnostics)
    steps = _steps(dt, t_final)
    t = 0.0
    for i, h in enumerate(steps, 1):
        values, drift = _step_tns(values, alpha_plus, alpha_minus, nu, h)
        run.mass_drift.append(drift)
        t = t_final if i == len(steps) else i * dt
        _record(run, t, values, diagnostics)
        if on_step is not None:
            on_step(t, values)
        if i == len(steps) or (snapshot_every and i % snapshot_every == 0):
            run.snapshots.append((t, Field4D(values)))
    return run


# -- pair Liouville ----------------------------------------------------------

@nb.njit(cache=True)
def _pair_drift(gpad, res, y, ap, am, buf, out):
    kernel_at(gpad, res, y[0] - y[2], y[1] - y[3], buf)
    out[0] = -am * buf[0]
    out[1] = -am * buf[1]
    kernel_at(gpad, res, y[2] - y[0], y[3] - y[1], buf)
    out[2] = ap * buf[0]
    out[3] = ap * buf[1]


@nb.njit(cache=True)
def _liouville_departures(gpad, res, m, ap, am, dt, out, speed):
    # backward RK4 along b(x) from every node; also returns max |b| at nodes
    buf = np.empty(2)
    k1 = np.empty(4)
    k2 = np.empty(4)
    k3 = np.empty(4)
    k4 = np.empty(4)
    y = np.empty(4)
    x = np.empty(4)
    h = 1.0 / m
    p = 0
    smax = 0.0
    for a in range(m):
        for b in range(m):
            for c in range(m):
                for d in range(m):
                    x[0] = -0.5 + a * h
                    x[1] = -0.5 + b * h
                    x[2] = -0.5 + c * h
                    x[3] = -0.5 + d * h
                    _pair_drift(gpad, res, x, ap, am, buf, k1)
                    s = np.sqrt(k1[0] ** 2 + k1[1] ** 2 + k1[2] ** 2 + k1[3] ** 2)
                    if s > smax:
                        smax = s
                    for q in range(4):
                        y[q] = x[q] - 0.5 * dt * k1[q]
                    _pair_drift(gpad, res, y, ap, am, buf, k2)
                    for q in range(4):
                        y[q] = x[q] - 0.5 * dt * k2[q]
                    _pair_drift(gpad, res, y, ap, am, buf, k3)
                    for q in range(4):
                        y[q] = x[q] - dt * k3[q]
                    _pair_drift(gpad, res, y, ap, am, buf, k4)
                    for q in range(4):
                        out[p, q] = x[q] - dt * (k1[q] + 2.0 * k2[q] + 2.0 * k3[q] + k4[q]) / 6.0
                    p += 1
    speed[0] = smax


@nb.njit(cache=True)
def _interp4(coef, idx, w, out):
    # idx, w: (P, 4 axes, 4 offsets)
    P = idx.shape[0]
    for p in range(P):
        acc = 0.0
        for a in range(4):
            ia = idx[p, 0, a]
            wa = w[p, 0, a]
            for b in range(4):
                ib = idx[p, 1, b]
                wab = wa * w[p, 1, b]
                for c in range(4):
                    ic = idx[p, 2, c]
                    wabc = wab * w[p, 2, c]
                    for d in range(4):
                        acc += wabc * w[p, 3, d] * coef[ia, ib, ic, idx[p, 3, d]]
        out[p] = acc


def _tensor_stencil(points, m):
    t = (wrap(points) + 0.5) * m
    i = np.floor(t).astype(np.int64)
    w = _bspline_weights(t - i)
    idx = (i[..., None] + np.arange(-1, 3)) % m
    return np.ascontiguousarray(idx), np.ascontiguousarray(w)


def pair_liouville_drift(x, alpha_plus, alpha_minus, kernel):
    """``b(x) = (-a- K(x+ - x-), a+ K(x- - x+))`` at points ``(P, 4)``."""
    x = np.ascontiguousarray(np.asarray(x, dtype=np.float64).reshape(-1, 4))
    out = np.empty_like(x)
    buf = np.empty(2)
    for p in range(len(x)):
        _pair_drift(kernel.gamma_padded, kernel.table_resolution, x[p], alpha_plus, alpha_minus,
                    buf, out[p])
    return out


def pair_liouville_solve(rho0, alpha_plus, alpha_minus, nu, dt, t_final, kernel=None,
                         snapshot_every=None, courant_max=2.0):
    """Density of one (+, -) vortex pair under the frozen pair drift plus heat flow.

    Per-step entropy, Fisher information, extrema and mass corrections are
    recorded in the returned :class:`Run4D`.
    """
    _check_density(rho0.values)
    m = rho0.resolution
    kernel = kernel or build_kernel_model()
    steps = _steps(dt, t_final)
    stencils = {}

    def stencil(h):
        if h not in stencils:
            dep = np.empty((m ** 4, 4))
            speed = np.zeros(1)
            _liouville_departures(kernel.gamma_padded, kernel.table_resolution, m,
                                  float(alpha_plus), float(alpha_minus), h, dep, speed)
            if speed[0] * h * m > courant_max * (1.0 + 1e-12):
                raise CFLError(f"dt={h:.6g} gives nodal Courant number {speed[0] * h * m:.3g}"
                               f" > {courant_max:g}")
            stencils[h] = _tensor_stencil(dep, m)
        return stencils[h]

    values = rho0.values
    run = Run4D([(0.0, rho0)])
    _record(run, 0.0, values, True)
    out = np.empty(m ** 4)
    t = 0.0
    for i, h in enumerate(steps, 1):
        idx, w = stencil(h)
        E, EP = _spectral_ops(m, nu, h)
        coef = np.fft.irfftn(np.fft.rfftn(values) * EP, s=values.shape, axes=(0, 1, 2, 3))
        coef = np.ascontiguousarray(coef)
        _interp4(coef, idx, w, out)
        F, drift = _renormalize(np.fft.rfftn(out.reshape(values.shape)) * E, m)
        values = np.fft.irfftn(F, s=values.shape, axes=(0, 1, 2, 3))
        run.mass_drift.append(drift)
        t = t_final if i == len(steps) else i * dt
        _record(run, t, values, True)
        if i == len(steps) or (snapshot_every and i % snapshot_every == 0):
            run.snapshots.append((t, Field4D(values)))
    return run


# -- functionals -------------------------------------------------------------

def _check_density(v):
    lo = float(v.min())
    if lo < -1e-12:
        raise DensityError(f"density has negative values (min {lo:.3g})")


def _entropy(v):
    return float(np.mean(v * np.log(np.maximum(v, DENSITY_FLOOR))))


def _fisher(v):
    m = v.shape[0]
    g2 = np.zeros_like(v)
    for ax in range(4):
        g = (np.roll(v, -1, axis=ax) - np.roll(v, 1, axis=ax)) * (m / 2.0)
        g2 += g * g
    return float(np.mean(g2 / np.maximum(v, DENSITY_FLOOR)))


def entropy(fld):
    """Grid quadrature of ``int rho log rho`` (``0 log 0 = 0``)."""
    _check_density(fld.values)
    return _entropy(fld.values)


def fisher(fld):
    """Grid quadrature of ``int |grad rho|^2 / rho`` with centered differences."""
    _check_density(fld.values)
    return _fisher(fld.values)


def relative_entropy_1(rho1, omegabar):
    """``int rho1 log(rho1 / omegabar)``."""
    _check_density(rho1.values)
    if float(omegabar.values.min()) <= 0.0:
        raise DensityError("reference density has nonpositive cells")
    r = rho1.values
    return float(np.mean(r * (np.log(np.maximum(r, DENSITY_FLOOR)) - np.log(omegabar.values))))


def entropy_balance(run, nu):
    """``H(t) + nu int_0^t Fisher ds - H(0)`` at every recorded time (trapezoid in time)."""
    t = np.asarray(run.times)
    fi = np.asarray(run.fisher)
    acc = np.concatenate([[0.0], np.cumsum(0.5 * (fi[1:] + fi[:-1]) * np.diff(t))])
    return np.asarray(run.entropy) + nu * acc - run.entropy[0]
