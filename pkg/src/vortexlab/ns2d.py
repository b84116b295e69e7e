"""Pseudo-spectral vorticity Navier-Stokes on the unit torus.

Velocity comes from ``u = K * omega``, i.e. ``u_hat = -i k_perp omega_hat / (2 pi |k|^2)``.
With stream function ``psi`` solving ``-Laplace psi = omega`` this is
``u = grad_perp psi = (-d2 psi, d1 psi)``, so ``curl u = d1 u2 - d2 u1 = omega``.

Time stepping is integrating-factor RK4 (exact heat factor) with the 2/3
rule applied to the advective term. A Duhamel/Picard solver provides the
mild-solution formulation on a short slab.
"""

from dataclasses import dataclass, field
from functools import cached_property
import re

import numpy as np

from . import checkpoint


class NumericalError(RuntimeError):
    """Base class for failures of a numerical scheme (CFL, contraction)."""


class CFLError(NumericalError):
    pass


class NonContractionError(NumericalError):
    def __init__(self, message, contraction_estimate, iterations):
        super().__init__(message)
        self.contraction_estimate = contraction_estimate
        self.iterations = iterations


class InitialConditionError(ValueError):
    pass


def wavenumbers(m):
    """Integer wavenumbers for an ``rfft2`` layout: ``(k1[:, None], k2[None, :])``."""
    k1 = np.fft.fftfreq(m, 1.0 / m)
    k2 = np.fft.rfftfreq(m, 1.0 / m)
    return k1[:, None], k2[None, :]


def grid(m):
    """Node coordinates ``-1/2 + j/m``, as two ``(m, m)`` arrays."""
    g = -0.5 + np.arange(m) / m
    return np.meshgrid(g, g, indexing="ij")


class SpectralField2D:
    """Real field on an ``M x M`` node grid of ``[-1/2, 1/2)^2``.

    Point values are authoritative; Fourier modes (``rfft2`` layout) are
    computed on first access and cached.
    """

    __slots__ = ("values", "__dict__")

    def __init__(self, values):
        values = np.array(values, dtype=np.float64)
        if values.ndim != 2 or values.shape[0] != values.shape[1]:
            raise ValueError("field must be a square 2D grid")
        if values.shape[0] % 2 or values.shape[0] < 4:
            raise ValueError("resolution must be even and >= 4")
        values.setflags(write=False)
        self.values = values

    @classmethod
    def from_modes(cls, modes, m):
        obj = cls(np.fft.irfft2(modes, s=(m, m)))
        obj.__dict__["modes"] = modes
        return obj

    @classmethod
    def from_function(cls, fn, m):
        x1, x2 = grid(m)
        return cls(np.broadcast_to(fn(x1, x2), (m, m)))

    @property
    def resolution(self):
        return self.values.shape[0]

    @cached_property
    def modes(self):
        return np.fft.rfft2(self.values)

    def mean(self):
        return float(self.modes[0, 0].real) / self.resolution ** 2

    def integral(self):
        # domain has unit area
        return self.mean()

    def sup(self):
        return float(np.max(np.abs(self.values)))

    def __add__(self, other):
        return SpectralField2D(self.values + _vals(other))

    def __sub__(self, other):
        return SpectralField2D(self.values - _vals(other))

    def __mul__(self, c):
        return SpectralField2D(self.values * c)

    __rmul__ = __mul__

    def save(self, path):
        checkpoint.write_field2d(path, self.values)

    @classmethod
    def load(cls, path):
        return cls(checkpoint.read_field2d(path))


def _vals(f):
    return f.values if isinstance(f, SpectralField2D) else np.asarray(f)


def is_power_of_two(m):
    return m >= 4 and not m & (m - 1)


# -- spectral operators ------------------------------------------------------

def _bs_multipliers(m):
    k1, k2 = wavenumbers(m)
    kk = k1 ** 2 + k2 ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = np.where(kk > 0, 1.0 / (2.0 * np.pi * kk), 0.0)
    # -i k_perp / (2 pi |k|^2) with k_perp = (-k2, k1)
    return 1j * k2 * inv, -1j * k1 * inv


def velocity_modes(omega_hat, m):
    m1, m2 = _bs_multipliers(m)
    return m1 * omega_hat, m2 * omega_hat


def biot_savart_2d(omega):
    """Velocity components ``(u1, u2)`` of a vorticity field; the mean mode is ignored."""
    m = omega.resolution
    u1, u2 = velocity_modes(omega.modes, m)
    return SpectralField2D.from_modes(u1, m), SpectralField2D.from_modes(u2, m)


def curl(u1, u2):
    m = u1.resolution
    k1, k2 = wavenumbers(m)
    c = 2j * np.pi * (k1 * u2.modes - k2 * u1.modes)
    return SpectralField2D.from_modes(c, m)


def spectral_divergence(u1, u2):
    """Max modulus of the Fourier coefficients of ``div u``."""
    k1, k2 = wavenumbers(u1.resolution)
    return float(np.max(np.abs(k1 * u1.modes + k2 * u2.modes)))


def dealias_mask(m):
    k1, k2 = wavenumbers(m)
    return (np.abs(k1) <= m / 3) & (np.abs(k2) <= m / 3)


def heat_factor(m, nu, t):
    k1, k2 = wavenumbers(m)
    return np.exp(-4.0 * np.pi ** 2 * nu * (k1 ** 2 + k2 ** 2) * t)


class _Ops:
    """Precomputed multipliers for one resolution."""

    def __init__(self, m):
        self.m = m
        self.k1, self.k2 = wavenumbers(m)
        self.bs1, self.bs2 = _bs_multipliers(m)
        self.mask = dealias_mask(m)
        self.kk = self.k1 ** 2 + self.k2 ** 2

    def advection(self, w_hat):
        """Dealiased ``-(u . grad omega)`` in Fourier space."""
        m = self.m
        w_hat = w_hat * self.mask
        u1 = np.fft.irfft2(self.bs1 * w_hat, s=(m, m))
        u2 = np.fft.irfft2(self.bs2 * w_hat, s=(m, m))
        wx = np.fft.irfft2(2j * np.pi * self.k1 * w_hat, s=(m, m))
        wy = np.fft.irfft2(2j * np.pi * self.k2 * w_hat, s=(m, m))
        return -np.fft.rfft2(u1 * wx + u2 * wy) * self.mask

    def flux_divergence(self, w_hat):
        """Dealiased ``div(u omega)`` in Fourier space (equals ``u . grad omega``)."""
        m = self.m
        w_hat = w_hat * self.mask
        w = np.fft.irfft2(w_hat, s=(m, m))
        u1 = np.fft.irfft2(self.bs1 * w_hat, s=(m, m))
        u2 = np.fft.irfft2(self.bs2 * w_hat, s=(m, m))
        f1 = np.fft.rfft2(u1 * w)
        f2 = np.fft.rfft2(u2 * w)
        return 2j * np.pi * (self.k1 * f1 + self.k2 * f2) * self.mask

    def max_speed(self, w_hat):
        m = self.m
        u1 = np.fft.irfft2(self.bs1 * w_hat, s=(m, m))
        u2 = np.fft.irfft2(self.bs2 * w_hat, s=(m, m))
        return float(np.sqrt(np.max(u1 * u1 + u2 * u2)))


_OPS = {}


def _ops(m):
    if m not in _OPS:
        _OPS[m] = _Ops(m)
    return _OPS[m]


def cfl_bound(omega, courant=0.5):
    """Largest admissible step ``courant * dx / max|u|`` (inf for a motionless field)."""
    speed = _ops(omega.resolution).max_speed(omega.modes)
    if speed == 0.0:
        return np.inf
    return courant / omega.resolution / speed


def _check_cfl(omega, dt):
    bound = cfl_bound(omega)
    if dt > bound * (1.0 + 1e-12):
        raise CFLError(f"dt={dt:.6g} violates the advective CFL bound dt <= {bound:.6g}")


def _if_rk4(w_hat, ops, nu, dt):
    E = np.exp(-4.0 * np.pi ** 2 * nu * ops.kk * dt)
    E2 = np.exp(-4.0 * np.pi ** 2 * nu * ops.kk * dt / 2.0)
    a = ops.advection(w_hat)
    b = ops.advection(E2 * (w_hat + 0.5 * dt * a))
    c = ops.advection(E2 * w_hat + 0.5 * dt * b)
    d = ops.advection(E * w_hat + dt * E2 * c)
    out = E * w_hat + dt / 6.0 * (E * a + 2.0 * E2 * (b + c) + d)
    # the k = 0 mode is untouched by both terms
    out[0, 0] = w_hat[0, 0]
    return out


def step_ns2d(omega, nu, dt):
    """One integrating-factor RK4 step; raises :class:`CFLError` if ``dt`` is too large."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    _check_cfl(omega, dt)
    m = omega.resolution
    return SpectralField2D.from_modes(_if_rk4(omega.modes, _ops(m), nu, dt), m)


@dataclass
class Snapshot:
    t: float
    omega: SpectralField2D


def solve_ns2d(omega0, nu, t_final, dt, snapshot_every=None):
    """Integrate to ``t_final`` (hit exactly); snapshots at ``t=0``, every
    ``snapshot_every`` steps, and at ``t_final``."""
    if t_final < 0:
        raise ValueError("t_final must be nonnegative")
    n_full = int(np.floor(t_final / dt + 1e-9))
    steps = [dt] * n_full
    rest = t_final - n_full * dt
    if rest > 1e-12 * max(1.0, t_final):
        steps.append(rest)
    snaps = [Snapshot(0.0, omega0)]
    omega = omega0
    t = 0.0
    for i, h in enumerate(steps, 1):
        omega = step_ns2d(omega, nu, h)
        t = t_final if i == len(steps) else i * dt
        if i == len(steps) or (snapshot_every and i % snapshot_every == 0):
            snaps.append(Snapshot(t, omega))
    return snaps


def extremum_trace(snapshots):
    """``[(t, min omega, max omega)]`` over grid values."""
    return [(s.t, float(s.omega.values.min()), float(s.omega.values.max())) for s in snapshots]


def max_principle_violation(trace):
    """Largest amount by which max increases or min decreases relative to t=0."""
    _, lo0, hi0 = trace[0]
    return max(max(hi - hi0, lo0 - lo, 0.0) for _, lo, hi in trace)


def h1_seminorm(omega):
    """``||grad omega||_{L^2}`` by Parseval."""
    m = omega.resolution
    k1, k2 = wavenumbers(m)
    w = np.full(k2.shape, 2.0)
    w[..., 0] = 1.0
    if m % 2 == 0:
        w[..., -1] = 1.0
    power = (np.abs(omega.modes) / m ** 2) ** 2 * 4 * np.pi ** 2 * (k1 ** 2 + k2 ** 2)
    return float(np.sqrt(np.sum(power * w)))


def evaluate_at(omega, points):
    """Trigonometric interpolation of a field at arbitrary points ``(..., 2)``."""
    m = omega.resolution
    modes = np.fft.fft2(omega.values) / m ** 2
    k = np.fft.fftfreq(m, 1.0 / m)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2) + 0.5
    e1 = np.exp(2j * np.pi * pts[:, 0:1] * k[None, :])
    e2 = np.exp(2j * np.pi * pts[:, 1:2] * k[None, :])
    # Nyquist column is real-symmetrized by taking the real part
    vals = np.einsum("pa,ab,pb->p", e1, modes, e2).real
    return vals.reshape(np.shape(points)[:-1])


# -- mild solutions ----------------------------------------------------------

@dataclass
class MildSolveReport:
    iterations: int
    contraction_estimate: float
    horizon_used: float
    history: list = field(default_factory=list)


def picard_mild_solve(omega0, nu, horizon, tol=1e-10, max_iter=60, inner_steps=None,
                      inner_dt=6.25e-4):
    """Fixed point of ``w(t) = G_t w0 - int_0^t G_{t-s} div(u w)(s) ds`` on ``[0, horizon]``.

    ``G_t = exp(t nu Laplace)`` is applied exactly in Fourier space and the
    Duhamel integral uses the trapezoid rule on ``inner_steps`` uniform
    intervals (default: enough that each is at most ``inner_dt``).
    Iterates are compared in sup norm over the whole slab. Raises
    :class:`NonContractionError` when successive differences stop shrinking
    or ``max_iter`` is reached.
    """
    m = omega0.resolution
    ops = _ops(m)
    n = int(inner_steps) if inner_steps else max(8, int(np.ceil(horizon / inner_dt - 1e-9)))
    ts = np.linspace(0.0, horizon, n + 1)
    dt = horizon / n
    w0 = omega0.modes
    # heat propagators G_{t_i - s_j} for all lags
    lag = np.exp(-4.0 * np.pi ** 2 * nu * ops.kk[None] * (dt * np.arange(n + 1))[:, None, None])
    free = lag * w0
    current = free.copy()
    prev_diff = None
    ratio_max = 0.0
    history = []
    for it in range(1, max_iter + 1):
        flux = np.stack([ops.flux_divergence(current[j]) for j in range(n + 1)])
        # trapezoid: acc[i] = sum_{j<=i} lag[i-j] flux[j] minus half the end points
        acc = np.zeros_like(flux)
        for d in range(n + 1):
            acc[d:] += lag[d] * flux[:n + 1 - d]
        acc -= 0.5 * (lag * flux[0] + lag[0] * flux)
        acc[0] = 0.0
        new = free - dt * acc
        new[:, 0, 0] = w0[0, 0]
        diff = float(np.max(np.abs(np.fft.irfft2(new - current, s=(m, m)))))
        if not np.isfinite(diff):
            raise NonContractionError(f"Picard iterates diverged on horizon {horizon:g}",
                                      np.inf, it)
        history.append(diff)
        current = new
        if prev_diff is not None and prev_diff > 0:
            ratio = diff / prev_diff
            ratio_max = max(ratio_max, ratio)
            if ratio >= 1.0:
                raise NonContractionError(
                    f"Picard map is not contracting on horizon {horizon:g} "
                    f"(successive-difference ratio {ratio:.3g} at iteration {it})", ratio, it)
        if diff < tol:
            report = MildSolveReport(it, ratio_max, horizon, history)
            return SpectralField2D.from_modes(current[-1], m), report
        prev_diff = diff
    raise NonContractionError(f"no convergence within {max_iter} Picard iterations "
                              f"on horizon {horizon:g}", ratio_max, max_iter)


def heat_kernel_gradient_l1(t, d=2, m=256, images=3):
    """Quadrature of ``||grad G_t||_{L^1(T^d)}`` for the periodized heat kernel
    of ``d/dt = Laplace`` (``d = 2`` only), and the free-space closed form
    ``Gamma((d+1)/2) / Gamma(d/2) * t^(-1/2)``."""
    from scipy.special import gamma as gamma_fn

    if d != 2:
        raise ValueError("only d = 2 is implemented")
    g = (np.arange(m) + 0.5) / m - 0.5
    x1, x2 = np.meshgrid(g, g, indexing="ij")
    gx = np.zeros_like(x1)
    gy = np.zeros_like(x1)
    for n1 in range(-images, images + 1):
        for n2 in range(-images, images + 1):
            y1, y2 = x1 - n1, x2 - n2
            G = np.exp(-(y1 ** 2 + y2 ** 2) / (4 * t)) / (4 * np.pi * t)
            gx += -y1 / (2 * t) * G
            gy += -y2 / (2 * t) * G
    quad = float(np.sum(np.hypot(gx, gy)) / m ** 2)
    closed = gamma_fn((d + 1) / 2) / gamma_fn(d / 2) / np.sqrt(t)
    return quad, closed


# -- initial-condition mini-language -----------------------------------------

_NUM = r"[+-]?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?"
_TERM = re.compile(
    rf"\s*(?P<sign>[+-])?\s*(?:"
    rf"(?:const\s+(?P<const>{_NUM}))"
    rf"|(?:(?P<amp>{_NUM})\s*\*\s*(?P<fn>sin|cos)\s*\(\s*2\s*pi\s*\*\s*\(\s*"
    rf"(?P<a>{_NUM})\s*\*\s*x1\s*(?P<bsign>[+-])\s*(?P<b>{_NUM})\s*\*\s*x2\s*\)\s*\))"
    rf")\s*"
)


@dataclass(frozen=True)
class TrigTerm:
    kind: str  # "sin", "cos" or "const"
    amplitude: float
    a: float = 0.0
    b: float = 0.0

    def __call__(self, x1, x2):
        if self.kind == "const":
            return self.amplitude + 0.0 * x1
        fn = np.sin if self.kind == "sin" else np.cos
        return self.amplitude * fn(2 * np.pi * (self.a * x1 + self.b * x2))

    def render(self):
        if self.kind == "const":
            return f"const {self.amplitude!r}"
        b = self.b
        bs = "+" if b >= 0 else "-"
        return f"{self.amplitude!r}*{self.kind}(2pi*({self.a!r}*x1{bs}{abs(b)!r}*x2))"


def parse_initial_condition(text):
    """Parse ``A*sin(2pi*(a*x1+b*x2)) + A*cos(...) + const C`` into terms."""
    pos = 0
    terms = []
    text = text.strip()
    if not text:
        raise InitialConditionError("empty initial-condition expression")
    while pos < len(text):
        mt = _TERM.match(text, pos)
        if not mt or mt.end() == pos:
            raise InitialConditionError(f"malformed initial-condition term at column {pos + 1}: "
                                        f"{text[pos:pos + 30]!r}")
        if terms and mt.group("sign") is None:
            raise InitialConditionError(f"missing '+' or '-' before column {pos + 1}")
        sign = -1.0 if mt.group("sign") == "-" else 1.0
        if mt.group("const") is not None:
            terms.append(TrigTerm("const", sign * float(mt.group("const"))))
        else:
            b = float(mt.group("b")) * (-1.0 if mt.group("bsign") == "-" else 1.0)
            a = float(mt.group("a"))
            if a != int(a) or b != int(b):
                raise InitialConditionError("wavenumbers must be integers for a periodic field")
            terms.append(TrigTerm(mt.group("fn"), sign * float(mt.group("amp")), a, b))
        pos = mt.end()
    return terms


def render_initial_condition(terms):
    out = " + ".join(t.render() for t in terms)
    return out.replace("+ -", "- ")


def field_from_terms(terms, m):
    x1, x2 = grid(m)
    vals = np.zeros((m, m))
    for t in terms:
        vals = vals + t(x1, x2)
    return SpectralField2D(vals)


def field_from_spec(text, m):
    return field_from_terms(parse_initial_condition(text), m)
