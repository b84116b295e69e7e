"""Periodized Biot-Savart kernel on the unit torus and its matrix potential.

Conventions
-----------
* Torus points live in ``[-1/2, 1/2)^2``; Fourier modes are ``exp(2 pi i k.x)``.
* ``K = grad_perp G`` with ``Laplace G = delta - 1``, so
  ``K_hat(k) = -i k_perp / (2 pi |k|^2)`` and ``K_hat(0) = 0``.
* ``x_perp = (-x2, x1)``.
* ``V0`` is a 2x2 matrix field with ``sum_i d_i V0[i, j] = K[j]``
  (divergence taken over the first index) and singular part
  ``x (outer) x_perp / (2 pi |x|^2)``.

Tables are filled by an Ewald split: a Gaussian-screened real-space image
sum plus a rapidly decaying reciprocal series synthesized by FFT onto the
table grid. Evaluation adds the exact free-space part to a Catmull-Rom
(C^1, bicubic) interpolant of the smooth correction.
"""

from dataclasses import dataclass

import numba as nb
import numpy as np

from . import checkpoint

TWO_PI = 2.0 * np.pi
PAD = 2
NEAR_FIELD_RADIUS = 0.05
# exp(-_EWALD_DIGITS) bounds both truncated tails
_EWALD_DIGITS = 36.84


class KernelError(ValueError):
    pass


def wrap(x):
    """Map coordinates to ``[-1/2, 1/2)``."""
    x = np.asarray(x, dtype=np.float64)
    return x - np.floor(x + 0.5)


def perp(x):
    x = np.asarray(x, dtype=np.float64)
    return np.stack([-x[..., 1], x[..., 0]], axis=-1)


def free_kernel(x):
    """``x_perp / (2 pi |x|^2)``, zero at the origin."""
    x = np.asarray(x, dtype=np.float64)
    r2 = np.sum(x * x, axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        f = np.where(r2 > 0, 1.0 / (TWO_PI * r2), 0.0)
    return perp(x) * f[..., None]


def _quad(x):
    """Symmetric traceless part of ``x (outer) x_perp``."""
    x1, x2 = x[..., 0], x[..., 1]
    d = 0.5 * (x1 * x1 - x2 * x2)
    return np.stack([np.stack([-x1 * x2, d], -1), np.stack([d, x1 * x2], -1)], -2)


# antisymmetric remainder of x (outer) x_perp / |x|^2
_ANTISYM = np.array([[0.0, 0.5], [-0.5, 0.0]])


def free_v0(x):
    """Singular part ``x (outer) x_perp / (2 pi |x|^2)``; zero at the origin."""
    x = np.asarray(x, dtype=np.float64)
    r2 = np.sum(x * x, axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        f = np.where(r2 > 0, 1.0 / r2, 0.0)
    out = _quad(x) * f[..., None, None] + _ANTISYM * (r2 > 0)[..., None, None]
    return out / TWO_PI


# -- Ewald construction ------------------------------------------------------

def _ewald_params(cutoff):
    a = _EWALD_DIGITS / cutoff ** 2
    reach = np.sqrt((_EWALD_DIGITS + 2.5) * a) / np.pi
    n_img = int(np.ceil(reach + 1.5))
    return a, n_img


def _nodes(resolution):
    return -0.5 + np.arange(resolution) / resolution


def _node_grid(resolution):
    g = _nodes(resolution)
    return np.stack(np.meshgrid(g, g, indexing="ij"), axis=-1)


def _mode_grid(resolution, cutoff):
    k = np.fft.fftfreq(resolution, 1.0 / resolution)
    k1, k2 = np.meshgrid(k, k, indexing="ij")
    keep = (np.abs(k1) <= cutoff) & (np.abs(k2) <= cutoff)
    return k1, k2, keep


def _synthesize(coef, resolution):
    # grid starts at -1/2, hence the (-1)^(k1+k2) shift
    k1, k2, _ = _mode_grid(resolution, resolution)
    shift = np.where((k1 + k2) % 2 == 0, 1.0, -1.0)
    shift = shift.reshape(shift.shape + (1,) * (coef.ndim - 2))
    return np.real(np.fft.ifft2(coef * shift, axes=(0, 1))) * resolution ** 2


def _ewald_gamma(resolution, cutoff):
    """Smooth corrections gamma = K - free and Gamma = V0 - free_v0 at table nodes."""
    a, n_img = _ewald_params(cutoff)
    x = _node_grid(resolution)
    gam = np.zeros(x.shape)
    Gam = np.zeros(x.shape[:-1] + (2, 2))
    for n1 in range(-n_img, n_img + 1):
        for n2 in range(-n_img, n_img + 1):
            d = x - np.array([n1, n2], dtype=float)
            r2 = np.sum(d * d, axis=-1)
            with np.errstate(divide="ignore", invalid="ignore"):
                inv = np.where(r2 > 0, 1.0 / r2, 0.0)
            screen = np.exp(-np.pi ** 2 * r2 / a)
            if n1 == 0 and n2 == 0:
                # self image minus the free-space part: smooth through the origin
                screen = np.expm1(-np.pi ** 2 * r2 / a)
            gam += perp(d) * (inv * screen / TWO_PI)[..., None]
            Gam += _quad(d) * (inv * screen / TWO_PI)[..., None, None]
    # reciprocal series
    k1, k2, keep = _mode_grid(resolution, cutoff)
    kk = k1 ** 2 + k2 ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        w = np.where(keep & (kk > 0), np.exp(-a * kk) / kk, 0.0)
    ck = np.stack([1j * k2 * w / TWO_PI, -1j * k1 * w / TWO_PI], axis=-1)
    gam += _synthesize(ck, resolution)
    kv = np.stack([k1, k2], axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        wv = np.where(kk > 0, w * (1.0 + a * kk) / kk, 0.0) / (2.0 * np.pi ** 2)
    cv = -_quad(kv) * wv[..., None, None]
    Gam += _synthesize(cv.astype(complex), resolution)
    return gam, Gam


def _pad_correction(table_nodes, correction, free_fn, resolution):
    """Extend a smooth correction table by ghost nodes beyond the seam.

    Outside the fundamental domain the correction is continued as
    ``full(wrapped x) - free(x)``, which keeps it smooth across the seam.
    """
    h = 1.0 / resolution
    idx = np.arange(-PAD, resolution + PAD)
    xs = -0.5 + idx * h
    X = np.stack(np.meshgrid(xs, xs, indexing="ij"), axis=-1)
    I1, I2 = np.meshgrid(idx % resolution, idx % resolution, indexing="ij")
    inside = (idx >= 0) & (idx < resolution)
    inner = inside[:, None] & inside[None, :]
    core = correction[I1, I2]
    padded = table_nodes[I1, I2] - free_fn(X)
    mask = inner.reshape(inner.shape + (1,) * (core.ndim - 2))
    padded = np.where(mask, core, padded)
    return np.ascontiguousarray(padded.reshape(padded.shape[0], padded.shape[1], -1))


# -- interpolation -----------------------------------------------------------

@nb.njit(cache=True, inline="always")
def _cr_weights(t):
    t2 = t * t
    t3 = t2 * t
    return (0.5 * (-t3 + 2.0 * t2 - t),
            0.5 * (3.0 * t3 - 5.0 * t2 + 2.0),
            0.5 * (-3.0 * t3 + 4.0 * t2 + t),
            0.5 * (t3 - t2))


@nb.njit(cache=True)
def _interp_one(table, res, x1, x2, out):
    s1 = (x1 + 0.5) * res
    s2 = (x2 + 0.5) * res
    i1 = int(np.floor(s1))
    i2 = int(np.floor(s2))
    a0, a1, a2, a3 = _cr_weights(s1 - i1)
    b0, b1, b2, b3 = _cr_weights(s2 - i2)
    wa = (a0, a1, a2, a3)
    wb = (b0, b1, b2, b3)
    nc = table.shape[2]
    for c in range(nc):
        out[c] = 0.0
    for p in range(4):
        row = i1 - 1 + p + 2
        for q in range(4):
            w = wa[p] * wb[q]
            col = i2 - 1 + q + 2
            for c in range(nc):
                out[c] += w * table[row, col, c]


@nb.njit(cache=True)
def _wrap1(v):
    return v - np.floor(v + 0.5)


@nb.njit(cache=True)
def _eval_k_points(gamma_pad, res, pts, out):
    buf = np.empty(2)
    for n in range(pts.shape[0]):
        x1 = _wrap1(pts[n, 0])
        x2 = _wrap1(pts[n, 1])
        r2 = x1 * x1 + x2 * x2
        if r2 == 0.0:
            out[n, 0] = 0.0
            out[n, 1] = 0.0
            continue
        _interp_one(gamma_pad, res, x1, x2, buf)
        f = 1.0 / (2.0 * np.pi * r2)
        out[n, 0] = -x2 * f + buf[0]
        out[n, 1] = x1 * f + buf[1]


@nb.njit(cache=True)
def kernel_at(gamma_pad, res, d1, d2, out):
    """K at a single separation ``(d1, d2)``; writes into ``out[0:2]``."""
    x1 = d1 - np.floor(d1 + 0.5)
    x2 = d2 - np.floor(d2 + 0.5)
    r2 = x1 * x1 + x2 * x2
    if r2 == 0.0:
        out[0] = 0.0
        out[1] = 0.0
        return
    _interp_one(gamma_pad, res, x1, x2, out)
    f = 1.0 / (2.0 * np.pi * r2)
    out[0] += -x2 * f
    out[1] += x1 * f


@nb.njit(cache=True)
def _eval_v0_points(Gam_pad, res, pts, out):
    buf = np.empty(4)
    for n in range(pts.shape[0]):
        x1 = _wrap1(pts[n, 0])
        x2 = _wrap1(pts[n, 1])
        _interp_one(Gam_pad, res, x1, x2, buf)
        r2 = x1 * x1 + x2 * x2
        if r2 > 0.0:
            f = 1.0 / (2.0 * np.pi * r2)
            d = 0.5 * (x1 * x1 - x2 * x2)
            buf[0] += -x1 * x2 * f
            buf[1] += d * f + 0.5 / (2.0 * np.pi)
            buf[2] += d * f - 0.5 / (2.0 * np.pi)
            buf[3] += x1 * x2 * f
        for c in range(4):
            out[n, c] = buf[c]


# -- domain types ------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class KernelModel:
    """Tabulated periodic Biot-Savart kernel ``K`` and its smooth correction ``gamma``."""

    spectral_cutoff: int
    table_resolution: int
    k_table: np.ndarray
    gamma_table: np.ndarray
    lattice_truncation_radius: int = 30
    gamma_padded: np.ndarray = None

    @property
    def h(self):
        return 1.0 / self.table_resolution

    def __call__(self, x):
        return eval_K(self, x)

    def save(self, path):
        checkpoint.write_kernel_tables(path, self.spectral_cutoff, self.table_resolution,
                                       self.k_table, self.gamma_table)

    @classmethod
    def load(cls, path):
        cutoff, res, k_table, gamma_table = checkpoint.read_kernel_tables(path)
        return _assemble_kernel(cutoff, res, k_table, gamma_table)


@dataclass(frozen=True, eq=False)
class MatrixFieldV0:
    """Matrix potential with ``div V0 = K``; ``Gamma`` is its smooth part."""

    table_resolution: int
    v0_table: np.ndarray
    gamma_matrix_table: np.ndarray
    gamma_padded: np.ndarray = None


@dataclass(frozen=True, eq=False)
class TensorKernel:
    """Weighted two-species kernel on ``T^2 x T^2``."""

    base: KernelModel
    v0: MatrixFieldV0
    alpha_plus: float
    alpha_minus: float


def _validate_sizes(spectral_cutoff, table_resolution):
    if table_resolution < 64 or table_resolution & (table_resolution - 1):
        raise KernelError(f"table_resolution must be a power of two >= 64, got {table_resolution}")
    if spectral_cutoff < 8:
        raise KernelError(f"spectral_cutoff must be >= 8, got {spectral_cutoff}")
    if spectral_cutoff > table_resolution // 2:
        raise KernelError(f"spectral_cutoff {spectral_cutoff} exceeds the table Nyquist mode "
                          f"{table_resolution // 2}")


def _assemble_kernel(cutoff, res, k_table, gamma_table, radius=30):
    padded = _pad_correction(k_table, gamma_table, free_kernel, res)
    return KernelModel(cutoff, res, k_table, gamma_table, radius, padded)


def build_kernel_model(spectral_cutoff=32, table_resolution=256):
    """Tabulate ``K`` and ``gamma`` on a ``table_resolution^2`` node grid."""
    _validate_sizes(spectral_cutoff, table_resolution)
    gam, _ = _ewald_gamma(table_resolution, spectral_cutoff)
    x = _node_grid(table_resolution)
    k_table = gam + free_kernel(x)
    return _assemble_kernel(spectral_cutoff, table_resolution, k_table, gam)


def build_v0_field(spectral_cutoff=32, table_resolution=256):
    _validate_sizes(spectral_cutoff, table_resolution)
    _, Gam = _ewald_gamma(table_resolution, spectral_cutoff)
    x = _node_grid(table_resolution)
    v0 = Gam + free_v0(x)
    padded = _pad_correction(v0, Gam, free_v0, table_resolution)
    return MatrixFieldV0(table_resolution, v0, Gam, padded)


def build_tensor_kernel(alpha_plus, alpha_minus, spectral_cutoff=32, table_resolution=256,
                        base=None, v0=None):
    if alpha_plus < 0 or alpha_minus < 0:
        raise KernelError("species weights must be nonnegative")
    base = base or build_kernel_model(spectral_cutoff, table_resolution)
    v0 = v0 or build_v0_field(base.spectral_cutoff, base.table_resolution)
    return TensorKernel(base, v0, float(alpha_plus), float(alpha_minus))


# -- evaluation --------------------------------------------------------------

def eval_K(model, x):
    """Evaluate the periodic kernel at points of shape ``(..., 2)``."""
    x = np.asarray(x, dtype=np.float64)
    pts = np.ascontiguousarray(x.reshape(-1, 2))
    out = np.empty_like(pts)
    _eval_k_points(model.gamma_padded, model.table_resolution, pts, out)
    return out.reshape(x.shape)


def eval_gamma(model, x):
    """Interpolated smooth correction ``gamma``."""
    x = wrap(x)
    return eval_K(model, x) - free_kernel(x)


def eval_V0(field, x):
    """``V0(x)``; the singular part is taken as zero at the origin."""
    x = np.asarray(x, dtype=np.float64)
    pts = np.ascontiguousarray(x.reshape(-1, 2))
    out = np.empty((pts.shape[0], 4))
    _eval_v0_points(field.gamma_padded, field.table_resolution, pts, out)
    return out.reshape(x.shape[:-1] + (2, 2))


def eval_Kbar(tk, x, y):
    """Block 4-vector ``(a+ K(x+ - y+) - a- K(x+ - y-), a+ K(x- - y+) - a- K(x- - y-))``.

    ``x`` and ``y`` have shape ``(..., 4)`` ordered ``(x+1, x+2, x-1, x-2)``.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    xp, xm = x[..., :2], x[..., 2:]
    yp, ym = y[..., :2], y[..., 2:]
    K = tk.base
    ap, am = tk.alpha_plus, tk.alpha_minus
    top = ap * eval_K(K, xp - yp) - am * eval_K(K, xp - ym)
    bot = ap * eval_K(K, xm - yp) - am * eval_K(K, xm - ym)
    return np.concatenate([top, bot], axis=-1)


def eval_V(tk, x, y):
    """Block-diagonal 4x4 potential with ``div_x V(x, y) = Kbar(x, y)``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    ap, am = tk.alpha_plus, tk.alpha_minus
    top = ap * eval_V0(tk.v0, x[..., :2] - y[..., :2]) - am * eval_V0(tk.v0, x[..., :2] - y[..., 2:])
    bot = ap * eval_V0(tk.v0, x[..., 2:] - y[..., :2]) - am * eval_V0(tk.v0, x[..., 2:] - y[..., 2:])
    return _block_diag(top, bot)


def eval_upsilon(tk, x):
    """Diagonal potential ``diag(-a- V0(x+ - x-), a+ V0(x- - x+))``."""
    x = np.asarray(x, dtype=np.float64)
    d = x[..., :2] - x[..., 2:]
    top = -tk.alpha_minus * eval_V0(tk.v0, d)
    bot = tk.alpha_plus * eval_V0(tk.v0, -d)
    return _block_diag(top, bot)


def _block_diag(top, bot):
    out = np.zeros(top.shape[:-2] + (4, 4))
    out[..., :2, :2] = top
    out[..., 2:, 2:] = bot
    return out


def fd_divergence(fn, x, h):
    """Centered-difference divergence over the first matrix index.

    ``fn`` maps points ``(..., d)`` to matrices ``(..., d, d)``.
    """
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[-1]
    out = 0.0
    for i in range(d):
        e = np.zeros(d)
        e[i] = h
        out = out + (fn(x + e)[..., i, :] - fn(x - e)[..., i, :]) / (2.0 * h)
    return out


# -- oracle and diagnostics --------------------------------------------------

def lattice_sum_K(x, radius=30):
    """Direct image sum over ``|n| <= radius``, accumulated shell by shell.

    Each shell ``|n|^2 = s`` is closed under ``n -> -n`` and quarter turns,
    so the odd and quadrupolar parts of the tail cancel within a shell.
    The disk-summed series converges to ``K + x_perp/2``; the linear term is
    the field of the missing neutralizing background and is removed.
    """
    x = np.asarray(x, dtype=np.float64)
    n = np.arange(-radius, radius + 1)
    N1, N2 = np.meshgrid(n, n, indexing="ij")
    s = (N1 ** 2 + N2 ** 2).ravel()
    order = np.argsort(s, kind="stable")
    s = s[order]
    imgs = np.stack([N1.ravel()[order], N2.ravel()[order]], axis=-1)[s <= radius ** 2]
    s = s[s <= radius ** 2]
    bounds = np.flatnonzero(np.diff(s)) + 1
    out = np.zeros(x.shape)
    for shell in np.split(imgs, bounds):
        d = x[..., None, :] - shell
        acc = free_kernel(d).sum(axis=-2)
        out += acc
    return out - 0.5 * perp(x)


def spectral_divergence_max(cutoff):
    """Largest ``|k . K_hat(k)|`` over ``|k_i| <= cutoff`` (integer arithmetic)."""
    k = np.arange(-cutoff, cutoff + 1)
    k1, k2 = np.meshgrid(k, k, indexing="ij")
    # k . k_perp computed exactly in integers
    dot = k1 * (-k2) + k2 * k1
    return int(np.max(np.abs(dot)))


def selftest_table(resolutions=(64, 128, 256), cutoff=32, probe=64, radius=30):
    """Cross-validation rows: table kernel vs lattice-sum oracle."""
    g = (np.arange(probe) + 0.5) / probe - 0.5
    X = np.stack(np.meshgrid(g, g, indexing="ij"), axis=-1).reshape(-1, 2)
    X = X[np.hypot(X[:, 0], X[:, 1]) >= NEAR_FIELD_RADIUS]
    oracle = lattice_sum_K(X, radius)
    rows = []
    for res in resolutions:
        c = min(cutoff, res // 2)
        model = build_kernel_model(c, res)
        K = eval_K(model, X)
        err = np.max(np.abs(K - oracle))
        anti = np.max(np.abs(K + eval_K(model, -X)))
        rows.append({
            "resolution": res,
            "cutoff": c,
            "probe_points": len(X),
            "max_abs_err": float(err),
            "max_rel_err": float(err / np.max(np.abs(oracle))),
            "antisymmetry_err": float(anti),
            "k0_value": float(np.max(np.abs(eval_K(model, np.zeros(2))))),
            "half_period_value": float(np.max(np.abs(eval_K(model, np.array([0.5, 0.0]))))),
        })
    return rows
