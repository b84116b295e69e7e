import numpy as np
import pytest

from vortexlab import chaos
from vortexlab.chaos import ChaosConfig, ChaosError, EnsembleStats
from vortexlab.ns2d import SpectralField2D, grid
from vortexlab.tns import Field4D

NS = [16, 32, 64, 128, 256]


def synthetic(noise=0.0, seed=0, slope=-0.5):
    gen = np.random.default_rng(seed)
    labels = list(chaos.TEST_FUNCTIONS)
    weak = {}
    for j, lab in enumerate(labels):
        for n in NS:
            weak[(n, lab, 0.5)] = (0.3 + 0.1 * j) * n ** slope * (1 + noise * gen.normal())
    return EnsembleStats(NS, 50, labels, [0.0, 0.5], weak)


def test_fit_exact_power_law():
    fit = chaos.fit_rate(synthetic())
    assert abs(fit.slope + 0.5) < 1e-12
    assert fit.confidence_halfwidth < 1e-12
    assert fit.n_range == (16, 256)


def test_fit_noisy_power_law():
    fit = chaos.fit_rate(synthetic(noise=0.05, seed=3))
    assert abs(fit.slope + 0.5) <= fit.confidence_halfwidth
    assert 0 < fit.confidence_halfwidth < 0.05


def test_fit_is_seeded():
    a = chaos.fit_rate(synthetic(noise=0.05), seed=1)
    b = chaos.fit_rate(synthetic(noise=0.05), seed=1)
    assert a == b


def test_fit_rejections():
    labels = list(chaos.TEST_FUNCTIONS)
    few = EnsembleStats([16, 32], 50, labels, [0.5],
                        {(n, labels[0], 0.5): n ** -0.5 for n in (16, 32)})
    with pytest.raises(ChaosError):
        chaos.fit_rate(few)
    zero = EnsembleStats(NS, 50, labels, [0.5], {(n, labels[0], 0.5): 0.0 for n in NS})
    with pytest.raises(ChaosError):
        chaos.fit_rate(zero)
    with pytest.raises(ChaosError):
        chaos.fit_rate(synthetic(), t=0.25)
    with pytest.raises(ChaosError):
        EnsembleStats(NS, 10, labels, [0.5], {})


def test_kde_single_sample_is_the_bump():
    m, bw = 8, 0.15
    est = chaos.kde_marginal(np.zeros((1, 4)), bw, m)
    g = chaos._periodic_gauss(m, bw)
    g = np.roll(g, m // 2)  # node m/2 sits at x = 0
    bump = np.einsum("a,b,c,d->abcd", g, g, g, g) * m ** 4
    np.testing.assert_allclose(est.values, bump, rtol=1e-10, atol=1e-12)
    assert est.integral() == pytest.approx(1.0, abs=1e-14)


def test_kde_bandwidth_bounds():
    with pytest.raises(ChaosError):
        chaos.kde_marginal(np.zeros((5, 4)), 0.01, 8)
    with pytest.raises(ChaosError):
        chaos.kde_marginal(np.zeros((5, 4)), 0.3, 8)
    assert 1 / 16 <= chaos.default_bandwidth(10 ** 9, 16) <= 0.25
    assert chaos.default_bandwidth(1, 16) == 0.25


def test_kde_uniform_within_multinomial_error():
    m, n, bw = 8, 200_000, 0.15
    gen = np.random.default_rng(0)
    est = chaos.kde_marginal(gen.uniform(-0.5, 0.5, (n, 4)), bw, m)
    # KDE = mean of n kernels G; per-node variance (mean G^2 - 1)/n
    g = chaos._periodic_gauss(m, bw)
    var = (m ** 4 * np.sum(g ** 2) ** 4 - 1.0) / n
    expected_l1 = np.sqrt(2 / np.pi) * np.sqrt(var)
    assert np.mean(np.abs(est.values - 1.0)) <= 2 * expected_l1


def sample_product(gen, n, m=512):
    # inverse-CDF draws from (1 + 0.5 sin 2 pi x1) in the first coordinate, uniform otherwise
    xs = -0.5 + (np.arange(m) + 0.5) / m
    p = 1 + 0.5 * np.sin(2 * np.pi * xs)
    cdf = np.cumsum(p) / p.sum()
    x = gen.uniform(-0.5, 0.5, (n, 4))
    x[:, 0] = xs[np.searchsorted(cdf, gen.random(n))] + (gen.random(n) - 0.5) / m
    return x


def test_kde_error_decreases_with_samples():
    m = 8
    g = -0.5 + np.arange(m) / m
    ref = (1 + 0.5 * np.sin(2 * np.pi * g))[:, None, None, None] * np.ones((m,) * 4)
    gen = np.random.default_rng(1)
    errs = [np.mean(np.abs(chaos.kde_marginal(sample_product(gen, n), None, m).values - ref))
            for n in (10 ** 3, 10 ** 4, 10 ** 5)]
    assert errs[0] > errs[1] > errs[2]


def test_pairing_reference_exact_for_modes():
    w = SpectralField2D.from_function(lambda x, y: 2 * np.sin(2 * np.pi * x), 16)
    assert chaos.pairing_reference(w, chaos.TEST_FUNCTIONS["sin_x1"]) == pytest.approx(1.0, abs=1e-14)
    assert chaos.pairing_reference(w, chaos.TEST_FUNCTIONS["cos_x1"]) == pytest.approx(0.0, abs=1e-14)


def omega_small():
    return SpectralField2D.from_function(
        lambda x, y: np.sin(2 * np.pi * x) + 0.5 * np.cos(4 * np.pi * y), 32)


def test_initial_rms_matches_iid_fluctuation(kernel):
    # at t = 0 the pairing is a sum of i.i.d. terms; its RMS error is
    # sqrt(bias^2 + var/N), computed here by sub-cell quadrature of the marginals
    n, M = 16, 500
    cfg = ChaosConfig(omega_small(), nu=0.05, t_final=0.01, dt=0.01, seed=7, reference_dt=0.01)
    stats = chaos.run_ensemble(cfg, [n], M, kernel)
    w = cfg.omega0
    m = w.resolution
    ap, am = chaos._alphas(w, 0.05)
    rp, rm = chaos._marginals(w, 0.05)
    x1, x2 = grid(m)
    sub = (np.arange(8) + 0.5) / 8 - 0.5
    for lab, phi in chaos.TEST_FUNCTIONS.items():
        def moments(rho):
            acc1 = acc2 = 0.0
            for s1 in sub:
                for s2 in sub:
                    v = phi(np.stack([x1 + s1 / m, x2 + s2 / m], -1))
                    acc1 += np.mean(rho.values * v)
                    acc2 += np.mean(rho.values * v * v)
            return acc1 / 64, acc2 / 64
        e1p, e2p = moments(rp)
        e1m, e2m = moments(rm)
        bias = ap * e1p - am * e1m - chaos.pairing_reference(w, phi)
        var = (ap ** 2 * (e2p - e1p ** 2) + am ** 2 * (e2m - e1m ** 2)) / n
        want = np.sqrt(bias ** 2 + var)
        assert stats.weak_errors[(n, lab, 0.0)] == pytest.approx(want, rel=0.1)


def test_ensemble_independent_of_workers(kernel):
    cfg = ChaosConfig(omega_small(), nu=0.05, t_final=0.02, dt=0.01, seed=3, reference_dt=0.01)
    a = chaos.run_ensemble(cfg, [4, 8], 30, kernel, workers=1, chunk_pairs=500)
    b = chaos.run_ensemble(cfg, [4, 8], 30, kernel, workers=2, chunk_pairs=2000)
    assert a.weak_errors == b.weak_errors
    assert a.weak_ci == b.weak_ci


def test_ensemble_rejects_few_replicas(kernel):
    with pytest.raises(ChaosError):
        chaos.run_ensemble(ChaosConfig(omega_small()), [4], 10, kernel)


def test_marginal_l1_reported_with_reference(kernel):
    w = omega_small()
    cfg = ChaosConfig(w, nu=0.05, t_final=0.01, dt=0.01, seed=1, reference_dt=0.01, bandwidth=0.2)
    coarse = SpectralField2D.from_function(
        lambda x, y: np.sin(2 * np.pi * x) + 0.5 * np.cos(4 * np.pi * y), 8)
    ref = chaos.tns_reference(coarse, 0.05, 0.05, [0.01], 0.01)
    assert isinstance(ref[0.0], Field4D)
    stats = chaos.run_ensemble(cfg, [8], 1250, kernel, tns_reference=ref)
    assert set(stats.marginal_l1) == {(8, 0.0), (8, 0.01)}
    # L1 between two probability densities is at most 2
    assert all(0 < v < 2 for v in stats.marginal_l1.values())


def test_csv_writers(tmp_path):
    stats = synthetic()
    chaos.write_rate_csv(tmp_path / "rate.csv", stats)
    chaos.write_fit_csv(tmp_path / "fit.csv", chaos.fit_rate(stats))
    lines = (tmp_path / "rate.csv").read_text().splitlines()
    assert lines[0] == "N,phi_label,t,rms_error,ci"
    assert len(lines) == 1 + len(NS) * 6
    assert (tmp_path / "fit.csv").read_text().splitlines()[0] == "slope,halfwidth,n_min,n_max"


def test_zero_vorticity_pure_fluctuation(kernel):
    # omega = 0 tensorizes to uniform marginals with equal weights; the
    # weak errors are pure CLT fluctuation
    w = SpectralField2D(np.zeros((16, 16)))
    cfg = ChaosConfig(w, nu=1.0, t_final=0.02, dt=0.01, seed=2, reference_dt=0.01)
    stats = chaos.run_ensemble(cfg, [4, 8, 16, 64], 200, kernel)
    for t in (0.0, 0.02):
        fit = chaos.fit_rate(stats, t=t)
        assert abs(fit.slope + 0.5) < 0.1


def test_single_pair_unit_test_function():
    from vortexlab import sde
    gen = np.random.default_rng(0)
    X = gen.uniform(-0.5, 0.5, (40, 2, 2))
    vals = sde.pairing_batch(X, 1, 1.3, 0.4, lambda p: np.ones(p.shape[:-1]))
    assert np.all(vals == 1.3 - 0.4)
