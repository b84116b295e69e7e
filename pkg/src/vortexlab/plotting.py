"""Figures written next to the CSV outputs (Agg backend, PNG)."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_RC = {"figure.dpi": 110, "font.size": 9, "axes.grid": True, "grid.alpha": 0.3,
       "savefig.bbox": "tight"}


def _save(fig, path):
    fig.savefig(path)
    plt.close(fig)
    return path


def kernel_selftest(rows, path):
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        res = [r["resolution"] for r in rows]
        ax.loglog(res, [r["max_abs_err"] for r in rows], "o-", label="vs lattice sum")
        ax.loglog(res, [max(r["antisymmetry_err"], 1e-17) for r in rows], "s--", label="antisymmetry")
        ax.axhline(1e-6, color="k", lw=0.8, ls=":")
        ax.set_xlabel("table resolution")
        ax.set_ylabel("max abs error")
        ax.legend()
        return _save(fig, path)


def field2d(values, path, title=""):
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(4, 3.4))
        im = ax.imshow(np.asarray(values).T, origin="lower", extent=(-0.5, 0.5, -0.5, 0.5),
                       cmap="RdBu_r")
        fig.colorbar(im, ax=ax)
        ax.grid(False)
        ax.set_xlabel("$x_1$")
        ax.set_ylabel("$x_2$")
        ax.set_title(title)
        return _save(fig, path)


def extrema(times, lo, hi, path):
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        ax.plot(times, hi, label="max")
        ax.plot(times, lo, label="min")
        ax.set_xlabel("t")
        ax.legend()
        return _save(fig, path)


def particles(x_plus, x_minus, path):
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(4, 4))
        ax.scatter(*np.asarray(x_plus).T, s=4, c="tab:red", label="+")
        ax.scatter(*np.asarray(x_minus).T, s=4, c="tab:blue", label="-")
        ax.set_xlim(-0.5, 0.5)
        ax.set_ylim(-0.5, 0.5)
        ax.set_aspect("equal")
        ax.legend(loc="upper right")
        return _save(fig, path)


def entropy_balance(times, ent, balance, path):
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        ax.plot(times, ent, label="H(t)")
        ax.plot(times, balance, label=r"H(t) + $\nu\int$ I - H(0)")
        ax.axhline(0.0, color="k", lw=0.8)
        ax.set_xlabel("t")
        ax.legend()
        return _save(fig, path)


def rate(stats, fit, path):
    t = max(stats.times)
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(4.5, 3.4))
        for lab in stats.test_functions:
            pts = sorted((n, e) for (n, l, s), e in stats.weak_errors.items() if l == lab and s == t)
            ax.loglog(*zip(*pts), "o-", ms=3, lw=0.8, label=lab)
        ns = np.array(sorted(stats.n_values), dtype=float)
        ax.loglog(ns, np.exp(fit.intercept) * ns ** fit.slope, "k--",
                  label=f"slope {fit.slope:.3f} $\\pm$ {fit.confidence_halfwidth:.3f}")
        ax.set_xlabel("N")
        ax.set_ylabel("RMS weak error")
        ax.legend(fontsize=7)
        return _save(fig, path)


def convergence(ms, errors, path):
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        ax.loglog(ms, errors, "o-")
        ax.set_xlabel("m")
        ax.set_ylabel("sup |P(omegabar) - omega|")
        return _save(fig, path)
