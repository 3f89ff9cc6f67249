"""Figure rendering for the report commands.

Each CLI report writes a PNG next to its CSV. Figures are a convenience view
of the delimited output, drawn with a fixed style so reruns produce the same
image for the same data.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_FIG_KW = dict(dpi=130, bbox_inches="tight")


def _save(fig, path):
    fig.savefig(str(path), **_FIG_KW)
    plt.close(fig)


def heatmap_figure(taus, zetas, err, path, title="mean final error"):
    """Error heatmap over (tau, zeta*); one cell per grid point."""
    fig, ax = plt.subplots(figsize=(5.4, 4.4))
    im = ax.imshow(np.asarray(err), origin="lower", aspect="auto", cmap="viridis")
    ax.set_xticks(range(len(taus)), [f"{t:g}" for t in taus])
    ax.set_yticks(range(len(zetas)), [f"{z:g}" for z in zetas])
    ax.set_xlabel("second-order heterogeneity knob (tau)")
    ax.set_ylabel("first-order heterogeneity knob (zeta*)")
    ax.set_title(title)
    fig.colorbar(im, ax=ax)
    _save(fig, path)


def comm_complexity_figure(taus, mean_rounds, stderr, path):
    fig, ax = plt.subplots(figsize=(5.4, 4.0))
    ax.errorbar(taus, mean_rounds, yerr=stderr, marker="o", lw=1.4, capsize=3)
    ax.set_xlabel("second-order heterogeneity knob (tau)")
    ax.set_ylabel("mean rounds to target")
    ax.set_title("communication complexity vs heterogeneity")
    ax.grid(alpha=0.3)
    _save(fig, path)


def fixed_point_figure(rows, path):
    """log10 fixed-point discrepancy vs K, one line per step-size family."""
    fig, ax = plt.subplots(figsize=(5.8, 4.2))
    families = sorted({r["family"] for r in rows})
    for fam in families:
        ks = [r["K"] for r in rows if r["family"] == fam]
        ds = [r["discrepancy"] for r in rows if r["family"] == fam]
        with np.errstate(divide="ignore"):
            logs = np.log10(np.maximum(np.asarray(ds, dtype=float), 1e-300))
        ax.plot(ks, logs, marker=".", label=fam)
    ax.set_xlabel("local steps K")
    ax.set_ylabel("log10 ||x_inf - x*||")
    ax.set_title("fixed-point discrepancy vs local steps")
    ax.legend()
    ax.grid(alpha=0.3)
    _save(fig, path)


def regret_figure(series, path):
    """log-log average regret vs horizon, one line per algorithm."""
    fig, ax = plt.subplots(figsize=(5.4, 4.0))
    for name, ts, regrets in series:
        ts = np.asarray(ts, dtype=float)
        rg = np.asarray(regrets, dtype=float)
        ok = rg > 0
        if ok.any():
            ax.loglog(ts[ok], rg[ok], marker="o", lw=1.4, label=name)
    ax.set_xlabel("horizon T")
    ax.set_ylabel("average regret")
    ax.set_title("regret vs horizon")
    ax.legend()
    ax.grid(alpha=0.3, which="both")
    _save(fig, path)
