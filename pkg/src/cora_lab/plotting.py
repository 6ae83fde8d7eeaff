"""Figures written next to the CSV reports.  CSV stays the data contract."""

from __future__ import annotations

import math
from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

REGIME_COLORS = {
    "lora": "#4c72b0",
    "cora_fb": "#dd8452",
    "cora_tb": "#c44e52",
    "ablate_zeros_frozen": "#8c8c8c",
    "ablate_ones_frozen": "#937860",
    "ablate_random_frozen": "#55a868",
}


def pretty_figure(width=8, height=None, ncols=1):
    """Figure and axes with readable font sizes; height defaults to width * golden ratio."""
    golden_ratio = (math.sqrt(5) - 1.0) / 2.0
    if not height:
        height = width * golden_ratio
    plt.rcParams.update({"font.size": 11, "axes.titlesize": 12, "axes.labelsize": 11,
                         "legend.fontsize": 9, "svg.hashsalt": "cora_lab"})
    fig, axes = plt.subplots(1, ncols, figsize=(width, height), facecolor="w", squeeze=False)
    return fig, axes[0]


def _save(fig, path):
    fig.tight_layout()
    # no timestamp in the metadata so reruns give identical files
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)


def plot_variance_curves(curve_rows, path, thresholds=(0.999,)):
    """PCA (left) and SVD (right) cumulative explained variance."""
    by_method = defaultdict(list)
    for row in curve_rows:
        by_method[row["method"]].append((int(row["components"]), float(row["explained"])))
    fig, axes = pretty_figure(width=10, height=4, ncols=2)
    for ax, method, title in zip(axes, ("pca", "svd"), ("PCA: covariance eigenvalues", "SVD: squared singular values")):
        pts = sorted(by_method.get(method, []))
        if not pts:
            continue
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker=".", color="#4c72b0")
        for t in thresholds:
            ax.axhline(t, ls="--", lw=0.8, color="#c44e52")
            k = next((c for c, e in pts if e >= t), None)
            if k is not None:
                ax.axvline(k, ls=":", lw=0.8, color="#c44e52")
                ax.annotate(f"{k} @ {t:g}", (k, t), textcoords="offset points", xytext=(5, -14))
        ax.set_title(title)
        ax.set_xlabel("components")
        ax.set_ylabel("cumulative explained variance")
        ax.set_ylim(0, 1.02)
    _save(fig, path)


def plot_rank_sweep(summary_rows, path):
    """Mean final eval loss against rank, one line per regime, min/max as error bars."""
    fig, (ax,) = pretty_figure()
    by_regime = defaultdict(list)
    for row in summary_rows:
        if row["rank"] == "all":
            continue
        by_regime[row["regime"]].append(row)
    for regime, rows in sorted(by_regime.items()):
        rows = sorted(rows, key=lambda r: int(r["rank"]))
        x = [int(r["rank"]) for r in rows]
        y = [float(r["mean_final_eval_loss"]) for r in rows]
        lo = [yy - float(r["min_final_eval_loss"]) for yy, r in zip(y, rows)]
        hi = [float(r["max_final_eval_loss"]) - yy for yy, r in zip(y, rows)]
        ax.errorbar(x, y, yerr=[lo, hi], marker="o", capsize=3, label=regime,
                    color=REGIME_COLORS.get(regime))
    ax.set_xscale("log", base=2)
    ranks = sorted({int(r["rank"]) for rows in by_regime.values() for r in rows})
    ax.set_xticks(ranks, [str(r) for r in ranks])
    ax.minorticks_off()
    ax.set_yscale("log")
    ax.set_xlabel("adapter rank r")
    ax.set_ylabel("final eval loss (nats)")
    ax.legend()
    _save(fig, path)


def plot_ablation(table_rows, path):
    """Final eval loss per regime, one dot per seed, bar at the mean."""
    fig, (ax,) = pretty_figure()
    by_regime = defaultdict(list)
    for row in table_rows:
        if row.get("status", "ok") == "ok":
            by_regime[row["regime"]].append(float(row["final_eval_loss"]))
    names = list(by_regime)
    for i, name in enumerate(names):
        vals = by_regime[name]
        color = REGIME_COLORS.get(name, "#4c72b0")
        ax.bar(i, sum(vals) / len(vals), color=color, alpha=0.4)
        ax.scatter([i] * len(vals), vals, color=color, zorder=3, s=14)
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=25, ha="right")
    ax.set_yscale("log")
    ax.set_ylabel("final eval loss (nats)")
    _save(fig, path)


def plot_training_curves(metric_rows, path):
    fig, (ax,) = pretty_figure()
    runs = defaultdict(list)
    for row in metric_rows:
        runs[(row["regime"], row["rank"], row["seed"])].append((int(row["step"]), float(row["eval_loss"])))
    seen = set()
    for (regime, rank, seed), pts in sorted(runs.items(), key=lambda kv: tuple(map(str, kv[0]))):
        label = regime if regime not in seen else None
        seen.add(regime)
        ax.plot([p[0] for p in pts], [p[1] for p in pts], lw=1, alpha=0.7,
                color=REGIME_COLORS.get(regime), label=label)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("eval loss (nats)")
    ax.legend()
    _save(fig, path)
