"""Matplotlib figures written next to the CSV/JSON outputs."""
from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# no timestamps or version strings, so reruns give identical bytes
_PNG_META = {"Software": None}
_TARGET_COLORS = {"label1": "tab:blue", "label2": "tab:orange"}

plt.rcParams.update({
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
})


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata=_PNG_META, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_accuracy_curve(points, path) -> Path:
    """Accuracy vs training-set size; dotted = baseline, solid = +M_d."""
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    series = {}
    for p in points:
        series.setdefault((p.variant, p.target), []).append((p.sample_size, p.mean_accuracy))
    for (variant, target), xy in sorted(series.items()):
        xy = sorted(xy)
        ls = ":" if variant == "baseline" else "-"
        name = "X1" if target == "label1" else "X2"
        ax.plot([a for a, _ in xy], [b for _, b in xy], ls, marker="o", ms=3,
                color=_TARGET_COLORS.get(target), label=f"{name} {variant.replace('_', ' ')}")
    ax.set_xlabel("training subjects")
    ax.set_ylabel("26-class accuracy")
    ax.set_ylim(0, 1)
    ax.legend(frameon=False, fontsize=7)
    return _save(fig, path)


def plot_matrix(m, names, path, title="", cmap="viridis") -> Path:
    m = np.asarray(m, dtype=float)
    fig, ax = plt.subplots(figsize=(1.0 + 0.6 * len(m), 0.8 + 0.6 * len(m)))
    im = ax.imshow(np.ma.masked_invalid(m), cmap=cmap)
    ax.set_xticks(range(len(names)), names, rotation=45, ha="right")
    ax.set_yticks(range(len(names)), names)
    ax.set_xlabel("target j")
    ax.set_ylabel("source i")
    for (i, j), v in np.ndenumerate(m):
        if np.isfinite(v):
            ax.text(j, i, f"{v:.2f}", ha="center", va="center", fontsize=7, color="w")
    if title:
        ax.set_title(title)
    fig.colorbar(im, ax=ax, shrink=0.8)
    return _save(fig, path)


def plot_centrality(c_t, c_d, names, path) -> Path:
    x = np.arange(len(names))
    fig, ax = plt.subplots(figsize=(1.5 + 0.7 * len(names), 3.0))
    ax.bar(x - 0.2, c_t, 0.4, label="totipotency $C_t$")
    ax.bar(x + 0.2, c_d, 0.4, label="differentiation $C_d$")
    ax.axhline(0, color="k", lw=0.5)
    ax.set_xticks(x, names)
    ax.legend(frameon=False, fontsize=7)
    return _save(fig, path)


def plot_loss_log(csv_path, path, column: str = "loss_total") -> Path:
    steps, vals = [], []
    with Path(csv_path).open() as fh:
        for row in csv.DictReader(fh):
            steps.append(int(row["step"]))
            vals.append(float(row[column]))
    fig, ax = plt.subplots(figsize=(4.5, 3.0))
    ax.plot(steps, vals, lw=0.6, alpha=0.4)
    if len(vals) >= 20:
        k = max(5, len(vals) // 50)
        smooth = np.convolve(vals, np.ones(k) / k, mode="valid")
        ax.plot(steps[k - 1:], smooth, lw=1.2)
    ax.set_xlabel("step")
    ax.set_ylabel(column.replace("_", " "))
    ax.set_yscale("log")
    return _save(fig, path)
