"""Figure rendering for training and experiment reports.

Every CLI report path writes a PNG next to its CSV/JSON output. All
plotting is Agg-backend, file-only.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "figure.figsize": (6.0, 3.6),
    "figure.dpi": 120,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 9,
    "legend.frameon": False,
}


def _new_axes():
    plt.rcParams.update(STYLE)
    fig, ax = plt.subplots()
    return fig, ax


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_loss_curves(rows: list[dict], path: str | Path) -> Path:
    """Per-epoch means of every loss component."""
    fig, ax = _new_axes()
    epochs = sorted({row["epoch"] for row in rows})
    for key, label in (
        ("L_s", "shallow alignment"),
        ("L_d", "deep identification"),
        ("vib_x", "prediction bound X"),
        ("vib_y", "prediction bound Y"),
        ("total", "total"),
    ):
        series = []
        for epoch in epochs:
            values = [row[key] for row in rows if row["epoch"] == epoch]
            series.append(sum(values) / len(values))
        ax.plot(epochs, series, label=label, linewidth=1.2)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss component")
    ax.legend(ncol=2)
    return _save(fig, path)


def plot_metric_bars(rows: list[dict], metric: str, group_key: str, path: str | Path) -> Path:
    """Grouped bars, one cluster per group value, one bar per domain."""
    fig, ax = _new_axes()
    groups = sorted({row[group_key] for row in rows}, key=str)
    domains = sorted({row["domain"] for row in rows})
    width = 0.8 / max(len(domains), 1)
    for offset, domain in enumerate(domains):
        values = []
        for group in groups:
            match = [r[metric] for r in rows if r[group_key] == group and r["domain"] == domain]
            values.append(match[0] if match else 0.0)
        positions = [i + offset * width for i in range(len(groups))]
        ax.bar(positions, values, width=width, label=f"domain {domain}")
    ax.set_xticks([i + width * (len(domains) - 1) / 2 for i in range(len(groups))])
    ax.set_xticklabels([str(g) for g in groups])
    ax.set_xlabel(group_key)
    ax.set_ylabel(metric)
    ax.legend()
    return _save(fig, path)


def plot_metric_lines(rows: list[dict], metric: str, x_key: str, path: str | Path) -> Path:
    """Metric against a swept quantity (overlap ratio, grid parameter)."""
    fig, ax = _new_axes()
    domains = sorted({row["domain"] for row in rows})
    for domain in domains:
        pairs = sorted(
            (row[x_key], row[metric]) for row in rows if row["domain"] == domain
        )
        ax.plot([p[0] for p in pairs], [p[1] for p in pairs], marker="o", label=f"domain {domain}")
    ax.set_xlabel(x_key)
    ax.set_ylabel(metric)
    ax.legend()
    return _save(fig, path)
