"""SVG figures rendered next to the CSV outputs.

Figures are decorative; the CSV files are the contract. Rendering is made
reproducible by fixing the SVG hash salt and dropping the date metadata.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

RC = {
    "svg.hashsalt": "stib",
    "figure.figsize": (6.0, 3.8),
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
    "font.size": 9,
}


def _save(fig, path, description):
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None, "Description": description})
    plt.close(fig)


def learning_curves(metrics, path, description="", title="MAE per epoch"):
    with plt.rc_context(RC):
        fig, ax = plt.subplots()
        for split, style in (("train", "o-"), ("val", "s--")):
            pts = [(m.epoch, m.mae) for m in metrics if m.split == split]
            if pts:
                ax.plot(*zip(*pts), style, ms=3, lw=1.2, label=split)
        ax.set_xlabel("epoch")
        ax.set_ylabel("MAE (original units)")
        ax.set_title(title)
        ax.legend()
        _save(fig, path, description)


def metric_vs_workers(rows, metric, path, description="", ylabel=None):
    """One polyline per (mode, placement) series of ``metric`` against worker count."""
    series = {}
    for row in rows:
        if row.get("status") != "ok":
            continue
        key = f"{row['mode']}/{row['placement']}"
        series.setdefault(key, []).append((int(row["workers"]), float(row[metric])))
    with plt.rc_context(RC):
        fig, ax = plt.subplots()
        for key, pts in sorted(series.items()):
            pts.sort()
            ax.plot(*zip(*pts), "o-", ms=3, lw=1.2, label=key)
        ax.set_xlabel("workers")
        ax.set_ylabel(ylabel or metric)
        if series:
            ax.legend()
        _save(fig, path, description)
