"""Static PNG figures from a metrics CSV."""

import csv
from pathlib import Path
from typing import Dict, List

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "figure.figsize": [6.0, 3.7],
    "figure.dpi": 100,
    "axes.labelsize": 10,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.fontsize": 8,
    "legend.frameon": False,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "xtick.direction": "in",
    "ytick.direction": "in",
    "lines.linewidth": 1.4,
}

# figure name -> (y label, columns, log scale)
FIGURES = {
    "accuracy": ("test accuracy", ["gkr_acc", "mixed_acc"], False),
    "potential": ("potential", ["potential"], False),
    "stationarity": ("residual norm", ["stationarity_residual", "grad_map_norm"], True),
    "rank": ("mean layer rank", ["mean_rank"], False),
    "sparsity": ("zero fraction of p", ["p_sparsity"], False),
    "communication": ("bytes per round", ["downlink_bytes", "uplink_bytes"], True),
}


def read_columns(path) -> Dict[str, List[tuple]]:
    """Column name -> [(round, value)] for every non-empty cell, keyed per method/seed."""
    series: Dict[str, List[tuple]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            tag = f"{row['method']} s{row['seed']}"
            for col, cell in row.items():
                if col in ("round", "method", "seed") or cell in ("", None):
                    continue
                series.setdefault((col, tag), []).append((int(row["round"]), float(cell)))
    return series


def plot_metrics(csv_path, out_dir) -> List[Path]:
    """Write one PNG per figure that has data; returns the written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    series = read_columns(csv_path)
    written = []
    with plt.rc_context(STYLE):
        for name, (ylabel, cols, log) in FIGURES.items():
            curves = [(col, tag, pts) for (col, tag), pts in sorted(series.items()) if col in cols]
            if not curves:
                continue
            fig, ax = plt.subplots()
            for col, tag, pts in curves:
                xs, ys = zip(*pts)
                ax.plot(xs, ys, label=f"{col} ({tag})")
            if log and all(y > 0 for _, _, pts in curves for _, y in pts):
                ax.set_yscale("log")
            ax.set_xlabel("round")
            ax.set_ylabel(ylabel)
            ax.legend()
            fig.tight_layout()
            path = out_dir / f"{name}.png"
            fig.savefig(path)
            plt.close(fig)
            written.append(path)
    return written
