"""Plot series derived from sweep results, as CSV and as rendered figures."""

from __future__ import annotations

import csv
import io
import math
import os
from typing import Dict, List, Sequence

METRICS = ("snr_db", "ssim")


def series(rows: Sequence[dict], metric: str = "snr_db") -> Dict[tuple, Dict[str, List[tuple]]]:
    """Group rows into ``{(phantom, gamma_p): {solver: [(na, value), ...]}}``."""
    out: Dict[tuple, Dict[str, List[tuple]]] = {}
    for r in rows:
        key = (r["phantom"], r["gamma_p"])
        out.setdefault(key, {}).setdefault(r["solver"], []).append((r["na"], r[metric]))
    for by_solver in out.values():
        for pts in by_solver.values():
            pts.sort()
    return out


def _stem(phantom: str, gamma: float, metric: str) -> str:
    return f"{metric}_vs_na_{phantom}_gamma{gamma:g}"


def series_csv(by_solver: Dict[str, List[tuple]]) -> str:
    """One x column (``na``) and one y column per solver."""
    solvers = list(by_solver)
    nas = sorted({na for pts in by_solver.values() for na, _ in pts})
    lookup = {s: dict(pts) for s, pts in by_solver.items()}
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["na", *solvers])
    for na in nas:
        vals = [lookup[s].get(na, math.nan) for s in solvers]
        w.writerow([f"{na:g}", *(f"{v:.5f}" for v in vals)])
    return buf.getvalue()


def write_plot_data(rows: Sequence[dict], out_dir: str) -> List[str]:
    """Write NA-vs-metric series per (phantom, gamma_p); returns the paths."""
    paths = []
    for metric in METRICS:
        for (phantom, gamma), by_solver in series(rows, metric).items():
            path = os.path.join(out_dir, _stem(phantom, gamma, metric) + ".csv")
            with open(path, "w", newline="") as fh:
                fh.write(series_csv(by_solver))
            paths.append(path)
    return paths


def render_figures(rows: Sequence[dict], out_dir: str) -> List[str]:
    """Render one PNG per (phantom, gamma_p, metric) next to the plot data."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    labels = {"snr_db": "SNR (dB)", "ssim": "mean SSIM"}
    paths = []
    for metric in METRICS:
        for (phantom, gamma), by_solver in series(rows, metric).items():
            fig, ax = plt.subplots(figsize=(5, 3.5))
            for solver, pts in by_solver.items():
                xs, ys = zip(*pts)
                ax.plot(xs, ys, marker="o", label=solver)
            ax.set_xlabel("numerical aperture")
            ax.set_ylabel(labels[metric])
            ax.set_title(f"{phantom}, gamma_p = {gamma:g}")
            ax.grid(alpha=0.3)
            ax.legend()
            fig.tight_layout()
            path = os.path.join(out_dir, _stem(phantom, gamma, metric) + ".png")
            fig.savefig(path, dpi=100)
            plt.close(fig)
            paths.append(path)
    return paths
