"""Static SVG figures from result CSVs (each figure's data CSV is written alongside)."""
from __future__ import annotations

import csv
import shutil
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

KINDS = ("pareto", "efficiency", "gsf", "consistency")


def read_rows(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def _num(rows, key):
    return np.array([float(r[key]) for r in rows])


def _cells(rows):
    """Drop summary rows and average tasks within each (variant, fraction, sigma, seed) cell."""
    groups = defaultdict(list)
    for r in rows:
        if r.get("variant") == "summary" or r.get("task") == "mean":
            continue
        groups[(r["variant"], float(r.get("fraction") or 1), float(r.get("sigma") or 0), r.get("seed"))].append(r)
    return {k: (np.mean(_num(v, "target_loss")), np.mean(_num(v, "energy"))) for k, v in groups.items()}


def pareto(rows, ax):
    cells = _cells(rows)
    for variant in sorted({k[0] for k in cells}):
        pts = np.array([v for k, v in cells.items() if k[0] == variant])
        ax.scatter(pts[:, 1], pts[:, 0], label=variant)
    ax.set_xlabel("energy J")
    ax.set_ylabel("target loss")
    ax.set_yscale("log")


def efficiency(rows, ax):
    cells = _cells(rows)
    for variant in sorted({k[0] for k in cells}):
        by_frac = defaultdict(list)
        for k, v in cells.items():
            if k[0] == variant:
                by_frac[k[1]].append(v[0])
        fr = sorted(by_frac)
        ax.plot(fr, [np.mean(by_frac[f]) for f in fr], marker="o", label=variant)
    ax.set_xlabel("training data fraction")
    ax.set_ylabel("target loss")
    ax.set_xscale("log")
    ax.set_yscale("log")


def gsf(rows, ax):
    """Rows with columns ``system, round, energy`` (one per round, optionally per seed)."""
    by_sys = defaultdict(lambda: defaultdict(list))
    for r in rows:
        by_sys[r["system"]][int(r["round"])].append(float(r["energy"]))
    for system, d in sorted(by_sys.items()):
        rounds = sorted(d)
        ax.plot(rounds, [np.mean(d[k]) for k in rounds], marker="o", label=system)
    ax.set_xlabel("GSF round")
    ax.set_ylabel("mean test energy")


def consistency(rows, ax):
    """Rows from the consistency report: ``task, t, dim, abs_diff``."""
    tasks = int(max(_num(rows, "task"))) + 1
    L = int(max(_num(rows, "t"))) + 1
    grid = np.zeros((tasks, L))
    count = np.zeros((tasks, L))
    for r in rows:
        i, t = int(r["task"]), int(r["t"])
        grid[i, t] += float(r["abs_diff"])
        count[i, t] += 1
    im = ax.imshow(grid / np.maximum(count, 1), aspect="auto", cmap="viridis")
    ax.figure.colorbar(im, ax=ax, label="|induced - sampled|")
    ax.set_xlabel("time step")
    ax.set_ylabel("task")


def plot(kind: str, csv_path, out_dir) -> Path:
    if kind not in KINDS:
        raise ValueError(f"unknown plot kind {kind!r}; expected one of {KINDS}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = read_rows(csv_path)
    if not rows:
        raise ValueError(f"{csv_path} holds no rows")
    fig, ax = plt.subplots(figsize=(5, 4))
    globals()[kind](rows, ax)
    if ax.get_legend_handles_labels()[0]:
        ax.legend()
    fig.tight_layout()
    svg = out / f"{kind}.svg"
    fig.savefig(svg, format="svg")
    plt.close(fig)
    data = out / f"{kind}.csv"
    if Path(csv_path).resolve() != data.resolve():
        shutil.copyfile(csv_path, data)
    return svg
