"""PNG figures written next to the CLI's tabular outputs (Agg backend, no display)."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .fusion import DepthImage  # noqa: E402

DPI = 110


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    # fixed metadata keeps the PNG bytes reproducible
    fig.savefig(path, dpi=DPI, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_cycles(rows: list[dict], path) -> Path:
    """Cumulative picks and charged takt per cycle, one line per repetition."""
    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(9, 3.4))
    by_rep = defaultdict(list)
    for r in rows:
        by_rep[r["repetition"]].append(r)
    for rep, rs in sorted(by_rep.items()):
        cyc = [r["cycle"] for r in rs]
        picked = np.cumsum([r["grasped_id"] != "" for r in rs])
        ax0.step(cyc, picked, where="post", lw=0.9, alpha=0.7)
        ax1.plot(cyc, [r["charged_ms"] for r in rs], ".", ms=3, alpha=0.6)
    ax0.set_xlabel("cycle")
    ax0.set_ylabel("objects picked")
    ax1.set_xlabel("cycle")
    ax1.set_ylabel("charged takt [ms]")
    return _save(fig, Path(path))


def plot_compare(table: list[dict], path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.4))
    names = [r["strategy"] for r in table]
    rates = [r["complete_rate"] for r in table]
    ax.bar(range(len(names)), rates, color=["C0", "C1", "C2"][: len(names)])
    ax.set_xticks(range(len(names)), [n.replace("_", "\n") for n in names])
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("mean complete rate")
    for i, r in enumerate(rates):
        ax.text(i, r + 0.01, f"{r:.3f}", ha="center", va="bottom", fontsize=8)
    return _save(fig, Path(path))


def plot_tuning(rows: list[dict], path, selected: dict | None = None) -> Path:
    """Mean recognized count over (v, n), averaged across paths and intervals."""
    vs = sorted({r["v"] for r in rows})
    ns = sorted({r["n"] for r in rows})
    grid = np.full((len(ns), len(vs)), np.nan)
    acc = defaultdict(list)
    for r in rows:
        acc[(r["n"], r["v"])].append(r["recognized_count"])
    for (n, v), c in acc.items():
        grid[ns.index(n), vs.index(v)] = np.mean(c)
    fig, ax = plt.subplots(figsize=(5.5, 3.8))
    im = ax.imshow(grid, origin="lower", aspect="auto", cmap="viridis")
    ax.set_xticks(range(len(vs)), [f"{v:.1f}" for v in vs])
    ax.set_yticks(range(len(ns)), [str(n) for n in ns])
    ax.set_xlabel("speed fraction v")
    ax.set_ylabel("views n")
    fig.colorbar(im, ax=ax, label="mean recognized")
    if selected is not None and selected["v"] in vs and selected["n"] in ns:
        ax.plot(vs.index(selected["v"]), ns.index(selected["n"]), "r*", ms=12)
    return _save(fig, Path(path))


def plot_fused(fused: DepthImage, votes: np.ndarray, path) -> Path:
    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(9, 3.4))
    depth = np.where(fused.valid, fused.depth, np.nan)
    im0 = ax0.imshow(depth, cmap="viridis")
    ax0.set_title("fused depth [mm]", fontsize=9)
    fig.colorbar(im0, ax=ax0)
    im1 = ax1.imshow(votes, cmap="magma", vmin=0)
    ax1.set_title("votes", fontsize=9)
    fig.colorbar(im1, ax=ax1)
    for ax in (ax0, ax1):
        ax.set_xticks([])
        ax.set_yticks([])
    return _save(fig, Path(path))
