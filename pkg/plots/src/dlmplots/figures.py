"""Render dlmscope analysis CSVs into the standard figure kinds.

Only the CSV contract is read, never binary traces, so this package stays
decoupled from the analyzer. Output is deterministic: Agg backend, fixed
dpi, stripped PNG metadata, no timestamps.
"""

from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .specfile import FigureSpec, SpecError

_SAVE_KW = {"format": "png", "metadata": {"Software": None}}


def _read_csv(path, required: list[str]) -> list[dict]:
    try:
        with open(path, "r", newline="") as fh:
            reader = csv.DictReader(fh)
            header = reader.fieldnames or []
            for col in required:
                if col not in header:
                    raise SpecError(f"{path}: missing required column {col!r}")
            return list(reader)
    except OSError as exc:
        raise SpecError(f"cannot read {path}: {exc}") from exc


def _finish(fig, spec: FigureSpec) -> None:
    out = Path(spec.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, dpi=spec.dpi, **_SAVE_KW)
    plt.close(fig)


def _score_grid(rows: list[dict], spec: FigureSpec):
    """scores.csv rows -> (steps, positions, grid[step, position]) averaged
    over (layer, head) cells, optionally filtered to one layer/head."""
    acc: dict[tuple[int, int], list[float]] = defaultdict(list)
    for row in rows:
        layer, head = int(row["layer"]), int(row["head"])
        if spec.layer is not None and layer != spec.layer:
            continue
        if spec.head is not None and head != spec.head:
            continue
        acc[(int(row["step"]), int(row["position"]))].append(float(row["score"]))
    if not acc:
        raise SpecError(f"{spec.input}: no rows match layer={spec.layer} head={spec.head}")
    steps = sorted({s for s, _ in acc})
    positions = sorted({p for _, p in acc})
    grid = np.zeros((len(steps), len(positions)))
    for (s, p), vals in acc.items():
        grid[steps.index(s), positions.index(p)] = float(np.mean(vals))
    return steps, positions, grid


def render_heatmap_steps(spec: FigureSpec) -> None:
    """Incoming attention per position across denoising steps."""
    rows = _read_csv(spec.input, ["step", "layer", "head", "position", "score"])
    steps, positions, grid = _score_grid(rows, spec)
    fig, ax = plt.subplots(figsize=(7, 4.5))
    shown = np.log10(grid + 1e-3) if spec.log_scale else grid
    im = ax.imshow(
        shown,
        aspect="auto",
        origin="lower",
        cmap=spec.colormap,
        extent=(positions[0] - 0.5, positions[-1] + 0.5, steps[0] - 0.5, steps[-1] + 0.5),
    )
    ax.set_xlabel("token position")
    ax.set_ylabel("denoising step")
    ax.set_title(spec.title or "incoming attention score per token across steps")
    fig.colorbar(im, ax=ax, label="log10 score" if spec.log_scale else "score")
    _finish(fig, spec)


def render_histogram(spec: FigureSpec) -> None:
    """Distribution of column scores (log-binned)."""
    rows = _read_csv(spec.input, ["bin_low", "bin_high", "count"])
    lows = np.array([float(r["bin_low"]) for r in rows])
    highs = np.array([float(r["bin_high"]) for r in rows])
    counts = np.array([float(r["count"]) for r in rows])
    fig, ax = plt.subplots(figsize=(6.5, 4))
    ax.bar(lows, counts, width=highs - lows, align="edge", color="#3b6ea5", edgecolor="none")
    ax.set_xscale("log")
    if spec.log_scale:
        ax.set_yscale("symlog")
    ax.set_xlabel("cumulative attention score")
    ax.set_ylabel("count")
    ax.set_title(spec.title or "attention score distribution")
    _finish(fig, spec)


def render_layerhead(spec: FigureSpec) -> None:
    """Time-averaged top sink score per (layer, head)."""
    rows = _read_csv(spec.input, ["layer", "head", "mean_top_score"])
    if not rows:
        raise SpecError(f"{spec.input}: no data rows")
    n_layers = max(int(r["layer"]) for r in rows) + 1
    n_heads = max(int(r["head"]) for r in rows) + 1
    grid = np.zeros((n_layers, n_heads))
    for r in rows:
        grid[int(r["layer"]), int(r["head"])] = float(r["mean_top_score"])
    fig, ax = plt.subplots(figsize=(1.2 + 0.8 * n_heads, 1.2 + 0.8 * n_layers))
    im = ax.imshow(grid, cmap=spec.colormap, origin="lower", aspect="equal")
    ax.set_xlabel("head")
    ax.set_ylabel("layer")
    ax.set_xticks(range(n_heads))
    ax.set_yticks(range(n_layers))
    ax.set_title(spec.title or "strongest sink score per layer/head")
    fig.colorbar(im, ax=ax, shrink=0.85)
    _finish(fig, spec)


def render_step_pair(spec: FigureSpec) -> None:
    """Side-by-side per-position score profiles at two steps."""
    rows = _read_csv(spec.input, ["step", "layer", "head", "position", "score"])
    steps, positions, grid = _score_grid(rows, spec)
    for step in (spec.step_a, spec.step_b):
        if step not in steps:
            raise SpecError(f"{spec.input}: step {step} not present (steps {steps[0]}..{steps[-1]})")
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.6), sharey=True)
    for ax, step in zip(axes, (spec.step_a, spec.step_b)):
        vals = grid[steps.index(step)]
        ax.bar(positions, vals, color="#a54242", width=0.9)
        ax.set_xlabel("token position")
        ax.set_title(f"step {step}")
        if spec.log_scale:
            ax.set_yscale("symlog")
    axes[0].set_ylabel("cumulative attention score")
    fig.suptitle(spec.title or "attention profile at two denoising steps")
    _finish(fig, spec)


def render_trajectory_overview(spec: FigureSpec) -> None:
    """Strongest sink position over time, one series per (layer, head)."""
    rows = _read_csv(
        spec.input, ["layer", "head", "step", "position", "score", "event", "classification"]
    )
    series: dict[tuple[int, int], list[tuple[int, float]]] = defaultdict(list)
    labels: dict[tuple[int, int], str] = {}
    for r in rows:
        key = (int(r["layer"]), int(r["head"]))
        if spec.layer is not None and key[0] != spec.layer:
            continue
        if spec.head is not None and key[1] != spec.head:
            continue
        labels[key] = r["classification"]
        if r["position"] != "":
            series[key].append((int(r["step"]), float(r["position"])))
    fig, ax = plt.subplots(figsize=(7, 4))
    cmap = plt.get_cmap(spec.colormap)
    drawn = 0
    ordered = sorted(series.items())
    for idx, (key, points) in enumerate(ordered):
        if not points:
            continue
        points.sort()
        xs = [s for s, _ in points]
        ys = [p for _, p in points]
        color = cmap(idx / max(len(ordered) - 1, 1))
        ax.plot(xs, ys, marker="o", markersize=3, linewidth=1.0, color=color,
                label=f"L{key[0]}H{key[1]} ({labels.get(key, '?')})")
        drawn += 1
    ax.set_xlabel("denoising step")
    ax.set_ylabel("sink position")
    ax.set_title(spec.title or "strongest sink position across steps")
    if drawn:
        ax.legend(fontsize=7, loc="best")
    else:
        ax.annotate(
            "no sinks", xy=(0.5, 0.5), xycoords="axes fraction",
            ha="center", va="center", fontsize=14, color="gray",
        )
    _finish(fig, spec)


def render_epsilon_curve(spec: FigureSpec) -> None:
    """Flagged token fraction as the detection threshold grows."""
    rows = _read_csv(spec.input, ["epsilon", "flagged_fraction"])
    if not rows:
        raise SpecError(f"{spec.input}: no data rows")
    eps = [float(r["epsilon"]) for r in rows]
    frac = [float(r["flagged_fraction"]) for r in rows]
    fig, ax = plt.subplots(figsize=(5.5, 3.8))
    ax.plot(eps, frac, marker="o", color="#2a7f4f")
    if spec.log_scale:
        ax.set_yscale("symlog", linthresh=1e-4)
    ax.set_xlabel("threshold")
    ax.set_ylabel("fraction of tokens flagged")
    ax.set_title(spec.title or "sink-flagged fraction vs detection threshold")
    ax.grid(True, alpha=0.3)
    _finish(fig, spec)


_RENDERERS = {
    "heatmap_steps": render_heatmap_steps,
    "histogram": render_histogram,
    "layerhead": render_layerhead,
    "step_pair": render_step_pair,
    "trajectory_overview": render_trajectory_overview,
    "epsilon_curve": render_epsilon_curve,
}


def render(spec: FigureSpec) -> None:
    """Dispatch on the figure kind; inputs are never mutated."""
    _RENDERERS[spec.kind](spec)
