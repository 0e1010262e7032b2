"""Attention-sink analysis: cumulative column scores, sink detection,
threshold sweeps, histograms, layer-head maps, masked/unmasked splits, and
cross-step trajectory classification.

Scores are normalized column sums: s_j = sum_i A_ij for a row-stochastic
S x S attention map, so uniform attention gives s_j = 1 for every position
and the scores over one map total S. A position j is flagged as a sink when
s_j exceeds the mean score of all other positions by at least epsilon
(default 3, i.e. three uniform-attention units above everyone else).
"""

from __future__ import annotations

import csv
import math
from collections import Counter, defaultdict
from dataclasses import dataclass

import numpy as np

from .decoding import DecodeTrace
from .errors import ConfigError, MalformedAttentionError, ShapeError
from .model import AttentionTensor

DEFAULT_EPSILON = 3.0
ROW_SUM_TOL = 1e-4
HISTOGRAM_BINS = 50
HISTOGRAM_FLOOR = 1e-3

CLASSIFICATIONS = ("static", "moving", "intermittent", "none")

# classification thresholds (fractions of steps)
_PRESENCE_MIN = 0.10  # sinks in fewer steps than this -> "none"
_STATIC_SHARE = 0.90  # one position holding this share of all steps -> "static"
_MOVING_SHARE = 0.20  # >= 2 positions each holding this share of sink-present steps -> "moving"


@dataclass(frozen=True)
class ColumnScore:
    position: int
    score: float
    step: int = 0
    layer: int = 0
    head: int = 0


@dataclass(eq=False)
class SinkSet:
    step: int
    layer: int
    head: int
    epsilon: float
    # (position, score) sorted by descending score
    sinks: list[tuple[int, float]]
    n_positions: int

    @property
    def top(self) -> tuple[int, float] | None:
        return self.sinks[0] if self.sinks else None


@dataclass(frozen=True)
class TrajectoryEvent:
    step: int  # the step this transition lands on
    kind: str  # appeared | moved | vanished | persisted
    from_position: int | None = None
    to_position: int | None = None


@dataclass(eq=False)
class SinkTrajectory:
    layer: int
    head: int
    # per step: (position, score) of the strongest sink, or None
    per_step_top: list[tuple[int, float] | None]
    events: list[TrajectoryEvent]
    classification: str
    start_step: int = 0


@dataclass(frozen=True)
class SplitScore:
    position: int
    masked_score: float | None
    unmasked_score: float | None
    step: int = 0
    layer: int = 0
    head: int = 0


@dataclass(eq=False)
class SplitResult:
    scores: list[SplitScore]
    top_masked: int | None
    top_unmasked: int | None

    @property
    def divergent(self) -> bool:
        if self.top_masked is None or self.top_unmasked is None:
            return False
        return self.top_masked != self.top_unmasked


def _validate_stochastic(matrix: np.ndarray) -> np.ndarray:
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ShapeError(f"attention map must be square, got {m.shape}")
    if (m < -1e-9).any():
        raise MalformedAttentionError("negative attention weight")
    row_err = np.abs(m.sum(axis=1) - 1.0)
    if (row_err > ROW_SUM_TOL).any():
        bad = int(np.argmax(row_err))
        raise MalformedAttentionError(
            f"row {bad} sums to {m[bad].sum():.6f}, outside 1 +/- {ROW_SUM_TOL}"
        )
    return m


def cumulative_scores(attention: AttentionTensor, step: int = 0) -> list[ColumnScore]:
    """Normalized cumulative score per key position: s_j = sum_i A_ij."""
    m = _validate_stochastic(attention.scores)
    sums = m.sum(axis=0)
    return [
        ColumnScore(position=j, score=float(sums[j]), step=step, layer=attention.layer, head=attention.head)
        for j in range(m.shape[1])
    ]


def _detect(values: np.ndarray, epsilon: float) -> list[int]:
    """Indices whose score exceeds the mean of all other scores by > epsilon."""
    s = np.asarray(values, dtype=np.float64)
    n = s.shape[0]
    if n < 2:
        raise ShapeError("sink detection needs at least 2 positions")
    mean_others = (s.sum() - s) / (n - 1)
    flagged = np.nonzero(s > mean_others + epsilon)[0]
    order = sorted(flagged, key=lambda j: (-s[j], j))
    return [int(j) for j in order]


def detect_sinks(scores: list[ColumnScore], epsilon: float = DEFAULT_EPSILON) -> SinkSet:
    """Apply the sink predicate to one (step, layer, head) score list."""
    if epsilon <= 0:
        raise ConfigError(f"epsilon must be positive, got {epsilon}")
    if not scores:
        raise ShapeError("empty score list")
    ordered = sorted(scores, key=lambda c: c.position)
    values = np.array([c.score for c in ordered], dtype=np.float64)
    flagged = _detect(values, epsilon)
    first = ordered[0]
    return SinkSet(
        step=first.step,
        layer=first.layer,
        head=first.head,
        epsilon=float(epsilon),
        sinks=[(j, float(values[j])) for j in flagged],
        n_positions=len(ordered),
    )


def iter_score_cells(trace: DecodeTrace):
    """Yield (step, layer, head, scores_vector) over every cell of a trace.

    Vectors are truncated to the step's attention row count, so causal
    prefixes only expose the positions that actually received attention.
    """
    for rec in trace.steps:
        for (layer, head), vec in sorted(rec.scores.items()):
            yield rec.step, layer, head, np.asarray(vec[: rec.attn_rows], dtype=np.float64)


def detect_all(traces, epsilon: float = DEFAULT_EPSILON) -> list[SinkSet]:
    """detect_sinks over every (step, layer, head) cell of every trace."""
    out = []
    for trace in _as_traces(traces):
        for step, layer, head, vec in iter_score_cells(trace):
            flagged = _detect(vec, epsilon)
            out.append(
                SinkSet(
                    step=step,
                    layer=layer,
                    head=head,
                    epsilon=float(epsilon),
                    sinks=[(j, float(vec[j])) for j in flagged],
                    n_positions=vec.shape[0],
                )
            )
    return out


def epsilon_sweep(traces, grid) -> list[tuple[float, float]]:
    """(epsilon, flagged token fraction) rows, averaged over all cells."""
    grid = [float(e) for e in grid]
    if not grid:
        raise ConfigError("empty epsilon grid")
    cells = [
        vec for trace in _as_traces(traces) for _, _, _, vec in iter_score_cells(trace)
    ]
    if not cells:
        raise ConfigError("no attention cells to sweep")
    rows = []
    for eps in grid:
        fractions = [len(_detect(vec, eps)) / vec.shape[0] for vec in cells]
        rows.append((eps, float(np.mean(fractions))))
    return rows


def track_trajectories(sinksets: list[SinkSet]) -> dict[tuple[int, int], SinkTrajectory]:
    """Per-(layer, head) top-sink path, transition events, and classification.

    Classification: "none" when sinks are present in fewer than 10% of steps;
    "static" when one position is the top sink in at least 90% of all steps;
    "moving" when at least two positions each hold 20% of sink-present steps;
    otherwise "intermittent". Ties break toward the lower position index.
    """
    by_cell: dict[tuple[int, int], dict[int, SinkSet]] = defaultdict(dict)
    for ss in sinksets:
        key = (ss.layer, ss.head)
        if ss.step in by_cell[key]:
            raise ConfigError(f"duplicate SinkSet for layer {ss.layer} head {ss.head} step {ss.step}")
        by_cell[key][ss.step] = ss
    out: dict[tuple[int, int], SinkTrajectory] = {}
    for (layer, head), by_step in sorted(by_cell.items()):
        steps = sorted(by_step)
        if steps != list(range(steps[0], steps[0] + len(steps))):
            raise ConfigError(f"SinkSets for layer {layer} head {head} must cover consecutive steps")
        tops: list[tuple[int, float] | None] = [by_step[s].top for s in steps]
        events: list[TrajectoryEvent] = []
        for i in range(1, len(tops)):
            prev = tops[i - 1][0] if tops[i - 1] else None
            cur = tops[i][0] if tops[i] else None
            step = steps[i]
            if prev is None and cur is not None:
                events.append(TrajectoryEvent(step, "appeared", None, cur))
            elif prev is not None and cur is None:
                events.append(TrajectoryEvent(step, "vanished", prev, None))
            elif prev is not None and cur is not None:
                kind = "persisted" if prev == cur else "moved"
                events.append(TrajectoryEvent(step, kind, prev, cur))
        out[(layer, head)] = SinkTrajectory(
            layer=layer,
            head=head,
            per_step_top=tops,
            events=events,
            classification=_classify(tops),
            start_step=steps[0],
        )
    return out


def _classify(tops: list[tuple[int, float] | None]) -> str:
    total = len(tops)
    present = [t[0] for t in tops if t is not None]
    if total == 0 or len(present) < _PRESENCE_MIN * total:
        return "none"
    counts = Counter(present)
    top_pos, top_count = min(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    if top_count >= _STATIC_SHARE * total:
        return "static"
    holders = [p for p, c in counts.items() if c >= _MOVING_SHARE * len(present)]
    if len(holders) >= 2:
        return "moving"
    return "intermittent"


def split_scores(attention: AttentionTensor, mask_flags, step: int = 0) -> SplitResult:
    """Column scores restricted to masked-query rows vs unmasked-query rows.

    Each restricted score is normalized to expectation 1 under uniform
    attention: s_j(subset) = S * mean over subset rows of A_ij. A subset with
    no rows yields absent scores on that side.
    """
    m = _validate_stochastic(attention.scores)
    flags = np.asarray(mask_flags, dtype=bool)
    if flags.shape[0] != m.shape[0]:
        raise ShapeError("mask_flags length must match attention size")
    seq_len = m.shape[0]

    def restricted(rows: np.ndarray) -> np.ndarray | None:
        if rows.sum() == 0:
            return None
        return seq_len * m[rows].mean(axis=0)

    masked = restricted(flags)
    unmasked = restricted(~flags)
    scores = [
        SplitScore(
            position=j,
            masked_score=None if masked is None else float(masked[j]),
            unmasked_score=None if unmasked is None else float(unmasked[j]),
            step=step,
            layer=attention.layer,
            head=attention.head,
        )
        for j in range(seq_len)
    ]
    return SplitResult(
        scores=scores,
        top_masked=None if masked is None else int(np.argmax(masked)),
        top_unmasked=None if unmasked is None else int(np.argmax(unmasked)),
    )


def attention_histogram(traces, bins: int = HISTOGRAM_BINS):
    """Histogram rows (bin_low, bin_high, count) over all column scores.

    Bins are logarithmic over [1e-3, S_max]; values outside clamp into the
    edge bins so the counts always total the number of scored positions.
    """
    values = []
    s_max = 0
    for trace in _as_traces(traces):
        for _, _, _, vec in iter_score_cells(trace):
            values.append(vec)
            s_max = max(s_max, vec.shape[0])
    if not values:
        raise ConfigError("no attention cells to histogram")
    flat = np.concatenate(values)
    hi = max(float(s_max), HISTOGRAM_FLOOR * 10)
    edges = np.logspace(math.log10(HISTOGRAM_FLOOR), math.log10(hi), bins + 1)
    clipped = np.clip(flat, edges[0], edges[-1])
    counts, _ = np.histogram(clipped, bins=edges)
    # np.histogram puts values == upper edge in the last bin already
    return [(float(edges[i]), float(edges[i + 1]), int(counts[i])) for i in range(bins)]


def layer_head_map(traces) -> np.ndarray:
    """Time-averaged strongest column score per (layer, head)."""
    sums: dict[tuple[int, int], float] = defaultdict(float)
    counts: dict[tuple[int, int], int] = defaultdict(int)
    n_layers = n_heads = 0
    for trace in _as_traces(traces):
        n_layers = max(n_layers, trace.n_layers)
        n_heads = max(n_heads, trace.n_heads)
        for _, layer, head, vec in iter_score_cells(trace):
            sums[(layer, head)] += float(vec.max())
            counts[(layer, head)] += 1
    if not counts:
        raise ConfigError("no attention cells to map")
    out = np.zeros((n_layers, n_heads), dtype=np.float64)
    for (layer, head), total in sums.items():
        out[layer, head] = total / counts[(layer, head)]
    return out


def _as_traces(traces) -> list[DecodeTrace]:
    if isinstance(traces, DecodeTrace):
        return [traces]
    traces = list(traces)
    if not traces:
        raise ConfigError("no traces given")
    return traces


# --- CSV writers (fixed schemas) -------------------------------------------


def write_scores_csv(path, traces) -> None:
    """step,layer,head,position,score — also the external import format."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "layer", "head", "position", "score"])
        for trace in _as_traces(traces):
            for step, layer, head, vec in iter_score_cells(trace):
                for j in range(vec.shape[0]):
                    w.writerow([step, layer, head, j, repr(float(vec[j]))])


def write_sinks_csv(path, sinksets: list[SinkSet]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "layer", "head", "position", "score", "epsilon", "rank"])
        for ss in sinksets:
            for rank, (pos, score) in enumerate(ss.sinks):
                w.writerow([ss.step, ss.layer, ss.head, pos, repr(score), repr(ss.epsilon), rank])


def write_trajectories_csv(path, trajectories: dict[tuple[int, int], SinkTrajectory]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "head", "step", "position", "score", "event", "classification"])
        for (layer, head), traj in sorted(trajectories.items()):
            events_by_step = {ev.step: ev.kind for ev in traj.events}
            for i, top in enumerate(traj.per_step_top):
                step = traj.start_step + i
                pos = "" if top is None else top[0]
                score = "" if top is None else repr(top[1])
                w.writerow(
                    [layer, head, step, pos, score, events_by_step.get(step, ""), traj.classification]
                )


def write_histogram_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_low", "bin_high", "count", "log10_count"])
        for lo, hi, count in rows:
            w.writerow([repr(lo), repr(hi), count, repr(math.log10(count + 1))])


def write_layerhead_csv(path, grid: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "head", "mean_top_score"])
        for layer in range(grid.shape[0]):
            for head in range(grid.shape[1]):
                w.writerow([layer, head, repr(float(grid[layer, head]))])


def write_epsilon_sweep_csv(path, rows: list[tuple[float, float]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epsilon", "flagged_fraction"])
        for eps, frac in rows:
            w.writerow([repr(eps), repr(frac)])
