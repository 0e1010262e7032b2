"""Sink-masking ablation: find the top-K attention sinks at each decode step
and suppress all attention toward them, then measure the task impact.

Timing is two-pass: pass 1 runs the unmodified forward and ranks positions by
mean column score across every (layer, head); pass 2 re-runs the forward with
-inf logits toward the chosen key columns, and its logits drive unmasking.
Masking is pre-softmax, so the remaining attention renormalizes and rows stay
stochastic; a query row that would lose every visible key keeps its single
best key (logged via ForwardOutput.fallbacks).

With top_k = 0 the pass-2 machinery is bypassed entirely, so control runs are
bit-identical to the un-instrumented decode path.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .decoding import DecodeConfig
from .errors import ConfigError
from .evalharness import EvalResult, Task, evaluate, gen_dataset
from .model import (
    AttentionTensor,
    ForwardOutput,
    MaskOverride,
    OverrideRule,
    Parameters,
    forward,
)

RANKINGS = ("global_mean",)
TIMINGS = ("two_pass",)


@dataclass(frozen=True)
class MaskPolicy:
    top_k: int  # 0 = control (no intervention)
    ranking: str = "global_mean"
    timing: str = "two_pass"
    protect_prompt: bool = False
    per_head: bool = False  # mask each head's own top sinks instead of global ones

    def __post_init__(self):
        if self.top_k < 0:
            raise ConfigError("top_k must be >= 0")
        if self.ranking not in RANKINGS:
            raise ConfigError(f"unknown ranking {self.ranking!r}")
        if self.timing not in TIMINGS:
            raise ConfigError(f"unknown timing {self.timing!r}")


def rank_from_scores(score_vectors) -> list[int]:
    """Positions ranked by mean column score across cells, ties to lower index."""
    vectors = [np.asarray(v, dtype=np.float64) for v in score_vectors]
    if not vectors:
        raise ConfigError("no score vectors to rank")
    if len({v.shape[0] for v in vectors}) != 1:
        raise ConfigError("score vectors must share one length")
    mean = np.mean(vectors, axis=0)
    order = np.lexsort((np.arange(mean.shape[0]), -mean))
    return [int(j) for j in order]


def rank_sinks_global(step_attention: list[AttentionTensor]) -> list[int]:
    """Rank key positions by mean normalized column score over all layers/heads."""
    if not step_attention:
        raise ConfigError("no attention tensors at this step")
    return rank_from_scores([att.scores.sum(axis=0) for att in step_attention])


def build_override(positions, keep_one: bool = True, layer: int | None = None, head: int | None = None) -> MaskOverride:
    rules = tuple(OverrideRule(key=int(p), layer=layer, head=head) for p in positions)
    return MaskOverride(rules=rules, keep_one=keep_one)


def apply_sink_mask(params: Parameters, ids, positions, capture: bool = True) -> ForwardOutput:
    """Forward with all attention toward `positions` suppressed pre-softmax.

    An empty position list short-circuits to the plain forward, bit-identical
    to an un-instrumented call.
    """
    positions = list(positions)
    if not positions:
        return forward(params, ids, capture=capture)
    return forward(params, ids, capture=capture, logit_override=build_override(positions))


def _choose_positions(pass1: ForwardOutput, policy: MaskPolicy, prompt_len: int) -> list[int]:
    ranked = rank_sinks_global(pass1.attention)
    if policy.protect_prompt:
        ranked = [p for p in ranked if p >= prompt_len]
    return ranked[: policy.top_k]


def two_pass_forward(params: Parameters, policy: MaskPolicy, mask_log: list, prompt_len: int = 0):
    """Decode hook: detect sinks on a clean pass, act on a masked re-run.

    Appends (step, masked_positions, fallback_rows) to mask_log per step.
    """

    def fn(ids: np.ndarray, step: int) -> ForwardOutput:
        if policy.top_k == 0:
            return forward(params, ids, capture=True)
        pass1 = forward(params, ids, capture=True)
        if policy.per_head:
            rules = []
            chosen_union: set[int] = set()
            for att in pass1.attention:
                ranked = rank_from_scores([att.scores.sum(axis=0)])
                if policy.protect_prompt:
                    ranked = [p for p in ranked if p >= prompt_len]
                for p in ranked[: policy.top_k]:
                    rules.append(OverrideRule(key=p, layer=att.layer, head=att.head))
                    chosen_union.add(p)
            override = MaskOverride(rules=tuple(rules), keep_one=True)
            chosen = sorted(chosen_union)
        else:
            chosen = _choose_positions(pass1, policy, prompt_len)
            override = build_override(chosen)
        out = forward(params, ids, capture=True, logit_override=override)
        mask_log.append((step, list(chosen), list(out.fallbacks)))
        return out

    return fn


@dataclass(eq=False)
class InterventionReport:
    task_kind: str
    strategy: str
    policy: MaskPolicy
    baseline_accuracy: float
    ablated_accuracy: float
    n_examples: int
    seed: int
    baseline: EvalResult
    ablated: EvalResult
    # one entry per example: list of (step, masked_positions, fallbacks)
    mask_logs: list[list] = field(default_factory=list)


def ablation_run(
    params: Parameters,
    task: Task,
    decode_cfg: DecodeConfig,
    policy: MaskPolicy,
    model_id: str = "model",
    n_examples: int | None = None,
    workers: int = 1,
) -> InterventionReport:
    """Baseline vs sink-masked evaluation over the task's eval split."""
    _, eval_split = gen_dataset(task)
    if n_examples is not None:
        eval_split = eval_split[:n_examples]
    baseline, _ = evaluate(params, task, eval_split, decode_cfg, policy=None,
                           model_id=model_id, workers=workers)
    if policy.top_k == 0:
        ablated = baseline
    else:
        ablated, _ = evaluate(params, task, eval_split, decode_cfg, policy=policy,
                              model_id=model_id, workers=workers)
    mask_logs = [rec.mask_log for rec in ablated.records]
    return InterventionReport(
        task_kind=task.kind,
        strategy=decode_cfg.strategy,
        policy=policy,
        baseline_accuracy=baseline.accuracy,
        ablated_accuracy=ablated.accuracy,
        n_examples=len(eval_split),
        seed=decode_cfg.seed,
        baseline=baseline,
        ablated=ablated,
        mask_logs=mask_logs,
    )


def write_report_csv(path, reports: list[InterventionReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["task", "strategy", "top_k", "baseline", "ablated", "n_examples", "seed"])
        for r in reports:
            w.writerow(
                [
                    r.task_kind,
                    r.strategy,
                    r.policy.top_k,
                    repr(r.baseline_accuracy),
                    repr(r.ablated_accuracy),
                    r.n_examples,
                    r.seed,
                ]
            )
