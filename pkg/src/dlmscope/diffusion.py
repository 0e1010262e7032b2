"""Forward corruption process, masking schedule, and denoising training objectives.

Training uses a continuous corruption time t ~ U(0, 1) per sequence; discrete
step budgets only appear at decode time. Sequences are (prompt, answer) pairs
and only the answer region (answer + EOS + padding) is ever corrupted.

Objectives:
  identity   - predict the masked token at its own position
  shift      - position i predicts token i+1 whenever i+1 is masked
  next_token - causal next-token prediction on clean sequences (ARM training)
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DivergenceError
from .model import MASK_ID, ModelConfig, Parameters, init_params, loss_and_grads
from .numerics import OptimizerState, RngState, adam_step

OBJECTIVES = ("identity", "shift", "next_token")

_WEIGHT_CLAMP_FLOOR = 0.01  # 1/t loss weight is clamped at t = 0.01
_MAX_RESAMPLES = 8  # corruption redraws before force-masking one position


@dataclass(frozen=True)
class MaskSchedule:
    """Survival probability alpha(t) of a token at corruption time t in [0, 1]."""

    kind: str = "linear"

    def __post_init__(self):
        if self.kind != "linear":
            raise ConfigError(f"unknown schedule kind {self.kind!r}")

    def alpha(self, t: float) -> float:
        if not 0.0 <= t <= 1.0:
            raise ConfigError(f"corruption time {t} outside [0, 1]")
        return 1.0 - t


@dataclass(eq=False)
class CorruptionSample:
    x0: np.ndarray
    x_t: np.ndarray
    t: float
    masked_positions: np.ndarray  # sorted indices


@dataclass(eq=False)
class TrainExample:
    """One batch item: corrupted ids plus full-length targets and weights."""

    ids: np.ndarray
    loss_positions: np.ndarray
    targets: np.ndarray
    weights: np.ndarray
    t: float
    masked_positions: np.ndarray
    x0: np.ndarray


def forward_corrupt(
    x0: np.ndarray,
    t: float,
    schedule: MaskSchedule,
    rng: RngState,
    prompt_len: int = 0,
) -> CorruptionSample:
    """Independently keep each eligible token with probability alpha(t).

    Positions before prompt_len are never corrupted.
    """
    x0 = np.asarray(x0, dtype=np.int64)
    alpha = schedule.alpha(t)
    gen = rng.generator()
    u = gen.random(x0.shape[0])
    masked = (u >= alpha) & (np.arange(x0.shape[0]) >= prompt_len)
    x_t = np.where(masked, MASK_ID, x0)
    return CorruptionSample(
        x0=x0, x_t=x_t, t=float(t), masked_positions=np.nonzero(masked)[0]
    )


def _example_from_corruption(
    sample: CorruptionSample, objective: str, weight: float, prompt_len: int
) -> TrainExample | None:
    """Build loss positions/targets for one corrupted sequence; None if empty."""
    x0 = sample.x0
    seq_len = x0.shape[0]
    targets = np.zeros(seq_len, dtype=np.int64)
    weights = np.zeros(seq_len, dtype=np.float64)
    if objective == "identity":
        positions = sample.masked_positions
        targets[positions] = x0[positions]
    elif objective == "shift":
        positions = sample.masked_positions[sample.masked_positions >= 1] - 1
        targets[positions] = x0[positions + 1]
    elif objective == "next_token":
        positions = np.arange(max(prompt_len - 1, 0), seq_len - 1)
        targets[positions] = x0[positions + 1]
    else:
        raise ConfigError(f"unknown objective {objective!r}")
    if positions.size == 0:
        return None
    weights[positions] = weight
    return TrainExample(
        ids=sample.x_t,
        loss_positions=positions,
        targets=targets,
        weights=weights,
        t=sample.t,
        masked_positions=sample.masked_positions,
        x0=x0,
    )


def training_batch(
    corpus: list[tuple[np.ndarray, int]],
    objective: str,
    schedule: MaskSchedule,
    rng: RngState,
    batch_size: int,
    weighting: str = "inverse_t",
) -> list[TrainExample]:
    """Sample sequences, corrupt them, and attach objective-specific targets.

    corpus items are (ids, prompt_len) with one shared sequence length. The
    per-position loss weight is 1/max(t, 0.01) ("inverse_t") or 1.0
    ("uniform"); the clamp means small t is never an error.
    """
    if objective not in OBJECTIVES:
        raise ConfigError(f"unknown objective {objective!r}")
    if weighting not in ("inverse_t", "uniform"):
        raise ConfigError(f"unknown weighting {weighting!r}")
    if objective in ("shift", "next_token") and any(ids.shape[0] < 2 for ids, _ in corpus):
        raise ConfigError(f"{objective} objective needs sequences of length >= 2")

    pick = rng.child(0).generator()
    idx = pick.integers(0, len(corpus), batch_size)
    batch: list[TrainExample] = []
    for bi, ci in enumerate(idx):
        x0, prompt_len = corpus[int(ci)]
        item_rng = rng.child(1 + bi)
        if objective == "next_token":
            sample = CorruptionSample(
                x0=np.asarray(x0, dtype=np.int64),
                x_t=np.asarray(x0, dtype=np.int64),
                t=0.0,
                masked_positions=np.empty(0, dtype=np.int64),
            )
            example = _example_from_corruption(sample, objective, 1.0, prompt_len)
        else:
            example = None
            t = float(item_rng.child(0).generator().random())
            for attempt in range(_MAX_RESAMPLES):
                sample = forward_corrupt(x0, t, schedule, item_rng.child(1 + attempt), prompt_len)
                weight = 1.0 if weighting == "uniform" else 1.0 / max(t, _WEIGHT_CLAMP_FLOOR)
                example = _example_from_corruption(sample, objective, weight, prompt_len)
                if example is not None:
                    break
            if example is None:
                # force one eligible mask so the item always contributes loss
                gen = item_rng.child(_MAX_RESAMPLES + 1).generator()
                pos = int(gen.integers(prompt_len, x0.shape[0]))
                x_t = np.asarray(x0, dtype=np.int64).copy()
                x_t[pos] = MASK_ID
                sample = CorruptionSample(
                    x0=np.asarray(x0, dtype=np.int64),
                    x_t=x_t,
                    t=t,
                    masked_positions=np.array([pos], dtype=np.int64),
                )
                weight = 1.0 if weighting == "uniform" else 1.0 / max(t, _WEIGHT_CLAMP_FLOOR)
                example = _example_from_corruption(sample, objective, weight, prompt_len)
        if example is None:
            raise ConfigError("could not build a training example with loss positions")
        batch.append(example)
    return batch


@dataclass(frozen=True)
class TrainHyper:
    steps: int = 1500
    batch_size: int = 32
    lr: float = 1.5e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_opt: float = 1e-8
    weighting: str = "inverse_t"
    lr_schedule: str = "cosine"  # cosine decay to 10% of lr, or "constant"

    def lr_at(self, step: int) -> float:
        if self.lr_schedule == "constant":
            return self.lr
        if self.lr_schedule == "cosine":
            floor = 0.1 * self.lr
            frac = step / max(self.steps - 1, 1)
            return floor + 0.5 * (self.lr - floor) * (1.0 + np.cos(np.pi * frac))
        raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}")


@dataclass(eq=False)
class TrainResult:
    params: Parameters
    # rows of (step, loss, masked_fraction)
    curve: list[tuple[int, float, float]] = field(default_factory=list)


def train(
    model_cfg: ModelConfig,
    objective: str,
    corpus: list[tuple[np.ndarray, int]],
    hyper: TrainHyper,
    rng: RngState,
) -> TrainResult:
    """Full training loop; deterministic given (config, corpus, hyper, rng)."""
    if not corpus:
        raise ConfigError("empty training corpus")
    schedule = MaskSchedule()
    params = init_params(model_cfg, rng.child(0))
    opt = OptimizerState.init(
        params.tensors, lr=hyper.lr, beta1=hyper.beta1, beta2=hyper.beta2, eps_opt=hyper.eps_opt
    )
    curve: list[tuple[int, float, float]] = []
    first_ids, first_plen = corpus[0]
    gen_region = first_ids.shape[0] - first_plen
    for step in range(hyper.steps):
        batch = training_batch(
            corpus, objective, schedule, rng.child(1 + step), hyper.batch_size, hyper.weighting
        )
        grad_objective = objective if objective in ("identity", "shift") else None
        opt.lr = hyper.lr_at(step)
        try:
            loss, grads = loss_and_grads(params, batch, grad_objective)
            adam_step(params.tensors, grads, opt)
        except DivergenceError as exc:
            raise DivergenceError(f"training diverged at step {step}: {exc}") from exc
        masked_fraction = (
            float(np.mean([len(it.masked_positions) / max(gen_region, 1) for it in batch]))
            if gen_region
            else 0.0
        )
        curve.append((step, loss, masked_fraction))
    return TrainResult(params=params, curve=curve)


def write_loss_curve(path, curve: list[tuple[int, float, float]]) -> None:
    """Loss curve CSV with columns step,loss,masked_fraction."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss", "masked_fraction"])
        for step, loss, frac in curve:
            writer.writerow([step, repr(float(loss)), repr(float(frac))])
