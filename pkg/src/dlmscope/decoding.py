"""Inference strategies: semi-autoregressive block unmasking, any-position
shift unmasking, and plain left-to-right autoregressive generation.

Every strategy emits a DecodeTrace holding one StepRecord per denoising step
with the unmask events, a mask-flag snapshot, and per-(layer, head) attention
summaries (column scores always, full S x S maps on request). Unmasking is
monotone: this artifact never re-masks a decoded token.

Per-step unmask quota is ceil(remaining / remaining_steps), which spreads
work evenly and degenerates to one token per step when the step budget
equals the generation length. The MASK token itself is never emitted: its
logit is suppressed before token selection so decoded sequences stay
well-formed even for untrained models.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, SchedulingError, ShapeError
from .model import EOS_ID, MASK_ID, PAD_ID, Parameters, forward
from .numerics import RngState

STRATEGIES = ("block_semi_ar", "any_position_shift", "autoregressive")
IMPORTED_STRATEGY = "imported"  # trace-only tag for external score imports


@dataclass(eq=False)
class TokenSequence:
    """Token ids with per-position mask flags; flags are never re-set."""

    ids: np.ndarray  # int64, length S
    mask_flags: np.ndarray  # bool, True = still masked
    prompt_len: int

    @classmethod
    def from_prompt(cls, prompt_ids, gen_len: int) -> "TokenSequence":
        prompt = np.asarray(prompt_ids, dtype=np.int64)
        ids = np.concatenate([prompt, np.full(gen_len, MASK_ID, dtype=np.int64)])
        flags = np.zeros(ids.shape[0], dtype=bool)
        flags[prompt.shape[0] :] = True
        return cls(ids=ids, mask_flags=flags, prompt_len=prompt.shape[0])

    def validate(self) -> None:
        if self.ids.shape != self.mask_flags.shape:
            raise ShapeError("ids and mask_flags lengths differ")
        if self.mask_flags[: self.prompt_len].any():
            raise ShapeError("prompt positions must not be masked")
        if not ((self.ids == MASK_ID) == self.mask_flags).all():
            raise ShapeError("ids must equal MASK exactly at masked positions")


@dataclass(frozen=True)
class DecodeConfig:
    strategy: str
    gen_len: int
    total_steps: int
    block_size: int = 0
    temperature: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES + (IMPORTED_STRATEGY,):
            raise ConfigError(f"unknown strategy {self.strategy!r}")

    def validate_schedule(self) -> None:
        """Strategy-specific feasibility checks; raises ConfigError."""
        if self.gen_len < 1:
            raise ConfigError("gen_len must be >= 1")
        if self.strategy == "block_semi_ar":
            if self.block_size < 1 or self.gen_len % self.block_size != 0:
                raise ConfigError(
                    f"block_size {self.block_size} must divide gen_len {self.gen_len}"
                )
            n_blocks = self.gen_len // self.block_size
            if self.total_steps % n_blocks != 0 or self.total_steps // n_blocks < 1:
                raise ConfigError(
                    f"total_steps {self.total_steps} must split evenly over {n_blocks} blocks"
                )
        elif self.strategy == "any_position_shift":
            if not 1 <= self.total_steps <= self.gen_len:
                raise ConfigError(
                    f"total_steps must be in [1, gen_len]; got {self.total_steps}"
                )
        elif self.strategy == "autoregressive":
            if self.total_steps != self.gen_len:
                raise ConfigError("autoregressive decoding uses one step per token")


@dataclass(frozen=True)
class UnmaskEvent:
    position: int
    token: int
    confidence: float
    # index of the logit row that scored/predicted this position (== position
    # for identity-style decoding, position - 1 for shift and autoregressive)
    source: int = -1


@dataclass(eq=False)
class StepRecord:
    step: int
    newly_unmasked: list[UnmaskEvent]
    mask_flags: np.ndarray  # snapshot after this step's unmasking
    # per (layer, head): column scores over key positions, length S
    scores: dict[tuple[int, int], np.ndarray]
    # optional full S x S attention maps per (layer, head)
    maps: dict[tuple[int, int], np.ndarray] | None
    # number of query rows the attention was computed over (< S only for
    # autoregressive prefixes)
    attn_rows: int


@dataclass(eq=False)
class DecodeTrace:
    config: DecodeConfig
    prompt_len: int
    steps: list[StepRecord]
    final: TokenSequence
    seq_len: int
    n_layers: int
    n_heads: int
    vocab_size: int

    @property
    def has_full_maps(self) -> bool:
        return any(rec.maps for rec in self.steps)


def confidence_select(
    logits: np.ndarray,
    candidate_positions,
    k: int,
    temperature: float = 0.0,
    rng: RngState | None = None,
    source_for=None,
) -> list[UnmaskEvent]:
    """Pick the k candidates whose predictive rows are most confident.

    Row p of `logits` must be the predictive row for candidate position p.
    Confidence is the maximum softmax probability of that row; ties break
    toward the lower position index. Temperature 0 chooses tokens greedily,
    otherwise tokens are sampled from softmax(row / temperature).
    """
    candidates = [int(p) for p in candidate_positions]
    if k > len(candidates):
        raise SchedulingError(f"need {k} unmasks but only {len(candidates)} candidates")
    if k <= 0:
        return []
    logits = np.asarray(logits)
    scored: list[tuple[float, int, int]] = []
    for p in candidates:
        row = logits[p].astype(np.float64).copy()
        row[MASK_ID] = -np.inf  # the mask token is never emitted
        stable = row - row.max()
        probs = np.exp(stable)
        probs /= probs.sum()
        confidence = float(probs.max())
        if temperature <= 0.0:
            token = int(np.argmax(row))
        else:
            if rng is None:
                raise ConfigError("temperature sampling needs an rng")
            tem = row / float(temperature)
            tem -= tem.max()
            pt = np.exp(tem)
            pt /= pt.sum()
            token = int(rng.child(p).generator().choice(pt.shape[0], p=pt))
        scored.append((confidence, p, token))
    scored.sort(key=lambda item: (-item[0], item[1]))
    source_for = source_for or (lambda p: p)
    # confidences are quantized to f32 so traces round-trip losslessly
    return [
        UnmaskEvent(
            position=p,
            token=tok,
            confidence=float(np.float32(conf)),
            source=source_for(p),
        )
        for conf, p, tok in scored[:k]
    ]


def _quota(remaining: int, remaining_steps: int) -> int:
    if remaining_steps <= 0:
        raise SchedulingError("no steps left but tokens remain masked")
    return -(-remaining // remaining_steps)


def _default_forward(params: Parameters):
    def fn(ids: np.ndarray, step: int):
        return forward(params, ids, capture=True)

    return fn


def _summaries(out, capture_full: bool, seq_len: int):
    """Column scores (padded to seq_len) and optional padded full maps."""
    if out.attention is None:
        raise ShapeError("decode forwards must capture attention")
    scores: dict[tuple[int, int], np.ndarray] = {}
    maps: dict[tuple[int, int], np.ndarray] | None = {} if capture_full else None
    for att in out.attention:
        vec = np.zeros(seq_len, dtype=np.float32)
        vec[: att.scores.shape[1]] = att.scores.sum(axis=0).astype(np.float32)
        scores[(att.layer, att.head)] = vec
        if capture_full:
            full = np.zeros((seq_len, seq_len), dtype=np.float32)
            full[: att.scores.shape[0], : att.scores.shape[1]] = att.scores.astype(np.float32)
            maps[(att.layer, att.head)] = full
    return scores, maps


def _finish(params, cfg, seq, prompt_len, records) -> DecodeTrace:
    seq.validate()
    if seq.mask_flags[prompt_len:].any():
        raise SchedulingError("decode finished with masked positions remaining")
    mc = params.config
    return DecodeTrace(
        config=cfg,
        prompt_len=prompt_len,
        steps=records,
        final=seq,
        seq_len=seq.ids.shape[0],
        n_layers=mc.n_layers,
        n_heads=mc.n_heads,
        vocab_size=mc.vocab_size,
    )


def decode_block_semi_ar(
    params: Parameters,
    prompt_ids,
    cfg: DecodeConfig,
    capture_full: bool = False,
    forward_fn=None,
) -> DecodeTrace:
    """Left-to-right blocks; confidence unmasking confined to the active block."""
    if cfg.strategy != "block_semi_ar":
        raise ConfigError(f"wrong strategy {cfg.strategy!r} for block decode")
    cfg.validate_schedule()
    seq = TokenSequence.from_prompt(prompt_ids, cfg.gen_len)
    _check_len(params, seq)
    forward_fn = forward_fn or _default_forward(params)
    rng = RngState(cfg.seed)
    n_blocks = cfg.gen_len // cfg.block_size
    steps_per_block = cfg.total_steps // n_blocks
    records: list[StepRecord] = []
    step = 0
    for b in range(n_blocks):
        lo = seq.prompt_len + b * cfg.block_size
        hi = lo + cfg.block_size
        for sb in range(steps_per_block):
            block_masked = [int(p) for p in range(lo, hi) if seq.mask_flags[p]]
            quota = _quota(len(block_masked), steps_per_block - sb) if block_masked else 0
            out = forward_fn(seq.ids, step)
            events = confidence_select(
                out.logits, block_masked, quota, cfg.temperature, rng.child(step)
            )
            for ev in events:
                seq.ids[ev.position] = ev.token
                seq.mask_flags[ev.position] = False
            scores, maps = _summaries(out, capture_full, seq.ids.shape[0])
            records.append(
                StepRecord(step, events, seq.mask_flags.copy(), scores, maps, seq.ids.shape[0])
            )
            step += 1
    return _finish(params, cfg, seq, seq.prompt_len, records)


def decode_any_position_shift(
    params: Parameters,
    prompt_ids,
    cfg: DecodeConfig,
    capture_full: bool = False,
    forward_fn=None,
) -> DecodeTrace:
    """All masked positions compete each step; position p is scored from the
    logits at p - 1 (each token predicts its right neighbour)."""
    if cfg.strategy != "any_position_shift":
        raise ConfigError(f"wrong strategy {cfg.strategy!r} for shift decode")
    cfg.validate_schedule()
    seq = TokenSequence.from_prompt(prompt_ids, cfg.gen_len)
    _check_len(params, seq)
    if seq.prompt_len < 1:
        # position 0 would never gain a left neighbour, so it could never be unmasked
        raise SchedulingError("shift decoding needs at least one prompt token")
    forward_fn = forward_fn or _default_forward(params)
    rng = RngState(cfg.seed)
    records: list[StepRecord] = []
    for step in range(cfg.total_steps):
        masked = [int(p) for p in np.nonzero(seq.mask_flags)[0]]
        quota = _quota(len(masked), cfg.total_steps - step) if masked else 0
        out = forward_fn(seq.ids, step)
        shifted = np.empty_like(out.logits)
        shifted[1:] = out.logits[:-1]
        shifted[0] = out.logits[0]  # row 0 is never a candidate
        events = confidence_select(
            shifted, masked, quota, cfg.temperature, rng.child(step), source_for=lambda p: p - 1
        )
        for ev in events:
            seq.ids[ev.position] = ev.token
            seq.mask_flags[ev.position] = False
        scores, maps = _summaries(out, capture_full, seq.ids.shape[0])
        records.append(
            StepRecord(step, events, seq.mask_flags.copy(), scores, maps, seq.ids.shape[0])
        )
    return _finish(params, cfg, seq, seq.prompt_len, records)


def decode_autoregressive(
    params: Parameters,
    prompt_ids,
    cfg: DecodeConfig,
    capture_full: bool = False,
    forward_fn=None,
    stop_at_eos: bool = False,
) -> DecodeTrace:
    """Greedy left-to-right generation with attention captured per prefix.

    With stop_at_eos, remaining positions are PAD-filled inside the final
    step record (confidence 0) so the trace still covers the whole region.
    """
    if cfg.strategy != "autoregressive":
        raise ConfigError(f"wrong strategy {cfg.strategy!r} for autoregressive decode")
    if params.config.attention_mode != "causal":
        raise ConfigError("autoregressive decoding needs a causal-attention model")
    cfg.validate_schedule()
    seq = TokenSequence.from_prompt(prompt_ids, cfg.gen_len)
    _check_len(params, seq)
    forward_fn = forward_fn or _default_forward(params)
    rng = RngState(cfg.seed)
    seq_len = seq.ids.shape[0]
    records: list[StepRecord] = []
    for step in range(cfg.gen_len):
        prefix_len = seq.prompt_len + step
        out = forward_fn(seq.ids[:prefix_len], step)
        row = out.logits[-1].astype(np.float64).copy()
        row[MASK_ID] = -np.inf
        stable = row - row.max()
        probs = np.exp(stable)
        probs /= probs.sum()
        confidence = float(probs.max())
        if cfg.temperature <= 0.0:
            token = int(np.argmax(row))
        else:
            tem = row / float(cfg.temperature)
            tem -= tem.max()
            pt = np.exp(tem)
            pt /= pt.sum()
            token = int(rng.child(step).generator().choice(pt.shape[0], p=pt))
        events = [
            UnmaskEvent(
                position=prefix_len,
                token=token,
                confidence=float(np.float32(confidence)),
                source=prefix_len - 1,
            )
        ]
        seq.ids[prefix_len] = token
        seq.mask_flags[prefix_len] = False
        hit_eos = stop_at_eos and token == EOS_ID
        if hit_eos:
            for p in range(prefix_len + 1, seq_len):
                events.append(UnmaskEvent(position=p, token=PAD_ID, confidence=0.0, source=p - 1))
                seq.ids[p] = PAD_ID
                seq.mask_flags[p] = False
        scores, maps = _summaries(out, capture_full, seq_len)
        records.append(StepRecord(step, events, seq.mask_flags.copy(), scores, maps, prefix_len))
        if hit_eos:
            break
    return _finish(params, cfg, seq, seq.prompt_len, records)


def decode(params: Parameters, prompt_ids, cfg: DecodeConfig, **kwargs) -> DecodeTrace:
    """Dispatch to the strategy named in the config."""
    if cfg.strategy == "block_semi_ar":
        return decode_block_semi_ar(params, prompt_ids, cfg, **kwargs)
    if cfg.strategy == "any_position_shift":
        return decode_any_position_shift(params, prompt_ids, cfg, **kwargs)
    if cfg.strategy == "autoregressive":
        return decode_autoregressive(params, prompt_ids, cfg, **kwargs)
    raise ConfigError(f"cannot decode with strategy {cfg.strategy!r}")


def _check_len(params: Parameters, seq: TokenSequence) -> None:
    if seq.ids.shape[0] > params.config.max_seq:
        raise ConfigError(
            f"prompt + gen_len = {seq.ids.shape[0]} exceeds max_seq {params.config.max_seq}"
        )
