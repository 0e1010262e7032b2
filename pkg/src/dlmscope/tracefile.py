"""Binary "DLMT" trace files plus a CSV import path for external score dumps.

Little-endian fixed layout; every field is validated on read and every
failure mode is a typed error (TraceFormatError / TraceTruncationError), so
mutated or truncated files never escape as raw exceptions.

Header:
  magic "DLMT", version u32,
  S, n_layers, n_heads, n_steps, vocab_size u32,
  strategy u8 (0 block_semi_ar, 1 any_position_shift, 2 autoregressive, 3 imported),
  flags u8 (bit0 full maps, bit1 column scores),
  seed u64, prompt_len u32, block_size u32, total_steps u32, temperature f64.

Per step:
  step_index u32, attn_rows u32,
  token ids u32 x S, mask bitset (ceil(S/8) bytes, LSB-first),
  n_new u32, then positions u32, sources u32, tokens u32, confidences f32
  (n_new each; source is the logit row that scored the position),
  then per (layer, head), layer-major: column scores f32 x S when bit1,
  full map f32 x S*S (row-major) when bit0.

Column scores are stored even when full maps are stored, so analysis never
recomputes sums and score-only sources (external imports) share the format.
"""

from __future__ import annotations

import csv
import struct
import warnings

import numpy as np

from .decoding import DecodeConfig, DecodeTrace, StepRecord, TokenSequence, UnmaskEvent
from .model import MASK_ID, PAD_ID
from .errors import (
    ConfigError,
    SparseImportError,
    TraceFormatError,
    TraceTruncationError,
)

MAGIC = b"DLMT"
VERSION = 1
FLAG_FULL_MAPS = 0x01
FLAG_COLUMN_SCORES = 0x02

_STRATEGY_TAGS = {
    "block_semi_ar": 0,
    "any_position_shift": 1,
    "autoregressive": 2,
    "imported": 3,
}
_TAG_STRATEGIES = {v: k for k, v in _STRATEGY_TAGS.items()}

_HEADER = struct.Struct("<4sIIIIIIBBQIIId")

IMPORT_CSV_HEADER = ["step", "layer", "head", "position", "score"]


class ScoreSumWarning(UserWarning):
    """Imported scores deviate from the expected per-map total."""


def header_size() -> int:
    return _HEADER.size


def step_block_size(seq_len: int, n_layers: int, n_heads: int, flags: int, n_events: int) -> int:
    """Byte length of one step block, for size-formula checks."""
    size = 4 + 4  # step_index, attn_rows
    size += 4 * seq_len  # token ids
    size += (seq_len + 7) // 8  # mask bitset
    size += 4 + 16 * n_events
    per_cell = 0
    if flags & FLAG_COLUMN_SCORES:
        per_cell += 4 * seq_len
    if flags & FLAG_FULL_MAPS:
        per_cell += 4 * seq_len * seq_len
    return size + n_layers * n_heads * per_cell


def _pack_bitset(flags: np.ndarray) -> bytes:
    return np.packbits(flags.astype(np.uint8), bitorder="little").tobytes()


def _unpack_bitset(data: bytes, n: int) -> np.ndarray:
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8), bitorder="little")
    return bits[:n].astype(bool)


def write_trace(trace: DecodeTrace, path, include_maps: bool | None = None) -> None:
    """Serialize a trace; bit-deterministic for identical traces."""
    if include_maps is None:
        include_maps = trace.has_full_maps
    if include_maps and any(rec.maps is None for rec in trace.steps):
        raise ConfigError("include_maps requested but a step has no full maps")
    flags = FLAG_COLUMN_SCORES | (FLAG_FULL_MAPS if include_maps else 0)
    cfg = trace.config
    seq_len = trace.seq_len
    blob = bytearray()
    blob += _HEADER.pack(
        MAGIC,
        VERSION,
        seq_len,
        trace.n_layers,
        trace.n_heads,
        len(trace.steps),
        trace.vocab_size,
        _STRATEGY_TAGS[cfg.strategy],
        flags,
        cfg.seed,
        trace.prompt_len,
        cfg.block_size,
        cfg.total_steps,
        float(cfg.temperature),
    )
    # unmasking is monotone, so the snapshot at each step is the final ids
    # re-masked with that step's flags; storing it keeps readers trivial
    for rec in trace.steps:
        ids = _step_ids(trace, rec)
        blob += struct.pack("<II", rec.step, rec.attn_rows)
        blob += ids.astype("<u4").tobytes()
        blob += _pack_bitset(rec.mask_flags)
        blob += struct.pack("<I", len(rec.newly_unmasked))
        if rec.newly_unmasked:
            blob += np.array([e.position for e in rec.newly_unmasked], dtype="<u4").tobytes()
            blob += np.array([e.source for e in rec.newly_unmasked], dtype="<u4").tobytes()
            blob += np.array([e.token for e in rec.newly_unmasked], dtype="<u4").tobytes()
            blob += np.array([e.confidence for e in rec.newly_unmasked], dtype="<f4").tobytes()
        for layer in range(trace.n_layers):
            for head in range(trace.n_heads):
                blob += np.ascontiguousarray(rec.scores[(layer, head)], dtype="<f4").tobytes()
                if include_maps:
                    blob += np.ascontiguousarray(rec.maps[(layer, head)], dtype="<f4").tobytes()
    try:
        with open(path, "wb") as fh:
            fh.write(bytes(blob))
    except OSError as exc:
        raise OSError(f"cannot write trace to {path}: {exc}") from exc


def _step_ids(trace: DecodeTrace, rec: StepRecord) -> np.ndarray:
    """Token snapshot at the end of `rec`, replayed from the final sequence."""
    ids = trace.final.ids.copy()
    ids[rec.mask_flags] = MASK_ID
    return ids


class _Cursor:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def need(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TraceTruncationError(
                f"need {n} bytes but only {len(self.data) - self.pos} remain", self.pos
            )
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.need(4))[0]

    def array(self, dtype: str, count: int, what: str) -> np.ndarray:
        itemsize = np.dtype(dtype).itemsize
        raw = self.need(itemsize * count)
        arr = np.frombuffer(raw, dtype=dtype)
        if np.issubdtype(arr.dtype, np.floating) and not np.isfinite(arr).all():
            raise TraceFormatError(f"non-finite values in {what}")
        return arr


def read_trace(path) -> DecodeTrace:
    """Parse and validate a trace file; returns a fully populated DecodeTrace."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise OSError(f"cannot read trace from {path}: {exc}") from exc
    cur = _Cursor(data)
    raw = cur.need(_HEADER.size)
    (
        magic,
        version,
        seq_len,
        n_layers,
        n_heads,
        n_steps,
        vocab_size,
        strategy_tag,
        flags,
        seed,
        prompt_len,
        block_size,
        total_steps,
        temperature,
    ) = _HEADER.unpack(raw)
    if magic != MAGIC:
        raise TraceFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise TraceFormatError(f"unsupported version {version}")
    if strategy_tag not in _TAG_STRATEGIES:
        raise TraceFormatError(f"unknown strategy tag {strategy_tag}")
    if flags & ~(FLAG_FULL_MAPS | FLAG_COLUMN_SCORES):
        raise TraceFormatError(f"unknown flag bits 0x{flags:02x}")
    if not flags & FLAG_COLUMN_SCORES:
        raise TraceFormatError("column scores are mandatory (flag bit1)")
    if min(seq_len, n_layers, n_heads, n_steps) < 1:
        raise TraceFormatError("all dimensions must be >= 1")
    if vocab_size < 4:
        raise TraceFormatError(f"vocab_size {vocab_size} below the reserved id count")
    if prompt_len >= seq_len:
        raise TraceFormatError(f"prompt_len {prompt_len} must be < S {seq_len}")
    if not np.isfinite(temperature):
        raise TraceFormatError("non-finite temperature")
    strategy = _TAG_STRATEGIES[strategy_tag]
    imported = strategy == "imported"

    prev_flags = np.zeros(seq_len, dtype=bool)
    prev_flags[prompt_len:] = True
    with_maps = bool(flags & FLAG_FULL_MAPS)
    records: list[StepRecord] = []
    for i in range(n_steps):
        step_index = cur.u32()
        if step_index != i:
            raise TraceFormatError(f"step index {step_index} where {i} expected")
        attn_rows = cur.u32()
        if not 1 <= attn_rows <= seq_len:
            raise TraceFormatError(f"attn_rows {attn_rows} outside [1, {seq_len}]")
        ids = cur.array("<u4", seq_len, "token ids").astype(np.int64)
        if (ids >= vocab_size).any():
            raise TraceFormatError("token id outside vocabulary")
        mask_flags = _unpack_bitset(cur.need((seq_len + 7) // 8), seq_len)
        n_new = cur.u32()
        if n_new > seq_len:
            raise TraceFormatError(f"{n_new} unmask events exceed sequence length")
        positions = cur.array("<u4", n_new, "event positions").astype(np.int64)
        sources = cur.array("<u4", n_new, "event sources").astype(np.int64)
        tokens = cur.array("<u4", n_new, "event tokens").astype(np.int64)
        confs = cur.array("<f4", n_new, "event confidences").astype(np.float64)
        if n_new and (positions >= seq_len).any():
            raise TraceFormatError("unmask event position out of range")
        if n_new and (sources >= seq_len).any():
            raise TraceFormatError("unmask event source out of range")
        if n_new and (tokens >= vocab_size).any():
            raise TraceFormatError("unmask event token outside vocabulary")
        if len(set(positions.tolist())) != n_new:
            raise TraceFormatError("duplicate unmask event positions in one step")
        if not imported:
            if mask_flags[:prompt_len].any():
                raise TraceFormatError("prompt position flagged as masked")
            if n_new and not prev_flags[positions].all():
                raise TraceFormatError("unmask event for a position that was not masked")
            expected = prev_flags.copy()
            expected[positions] = False
            if not np.array_equal(mask_flags, expected):
                raise TraceFormatError(f"mask flags at step {i} do not follow from events")
            if ((ids == MASK_ID) != mask_flags).any():
                raise TraceFormatError("ids and mask flags disagree about MASK positions")
        scores: dict[tuple[int, int], np.ndarray] = {}
        maps: dict[tuple[int, int], np.ndarray] | None = {} if with_maps else None
        for layer in range(n_layers):
            for head in range(n_heads):
                vec = cur.array("<f4", seq_len, "column scores").astype(np.float32)
                if (vec < 0).any():
                    raise TraceFormatError("negative column score")
                scores[(layer, head)] = vec
                if with_maps:
                    grid = cur.array("<f4", seq_len * seq_len, "attention map")
                    if (grid < 0).any():
                        raise TraceFormatError("negative attention weight")
                    maps[(layer, head)] = grid.reshape(seq_len, seq_len).astype(np.float32)
        events = [
            UnmaskEvent(position=int(p), token=int(t), confidence=float(c), source=int(s))
            for p, s, t, c in zip(positions, sources, tokens, confs)
        ]
        records.append(StepRecord(i, events, mask_flags, scores, maps, attn_rows))
        prev_flags = mask_flags
        last_ids = ids
    if cur.pos != len(data):
        raise TraceFormatError(f"{len(data) - cur.pos} trailing bytes after payload")
    if not imported and prev_flags[prompt_len:].any():
        raise TraceFormatError("final step leaves generation positions masked")

    config = DecodeConfig(
        strategy=strategy,
        gen_len=seq_len - prompt_len,
        total_steps=total_steps,
        block_size=block_size,
        temperature=temperature,
        seed=seed,
    )
    final = TokenSequence(ids=last_ids, mask_flags=prev_flags.copy(), prompt_len=prompt_len)
    return DecodeTrace(
        config=config,
        prompt_len=prompt_len,
        steps=records,
        final=final,
        seq_len=seq_len,
        n_layers=n_layers,
        n_heads=n_heads,
        vocab_size=vocab_size,
    )


def traces_equal(a: DecodeTrace, b: DecodeTrace) -> bool:
    """Structural equality, with float payloads compared bit-for-bit as f32."""
    if (a.config, a.prompt_len, a.seq_len, a.n_layers, a.n_heads, a.vocab_size) != (
        b.config,
        b.prompt_len,
        b.seq_len,
        b.n_layers,
        b.n_heads,
        b.vocab_size,
    ):
        return False
    if len(a.steps) != len(b.steps):
        return False
    for ra, rb in zip(a.steps, b.steps):
        if ra.step != rb.step or ra.attn_rows != rb.attn_rows:
            return False
        if ra.newly_unmasked != rb.newly_unmasked:
            return False
        if not np.array_equal(ra.mask_flags, rb.mask_flags):
            return False
        if sorted(ra.scores) != sorted(rb.scores):
            return False
        for key in ra.scores:
            if ra.scores[key].astype("<f4").tobytes() != rb.scores[key].astype("<f4").tobytes():
                return False
        if (ra.maps is None) != (rb.maps is None):
            return False
        if ra.maps is not None:
            if sorted(ra.maps) != sorted(rb.maps):
                return False
            for key in ra.maps:
                if ra.maps[key].astype("<f4").tobytes() != rb.maps[key].astype("<f4").tobytes():
                    return False
    if not np.array_equal(a.final.ids, b.final.ids):
        return False
    if not np.array_equal(a.final.mask_flags, b.final.mask_flags):
        return False
    return True


def import_external(path) -> DecodeTrace:
    """Build a score-only trace from a step,layer,head,position,score CSV.

    The grid must be dense over the dimensions implied by the maxima; the
    first missing cell is reported. Per-map score totals more than 5% away
    from the expected sequence length raise a ScoreSumWarning but the import
    proceeds.
    """
    try:
        with open(path, "r", newline="") as fh:
            reader = csv.reader(fh)
            rows = list(reader)
    except OSError as exc:
        raise OSError(f"cannot read score CSV from {path}: {exc}") from exc
    if not rows or rows[0] != IMPORT_CSV_HEADER:
        raise TraceFormatError(
            f"{path}: header must be exactly {','.join(IMPORT_CSV_HEADER)}"
        )
    cells: dict[tuple[int, int, int, int], float] = {}
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 5:
            raise TraceFormatError(f"{path}:{lineno}: expected 5 columns, got {len(row)}")
        try:
            step, layer, head, position = (int(row[0]), int(row[1]), int(row[2]), int(row[3]))
            score = float(row[4])
        except ValueError as exc:
            raise TraceFormatError(f"{path}:{lineno}: {exc}") from None
        if min(step, layer, head, position) < 0:
            raise TraceFormatError(f"{path}:{lineno}: negative index")
        if not np.isfinite(score) or score < 0:
            raise TraceFormatError(f"{path}:{lineno}: score must be finite and >= 0")
        key = (step, layer, head, position)
        if key in cells:
            raise TraceFormatError(f"{path}:{lineno}: duplicate cell {key}")
        cells[key] = score
    if not cells:
        raise TraceFormatError(f"{path}: no data rows")
    n_steps = max(k[0] for k in cells) + 1
    n_layers = max(k[1] for k in cells) + 1
    n_heads = max(k[2] for k in cells) + 1
    seq_len = max(k[3] for k in cells) + 1
    for step in range(n_steps):
        for layer in range(n_layers):
            for head in range(n_heads):
                for position in range(seq_len):
                    if (step, layer, head, position) not in cells:
                        raise SparseImportError(
                            f"{path}: missing cell step={step} layer={layer} "
                            f"head={head} position={position}"
                        )

    records: list[StepRecord] = []
    flags = np.zeros(seq_len, dtype=bool)
    for step in range(n_steps):
        scores: dict[tuple[int, int], np.ndarray] = {}
        for layer in range(n_layers):
            for head in range(n_heads):
                vec = np.array(
                    [cells[(step, layer, head, j)] for j in range(seq_len)], dtype=np.float32
                )
                total = float(vec.sum())
                if abs(total - seq_len) > 0.05 * seq_len:
                    warnings.warn(
                        f"step {step} layer {layer} head {head}: scores total {total:.3f}, "
                        f"expected ~{seq_len}",
                        ScoreSumWarning,
                        stacklevel=2,
                    )
                scores[(layer, head)] = vec
        records.append(StepRecord(step, [], flags.copy(), scores, None, seq_len))

    config = DecodeConfig(
        strategy="imported",
        gen_len=seq_len,
        total_steps=n_steps,
        block_size=0,
        temperature=0.0,
        seed=0,
    )
    final = TokenSequence(
        ids=np.full(seq_len, PAD_ID, dtype=np.int64),
        mask_flags=flags.copy(),
        prompt_len=0,
    )
    return DecodeTrace(
        config=config,
        prompt_len=0,
        steps=records,
        final=final,
        seq_len=seq_len,
        n_layers=n_layers,
        n_heads=n_heads,
        vocab_size=4,
    )
