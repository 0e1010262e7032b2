"""Toy transformer with bidirectional (diffusion) or causal (autoregressive) attention.

Pre-norm residual blocks with RMS normalization, rotary rotation of queries
and keys, and a squared-ReLU MLP. Forward and reverse passes are written by
hand on numpy arrays. The public API works on single sequences; internally
every tensor carries a leading batch axis so training steps stay vectorized.

The forward pass can capture full per-(layer, head) attention maps and can
apply logit overrides that force selected attention entries to -inf before
the softmax, which is how sink-masking interventions are expressed.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConfigError,
    DivergenceError,
    EmptyLossError,
    InvalidOverrideError,
    ShapeError,
    TraceFormatError,
)
from .numerics import RngState, _rope_rotate

# reserved vocabulary ids, present in every model
PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
MASK_ID = 3
N_RESERVED = 4

ATTENTION_MODES = ("bidirectional", "causal")

_NORM_EPS = 1e-5
_CHECKPOINT_MAGIC = b"DLMW"
_CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    max_seq: int = 64
    attention_mode: str = "bidirectional"
    rope_base: float = 10000.0
    tied_embeddings: bool = False

    def __post_init__(self):
        if self.vocab_size < N_RESERVED:
            raise ConfigError(f"vocab_size must be >= {N_RESERVED}, got {self.vocab_size}")
        if self.max_seq < 2:
            raise ConfigError(f"max_seq must be >= 2, got {self.max_seq}")
        if self.n_heads < 1 or self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.d_head % 2 != 0:
            raise ConfigError(f"head dimension must be even, got {self.d_head}")
        if self.attention_mode not in ATTENTION_MODES:
            raise ConfigError(f"unknown attention_mode {self.attention_mode!r}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def d_ff(self) -> int:
        return 4 * self.d_model


def param_keys(cfg: ModelConfig) -> list[str]:
    """Parameter names in declaration (and checkpoint serialization) order."""
    keys = ["embed"]
    for i in range(cfg.n_layers):
        keys += [
            f"layer{i}.wq",
            f"layer{i}.wk",
            f"layer{i}.wv",
            f"layer{i}.wo",
            f"layer{i}.attn_gain",
            f"layer{i}.mlp_w1",
            f"layer{i}.mlp_w2",
            f"layer{i}.mlp_gain",
        ]
    keys.append("final_gain")
    if not cfg.tied_embeddings:
        keys.append("out_proj")
    return keys


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f, v = cfg.d_model, cfg.d_ff, cfg.vocab_size
    shapes: dict[str, tuple[int, ...]] = {"embed": (v, d)}
    for i in range(cfg.n_layers):
        shapes[f"layer{i}.wq"] = (d, d)
        shapes[f"layer{i}.wk"] = (d, d)
        shapes[f"layer{i}.wv"] = (d, d)
        shapes[f"layer{i}.wo"] = (d, d)
        shapes[f"layer{i}.attn_gain"] = (d,)
        shapes[f"layer{i}.mlp_w1"] = (d, f)
        shapes[f"layer{i}.mlp_w2"] = (f, d)
        shapes[f"layer{i}.mlp_gain"] = (d,)
    shapes["final_gain"] = (d,)
    if not cfg.tied_embeddings:
        shapes["out_proj"] = (d, v)
    return shapes


@dataclass
class Parameters:
    """Model configuration plus the named weight tensors."""

    config: ModelConfig
    tensors: dict[str, np.ndarray]

    def clone(self) -> "Parameters":
        return Parameters(self.config, {k: t.copy() for k, t in self.tensors.items()})

    def astype(self, dtype) -> "Parameters":
        return Parameters(self.config, {k: t.astype(dtype) for k, t in self.tensors.items()})


def init_params(cfg: ModelConfig, rng: RngState) -> Parameters:
    """Scaled random initialization, deterministic given the rng state.

    Projections are drawn with variance 1/fan_in; the output projection is
    additionally shrunk so an untrained model yields near-uniform logits.
    """
    gen = rng.generator()
    tensors: dict[str, np.ndarray] = {}
    for key in param_keys(cfg):
        shape = param_shapes(cfg)[key]
        if key.endswith("gain"):
            tensors[key] = np.ones(shape, dtype=np.float32)
            continue
        if key == "embed":
            std = 0.02
        elif key == "out_proj":
            std = 0.02 * cfg.d_model**-0.5
        else:
            std = shape[0] ** -0.5
        tensors[key] = (gen.standard_normal(shape, dtype=np.float32) * np.float32(std))
    return Parameters(cfg, tensors)


@dataclass(frozen=True)
class OverrideRule:
    """Force attention logits toward `key` to -inf; None fields mean "all"."""

    key: int
    layer: int | None = None
    head: int | None = None
    query: int | None = None


@dataclass(frozen=True)
class MaskOverride:
    rules: tuple[OverrideRule, ...]
    keep_one: bool = False


@dataclass(eq=False)
class AttentionTensor:
    """Row-stochastic S x S attention map for one (layer, head)."""

    layer: int
    head: int
    scores: np.ndarray


@dataclass(eq=False)
class ForwardOutput:
    logits: np.ndarray
    attention: list[AttentionTensor] | None = None
    # (layer, head, query_row, kept_key) entries where the keep-one rule fired
    fallbacks: list[tuple[int, int, int, int]] = field(default_factory=list)


def _rms_forward(x: np.ndarray, gain: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ms = (x * x).mean(axis=-1) + x.dtype.type(_NORM_EPS)
    s = ms ** x.dtype.type(-0.5)
    return x * s[..., None] * gain, s


def _rms_backward(dy, x, s, gain):
    d = x.shape[-1]
    dgain = (dy * x * s[..., None]).reshape(-1, d).sum(axis=0)
    u = dy * gain
    dot = (u * x).sum(axis=-1, keepdims=True)
    dx = u * s[..., None] - x * ((s**3 / d)[..., None] * dot)
    return dx, dgain


def _softmax_last(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    z = np.exp(x - m)
    return z / z.sum(axis=-1, keepdims=True)


class DegenerateRowsAfterOverride(InvalidOverrideError):
    """An override wiped out every visible key for some query row."""

    def __init__(self, layer: int, head: int, rows):
        super().__init__(
            f"override masks all visible keys for rows {list(map(int, rows))} "
            f"in layer {layer} head {head}; enable keep_one to allow this"
        )


def _validate_override(override: MaskOverride, cfg: ModelConfig, seq_len: int) -> None:
    for rule in override.rules:
        if not 0 <= rule.key < seq_len:
            raise InvalidOverrideError(f"override key {rule.key} outside sequence of length {seq_len}")
        if rule.layer is not None and not 0 <= rule.layer < cfg.n_layers:
            raise InvalidOverrideError(f"override layer {rule.layer} out of range")
        if rule.head is not None and not 0 <= rule.head < cfg.n_heads:
            raise InvalidOverrideError(f"override head {rule.head} out of range")
        if rule.query is not None and not 0 <= rule.query < seq_len:
            raise InvalidOverrideError(f"override query {rule.query} outside sequence")


def _run(
    params: Parameters,
    ids: np.ndarray,
    capture: bool,
    override: MaskOverride | None,
    want_cache: bool,
):
    """Shared forward over a (B, S) id batch.

    Returns (logits, attention, fallbacks, cache); attention is captured from
    batch row 0 (overrides and capture are only exercised with B == 1).
    """
    cfg = params.config
    t = params.tensors
    ids = np.asarray(ids)
    if ids.ndim != 2:
        raise ShapeError(f"expected (batch, seq) ids, got shape {ids.shape}")
    batch, seq_len = ids.shape
    if seq_len > cfg.max_seq:
        raise ShapeError(f"sequence length {seq_len} exceeds max_seq {cfg.max_seq}")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise ShapeError("token id outside vocabulary")
    if override is not None:
        _validate_override(override, cfg, seq_len)
        if batch != 1:
            raise InvalidOverrideError("logit overrides are only supported for single sequences")

    dh = cfg.d_head
    inv_sqrt = t["embed"].dtype.type(dh**-0.5)
    positions = np.arange(seq_len)
    causal = cfg.attention_mode == "causal"
    tril = np.tril(np.ones((seq_len, seq_len), dtype=bool)) if causal else None

    x = t["embed"][ids]  # (B, S, D)
    attention: list[AttentionTensor] | None = [] if capture else None
    fallbacks: list[tuple[int, int, int, int]] = []
    cache: dict | None = {"ids": ids, "layers": []} if want_cache else None

    for li in range(cfg.n_layers):
        lc: dict = {}
        h1, s1 = _rms_forward(x, t[f"layer{li}.attn_gain"])
        q = h1 @ t[f"layer{li}.wq"]
        k = h1 @ t[f"layer{li}.wk"]
        v = h1 @ t[f"layer{li}.wv"]
        attn_cat = np.empty_like(h1)
        if want_cache:
            lc.update(x_in=x, s1=s1, h1=h1, v=v, qr=[], kr=[], A=[])
        for hi in range(cfg.n_heads):
            sl = slice(hi * dh, (hi + 1) * dh)
            qr = _rope_rotate(q[..., sl], positions, cfg.rope_base, inverse=False)
            kr = _rope_rotate(k[..., sl], positions, cfg.rope_base, inverse=False)
            scores = (qr @ kr.swapaxes(-1, -2)) * inv_sqrt
            if causal:
                scores = np.where(tril, scores, -np.inf)
            if override is not None:
                pre = scores.copy()
                for rule in override.rules:
                    if rule.layer not in (None, li) or rule.head not in (None, hi):
                        continue
                    if rule.query is None:
                        scores[:, :, rule.key] = -np.inf
                    else:
                        scores[:, rule.query, rule.key] = -np.inf
                dead = np.isneginf(scores[0]).all(axis=-1)
                if dead.any():
                    if not override.keep_one:
                        raise DegenerateRowsAfterOverride(li, hi, np.nonzero(dead)[0])
                    for row in np.nonzero(dead)[0]:
                        kept = int(np.argmax(pre[0, row]))
                        scores[0, row, kept] = pre[0, row, kept]
                        fallbacks.append((li, hi, int(row), kept))
            a_mat = _softmax_last(scores)
            if capture:
                attention.append(AttentionTensor(li, hi, a_mat[0].copy()))
            attn_cat[..., sl] = a_mat @ v[..., sl]
            if want_cache:
                lc["qr"].append(qr)
                lc["kr"].append(kr)
                lc["A"].append(a_mat)
        x_mid = x + attn_cat @ t[f"layer{li}.wo"]
        h2, s2 = _rms_forward(x_mid, t[f"layer{li}.mlp_gain"])
        a_pre = h2 @ t[f"layer{li}.mlp_w1"]
        mlp_m = np.maximum(a_pre, 0) ** 2
        x = x_mid + mlp_m @ t[f"layer{li}.mlp_w2"]
        if want_cache:
            lc.update(attn_cat=attn_cat, x_mid=x_mid, s2=s2, h2=h2, a_pre=a_pre, mlp_m=mlp_m)
            cache["layers"].append(lc)

    h_f, s_f = _rms_forward(x, t["final_gain"])
    logits = h_f @ (t["embed"].T if cfg.tied_embeddings else t["out_proj"])
    if want_cache:
        cache.update(x_out=x, s_f=s_f, h_f=h_f)
    return logits, attention, fallbacks, cache


def forward(
    params: Parameters,
    ids,
    capture: bool = False,
    logit_override: MaskOverride | None = None,
) -> ForwardOutput:
    """Run the model over one sequence of token ids."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ShapeError(f"expected a 1-D id sequence, got shape {ids.shape}")
    logits, attention, fallbacks, _ = _run(
        params, ids[None, :], capture=capture, override=logit_override, want_cache=False
    )
    return ForwardOutput(logits[0], attention, fallbacks)


def _assemble_batch(params: Parameters, batch, objective: str | None):
    items = list(batch)
    if not items:
        raise EmptyLossError("empty batch")
    seq_len = len(items[0].ids)
    if any(len(it.ids) != seq_len for it in items):
        raise ShapeError("batch items must share one sequence length")
    if objective == "identity":
        for it in items:
            if any(it.ids[p] != MASK_ID for p in it.loss_positions):
                raise ConfigError("identity objective expects loss positions to be masked")
    elif objective == "shift":
        for it in items:
            if any(p + 1 >= seq_len or it.ids[p + 1] != MASK_ID for p in it.loss_positions):
                raise ConfigError("shift objective expects the position after each loss position to be masked")

    ids = np.stack([np.asarray(it.ids, dtype=np.int64) for it in items])
    dtype = params.tensors["embed"].dtype
    b = len(items)
    w_mat = np.zeros((b, seq_len), dtype=dtype)
    tgt = np.zeros((b, seq_len), dtype=np.int64)
    for bi, it in enumerate(items):
        pos = np.asarray(list(it.loss_positions), dtype=np.int64)
        if pos.size == 0:
            raise EmptyLossError(f"batch item {bi} has no loss positions")
        w_mat[bi, pos] = np.asarray(it.weights)[pos].astype(dtype)
        tgt[bi, pos] = np.asarray(it.targets)[pos]
    total_w = float(w_mat.sum())
    if total_w <= 0:
        raise EmptyLossError("total loss weight is zero")
    return ids, w_mat, tgt, total_w


def _pooled_loss(logits: np.ndarray, w_mat: np.ndarray, tgt: np.ndarray, total_w: float) -> float:
    # loss in float64 for a stable scalar regardless of parameter dtype
    l64 = logits.astype(np.float64)
    m = l64.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(l64 - m).sum(axis=-1)) + m[..., 0]
    nll = logz - np.take_along_axis(l64, tgt[..., None], axis=-1)[..., 0]
    loss = float((w_mat.astype(np.float64) * nll).sum() / total_w)
    if not np.isfinite(loss):
        raise DivergenceError(f"non-finite loss {loss}")
    return loss


def batch_loss(params: Parameters, batch, objective: str | None = None) -> float:
    """Pooled weighted cross-entropy without gradients (finite-difference probes)."""
    ids, w_mat, tgt, total_w = _assemble_batch(params, batch, objective)
    logits, _, _, _ = _run(params, ids, capture=False, override=None, want_cache=False)
    return _pooled_loss(logits, w_mat, tgt, total_w)


def loss_and_grads(params: Parameters, batch, objective: str | None = None):
    """Pooled weighted cross-entropy over a batch plus full parameter gradients.

    Batch items carry .ids, .loss_positions, .targets, .weights (full-length
    targets/weights; zero-weight positions contribute exactly zero gradient).
    All items must share one sequence length.
    """
    ids, w_mat, tgt, total_w = _assemble_batch(params, batch, objective)
    b, seq_len = ids.shape
    dtype = params.tensors["embed"].dtype

    logits, _, _, cache = _run(params, ids, capture=False, override=None, want_cache=True)
    loss = _pooled_loss(logits, w_mat, tgt, total_w)

    probs = _softmax_last(logits)
    dlogits = probs
    np.subtract.at(dlogits, (np.arange(b)[:, None], np.arange(seq_len)[None, :], tgt), 1.0)
    dlogits *= (w_mat / dtype.type(total_w))[..., None]

    grads = _backward(params, cache, dlogits)
    return loss, grads


def _backward(params: Parameters, cache: dict, dlogits: np.ndarray) -> dict[str, np.ndarray]:
    cfg = params.config
    t = params.tensors
    dh = cfg.d_head
    inv_sqrt = t["embed"].dtype.type(dh**-0.5)
    ids = cache["ids"]
    seq_len = ids.shape[1]
    positions = np.arange(seq_len)
    grads = {k: np.zeros_like(v) for k, v in t.items()}

    if cfg.tied_embeddings:
        grads["embed"] += np.einsum("bsv,bsd->vd", dlogits, cache["h_f"])
        dh_f = dlogits @ t["embed"]
    else:
        grads["out_proj"] += np.einsum("bsd,bsv->dv", cache["h_f"], dlogits)
        dh_f = dlogits @ t["out_proj"].T
    dx, dgf = _rms_backward(dh_f, cache["x_out"], cache["s_f"], t["final_gain"])
    grads["final_gain"] += dgf

    for li in reversed(range(cfg.n_layers)):
        lc = cache["layers"][li]
        # MLP block
        dout = dx
        grads[f"layer{li}.mlp_w2"] += np.einsum("bsf,bsd->fd", lc["mlp_m"], dout)
        dm = dout @ t[f"layer{li}.mlp_w2"].T
        da = dm * (2 * np.maximum(lc["a_pre"], 0))
        grads[f"layer{li}.mlp_w1"] += np.einsum("bsd,bsf->df", lc["h2"], da)
        dh2 = da @ t[f"layer{li}.mlp_w1"].T
        dx_mid_norm, dg2 = _rms_backward(dh2, lc["x_mid"], lc["s2"], t[f"layer{li}.mlp_gain"])
        grads[f"layer{li}.mlp_gain"] += dg2
        dx_mid = dout + dx_mid_norm

        # attention block
        grads[f"layer{li}.wo"] += np.einsum("bsd,bse->de", lc["attn_cat"], dx_mid)
        d_cat = dx_mid @ t[f"layer{li}.wo"].T
        dq = np.zeros_like(lc["h1"])
        dk = np.zeros_like(lc["h1"])
        dv = np.zeros_like(lc["h1"])
        for hi in range(cfg.n_heads):
            sl = slice(hi * dh, (hi + 1) * dh)
            do = d_cat[..., sl]
            a_mat = lc["A"][hi]
            vh = lc["v"][..., sl]
            dA = do @ vh.swapaxes(-1, -2)
            dv[..., sl] = a_mat.swapaxes(-1, -2) @ do
            ds = a_mat * (dA - (a_mat * dA).sum(axis=-1, keepdims=True))
            dqr = (ds @ lc["kr"][hi]) * inv_sqrt
            dkr = (ds.swapaxes(-1, -2) @ lc["qr"][hi]) * inv_sqrt
            dq[..., sl] = _rope_rotate(dqr, positions, cfg.rope_base, inverse=True)
            dk[..., sl] = _rope_rotate(dkr, positions, cfg.rope_base, inverse=True)
        grads[f"layer{li}.wq"] += np.einsum("bsd,bse->de", lc["h1"], dq)
        grads[f"layer{li}.wk"] += np.einsum("bsd,bse->de", lc["h1"], dk)
        grads[f"layer{li}.wv"] += np.einsum("bsd,bse->de", lc["h1"], dv)
        dh1 = dq @ t[f"layer{li}.wq"].T + dk @ t[f"layer{li}.wk"].T + dv @ t[f"layer{li}.wv"].T
        dx_in_norm, dg1 = _rms_backward(dh1, lc["x_in"], lc["s1"], t[f"layer{li}.attn_gain"])
        grads[f"layer{li}.attn_gain"] += dg1
        dx = dx_mid + dx_in_norm

    d_embed = grads["embed"]
    np.add.at(d_embed, ids.reshape(-1), dx.reshape(-1, cfg.d_model))
    return grads


# --- checkpoint file ("DLMW") ---------------------------------------------

_CFG_STRUCT = struct.Struct("<IIIIIIBBd")


def save_checkpoint(path, params: Parameters) -> None:
    cfg = params.config
    mode = 1 if cfg.attention_mode == "causal" else 0
    blob = bytearray()
    blob += _CHECKPOINT_MAGIC
    blob += struct.pack("<I", _CHECKPOINT_VERSION)
    blob += _CFG_STRUCT.pack(
        cfg.vocab_size,
        cfg.d_model,
        cfg.n_layers,
        cfg.n_heads,
        cfg.d_head,
        cfg.max_seq,
        mode,
        1 if cfg.tied_embeddings else 0,
        cfg.rope_base,
    )
    for key in param_keys(cfg):
        blob += np.ascontiguousarray(params.tensors[key], dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def load_checkpoint(path) -> Parameters:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != _CHECKPOINT_MAGIC:
        raise TraceFormatError(f"{path}: bad checkpoint magic {data[:4]!r}")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != _CHECKPOINT_VERSION:
        raise TraceFormatError(f"{path}: unsupported checkpoint version {version}")
    vals = _CFG_STRUCT.unpack_from(data, 8)
    vocab, d_model, n_layers, n_heads, d_head, max_seq, mode, tied, rope_base = vals
    cfg = ModelConfig(
        vocab_size=vocab,
        d_model=d_model,
        n_layers=n_layers,
        n_heads=n_heads,
        max_seq=max_seq,
        attention_mode="causal" if mode else "bidirectional",
        rope_base=rope_base,
        tied_embeddings=bool(tied),
    )
    if cfg.d_head != d_head:
        raise TraceFormatError(f"{path}: inconsistent head dimension in checkpoint")
    offset = 8 + _CFG_STRUCT.size
    tensors = {}
    for key in param_keys(cfg):
        shape = param_shapes(cfg)[key]
        count = int(np.prod(shape))
        end = offset + 4 * count
        if end > len(data):
            raise TraceFormatError(f"{path}: checkpoint truncated in block {key}")
        tensors[key] = np.frombuffer(data[offset:end], dtype="<f4").reshape(shape).copy()
        offset = end
    if offset != len(data):
        raise TraceFormatError(f"{path}: {len(data) - offset} trailing bytes in checkpoint")
    params = Parameters(cfg, tensors)
    for key, tensor in tensors.items():
        if not np.isfinite(tensor).all():
            raise TraceFormatError(f"{path}: non-finite values in block {key}")
    return params
