"""Dense linear algebra, nonlinearities, loss, and optimizer kernels.

A "matrix" here is a plain 2-D C-contiguous numpy array. The artifact runs
float32 end to end so that repeated runs on one platform are bit-identical;
every kernel preserves the dtype of its inputs, which lets oracle tests run
the same code in float64. The attention-mask sentinel is -inf at the logit
level: row_softmax maps it to exactly 0 and renormalizes the rest.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateRowError,
    DivergenceError,
    EmptyLossError,
    ShapeError,
)

NEG_INF = float("-inf")

_U64 = 0xFFFFFFFFFFFFFFFF
_GOLDEN = 0x9E3779B97F4A7C15


def _splitmix64(x: int) -> int:
    x = (x + _GOLDEN) & _U64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _U64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _U64
    return z ^ (z >> 31)


@dataclass(frozen=True)
class RngState:
    """Counter-based splittable RNG state.

    (seed, counter) fully determines the stream: the pair is used as the
    128-bit Philox key, so children with distinct counters are independent
    and any stream can be re-opened from scratch.
    """

    seed: int
    counter: int = 0

    def child(self, index: int) -> "RngState":
        """Derive an independent child stream; same (state, index) -> same child."""
        mixed = _splitmix64((self.counter ^ ((index + 1) * _GOLDEN)) & _U64)
        return RngState(self.seed & _U64, mixed)

    def split(self, n: int) -> list["RngState"]:
        return [self.child(i) for i in range(n)]

    def generator(self) -> np.random.Generator:
        key = np.array([self.seed & _U64, self.counter & _U64], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))


def as_matrix(data, dtype=np.float32) -> np.ndarray:
    """Coerce to a 2-D contiguous array of the given float dtype."""
    arr = np.ascontiguousarray(data, dtype=dtype)
    if arr.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {arr.shape}")
    return arr


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with an explicit shape check.

    numpy's BLAS path is used; its accumulation order is fixed per platform,
    which is what the reproducibility guarantees actually need.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def row_softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max-subtraction; -inf entries map to exactly 0.

    Raises DegenerateRowError if any row has no finite entry.
    """
    m = np.asarray(logits)
    if m.ndim != 2:
        raise ShapeError(f"row_softmax needs a 2-D matrix, got shape {m.shape}")
    if np.isnan(m).any() or np.isposinf(m).any():
        raise ShapeError("logits must be finite or -inf")
    row_max = np.max(m, axis=1, keepdims=True)
    if np.isneginf(row_max).any():
        bad = int(np.nonzero(np.isneginf(row_max))[0][0])
        raise DegenerateRowError(f"row {bad} is entirely -inf")
    z = np.exp(m - row_max)  # exp(-inf) == 0.0 exactly
    return z / z.sum(axis=1, keepdims=True)


def rope_apply(q_or_k: np.ndarray, positions, base: float) -> np.ndarray:
    """Rotate adjacent feature pairs by position-dependent angles.

    Pair m of a d-wide row at position p is rotated by p * base**(-2m/d).
    Position 0 is the identity and every rotation preserves the pair norm.
    """
    m = np.asarray(q_or_k)
    if m.ndim != 2:
        raise ShapeError(f"rope needs a 2-D matrix, got shape {m.shape}")
    return _rope_rotate(m, positions, base, inverse=False)


def _rope_rotate(mat: np.ndarray, positions, base: float, inverse: bool) -> np.ndarray:
    """Rotation core; accepts (..., n, d) stacks with one position per row."""
    m = np.asarray(mat)
    if m.ndim < 2:
        raise ShapeError(f"rope needs at least 2 dimensions, got shape {m.shape}")
    n, d = m.shape[-2], m.shape[-1]
    if d % 2 != 0:
        raise ShapeError(f"feature dimension must be even, got {d}")
    pos = np.asarray(positions, dtype=np.float64).reshape(-1)
    if pos.shape[0] != n:
        raise ShapeError(f"{n} rows but {pos.shape[0]} positions")
    # angles computed in float64, applied in the input dtype
    exponents = -2.0 * np.arange(d // 2, dtype=np.float64) / d
    theta = pos[:, None] * np.power(float(base), exponents)[None, :]
    if inverse:
        theta = -theta
    cos = np.cos(theta).astype(m.dtype)
    sin = np.sin(theta).astype(m.dtype)
    x = m[..., 0::2]
    y = m[..., 1::2]
    out = np.empty_like(m)
    out[..., 0::2] = x * cos - y * sin
    out[..., 1::2] = x * sin + y * cos
    return out


def masked_cross_entropy(
    logits: np.ndarray,
    targets: np.ndarray,
    loss_positions,
    weights: np.ndarray,
) -> float:
    """Weighted mean of -log softmax(logits)[target] over the given positions.

    targets and weights are full-length (indexed by sequence position);
    entries outside loss_positions are ignored.
    """
    logits = np.asarray(logits)
    targets = np.asarray(targets)
    weights = np.asarray(weights, dtype=np.float64)
    positions = np.asarray(sorted(loss_positions), dtype=np.int64)
    if positions.size == 0:
        raise EmptyLossError("loss_positions is empty")
    if positions.min() < 0 or positions.max() >= logits.shape[0]:
        raise ShapeError("loss position out of range")
    vocab = logits.shape[1]
    tgt = targets[positions]
    if tgt.min() < 0 or tgt.max() >= vocab:
        raise ShapeError("target id outside vocabulary")
    w = weights[positions]
    total_w = float(w.sum())
    if total_w <= 0.0:
        raise EmptyLossError("total loss weight is zero")
    rows = logits[positions].astype(np.float64)
    row_max = rows.max(axis=1, keepdims=True)
    logz = np.log(np.exp(rows - row_max).sum(axis=1)) + row_max[:, 0]
    nll = logz - rows[np.arange(positions.size), tgt]
    return float((w * nll).sum() / total_w)


@dataclass
class OptimizerState:
    """Adam state: per-parameter moments plus hyperparameters.

    eps_opt is the usual numerical-stability constant; it is unrelated to the
    sink-detection threshold used elsewhere in the package.
    """

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int
    lr: float
    beta1: float
    beta2: float
    eps_opt: float

    @classmethod
    def init(
        cls,
        params: dict[str, np.ndarray],
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps_opt: float = 1e-8,
    ) -> "OptimizerState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
            step=0,
            lr=lr,
            beta1=beta1,
            beta2=beta2,
            eps_opt=eps_opt,
        )


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: OptimizerState,
) -> tuple[dict[str, np.ndarray], OptimizerState]:
    """One bias-corrected Adam update. Updates params and state in place."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for key, p in params.items():
        g = grads[key]
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != param shape {p.shape} for {key}")
        if not np.isfinite(g).all():
            raise DivergenceError(f"non-finite gradient in {key}")
        m = state.m[key]
        v = state.v[key]
        m[...] = b1 * m + (1.0 - b1) * g
        v[...] = b2 * v + (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        p -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps_opt)).astype(p.dtype)
    return params, state


def finite_diff_gradient(
    loss_fn,
    params: dict[str, np.ndarray],
    perturbation: float = 1e-4,
) -> dict[str, np.ndarray]:
    """Central-difference gradient estimate, (f(x+h) - f(x-h)) / 2h per coordinate.

    Test oracle only: O(2 * n_params) loss evaluations.
    """
    if perturbation <= 0:
        raise ShapeError("perturbation must be positive")
    h = float(perturbation)
    grads = {}
    for key, p in params.items():
        g = np.zeros_like(p, dtype=np.float64)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = loss_fn(params)
            flat[i] = orig - h
            f_minus = loss_fn(params)
            flat[i] = orig
            gflat[i] = (f_plus - f_minus) / (2.0 * h)
        grads[key] = g
    return grads


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """||a - b|| / max(||a||, ||b||) with a floor to avoid 0/0."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    denom = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise DivergenceError(f"non-finite values in {what}")


__all__ = [
    "NEG_INF",
    "OptimizerState",
    "RngState",
    "adam_step",
    "as_matrix",
    "check_finite",
    "finite_diff_gradient",
    "masked_cross_entropy",
    "matmul",
    "relative_error",
    "rope_apply",
    "row_softmax",
]
