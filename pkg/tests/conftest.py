"""Shared fixtures. Trained models are expensive, so they are session-scoped
and reused by the module tests and the acceptance suite alike."""

from __future__ import annotations

import numpy as np
import pytest

from dlmscope import decoding, diffusion, evalharness, model
from dlmscope.numerics import RngState


def tiny_params(
    vocab: int = 12,
    d_model: int = 16,
    n_layers: int = 1,
    n_heads: int = 2,
    max_seq: int = 24,
    mode: str = "bidirectional",
    seed: int = 3,
) -> model.Parameters:
    cfg = model.ModelConfig(
        vocab_size=vocab,
        d_model=d_model,
        n_layers=n_layers,
        n_heads=n_heads,
        max_seq=max_seq,
        attention_mode=mode,
    )
    return model.init_params(cfg, RngState(seed))


def random_stochastic(gen: np.random.Generator, s: int) -> np.ndarray:
    m = gen.random((s, s)) + 1e-3
    return (m / m.sum(axis=1, keepdims=True)).astype(np.float64)


@pytest.fixture(scope="session")
def copy_setup():
    """Trained 2-layer copy model (6-char payload, 8-token generation region)."""
    task = evalharness.Task(kind="copy", n_train=1500, n_eval=150, seed=1, payload_len=6)
    train_split, eval_split = evalharness.gen_dataset(task)
    gen_len = 8
    corpus = evalharness.build_corpus(task, train_split, gen_len)
    seq_len = corpus[0][0].shape[0]
    cfg = model.ModelConfig(
        vocab_size=evalharness.VOCAB_SIZE, d_model=64, n_layers=2, n_heads=4, max_seq=seq_len
    )
    hyper = diffusion.TrainHyper(steps=1200, batch_size=32, lr=1.5e-3, weighting="uniform")
    result = diffusion.train(cfg, "identity", corpus, hyper, RngState(5))
    return {
        "task": task,
        "eval_split": eval_split,
        "gen_len": gen_len,
        "params": result.params,
        "curve": result.curve,
    }


@pytest.fixture(scope="session")
def copy_traces(copy_setup):
    """Full-capture block traces from the trained copy model."""
    dcfg = decoding.DecodeConfig(
        strategy="block_semi_ar",
        gen_len=copy_setup["gen_len"],
        total_steps=8,
        block_size=4,
        seed=0,
    )
    traces = []
    for prompt, _ in copy_setup["eval_split"][:6]:
        traces.append(
            decoding.decode(
                copy_setup["params"], evalharness.prompt_ids(prompt), dcfg, capture_full=True
            )
        )
    return traces


@pytest.fixture(scope="session")
def addition_setup():
    """Trained bidirectional DLM and causal ARM on two-digit addition."""
    import time

    start = time.monotonic()
    task = evalharness.Task(kind="addition_2digit", n_train=3000, n_eval=200, seed=1)
    train_split, eval_split = evalharness.gen_dataset(task)
    gen_len = 4
    corpus = evalharness.build_corpus(task, train_split, gen_len)
    seq_len = corpus[0][0].shape[0]

    def make(mode):
        return model.ModelConfig(
            vocab_size=evalharness.VOCAB_SIZE,
            d_model=96,
            n_layers=3,
            n_heads=4,
            max_seq=seq_len,
            attention_mode=mode,
        )

    dlm = diffusion.train(
        make("bidirectional"),
        "identity",
        corpus,
        diffusion.TrainHyper(steps=4000, batch_size=32, lr=1e-3, weighting="uniform"),
        RngState(11),
    )
    arm = diffusion.train(
        make("causal"),
        "next_token",
        corpus,
        diffusion.TrainHyper(steps=2500, batch_size=32, lr=1e-3, weighting="uniform"),
        RngState(11),
    )
    return {
        "task": task,
        "eval_split": eval_split,
        "gen_len": gen_len,
        "dlm": dlm.params,
        "arm": arm.params,
        "train_seconds": time.monotonic() - start,
    }
