"""Synthetic character-level tasks with exact-match grading.

Tasks are deterministic prompt -> answer functions over a fixed character
alphabet (plus the four reserved ids), so training runs in minutes and
grading is a pure string comparison. Prompts within one task share a fixed
width, which keeps batches rectangular.
"""

from __future__ import annotations

import csv
import io
import string
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .decoding import DecodeConfig, DecodeTrace, decode
from .errors import ConfigError
from .model import BOS_ID, EOS_ID, MASK_ID, N_RESERVED, PAD_ID, Parameters
from .numerics import RngState

# reserved ids 0..3, then characters in this order
ALPHABET = string.ascii_lowercase + string.digits + " +-=|,."
VOCAB_SIZE = N_RESERVED + len(ALPHABET)

_CHAR_TO_ID = {ch: N_RESERVED + i for i, ch in enumerate(ALPHABET)}
_ID_TO_CHAR = {N_RESERVED + i: ch for i, ch in enumerate(ALPHABET)}

TASK_KINDS = ("copy", "reverse", "addition_2digit", "sort_digits")


def encode_text(text: str) -> np.ndarray:
    try:
        return np.array([_CHAR_TO_ID[ch] for ch in text], dtype=np.int64)
    except KeyError as exc:
        raise ConfigError(f"character {exc.args[0]!r} not in the task alphabet") from None


def decode_ids(ids, stop_at_eos: bool = True) -> str:
    out = []
    for i in ids:
        i = int(i)
        if i == EOS_ID and stop_at_eos:
            break
        if i in (PAD_ID, BOS_ID, MASK_ID, EOS_ID):
            continue
        out.append(_ID_TO_CHAR.get(i, "?"))
    return "".join(out)


@dataclass(frozen=True)
class Task:
    kind: str
    n_train: int = 2000
    n_eval: int = 200
    seed: int = 0
    payload_len: int = 6  # copy/reverse/sort payload width

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ConfigError(f"unknown task kind {self.kind!r}")
        if self.payload_len < 1:
            raise ConfigError("payload_len must be >= 1")

    @property
    def prompt_chars(self) -> int:
        if self.kind == "addition_2digit":
            return 6  # "dd+dd="
        return self.payload_len + 1  # payload plus "|"

    @property
    def answer_chars(self) -> int:
        if self.kind == "addition_2digit":
            return 3  # sums up to 198
        return self.payload_len


def _payload_symbols(kind: str) -> str:
    if kind == "sort_digits":
        return string.digits
    return string.ascii_lowercase + string.digits


def _make_example(task: Task, gen: np.random.Generator) -> tuple[str, str]:
    if task.kind == "addition_2digit":
        a = int(gen.integers(10, 100))
        b = int(gen.integers(10, 100))
        return f"{a}+{b}=", str(a + b)
    symbols = _payload_symbols(task.kind)
    payload = "".join(symbols[int(i)] for i in gen.integers(0, len(symbols), task.payload_len))
    prompt = payload + "|"
    if task.kind == "copy":
        return prompt, payload
    if task.kind == "reverse":
        return prompt, payload[::-1]
    return prompt, "".join(sorted(payload))  # sort_digits


def gen_dataset(task: Task) -> tuple[list[tuple[str, str]], list[tuple[str, str]]]:
    """Deterministic disjoint train/eval splits of (prompt, answer) pairs."""
    gen = RngState(task.seed).child(0).generator()
    want = task.n_train + task.n_eval
    seen: set[str] = set()
    examples: list[tuple[str, str]] = []
    attempts = 0
    while len(examples) < want:
        attempts += 1
        if attempts > 200 * want:
            raise ConfigError(
                f"task space too small for {want} distinct examples ({task.kind})"
            )
        prompt, answer = _make_example(task, gen)
        if prompt in seen:
            continue
        seen.add(prompt)
        examples.append((prompt, answer))
    return examples[: task.n_train], examples[task.n_train :]


def sequence_length(task: Task, gen_len: int) -> int:
    """BOS + fixed-width prompt + generation region."""
    if gen_len < task.answer_chars + 1:
        raise ConfigError(
            f"gen_len {gen_len} too small for answers of {task.answer_chars} chars plus EOS"
        )
    return 1 + task.prompt_chars + gen_len


def build_corpus(
    task: Task, split: list[tuple[str, str]], gen_len: int
) -> list[tuple[np.ndarray, int]]:
    """(ids, prompt_len) sequences: BOS prompt answer EOS PAD...; answers padded
    out to gen_len so the model learns to emit EOS then PAD."""
    seq_len = sequence_length(task, gen_len)
    corpus = []
    for prompt, answer in split:
        ids = np.full(seq_len, PAD_ID, dtype=np.int64)
        ids[0] = BOS_ID
        p = encode_text(prompt)
        a = encode_text(answer)
        ids[1 : 1 + p.shape[0]] = p
        ids[1 + p.shape[0] : 1 + p.shape[0] + a.shape[0]] = a
        ids[1 + p.shape[0] + a.shape[0]] = EOS_ID
        corpus.append((ids, 1 + p.shape[0]))
    return corpus


def prompt_ids(prompt: str) -> np.ndarray:
    return np.concatenate([[BOS_ID], encode_text(prompt)]).astype(np.int64)


@dataclass(eq=False)
class ExampleRecord:
    prompt: str
    expected: str
    predicted: str
    match: bool
    # with a sink-masking policy: (step, masked_positions, fallbacks) per step
    mask_log: list = field(default_factory=list)


@dataclass(eq=False)
class EvalResult:
    task_kind: str
    model_id: str
    strategy: str
    top_k: int  # 0 = unmodified model
    accuracy: float
    records: list[ExampleRecord] = field(default_factory=list)

    @property
    def n_examples(self) -> int:
        return len(self.records)

    @property
    def stderr(self) -> float:
        n = self.n_examples
        if n == 0:
            return 0.0
        p = self.accuracy
        return float(np.sqrt(p * (1.0 - p) / n))


def evaluate(
    params: Parameters,
    task: Task,
    eval_split: list[tuple[str, str]],
    decode_cfg: DecodeConfig,
    policy=None,
    model_id: str = "model",
    workers: int = 1,
    collect_traces: bool = False,
):
    """Exact-match accuracy of decoded answers over the split.

    With a sink-masking policy of top_k > 0, every decode step runs the
    two-pass detect-then-mask forward from the intervention module.
    Returns (EvalResult, traces) where traces is None unless requested.
    """
    top_k = 0 if policy is None else policy.top_k
    if top_k > 0:
        from .intervention import two_pass_forward  # local import avoids a module cycle

    def run_one(example: tuple[str, str]) -> tuple[ExampleRecord, DecodeTrace]:
        prompt, answer = example
        fn = None
        log: list = []
        if top_k > 0:
            fn = two_pass_forward(params, policy, log, prompt_len=1 + len(prompt))
        trace = decode(params, prompt_ids(prompt), decode_cfg, forward_fn=fn)
        predicted = decode_ids(trace.final.ids[trace.prompt_len :])
        return ExampleRecord(prompt, answer, predicted, predicted == answer, log), trace

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(run_one, eval_split))
    else:
        outcomes = [run_one(ex) for ex in eval_split]

    records = [rec for rec, _ in outcomes]
    accuracy = sum(r.match for r in records) / len(records) if records else 0.0
    result = EvalResult(
        task_kind=task.kind,
        model_id=model_id,
        strategy=decode_cfg.strategy,
        top_k=top_k,
        accuracy=accuracy,
        records=records,
    )
    traces = [tr for _, tr in outcomes] if collect_traces else None
    return result, traces


def _row_label(top_k: int) -> str:
    return "unmasked" if top_k == 0 else f"K={top_k}"


def compare_table(results: list[EvalResult]) -> tuple[str, list[dict]]:
    """Markdown comparison table plus flat CSV rows.

    Rows are task x masking level, columns are model ids; each cell shows
    mean +/- binomial standard error, missing cells render as an em dash.
    """
    models = sorted({r.model_id for r in results})
    tasks = sorted({r.task_kind for r in results})
    ks = sorted({r.top_k for r in results})
    by_cell = {(r.task_kind, r.top_k, r.model_id): r for r in results}

    lines = ["| task | sinks | " + " | ".join(models) + " |"]
    lines.append("|" + "---|" * (2 + len(models)))
    csv_rows: list[dict] = []
    for task in tasks:
        for k in ks:
            cells = []
            for m in models:
                r = by_cell.get((task, k, m))
                if r is None:
                    cells.append("—")
                    continue
                cells.append(f"{r.accuracy:.2f} ± {r.stderr:.2f}")
                csv_rows.append(
                    {
                        "task": task,
                        "sinks": _row_label(k),
                        "model": m,
                        "accuracy": r.accuracy,
                        "stderr": r.stderr,
                        "n_examples": r.n_examples,
                    }
                )
            lines.append(f"| {task} | {_row_label(k)} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n", csv_rows


def write_compare_csv(path, csv_rows: list[dict]) -> None:
    fields = ["task", "sinks", "model", "accuracy", "stderr", "n_examples"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(csv_rows)


def write_dataset(path, split: list[tuple[str, str]]) -> None:
    """One example per line: prompt TAB answer (UTF-8)."""
    with io.open(path, "w", encoding="utf-8") as fh:
        for prompt, answer in split:
            fh.write(f"{prompt}\t{answer}\n")


def read_dataset(path) -> list[tuple[str, str]]:
    split = []
    with io.open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            prompt, _, answer = line.partition("\t")
            split.append((prompt, answer))
    return split
