"""Acceptance suite: one test per release criterion, each printing a
[PASS] line with its measured values (run with -s to see them inline).

The trained-model fixtures in conftest.py are shared with the module tests;
their training time counts toward the end-to-end runtime budget.
"""

import time

import numpy as np

from dlmscope import decoding, evalharness, intervention, model, sinkmetrics, tracefile
from dlmscope.decoding import DecodeConfig, decode
from dlmscope.intervention import MaskPolicy, ablation_run, two_pass_forward
from dlmscope.model import AttentionTensor, ModelConfig, Parameters, init_params
from dlmscope.numerics import RngState, finite_diff_gradient, relative_error
from dlmscope.sinkmetrics import SinkSet, detect_sinks, epsilon_sweep, track_trajectories
from dlmscope.tracefile import read_trace, traces_equal, write_trace

from conftest import random_stochastic, tiny_params
from test_decoding import check_trace_invariants
from test_tracefile import synth_trace

def _passed(name: str, detail: str) -> None:
    print(f"\n[PASS] {name}: {detail}")


def test_criterion_sink_metric_oracle_equivalence():
    """detect_sinks equals brute-force evaluation of the sink predicate,
    exactly, on 1000 random row-stochastic matrices (S in 2..16), in < 5 s."""
    gen = np.random.default_rng(2024)
    start = time.monotonic()
    checked = 0
    for _ in range(1000):
        s = int(gen.integers(2, 17))
        m = random_stochastic(gen, s)
        vec = m.sum(axis=0)
        eps = float(gen.choice([0.5, 1.0, 2.0, 3.0, 5.0]))
        tensor = AttentionTensor(layer=0, head=0, scores=m)
        got = [p for p, _ in detect_sinks(sinkmetrics.cumulative_scores(tensor), eps).sinks]
        brute = [
            j
            for j in range(s)
            if vec[j] > sum(vec[k] for k in range(s) if k != j) / (s - 1) + eps
        ]
        assert sorted(got) == sorted(brute), f"mismatch at S={s} eps={eps}"
        checked += 1
    elapsed = time.monotonic() - start
    assert elapsed < 5.0, f"oracle sweep took {elapsed:.2f}s"
    _passed("sink-metric oracle equivalence", f"{checked} matrices, {elapsed:.2f}s")


def test_criterion_conservation(copy_traces):
    """Column scores of every analyzed matrix total the attended row count
    within 1e-4."""
    gen = np.random.default_rng(7)
    worst = 0.0
    n = 0
    for _ in range(300):
        s = int(gen.integers(2, 17))
        m = random_stochastic(gen, s)
        worst = max(worst, abs(float(m.sum()) - s))
        n += 1
    for trace in copy_traces:
        for _, _, _, vec in sinkmetrics.iter_score_cells(trace):
            worst = max(worst, abs(float(vec.sum()) - vec.shape[0]))
            n += 1
    assert worst < 1e-4
    _passed("conservation", f"{n} matrices, worst |sum - S| = {worst:.2e}")


def test_criterion_epsilon_sweep(copy_traces):
    """Flagged fraction is monotone non-increasing in epsilon; uniform
    attention flags nothing at epsilon 3; trained-model traces flag at most
    10% of tokens at epsilon 3 (desk-scale bound; full-scale reference
    models sit at or below 4%)."""
    grid = [0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 4.0, 5.0, 8.0]
    rows = epsilon_sweep(copy_traces, grid)
    fractions = [frac for _, frac in rows]
    assert all(a >= b for a, b in zip(fractions, fractions[1:])), "sweep must be monotone"

    from test_sinkmetrics import _uniform_trace

    uniform = _uniform_trace(s=8, steps=4, layers=2, heads=2)
    assert epsilon_sweep(uniform, [3.0])[0][1] == 0.0

    at3 = dict(rows)[3.0]
    assert at3 <= 0.10, f"flagged fraction at eps=3 was {at3:.4f}"
    _passed(
        "epsilon sweep",
        f"monotone over {grid}; uniform flags 0; trained traces flag {at3:.4f} "
        "at eps=3 (reference calibration: <= 0.04 at full scale)",
    )


def test_criterion_corruption_marginal():
    """Empirical keep-rate matches the linear schedule within +/-2% for
    t in {0.1..0.9} with 10^4 draws per point, in < 1 s."""
    from dlmscope.diffusion import MaskSchedule, forward_corrupt

    start = time.monotonic()
    schedule = MaskSchedule()
    x0 = (np.arange(10_000) % 40 + 4).astype(np.int64)
    worst = 0.0
    for i, t in enumerate(np.arange(0.1, 0.95, 0.1)):
        sample = forward_corrupt(x0, float(t), schedule, RngState(500 + i))
        keep_rate = 1.0 - sample.masked_positions.size / x0.shape[0]
        err = abs(keep_rate - schedule.alpha(float(t)))
        worst = max(worst, err)
        assert err < 0.02, f"keep-rate off by {err:.4f} at t={t:.1f}"
    elapsed = time.monotonic() - start
    assert elapsed < 1.0, f"marginal check took {elapsed:.2f}s"
    _passed("corruption marginal", f"worst deviation {worst:.4f}, {elapsed:.2f}s")


def test_criterion_gradient_check():
    """Analytic gradients match central finite differences with relative
    error < 1e-3 on a 2-layer, d_model=16 model over 5 random batches,
    in < 60 s."""
    from test_model import random_batch

    start = time.monotonic()
    cfg = ModelConfig(vocab_size=10, d_model=16, n_layers=2, n_heads=2, max_seq=12)
    errors = []
    for batch_seed in range(5):
        params = init_params(cfg, RngState(40 + batch_seed)).astype(np.float64)
        batch = random_batch(cfg, 2, 7, seed=batch_seed)
        _, grads = model.loss_and_grads(params, batch)
        fd = finite_diff_gradient(
            lambda tensors: model.batch_loss(Parameters(cfg, tensors), batch),
            params.tensors,
            1e-5,
        )
        flat_a = np.concatenate([grads[k].ravel() for k in sorted(grads)])
        flat_f = np.concatenate([fd[k].ravel() for k in sorted(fd)])
        err = relative_error(flat_a, flat_f)
        errors.append(err)
        assert err < 1e-3, f"batch {batch_seed}: relative error {err:.2e}"
    elapsed = time.monotonic() - start
    assert elapsed < 60.0, f"gradient check took {elapsed:.1f}s"
    _passed("gradient check", f"max rel err {max(errors):.2e} over 5 batches, {elapsed:.1f}s")


def test_criterion_decoding_invariants():
    """>= 100 randomized decode runs per strategy uphold monotone unmasking,
    exact quotas, block containment, shift sources, and full unmasking."""
    gen = np.random.default_rng(31337)
    runs = {s: 0 for s in decoding.STRATEGIES}
    for strategy in decoding.STRATEGIES:
        mode = "causal" if strategy == "autoregressive" else "bidirectional"
        for _ in range(100):
            params = tiny_params(
                vocab=14,
                d_model=8,
                n_layers=int(gen.integers(1, 3)),
                n_heads=2,
                max_seq=40,
                mode=mode,
                seed=int(gen.integers(0, 10_000)),
            )
            gen_len = int(gen.integers(2, 13))
            if strategy == "block_semi_ar":
                divisors = [b for b in range(1, gen_len + 1) if gen_len % b == 0]
                block = int(divisors[gen.integers(0, len(divisors))])
                steps = (gen_len // block) * int(gen.integers(1, block + 1))
                cfg = DecodeConfig(strategy=strategy, gen_len=gen_len, total_steps=steps, block_size=block)
            elif strategy == "any_position_shift":
                cfg = DecodeConfig(
                    strategy=strategy, gen_len=gen_len, total_steps=int(gen.integers(1, gen_len + 1))
                )
            else:
                cfg = DecodeConfig(strategy=strategy, gen_len=gen_len, total_steps=gen_len)
            prompt = np.concatenate(
                [[model.BOS_ID], gen.integers(4, 14, int(gen.integers(1, 5)))]
            )
            trace = decode(params, prompt, cfg)
            check_trace_invariants(trace, cfg)
            runs[strategy] += 1
    assert all(count >= 100 for count in runs.values())
    _passed("decoding invariants", f"zero violations over {runs}")


def test_criterion_intervention_control_and_soundness(copy_setup):
    """top_k = 0 reproduces baseline traces bit-identically; with top_k > 0
    every masked column carries exactly zero attention in pass-2 captures
    (keep-one fallback rows excepted and logged)."""
    params = copy_setup["params"]
    prompt, _ = copy_setup["eval_split"][0]
    ids = evalharness.prompt_ids(prompt)
    cfg = DecodeConfig(
        strategy="block_semi_ar",
        gen_len=copy_setup["gen_len"],
        total_steps=8,
        block_size=4,
        seed=9,
    )
    baseline = decode(params, ids, cfg, capture_full=True)
    log: list = []
    control = decode(
        params, ids, cfg, capture_full=True,
        forward_fn=two_pass_forward(params, MaskPolicy(top_k=0), log),
    )
    assert traces_equal(baseline, control), "control trace must be bit-identical"
    assert log == []

    log2: list = []
    masked_run = decode(
        params, ids, cfg, capture_full=True,
        forward_fn=two_pass_forward(params, MaskPolicy(top_k=2), log2),
    )
    cells = 0
    for (step, chosen, fallbacks), rec in zip(log2, masked_run.steps):
        fallback_rows = {(l, h, row) for l, h, row, _ in fallbacks}
        for (layer, head), grid in rec.maps.items():
            for col in chosen:
                rows_ok = [
                    grid[row, col] == 0.0
                    for row in range(grid.shape[0])
                    if (layer, head, row) not in fallback_rows
                ]
                assert all(rows_ok)
                cells += 1
    _passed(
        "intervention control + soundness",
        f"control bit-identical; {cells} masked (layer,head,column) cells exactly zero",
    )


def test_criterion_trace_round_trip(tmp_path):
    """100 randomized traces round-trip losslessly and byte-deterministically;
    exported scores re-import to identical score-level analyses."""
    n_bytes = 0
    for seed in range(100):
        trace = synth_trace(seed, with_maps=seed % 3 == 0)
        p1 = tmp_path / "a.dlmt"
        p2 = tmp_path / "b.dlmt"
        write_trace(trace, p1)
        write_trace(trace, p2)
        assert p1.read_bytes() == p2.read_bytes(), "byte determinism"
        back = read_trace(p1)
        assert traces_equal(trace, back), f"round trip failed for seed {seed}"
        n_bytes += p1.stat().st_size

    equiv = 0
    for seed in range(5):
        native = synth_trace(200 + seed, with_maps=False)
        csv_path = tmp_path / "scores.csv"
        sinkmetrics.write_scores_csv(csv_path, native)
        imported = tracefile.import_external(csv_path)
        grid = [0.5, 1.0, 3.0]
        assert epsilon_sweep(native, grid) == epsilon_sweep(imported, grid)
        a = sinkmetrics.detect_all(native, 3.0)
        b = sinkmetrics.detect_all(imported, 3.0)
        assert [(x.step, x.layer, x.head, x.sinks) for x in a] == [
            (x.step, x.layer, x.head, x.sinks) for x in b
        ]
        equiv += 1
    _passed(
        "trace round trip",
        f"100 traces ({n_bytes} bytes total) lossless + deterministic; "
        f"{equiv} export/import analyses identical",
    )


def test_criterion_trajectory_fixtures():
    """The 62->88 single-step shift classifies as moving with exactly one
    moved event; a sink present for one step classifies as intermittent with
    appeared + vanished events."""
    shift_sets = [
        _fixture_sinkset(step, position=62 if step <= 38 else 88) for step in range(64)
    ]
    traj = track_trajectories(shift_sets)[(0, 0)]
    moved = [ev for ev in traj.events if ev.kind == "moved"]
    assert traj.classification == "moving"
    assert len(moved) == 1
    assert (moved[0].from_position, moved[0].to_position) == (62, 88)

    blink_sets = [
        _fixture_sinkset(step, position=40 if step == 5 else None) for step in range(10)
    ]
    blink = track_trajectories(blink_sets)[(0, 0)]
    kinds = [ev.kind for ev in blink.events]
    assert blink.classification == "intermittent"
    assert kinds.count("appeared") == 1
    assert kinds.count("vanished") == 1
    _passed(
        "trajectory fixtures",
        "62->88 => moving with one moved event; one-step sink => intermittent "
        "with appeared+vanished",
    )


def _fixture_sinkset(step: int, position: int | None) -> SinkSet:
    sinks = [] if position is None else [(position, 6.0)]
    return SinkSet(step=step, layer=0, head=0, epsilon=3.0, sinks=sinks, n_positions=128)


def test_criterion_end_to_end_robustness(addition_setup, tmp_path):
    """Train a causal ARM and a bidirectional DLM on two-digit addition to
    >= 0.9 exact match, ablate K in {0, 1, 5, 10}, and emit the comparison
    table with per-cell standard errors. Accuracy deltas are reported
    outputs; the expected direction (causal degradation >= diffusion
    degradation at K=1) is recorded, not asserted. Budget: 30 minutes."""
    start = time.monotonic()
    task = addition_setup["task"]
    gen_len = addition_setup["gen_len"]
    dlm_cfg = DecodeConfig(
        strategy="block_semi_ar", gen_len=gen_len, total_steps=gen_len, block_size=gen_len, seed=0
    )
    arm_cfg = DecodeConfig(strategy="autoregressive", gen_len=gen_len, total_steps=gen_len, seed=0)

    reports = []
    results = []
    for params, cfg, mid in (
        (addition_setup["dlm"], dlm_cfg, "dlm_identity"),
        (addition_setup["arm"], arm_cfg, "arm_causal"),
    ):
        for k in (0, 1, 5, 10):
            report = ablation_run(
                params, task, cfg, MaskPolicy(top_k=k), model_id=mid, n_examples=100
            )
            reports.append(report)
            results.append(report.ablated)
            if k == 0:
                assert report.baseline_accuracy >= 0.9, (
                    f"{mid} reached only {report.baseline_accuracy:.3f}"
                )

    table_md, csv_rows = evalharness.compare_table(results)
    (tmp_path / "table.md").write_text(table_md)
    evalharness.write_compare_csv(tmp_path / "table.csv", csv_rows)
    intervention.write_report_csv(tmp_path / "report.csv", reports)
    assert len(csv_rows) == 8  # 2 models x 4 masking levels
    assert all("stderr" in row and row["stderr"] >= 0 for row in csv_rows)
    for label in ("unmasked", "K=1", "K=5", "K=10"):
        assert f"| addition_2digit | {label} |" in table_md

    baselines = {r.baseline.model_id: r.baseline_accuracy for r in reports}
    drops = {
        (r.baseline.model_id, r.policy.top_k): r.baseline_accuracy - r.ablated_accuracy
        for r in reports
    }
    direction = drops[("arm_causal", 1)] >= drops[("dlm_identity", 1)]
    budget_used = time.monotonic() - start + addition_setup["train_seconds"]
    assert budget_used < 1800, f"end-to-end run took {budget_used:.0f}s"
    _passed(
        "end-to-end robustness",
        f"baselines arm={baselines['arm_causal']:.3f} dlm={baselines['dlm_identity']:.3f}; "
        f"K=1 drop arm {drops[('arm_causal', 1)]:+.3f} vs dlm {drops[('dlm_identity', 1)]:+.3f}; "
        f"expected direction (arm >= dlm) {'observed' if direction else 'NOT observed'} "
        f"(recorded, not asserted); {budget_used:.0f}s of 1800s budget",
    )
