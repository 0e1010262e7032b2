"""Single executable for the full pipeline: train, generate traces, analyze
sinks, run sink-masking ablations, and sweep the detection threshold.

Runs are driven by a declarative key = value config file plus flag overrides;
unknown keys are rejected and every run writes its fully resolved config to
the output directory, so any run is reproducible from that copy alone.

Exit codes: 0 success, 2 config error, 3 numeric failure, 4 I/O or format error.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from . import decoding, diffusion, evalharness, intervention, model, sinkmetrics, tracefile
from .errors import (
    ConfigError,
    DlmscopeError,
    InvalidOverrideError,
    SchedulingError,
    SparseImportError,
    TraceFormatError,
)
from .numerics import RngState

OUT_ENV_VAR = "DLMSCOPE_OUT"

_STRATEGY_ALIASES = {"block": "block_semi_ar", "shift": "any_position_shift", "ar": "autoregressive"}

# command -> key -> (type, default, help); None default means required
SCHEMAS: dict[str, dict[str, tuple[type, object, str]]] = {
    "train": {
        "task": (str, "copy", "task kind: copy|reverse|addition_2digit|sort_digits"),
        "payload_len": (int, 6, "payload width for copy/reverse/sort tasks"),
        "n_train": (int, 2000, "training examples"),
        "n_eval": (int, 200, "held-out examples"),
        "objective": (str, "identity", "identity|shift|next_token"),
        "attention_mode": (str, "auto", "bidirectional|causal|auto (from objective)"),
        "d_model": (int, 96, "model width"),
        "n_layers": (int, 3, "transformer layers"),
        "n_heads": (int, 4, "attention heads"),
        "gen_len": (int, 0, "generation region length; 0 = answer length + 1"),
        "steps": (int, 3000, "training steps"),
        "batch_size": (int, 32, "sequences per step"),
        "lr": (float, 1e-3, "peak learning rate"),
        "lr_schedule": (str, "cosine", "cosine|constant"),
        "weighting": (str, "uniform", "loss weighting: uniform|inverse_t"),
        "seed": (int, 1, "seed for data and training"),
    },
    "generate": {
        "checkpoint": (str, None, "path to a .dlmw checkpoint"),
        "strategy": (str, "block", "block|shift|ar"),
        "task": (str, "", "draw prompts from this task's eval split"),
        "payload_len": (int, 6, "payload width for copy/reverse/sort tasks"),
        "prompt": (str, "", "literal prompt text (overrides task)"),
        "n_prompts": (int, 1, "number of eval prompts to trace"),
        "gen_len": (int, 8, "generation region length"),
        "block_size": (int, 8, "block width for the block strategy"),
        "steps": (int, 8, "denoising step budget"),
        "temperature": (float, 0.0, "0 = greedy"),
        "capture": (str, "scores", "scores|full attention capture"),
        "seed": (int, 0, "decode seed"),
    },
    "analyze": {
        "traces": (str, None, "comma-separated trace paths (.dlmt or score .csv)"),
        "epsilon": (float, 3.0, "sink detection threshold"),
    },
    "ablate": {
        "checkpoint": (str, None, "comma-separated checkpoint paths"),
        "strategy": (str, None, "comma-separated strategies aligned with checkpoints"),
        "model_id": (str, "", "comma-separated model labels (default: file stems)"),
        "task": (str, "addition_2digit", "task kind"),
        "payload_len": (int, 6, "payload width for copy/reverse/sort tasks"),
        "top_k": (str, "0,1,5,10", "comma-separated sink counts to mask"),
        "gen_len": (int, 4, "generation region length"),
        "block_size": (int, 4, "block width for block strategy"),
        "steps": (int, 4, "denoising step budget for diffusion strategies"),
        "n_examples": (int, 100, "eval examples per cell"),
        "protect_prompt": (bool, False, "never mask prompt positions"),
        "per_head": (bool, False, "mask each head's own top sinks"),
        "seed": (int, 0, "decode seed"),
        "data_seed": (int, 1, "task dataset seed"),
    },
    "sweep": {
        "traces": (str, None, "comma-separated trace paths (.dlmt or score .csv)"),
        "grid": (str, "0.5,1,1.5,2,2.5,3,4,5,6,8", "comma-separated epsilon values"),
    },
}

_COMMON = {
    "out": (str, "", f"output directory (default ${OUT_ENV_VAR} or ./out)"),
    "workers": (int, 1, "parallel workers across eval examples"),
}


def _parse_value(key: str, raw: str, typ: type):
    if typ is bool:
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"key {key!r}: cannot parse {raw!r} as bool")
    try:
        return typ(raw)
    except ValueError:
        raise ConfigError(f"key {key!r}: cannot parse {raw!r} as {typ.__name__}") from None


def load_config_file(path, schema: dict) -> dict:
    values = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, _, raw = line.partition("=")
        key = key.strip()
        raw = raw.strip()
        if key not in schema:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = _parse_value(key, raw, schema[key][0])
    return values


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    schema = {**SCHEMAS[command], **_COMMON}
    cfg = {key: default for key, (typ, default, _) in schema.items()}
    if args.config:
        cfg.update(load_config_file(args.config, schema))
    for key in schema:
        flag_val = getattr(args, key, None)
        if flag_val is not None:
            cfg[key] = flag_val
    missing = [k for k, v in cfg.items() if v is None]
    if missing:
        raise ConfigError(f"missing required key(s): {', '.join(sorted(missing))}")
    if not cfg["out"]:
        cfg["out"] = os.environ.get(OUT_ENV_VAR, "out")
    return cfg


def write_resolved(command: str, cfg: dict, out_dir: Path) -> None:
    lines = [f"# dlmscope {command} (resolved configuration)"]
    for key in sorted(cfg):
        lines.append(f"{key} = {cfg[key]}")
    (out_dir / f"{command}.resolved.cfg").write_text("\n".join(lines) + "\n")


def _out_dir(cfg: dict) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _strategy_name(alias: str) -> str:
    if alias in _STRATEGY_ALIASES:
        return _STRATEGY_ALIASES[alias]
    if alias in decoding.STRATEGIES:
        return alias
    raise ConfigError(f"unknown strategy {alias!r} (use block|shift|ar)")


def _load_trace(path: str) -> decoding.DecodeTrace:
    if str(path).endswith(".csv"):
        return tracefile.import_external(path)
    return tracefile.read_trace(path)


def _split_list(raw: str) -> list[str]:
    return [item.strip() for item in raw.split(",") if item.strip()]


# --- commands ---------------------------------------------------------------


def cmd_train(cfg: dict) -> int:
    out = _out_dir(cfg)
    write_resolved("train", cfg, out)
    if cfg["objective"] not in diffusion.OBJECTIVES:
        raise ConfigError(f"unknown objective {cfg['objective']!r}")
    mode = cfg["attention_mode"]
    if mode == "auto":
        mode = "causal" if cfg["objective"] == "next_token" else "bidirectional"
    task = evalharness.Task(
        kind=cfg["task"], n_train=cfg["n_train"], n_eval=cfg["n_eval"],
        seed=cfg["seed"], payload_len=cfg["payload_len"],
    )
    train_split, _ = evalharness.gen_dataset(task)
    gen_len = cfg["gen_len"] or task.answer_chars + 1
    corpus = evalharness.build_corpus(task, train_split, gen_len)
    seq_len = corpus[0][0].shape[0]
    model_cfg = model.ModelConfig(
        vocab_size=evalharness.VOCAB_SIZE,
        d_model=cfg["d_model"],
        n_layers=cfg["n_layers"],
        n_heads=cfg["n_heads"],
        max_seq=seq_len,
        attention_mode=mode,
    )
    hyper = diffusion.TrainHyper(
        steps=cfg["steps"], batch_size=cfg["batch_size"], lr=cfg["lr"],
        weighting=cfg["weighting"], lr_schedule=cfg["lr_schedule"],
    )
    result = diffusion.train(model_cfg, cfg["objective"], corpus, hyper, RngState(cfg["seed"]))
    model.save_checkpoint(out / "model.dlmw", result.params)
    diffusion.write_loss_curve(out / "loss.csv", result.curve)
    print(f"checkpoint: {out / 'model.dlmw'}")
    print(f"loss curve: {out / 'loss.csv'} (final loss {result.curve[-1][1]:.4f})")
    return 0


def cmd_generate(cfg: dict) -> int:
    out = _out_dir(cfg)
    write_resolved("generate", cfg, out)
    params = model.load_checkpoint(cfg["checkpoint"])
    strategy = _strategy_name(cfg["strategy"])
    if cfg["prompt"]:
        prompts = [cfg["prompt"]]
    elif cfg["task"]:
        task = evalharness.Task(kind=cfg["task"], seed=cfg["seed"], payload_len=cfg["payload_len"])
        _, eval_split = evalharness.gen_dataset(task)
        prompts = [p for p, _ in eval_split[: cfg["n_prompts"]]]
    else:
        raise ConfigError("generate needs either a prompt or a task")
    steps = cfg["gen_len"] if strategy == "autoregressive" else cfg["steps"]
    dcfg = decoding.DecodeConfig(
        strategy=strategy,
        gen_len=cfg["gen_len"],
        total_steps=steps,
        block_size=cfg["block_size"] if strategy == "block_semi_ar" else 0,
        temperature=cfg["temperature"],
        seed=cfg["seed"],
    )
    capture_full = cfg["capture"] == "full"
    if cfg["capture"] not in ("scores", "full"):
        raise ConfigError(f"capture must be scores|full, got {cfg['capture']!r}")
    for i, prompt in enumerate(prompts):
        trace = decoding.decode(
            params, evalharness.prompt_ids(prompt), dcfg, capture_full=capture_full
        )
        path = out / f"trace_{i:03d}.dlmt"
        tracefile.write_trace(trace, path, include_maps=capture_full)
        print(f"trace: {path}")
    return 0


def cmd_analyze(cfg: dict) -> int:
    out = _out_dir(cfg)
    write_resolved("analyze", cfg, out)
    paths = _split_list(cfg["traces"])
    if not paths:
        raise ConfigError("no trace paths given")
    epsilon = cfg["epsilon"]
    for path in paths:
        trace = _load_trace(path)
        dest = out if len(paths) == 1 else out / Path(path).stem
        dest.mkdir(parents=True, exist_ok=True)
        sinksets = sinkmetrics.detect_all(trace, epsilon)
        sinkmetrics.write_scores_csv(dest / "scores.csv", trace)
        sinkmetrics.write_sinks_csv(dest / "sinks.csv", sinksets)
        sinkmetrics.write_trajectories_csv(
            dest / "trajectories.csv", sinkmetrics.track_trajectories(sinksets)
        )
        sinkmetrics.write_histogram_csv(dest / "histogram.csv", sinkmetrics.attention_histogram(trace))
        sinkmetrics.write_layerhead_csv(dest / "layerhead.csv", sinkmetrics.layer_head_map(trace))
        print(f"analysis CSVs for {path}: {dest}")
    return 0


def cmd_ablate(cfg: dict) -> int:
    out = _out_dir(cfg)
    write_resolved("ablate", cfg, out)
    checkpoints = _split_list(cfg["checkpoint"])
    strategies = [_strategy_name(s) for s in _split_list(cfg["strategy"])]
    if len(strategies) != len(checkpoints):
        raise ConfigError("need one strategy per checkpoint")
    model_ids = _split_list(cfg["model_id"]) if cfg["model_id"] else [Path(p).stem for p in checkpoints]
    if len(model_ids) != len(checkpoints):
        raise ConfigError("need one model_id per checkpoint")
    ks = [int(k) for k in _split_list(cfg["top_k"])]
    task = evalharness.Task(
        kind=cfg["task"], seed=cfg["data_seed"], payload_len=cfg["payload_len"],
        n_eval=max(cfg["n_examples"], 1),
    )
    reports: list[intervention.InterventionReport] = []
    results: list[evalharness.EvalResult] = []
    for ckpt, strategy, mid in zip(checkpoints, strategies, model_ids):
        params = model.load_checkpoint(ckpt)
        steps = cfg["gen_len"] if strategy == "autoregressive" else cfg["steps"]
        dcfg = decoding.DecodeConfig(
            strategy=strategy,
            gen_len=cfg["gen_len"],
            total_steps=steps,
            block_size=cfg["block_size"] if strategy == "block_semi_ar" else 0,
            seed=cfg["seed"],
        )
        for k in ks:
            policy = intervention.MaskPolicy(
                top_k=k, protect_prompt=cfg["protect_prompt"], per_head=cfg["per_head"]
            )
            report = intervention.ablation_run(
                params, task, dcfg, policy, model_id=mid,
                n_examples=cfg["n_examples"], workers=cfg["workers"],
            )
            reports.append(report)
            results.append(report.ablated)
            print(
                f"{mid} {strategy} K={k}: baseline {report.baseline_accuracy:.3f} "
                f"-> ablated {report.ablated_accuracy:.3f}"
            )
    intervention.write_report_csv(out / "report.csv", reports)
    table_md, csv_rows = evalharness.compare_table(results)
    (out / "table.md").write_text(table_md)
    evalharness.write_compare_csv(out / "table.csv", csv_rows)
    (out / "summary.txt").write_text(_ablation_summary(reports))
    print(f"report: {out / 'report.csv'}; table: {out / 'table.md'}")
    return 0


def _ablation_summary(reports: list[intervention.InterventionReport]) -> str:
    """Human-readable summary, including the expected (not asserted) direction:
    causal models should degrade at least as much as diffusion models at K=1."""
    lines = ["sink-masking ablation summary", ""]
    drop_at_1: dict[str, float] = {}
    strategies: dict[str, str] = {}
    for r in reports:
        lines.append(
            f"  {r.baseline.model_id:>16s} {r.strategy:>18s} K={r.policy.top_k:<3d} "
            f"baseline {r.baseline_accuracy:.3f} ablated {r.ablated_accuracy:.3f} "
            f"delta {r.ablated_accuracy - r.baseline_accuracy:+.3f}"
        )
        if r.policy.top_k == 1:
            drop_at_1[r.baseline.model_id] = r.baseline_accuracy - r.ablated_accuracy
            strategies[r.baseline.model_id] = r.strategy
    causal = {m: d for m, d in drop_at_1.items() if strategies[m] == "autoregressive"}
    diffusion_models = {m: d for m, d in drop_at_1.items() if strategies[m] != "autoregressive"}
    lines.append("")
    if causal and diffusion_models:
        worst_causal = max(causal.values())
        worst_diffusion = max(diffusion_models.values())
        observed = worst_causal >= worst_diffusion
        lines.append(
            "expected direction (recorded, not asserted): causal-model degradation at K=1 "
            ">= diffusion-model degradation"
        )
        lines.append(
            f"observed: causal max drop {worst_causal:+.3f}, diffusion max drop "
            f"{worst_diffusion:+.3f} -> direction {'matches' if observed else 'does NOT match'}"
        )
    return "\n".join(lines) + "\n"


def cmd_sweep(cfg: dict) -> int:
    out = _out_dir(cfg)
    write_resolved("sweep", cfg, out)
    paths = _split_list(cfg["traces"])
    if not paths:
        raise ConfigError("no trace paths given")
    grid = [float(e) for e in _split_list(cfg["grid"])]
    traces = [_load_trace(p) for p in paths]
    rows = sinkmetrics.epsilon_sweep(traces, grid)
    sinkmetrics.write_epsilon_sweep_csv(out / "epsilon_sweep.csv", rows)
    for eps, frac in rows:
        print(f"epsilon {eps:g}: flagged fraction {frac:.4f}")
    return 0


_COMMANDS = {
    "train": cmd_train,
    "generate": cmd_generate,
    "analyze": cmd_analyze,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dlmscope",
        description="train, trace, and analyze attention sinks in toy diffusion language models",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for command, schema in SCHEMAS.items():
        p = sub.add_parser(command)
        p.add_argument("--config", default=None, help="declarative key = value config file")
        for key, (typ, default, help_text) in {**schema, **_COMMON}.items():
            flag = "--" + key.replace("_", "-")
            if typ is bool:
                p.add_argument(flag, dest=key, default=None, type=lambda v, k=key: _parse_value(k, v, bool), help=help_text)
            else:
                p.add_argument(flag, dest=key, default=None, type=typ, help=help_text)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args.command, args)
        return _COMMANDS[args.command](cfg)
    except (ConfigError, SchedulingError, InvalidOverrideError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (TraceFormatError, SparseImportError, OSError) as exc:
        print(f"file error: {exc}", file=sys.stderr)
        return 4
    except DlmscopeError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
