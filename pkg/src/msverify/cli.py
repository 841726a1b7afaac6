"""Command-line entry points.

Four subcommands cover the synthetic workflow end to end:

    msverify generate --out runs/gen --seed 7 ...
    msverify train    --traces train.jsonl --val val.jsonl --out runs/msv8
    msverify eval     --traces test.jsonl --checkpoint runs/msv8/checkpoint.json
    msverify sweep    --traces test.jsonl --checkpoint ... --probe-checkpoint ...

Options resolve with precedence: command-line flag, then --config file value,
then built-in default.  The config file is JSON with optional sections
"gen", "model", "train", "eval", and "io".  All outputs are deterministic
functions of the resolved config (sorted keys, no timestamps), so rerunning
a command reproduces its files byte for byte.  Failures print a one-line
JSON object {"error", "message"} to stderr and exit 1.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .autodiff import ContractError
from .baselines import (
    DEFAULT_VOTE_THRESHOLD,
    ProbeConfig,
    load_probe_checkpoint,
    save_probe_checkpoint,
)
from .earlystop import TradeoffCurve
from .model import MsvConfig, load_checkpoint, save_checkpoint
from .synthetic import GenConfig, generate, split
from .traces import atomic_write_text, load_traces, save_traces
from .training import TrainConfig, evaluate, lr_select, train

EVAL_DEFAULTS = {
    "verifier": "msv",
    "aggregation": "none",
    "group_size": None,
    "vote_threshold": DEFAULT_VOTE_THRESHOLD,
    "lambda_grid": None,
    "token_budget": None,
    "ece_bins": 10,
}


def _stable_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def _write_json(path: str, obj) -> None:
    atomic_write_text(path, _stable_json(obj))


def _csv_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_csv(path: str, header: list[str], rows: list[list]) -> None:
    lines = [",".join(header)]
    lines.extend(",".join(_csv_cell(cell) for cell in row) for row in rows)
    atomic_write_text(path, "\n".join(lines) + "\n")


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    with open(path, "r", encoding="utf-8") as fh:
        obj = json.load(fh)
    if not isinstance(obj, dict):
        raise ContractError("config file must hold a JSON object")
    return obj


def _section(cfg: dict, name: str) -> dict:
    value = cfg.get(name, {})
    if not isinstance(value, dict):
        raise ContractError(f"config section {name!r} must be an object")
    return dict(value)


def _resolve_out(args, cfg: dict) -> str:
    out = args.out or _section(cfg, "io").get("out") or "run"
    os.makedirs(out, exist_ok=True)
    return out


def _load_any_checkpoint(path: str):
    """Dispatch on the checkpoint's embedded config kind."""
    with open(path, "r", encoding="utf-8") as fh:
        kind = json.load(fh).get("config", {}).get("kind")
    if kind == "msv":
        return ("msv",) + load_checkpoint(path)
    if kind == "probe":
        return ("probe",) + load_probe_checkpoint(path)
    raise ContractError(f"checkpoint {path!r} has unknown kind {kind!r}")


def _parse_floats(text: str) -> list[float]:
    return [float(part) for part in text.split(",") if part.strip() != ""]


def _parse_ints(text: str) -> list[int]:
    return [int(part) for part in text.split(",") if part.strip() != ""]


def cmd_generate(args) -> int:
    cfg = _load_config_file(args.config)
    gen_kwargs = _section(cfg, "gen")
    for flag, field_name in (
        ("problems", "n_problems"),
        ("sequences", "n_sequences"),
        ("mode", "mode"),
        ("d", "d"),
    ):
        value = getattr(args, flag)
        if value is not None:
            gen_kwargs[field_name] = value
    if args.seed is not None:
        gen_kwargs["seed"] = args.seed
    gen_kwargs.setdefault("n_problems", 100)
    gen_kwargs.setdefault("n_sequences", 8)
    gen_kwargs.setdefault("d", 16)
    gen_cfg = GenConfig.from_dict(gen_kwargs)
    out = _resolve_out(args, cfg)
    traces = generate(gen_cfg)
    save_traces(traces, os.path.join(out, "traces.jsonl"))
    fractions = args.split or _section(cfg, "io").get("split")
    echo = {"command": "generate", "gen": gen_cfg.to_dict()}
    if fractions is not None:
        if isinstance(fractions, str):
            fractions = _parse_floats(fractions)
        parts = split(traces, tuple(fractions), gen_cfg.seed)
        for name, subset in zip(("train", "val", "test"), parts):
            save_traces(subset, os.path.join(out, f"{name}.jsonl"))
        echo["split"] = list(fractions)
    _write_json(os.path.join(out, "config.json"), echo)
    return 0


def _model_config_from(args, cfg: dict):
    model_kwargs = _section(cfg, "model")
    kind = model_kwargs.pop("kind", None) or args.verifier or "msv"
    if args.masks is not None:
        model_kwargs["masks"] = tuple(args.masks.split(","))
    for flag, field_name in (
        ("heads", "n_heads"),
        ("n_max", "n_max"),
        ("mode", "mode"),
        ("d", "d_model"),
        ("pooling", "pooling"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            model_kwargs[field_name] = value
    if kind == "msv":
        model_kwargs.pop("hidden", None)
        if "masks" in model_kwargs:
            model_kwargs["masks"] = tuple(model_kwargs["masks"])
        if model_kwargs.get("mode") == "streaming":
            model_kwargs.setdefault("logit_averaging", False)
        return "msv", MsvConfig(**model_kwargs)
    for key in ("n_heads", "masks", "n_max", "feature_augmentation",
                "logit_averaging", "streaming_logit_averaging", "group_size"):
        model_kwargs.pop(key, None)
    return "probe", ProbeConfig(**model_kwargs)


def cmd_train(args) -> int:
    cfg = _load_config_file(args.config)
    train_kwargs = _section(cfg, "train")
    if args.seed is not None:
        train_kwargs["seed"] = args.seed
    if args.epochs is not None:
        train_kwargs["epochs"] = args.epochs
    if args.lr is not None:
        lr_field = "lr_probe" if (args.verifier == "probe") else "lr_body"
        train_kwargs[lr_field] = args.lr
    train_cfg = TrainConfig.from_dict(train_kwargs)
    io_cfg = _section(cfg, "io")
    train_path = args.traces or io_cfg.get("traces")
    val_path = args.val or io_cfg.get("val_traces")
    if train_path is None or val_path is None:
        raise ContractError("train needs --traces and --val")
    train_traces = load_traces(train_path)
    val_traces = load_traces(val_path)
    if args.d is None and "d_model" not in _section(cfg, "model"):
        args.d = train_traces[0].d
    if args.mode is None and "mode" not in _section(cfg, "model"):
        args.mode = train_traces[0].mode
    kind, model_cfg = _model_config_from(args, cfg)
    if args.select_lr:
        best = lr_select(
            kind, train_cfg.lr_grid, model_cfg, train_cfg, train_traces, val_traces
        )
        if kind == "probe":
            train_cfg = TrainConfig.from_dict({**train_cfg.to_dict(), "lr_probe": best})
        else:
            train_cfg = TrainConfig.from_dict({**train_cfg.to_dict(), "lr_body": best})
    params, history = train(kind, model_cfg, train_cfg, train_traces, val_traces)
    out = _resolve_out(args, cfg)
    echo = {
        "command": "train",
        "kind": kind,
        "model": model_cfg.to_dict(),
        "train": train_cfg.to_dict(),
        "traces": train_path,
        "val_traces": val_path,
    }
    _write_json(os.path.join(out, "config.json"), echo)
    ckpt = os.path.join(out, "checkpoint.json")
    if kind == "msv":
        save_checkpoint(ckpt, params, model_cfg)
    else:
        save_probe_checkpoint(ckpt, params, model_cfg)
    _write_csv(
        os.path.join(out, "history.csv"),
        ["epoch", "train_loss", "val_loss"],
        [[e.epoch, e.train_loss, e.val_loss] for e in history.epochs],
    )
    return 0


def _eval_options(args, cfg: dict) -> dict:
    options = dict(EVAL_DEFAULTS)
    options.update(_section(cfg, "eval"))
    for key in EVAL_DEFAULTS:
        value = getattr(args, key, None)
        if value is not None:
            options[key] = value
    if isinstance(options.get("lambda_grid"), str):
        options["lambda_grid"] = _parse_floats(options["lambda_grid"])
    return options


def _run_eval(traces, options, checkpoints):
    kwargs = dict(
        verifier=options["verifier"],
        aggregation=options["aggregation"],
        group_size=options["group_size"],
        vote_threshold=options["vote_threshold"],
        lambda_grid=options["lambda_grid"],
        token_budget=options["token_budget"],
        ece_bins=options["ece_bins"],
        jobs=options.get("jobs", 1),
    )
    if options["verifier"] == "msv":
        if "msv" not in checkpoints:
            raise ContractError("msv evaluation needs --checkpoint")
        kwargs["msv_params"], kwargs["msv_config"] = checkpoints["msv"]
    if options["verifier"] == "probe":
        if "probe" not in checkpoints:
            raise ContractError("probe evaluation needs a probe checkpoint")
        kwargs["probe_params"], kwargs["probe_config"] = checkpoints["probe"]
    return evaluate(traces, **kwargs)


def _load_eval_checkpoints(args) -> dict:
    checkpoints = {}
    for path in (args.checkpoint, getattr(args, "probe_checkpoint", None)):
        if path is not None:
            kind, params, config = _load_any_checkpoint(path)
            checkpoints[kind] = (params, config)
    return checkpoints


def _write_curve(path: str, curve: TradeoffCurve) -> None:
    _write_csv(
        path,
        ["lambda", "latency_tokens", "accuracy"],
        [[p.lam, p.latency, p.accuracy] for p in curve.points],
    )


def cmd_eval(args) -> int:
    cfg = _load_config_file(args.config)
    traces_path = args.traces or _section(cfg, "io").get("test_traces")
    if traces_path is None:
        raise ContractError("eval needs --traces")
    traces = load_traces(traces_path)
    options = _eval_options(args, cfg)
    if args.jobs is not None:
        options["jobs"] = args.jobs
    checkpoints = _load_eval_checkpoints(args)
    report, curve = _run_eval(traces, options, checkpoints)
    out = _resolve_out(args, cfg)
    _write_json(os.path.join(out, "report.json"), report)
    if curve is not None:
        _write_curve(os.path.join(out, "curve.csv"), curve)
    return 0


TABLE_COLUMNS = [
    "verifier", "aggregation", "group_size", "N",
    "auroc", "brier", "nll", "ece", "bon_accuracy", "autc",
]


def cmd_sweep(args) -> int:
    cfg = _load_config_file(args.config)
    traces_path = args.traces or _section(cfg, "io").get("test_traces")
    if traces_path is None:
        raise ContractError("sweep needs --traces")
    traces = load_traces(traces_path)
    checkpoints = _load_eval_checkpoints(args)
    options = _eval_options(args, cfg)
    if args.jobs is not None:
        options["jobs"] = args.jobs
    verifiers = (
        args.verifiers.split(",") if args.verifiers
        else [k for k in ("msv", "probe", "token_prob", "self_consistency")
              if k in checkpoints or k in ("token_prob", "self_consistency")]
    )
    group_sizes = _parse_ints(args.group_sizes) if args.group_sizes else [None]
    out = _resolve_out(args, cfg)
    rows = []
    for verifier in verifiers:
        aggregations = ["none"] if verifier == "self_consistency" else [
            "none", "weighted_vote"
        ]
        sizes = group_sizes if verifier == "msv" else [None]
        for aggregation in aggregations:
            for size in sizes:
                cell = dict(options)
                cell.update(
                    verifier=verifier, aggregation=aggregation, group_size=size
                )
                report, curve = _run_eval(traces, cell, checkpoints)
                name = f"verifier={verifier},aggregation={aggregation}"
                if size is not None:
                    name += f",group={size}"
                cell_dir = os.path.join(out, name)
                os.makedirs(cell_dir, exist_ok=True)
                _write_json(os.path.join(cell_dir, "report.json"), report)
                if curve is not None:
                    _write_curve(os.path.join(cell_dir, "curve.csv"), curve)
                rows.append([
                    verifier, aggregation, size, report["N"],
                    report["auroc"], report["brier"], report["nll"],
                    report["ece"], report["bon"]["accuracy"],
                    report.get("autc"),
                ])
    _write_csv(os.path.join(out, "table.csv"), TABLE_COLUMNS, rows)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="msverify",
        description="Train and evaluate answer verifiers over reasoning traces.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="output directory (default: run)")
        p.add_argument("--jobs", type=int, help="parallel evaluation workers")

    p_gen = sub.add_parser("generate", help="write a synthetic trace corpus")
    common(p_gen)
    p_gen.add_argument("--problems", type=int)
    p_gen.add_argument("--sequences", type=int)
    p_gen.add_argument("--mode", choices=["terminal", "streaming"])
    p_gen.add_argument("--d", type=int)
    p_gen.add_argument("--split", help="train,val,test fractions, e.g. 0.6,0.2,0.2")
    p_gen.set_defaults(func=cmd_generate)

    p_train = sub.add_parser("train", help="fit a verifier on labeled traces")
    common(p_train)
    p_train.add_argument("--verifier", choices=["msv", "probe"])
    p_train.add_argument("--traces", help="training trace file")
    p_train.add_argument("--val", help="validation trace file")
    p_train.add_argument("--mode", choices=["terminal", "streaming"])
    p_train.add_argument("--masks", help="comma-separated mask kinds")
    p_train.add_argument("--heads", type=int)
    p_train.add_argument("--n-max", dest="n_max", type=int)
    p_train.add_argument("--d", type=int, help="model width (defaults to trace d)")
    p_train.add_argument("--pooling", choices=["last_token", "mean_tokens"])
    p_train.add_argument("--epochs", type=int)
    p_train.add_argument("--lr", type=float)
    p_train.add_argument("--select-lr", action="store_true",
                         help="pick the learning rate on the grid first")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="score traces and write a report")
    common(p_eval)
    p_eval.add_argument("--traces")
    p_eval.add_argument("--checkpoint")
    p_eval.add_argument("--probe-checkpoint", dest="probe_checkpoint")
    p_eval.add_argument("--verifier",
                        choices=["msv", "probe", "token_prob", "self_consistency"])
    p_eval.add_argument("--aggregation", choices=["none", "weighted_vote"])
    p_eval.add_argument("--group-size", dest="group_size", type=int)
    p_eval.add_argument("--vote-threshold", dest="vote_threshold", type=int)
    p_eval.add_argument("--lambda-grid", dest="lambda_grid")
    p_eval.add_argument("--token-budget", dest="token_budget", type=int)
    p_eval.add_argument("--ece-bins", dest="ece_bins", type=int)
    p_eval.set_defaults(func=cmd_eval)

    p_sweep = sub.add_parser("sweep", help="evaluate a grid of cells")
    common(p_sweep)
    p_sweep.add_argument("--traces")
    p_sweep.add_argument("--checkpoint")
    p_sweep.add_argument("--probe-checkpoint", dest="probe_checkpoint")
    p_sweep.add_argument("--verifiers", help="comma-separated verifier kinds")
    p_sweep.add_argument("--group-sizes", dest="group_sizes",
                         help="comma-separated group sizes for msv cells")
    p_sweep.add_argument("--vote-threshold", dest="vote_threshold", type=int)
    p_sweep.add_argument("--lambda-grid", dest="lambda_grid")
    p_sweep.add_argument("--token-budget", dest="token_budget", type=int)
    p_sweep.add_argument("--ece-bins", dest="ece_bins", type=int)
    p_sweep.set_defaults(func=cmd_sweep)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - uniform CLI error contract
        payload = {"error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(payload), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
