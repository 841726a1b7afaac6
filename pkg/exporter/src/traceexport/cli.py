"""Console entry point: read an export section from a config file and run it.

    traceexport --config run.json [--model M] [--out PATH] [--seed S]
                [--problems problems.jsonl]

The config file's "export" section holds ExportConfig fields; flags override
it. Problems may be listed inline under "problems" or supplied as a JSONL
file of {"id": ..., "prompt": ..., "gold": ...} objects.
"""

from __future__ import annotations

import argparse
import json
import sys

from .export import ExportConfig, ExportError, export


def _load_problems(path: str) -> list[dict]:
    problems = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                problems.append(json.loads(line))
    return problems


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="traceexport",
        description="Sample parallel-decoding traces from a causal LM.",
    )
    parser.add_argument("--config", help="JSON config file with an export section")
    parser.add_argument("--model", help="model identifier or local path")
    parser.add_argument("--out", help="output trace file")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--problems", help="JSONL file of problems")
    parser.add_argument("--mode", choices=["terminal", "streaming"])
    parser.add_argument("--sequences", type=int, help="sequences per problem")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    section: dict = {}
    if args.config:
        with open(args.config, "r", encoding="utf-8") as fh:
            section = dict(json.load(fh).get("export", {}))
    if args.problems:
        section["problems"] = _load_problems(args.problems)
    if args.model:
        section["model"] = args.model
    if args.out:
        section["out"] = args.out
    if args.seed is not None:
        section["seed"] = args.seed
    if args.mode:
        section["mode"] = args.mode
    if args.sequences is not None:
        section["n_sequences"] = args.sequences
    try:
        config = ExportConfig(**section)
        summary = export(config)
    except (ExportError, TypeError, OSError) as exc:
        print(json.dumps({"error": str(exc)}), file=sys.stderr)
        return 1
    print(json.dumps(summary.to_dict(), sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
