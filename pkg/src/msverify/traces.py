"""Data model for parallel-decoding traces plus JSONL ingestion.

A ProblemTrace holds the answer-token hidden states of N decoding sequences
for one problem.  Terminal traces keep one answer per sequence; streaming
traces keep every intermediate answer, the last one per sequence being its
terminal answer.  The global clock T is never stored; it is max tau.

File format (one trace per line):

    {"problem_id": str, "prompt": str?, "gold": str?,
     "mode": "terminal"|"streaming", "d": int,
     "sequences": [{"answers": [{"k": int, "tau": int, "text": str,
                                 "hidden": [[real x d] x L],
                                 "logprobs": [real x L]?}]}]}

Canonical forms and labels are never serialized; both are recomputed on
load.  Hidden states are written as 32-bit reals and widened to 64-bit in
memory, so a save/load round trip of float32-quantized states is exact.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .equivalence import canonicalize, equivalent


class TraceError(Exception):
    """Base class for trace ingestion failures."""


class TraceParseError(TraceError):
    pass


class TraceValidationError(TraceError):
    def __init__(self, problem_id: str, violations: list[str]):
        self.problem_id = problem_id
        self.violations = violations
        super().__init__(
            f"trace {problem_id!r}: " + "; ".join(violations)
        )


class TraceDimensionError(TraceValidationError):
    pass


class MissingGoldError(TraceError):
    pass


@dataclass
class AnswerRecord:
    seq_index: int
    step: int
    tau: int
    text: str
    hidden: np.ndarray
    logprobs: list[float] | None = None
    canonical: str = ""
    label: int | None = None

    @property
    def n_tokens(self) -> int:
        return self.hidden.shape[0]

    def refresh_canonical(self) -> None:
        self.canonical = canonicalize(self.text)


@dataclass
class ProblemTrace:
    problem_id: str
    mode: str
    d: int
    sequences: list[list[AnswerRecord]]
    prompt: str | None = None
    gold: str | None = None

    @property
    def n_sequences(self) -> int:
        return len(self.sequences)

    def answers(self) -> Iterator[AnswerRecord]:
        """All answers in sequence-major order (n ascending, then k)."""
        for seq in self.sequences:
            yield from seq

    def answer(self, n: int, k: int) -> AnswerRecord:
        try:
            rec = self.sequences[n - 1][k - 1]
        except IndexError:
            raise KeyError(f"no answer ({n},{k})") from None
        return rec

    def terminal_answers(self) -> list[AnswerRecord]:
        return [seq[-1] for seq in self.sequences]

    def max_tau(self) -> int:
        return max(rec.tau for rec in self.answers())

    def subset(self, seq_indices: list[int]) -> "ProblemTrace":
        """New trace over the given 1-based sequences, renumbered from 1.

        Canonical forms carry over; labels do too (same gold).
        """
        picked = []
        for new_n, n in enumerate(seq_indices, start=1):
            seq = []
            for rec in self.sequences[n - 1]:
                seq.append(
                    AnswerRecord(
                        seq_index=new_n,
                        step=rec.step,
                        tau=rec.tau,
                        text=rec.text,
                        hidden=rec.hidden,
                        logprobs=rec.logprobs,
                        canonical=rec.canonical,
                        label=rec.label,
                    )
                )
            picked.append(seq)
        return ProblemTrace(
            problem_id=self.problem_id,
            mode=self.mode,
            d=self.d,
            sequences=picked,
            prompt=self.prompt,
            gold=self.gold,
        )


def validate_trace(trace: ProblemTrace) -> list[str]:
    """Every violated invariant, as human-readable strings; empty means ok."""
    violations: list[str] = []
    if trace.mode not in ("terminal", "streaming"):
        violations.append(f"mode must be terminal or streaming, got {trace.mode!r}")
    if trace.n_sequences < 1:
        violations.append("trace must have at least one sequence")
    if not isinstance(trace.d, int) or trace.d < 1:
        violations.append(f"d must be a positive integer, got {trace.d!r}")
    for n, seq in enumerate(trace.sequences, start=1):
        if not seq:
            violations.append(f"sequence {n} has no answers")
            continue
        if trace.mode == "terminal" and len(seq) != 1:
            violations.append(
                f"terminal requires K=1 but sequence {n} has {len(seq)} answers"
            )
        prev_tau = None
        for pos, rec in enumerate(seq, start=1):
            where = f"(n={n},k={rec.step})"
            if rec.seq_index != n:
                violations.append(f"{where}: seq_index {rec.seq_index} != {n}")
            if rec.step != pos:
                violations.append(f"(n={n}) steps must be 1..K, found k={rec.step} at position {pos}")
            if not isinstance(rec.tau, int) or rec.tau < 0:
                violations.append(f"{where}: tau must be an integer >= 0, got {rec.tau!r}")
            elif prev_tau is not None and rec.tau <= prev_tau:
                violations.append(f"{where}: tau {rec.tau} not increasing (previous {prev_tau})")
            if isinstance(rec.tau, int):
                prev_tau = rec.tau
            if rec.hidden.ndim != 2 or rec.hidden.shape[0] < 1:
                violations.append(f"{where}: hidden must be a nonempty L x d matrix")
                continue
            if rec.hidden.shape[1] != trace.d:
                violations.append(
                    f"{where}: hidden rows have {rec.hidden.shape[1]} entries, expected d={trace.d}"
                )
            if not np.all(np.isfinite(rec.hidden)):
                bad = np.argwhere(~np.isfinite(rec.hidden))[0]
                violations.append(f"{where}: hidden entry (i={bad[0] + 1}) is not finite")
            if rec.logprobs is not None:
                if len(rec.logprobs) != rec.hidden.shape[0]:
                    violations.append(
                        f"{where}: logprobs length {len(rec.logprobs)} != L={rec.hidden.shape[0]}"
                    )
                elif not all(math.isfinite(v) for v in rec.logprobs):
                    violations.append(f"{where}: logprobs contain non-finite values")
            has_gold = trace.gold is not None
            if (rec.label is not None) != has_gold:
                violations.append(
                    f"{where}: label must be present iff gold is present"
                )
            elif rec.label is not None and rec.label not in (0, 1):
                violations.append(f"{where}: label must be 0 or 1, got {rec.label!r}")
    return violations


def label_answers(trace: ProblemTrace) -> ProblemTrace:
    """Set label = 1[text ~ gold] on every answer; idempotent."""
    if trace.gold is None:
        raise MissingGoldError(f"trace {trace.problem_id!r} has no gold answer")
    gold_canonical = canonicalize(trace.gold)
    for rec in trace.answers():
        if not rec.canonical:
            rec.refresh_canonical()
        rec.label = int(rec.canonical == gold_canonical)
    return trace


def _record_from_json(n: int, obj: dict, d: int, where: str) -> AnswerRecord:
    for key in ("k", "tau", "text", "hidden"):
        if key not in obj:
            raise TraceValidationError(where, [f"answer missing field {key!r}"])
    hidden = np.asarray(obj["hidden"], dtype=np.float64)
    if hidden.ndim != 2:
        raise TraceValidationError(where, [f"k={obj['k']}: hidden must be a matrix"])
    if hidden.shape[1] != d:
        raise TraceDimensionError(
            where, [f"k={obj['k']}: hidden width {hidden.shape[1]} != d={d}"]
        )
    logprobs = obj.get("logprobs")
    if logprobs is not None:
        logprobs = [float(v) for v in logprobs]
    return AnswerRecord(
        seq_index=n,
        step=int(obj["k"]),
        tau=int(obj["tau"]),
        text=str(obj["text"]),
        hidden=hidden,
        logprobs=logprobs,
    )


def trace_from_json(obj: dict) -> ProblemTrace:
    """Build one ProblemTrace from a decoded JSON object; validates fully."""
    for key in ("problem_id", "mode", "d", "sequences"):
        if key not in obj:
            raise TraceValidationError(str(obj.get("problem_id", "?")), [f"missing field {key!r}"])
    pid = str(obj["problem_id"])
    d = obj["d"]
    if not isinstance(d, int) or isinstance(d, bool) or d < 1:
        raise TraceDimensionError(pid, [f"d must be a positive integer, got {d!r}"])
    sequences = []
    for n, seq_obj in enumerate(obj["sequences"], start=1):
        if "answers" not in seq_obj:
            raise TraceValidationError(pid, [f"sequence {n} missing field 'answers'"])
        sequences.append(
            [_record_from_json(n, rec, d, pid) for rec in seq_obj["answers"]]
        )
    trace = ProblemTrace(
        problem_id=pid,
        mode=str(obj["mode"]),
        d=d,
        sequences=sequences,
        prompt=obj.get("prompt"),
        gold=obj.get("gold"),
    )
    for rec in trace.answers():
        rec.refresh_canonical()
    if trace.gold is not None:
        label_answers(trace)
    violations = validate_trace(trace)
    if violations:
        raise TraceValidationError(pid, violations)
    return trace


def load_traces(path: str) -> list[ProblemTrace]:
    traces = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TraceParseError(f"{path}:{lineno}: {exc}") from None
            traces.append(trace_from_json(obj))
    return traces


def trace_to_json(trace: ProblemTrace) -> dict:
    """JSON object for one trace; hidden states quantized to float32."""
    obj: dict = {"problem_id": trace.problem_id}
    if trace.prompt is not None:
        obj["prompt"] = trace.prompt
    if trace.gold is not None:
        obj["gold"] = trace.gold
    obj["mode"] = trace.mode
    obj["d"] = trace.d
    obj["sequences"] = []
    for seq in trace.sequences:
        answers = []
        for rec in seq:
            entry = {
                "k": rec.step,
                "tau": rec.tau,
                "text": rec.text,
                "hidden": [
                    [float(v) for v in row]
                    for row in rec.hidden.astype(np.float32)
                ],
            }
            if rec.logprobs is not None:
                entry["logprobs"] = [float(v) for v in rec.logprobs]
            answers.append(entry)
        obj["sequences"].append({"answers": answers})
    return obj


def save_traces(traces: list[ProblemTrace], path: str) -> None:
    """Write JSONL atomically (write then rename); keys in stable order."""
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        for trace in traces:
            fh.write(json.dumps(trace_to_json(trace), sort_keys=True))
            fh.write("\n")
    os.replace(tmp, path)


def atomic_write_text(path: str, text: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)
