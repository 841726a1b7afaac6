"""Shared builders for hand-rolled traces.

Tests construct small traces directly instead of going through JSON so the
fixtures stay readable; the builders fill in hidden states deterministically
from a seed when the test does not care about their values.
"""

from __future__ import annotations

import re

import numpy as np
import pytest

from msverify.traces import AnswerRecord, ProblemTrace, label_answers

CRITERIA_LABELS = {
    1: "gradient integrity",
    2: "mask correctness",
    3: "causal non-leakage",
    4: "incremental equals batch",
    5: "metric oracles",
    6: "baseline identities",
    7: "early-stop structure",
    8: "synthetic headline, terminal",
    9: "synthetic headline, streaming",
    10: "ablation harness",
    11: "determinism",
    12: "exporter round trip",
}


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One PASS/FAIL line per numbered acceptance criterion that ran."""
    seen: dict[int, bool] = {}
    for status, reports in terminalreporter.stats.items():
        if status not in ("passed", "failed", "error"):
            continue
        for rep in reports:
            match = re.search(r"test_criterion_(\d+)", getattr(rep, "nodeid", ""))
            if not match:
                continue
            num = int(match.group(1))
            if status in ("failed", "error"):
                seen[num] = False
            elif getattr(rep, "when", "call") == "call":
                seen.setdefault(num, True)
    if not seen:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for num in sorted(seen):
        word = "PASS" if seen[num] else "FAIL"
        terminalreporter.write_line(
            f"criterion {num:2d}: {word}  ({CRITERIA_LABELS.get(num, '')})"
        )


def make_answer(n, k, tau, text, d=4, L=2, seed=None, hidden=None, logprobs=None):
    if hidden is None:
        rng = np.random.default_rng(0 if seed is None else seed)
        hidden = rng.standard_normal((L, d)).astype(np.float32).astype(np.float64)
    rec = AnswerRecord(
        seq_index=n, step=k, tau=tau, text=text,
        hidden=np.asarray(hidden, dtype=np.float64), logprobs=logprobs,
    )
    rec.refresh_canonical()
    return rec


def make_trace(spec, mode="terminal", d=4, L=2, gold=None, problem_id="t0", seed=0):
    """spec: list of sequences; each sequence a list of (tau, text) pairs."""
    sequences = []
    counter = 0
    for n, seq_spec in enumerate(spec, start=1):
        seq = []
        for k, (tau, text) in enumerate(seq_spec, start=1):
            counter += 1
            seq.append(
                make_answer(n, k, tau, text, d=d, L=L, seed=seed * 1000 + counter)
            )
        sequences.append(seq)
    trace = ProblemTrace(
        problem_id=problem_id, mode=mode, d=d, sequences=sequences, gold=gold,
    )
    if gold is not None:
        label_answers(trace)
    return trace


@pytest.fixture
def terminal_trace():
    return make_trace(
        [[(10, "4")], [(12, "5")], [(15, "4")]],
        mode="terminal", gold="4",
    )


@pytest.fixture
def streaming_trace():
    return make_trace(
        [
            [(5, "3"), (11, "4"), (21, "4")],
            [(7, "5"), (14, "4")],
            [(9, "5"), (17, "5"), (25, "6")],
        ],
        mode="streaming", gold="4",
    )
