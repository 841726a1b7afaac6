"""Synthetic trace generator with planted within-answer and cross-sequence signals.

Hidden states carry the correctness signal on their first coordinate:

    h[i, 0] = +snr_individual            if the answer is correct
              -snr_individual            if wrong
              + snr_cross * g            (g ~ N(0,1), shared by the problem)
              + N(0, noise_sigma^2)      per token

with pure N(0, noise_sigma^2) noise on every other coordinate.  The shared
nuisance g confounds any single-sequence reading of the signal but cancels
under cross-sequence comparison, which is what a multi-sequence verifier can
exploit and a per-answer probe cannot.  With probability herding_prob a
problem's wrong answers concentrate on one value, making the majority vote
wrong whenever correct answers are rare.

Everything is a pure function of the seed through the counter-based RNG, so
regenerated corpora are byte-identical.  Emission times are strictly
increasing within a sequence and distinct across the whole problem
(collisions resolved by deterministic bumping), so streaming sessions see a
total emission order.  Hidden states are quantized to float32 at creation,
making the JSONL round trip exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .autodiff import ContractError
from .rng import CounterRng
from .traces import AnswerRecord, ProblemTrace, label_answers, validate_trace

HERDING_CONCENTRATION = 0.8


@dataclass(frozen=True)
class GenConfig:
    n_problems: int
    n_sequences: int
    d: int
    mode: str = "terminal"
    k_min: int = 1
    k_max: int = 1
    tokens_per_answer: int = 2
    vocab_size: int = 20
    p_correct_base: float = 0.5
    p_correct_slope: float = 0.0
    herding_prob: float = 0.0
    snr_individual: float = 1.0
    snr_cross: float = 0.0
    noise_sigma: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("terminal", "streaming"):
            raise ContractError(f"unknown mode {self.mode!r}")
        if min(self.n_problems, self.n_sequences, self.d, self.tokens_per_answer) < 1:
            raise ContractError("sizes must be positive")
        if self.vocab_size < 2:
            raise ContractError("vocab_size must be >= 2")
        if not (1 <= self.k_min <= self.k_max):
            raise ContractError("need 1 <= k_min <= k_max")
        if self.mode == "terminal" and self.k_max != 1:
            raise ContractError("terminal mode requires k_min = k_max = 1")
        for name in ("p_correct_base", "herding_prob"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ContractError(f"{name} must lie in [0, 1]")
        if self.noise_sigma < 0 or self.snr_individual < 0 or self.snr_cross < 0:
            raise ContractError("signal scales must be nonnegative")

    def to_dict(self) -> dict:
        return {
            "n_problems": self.n_problems,
            "n_sequences": self.n_sequences,
            "d": self.d,
            "mode": self.mode,
            "k_min": self.k_min,
            "k_max": self.k_max,
            "tokens_per_answer": self.tokens_per_answer,
            "vocab_size": self.vocab_size,
            "p_correct_base": self.p_correct_base,
            "p_correct_slope": self.p_correct_slope,
            "herding_prob": self.herding_prob,
            "snr_individual": self.snr_individual,
            "snr_cross": self.snr_cross,
            "noise_sigma": self.noise_sigma,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "GenConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(obj) - known
        if extra:
            raise ContractError(f"unknown GenConfig fields: {sorted(extra)}")
        return cls(**obj)


def _render(value: int, rng: CounterRng) -> str:
    """A surface form whose canonical form is str(value)."""
    u = rng.u01()
    if u < 0.55:
        return str(value)
    if u < 0.70:
        return f"\\boxed{{{value}}}"
    if u < 0.85:
        a = rng.randint(value + 1) if value > 0 else 0
        return f"{a}+{value - a}"
    return f"{2 * value}/2"


def _wrong_value(gold: int, vocab: int, rng: CounterRng) -> int:
    return (gold + 1 + rng.randint(vocab - 1)) % vocab


def _emission_times(
    cfg: GenConfig, rng: CounterRng, steps_per_seq: list[int]
) -> list[list[int]]:
    """Strictly increasing per sequence, distinct across the problem."""
    used: set[int] = set()
    times: list[list[int]] = []
    for steps in steps_per_seq:
        seq_times = []
        tau = 0
        for _ in range(steps):
            tau += 10 + rng.randint(30)
            while tau in used:
                tau += 1
            used.add(tau)
            seq_times.append(tau)
        times.append(seq_times)
    return times


def generate(cfg: GenConfig) -> list[ProblemTrace]:
    """Deterministic corpus: same config and seed give identical traces."""
    root = CounterRng(cfg.seed)
    traces = []
    for q in range(cfg.n_problems):
        rng = root.derive(q)
        gold_value = rng.randint(cfg.vocab_size)
        herded = rng.u01() < cfg.herding_prob
        herd_value = _wrong_value(gold_value, cfg.vocab_size, rng)
        nuisance = cfg.snr_cross * rng.normal()
        steps_per_seq = [
            cfg.k_min + rng.randint(cfg.k_max - cfg.k_min + 1)
            for _ in range(cfg.n_sequences)
        ]
        times = _emission_times(cfg, rng, steps_per_seq)
        sequences = []
        for n in range(1, cfg.n_sequences + 1):
            seq = []
            for k in range(1, steps_per_seq[n - 1] + 1):
                p_correct = min(
                    max(cfg.p_correct_base + cfg.p_correct_slope * (k - 1), 0.0), 1.0
                )
                correct = rng.u01() < p_correct
                if correct:
                    value = gold_value
                elif herded and rng.u01() < HERDING_CONCENTRATION:
                    value = herd_value
                else:
                    value = _wrong_value(gold_value, cfg.vocab_size, rng)
                text = _render(value, rng)
                direction = cfg.snr_individual if correct else -cfg.snr_individual
                hidden = rng.normals(cfg.tokens_per_answer * cfg.d).reshape(
                    cfg.tokens_per_answer, cfg.d
                ) * cfg.noise_sigma
                hidden[:, 0] += direction + nuisance
                hidden = hidden.astype(np.float32).astype(np.float64)
                logprobs = [
                    -(0.3 + 0.5 * (0.0 if correct else 1.0) + 0.2 * abs(rng.normal()))
                    for _ in range(cfg.tokens_per_answer)
                ]
                seq.append(
                    AnswerRecord(
                        seq_index=n,
                        step=k,
                        tau=times[n - 1][k - 1],
                        text=text,
                        hidden=hidden,
                        logprobs=logprobs,
                    )
                )
            sequences.append(seq)
        trace = ProblemTrace(
            problem_id=f"synth-{cfg.seed}-{q:04d}",
            mode=cfg.mode,
            d=cfg.d,
            sequences=sequences,
            gold=str(gold_value),
        )
        for rec in trace.answers():
            rec.refresh_canonical()
        label_answers(trace)
        violations = validate_trace(trace)
        if violations:
            raise AssertionError(f"generator produced invalid trace: {violations}")
        traces.append(trace)
    return traces


def split(
    traces: list[ProblemTrace], fractions: tuple[float, float, float], seed: int
) -> tuple[list[ProblemTrace], list[ProblemTrace], list[ProblemTrace]]:
    """Problem-level shuffle and slice into (train, val, test).

    Slice boundaries are floor(cumulative_fraction * n), the last forced to
    n, so sizes are deterministic and sum to n.
    """
    if len(fractions) != 3:
        raise ContractError("split takes exactly three fractions")
    if any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ContractError("fractions must be nonnegative and sum to 1")
    order = list(traces)
    CounterRng(seed).shuffle(order)
    n = len(order)
    cum = 0.0
    cuts = []
    for f in fractions:
        cum += f
        cuts.append(min(n, math.floor(cum * n + 1e-9)))
    cuts[-1] = n
    return order[: cuts[0]], order[cuts[0]: cuts[1]], order[cuts[1]: cuts[2]]
