"""Early stopping over streaming scores and the accuracy-latency tradeoff.

Decoding halts at t*, the earliest emission whose score reaches the
threshold; the answer returned is the best-scoring one visible at t*.  If no
score ever reaches the threshold, the best terminal answer is returned at
the final emission (fallback).  Sweeping the threshold traces a latency /
accuracy curve; AUTC integrates accuracy over latency on [0, token_budget],
extending the first point's accuracy left to latency 0 and the last point's
accuracy right to the budget.  That normalization is fixed here so AUTC
values are comparable across verifiers evaluated by this harness.
"""

from __future__ import annotations

from dataclasses import dataclass

from .autodiff import ContractError
from .metrics import best_of_n
from .model import PredictionSet
from .traces import ProblemTrace

GRID_FALLBACK_SENTINEL = 1.0 + 1e-9


@dataclass(frozen=True)
class StopOutcome:
    problem_id: str
    t_star: int
    chosen: tuple[int, int]
    correct: bool
    fallback_used: bool


@dataclass(frozen=True)
class CurvePoint:
    lam: float
    latency: float
    accuracy: float


@dataclass
class TradeoffCurve:
    points: list[CurvePoint]
    autc: float | None = None


def _label_of(trace: ProblemTrace, key: tuple[int, int]) -> bool:
    label = trace.answer(*key).label
    if label is None:
        raise ContractError(f"trace {trace.problem_id!r} answer {key} is unlabeled")
    return bool(label)


def stop(trace: ProblemTrace, predictions: PredictionSet, lam: float) -> StopOutcome:
    """Apply the threshold rule to one problem's streaming scores.

    t* is the earliest tau whose answer scores >= lam; the chosen answer is
    the maximal-score answer with tau <= t* (ties: lowest n, then k).  With
    no qualifying score, t* is the final emission and the best terminal
    answer is chosen.
    """
    recs = list(trace.answers())
    if not recs:
        raise ContractError("stop needs a trace with answers")
    for rec in recs:
        if (rec.seq_index, rec.step) not in predictions.entries:
            raise ContractError(
                f"missing prediction for ({rec.seq_index},{rec.step})"
            )
    hits = [rec.tau for rec in recs
            if predictions.prob(rec.seq_index, rec.step) >= lam]
    if hits:
        t_star = min(hits)
        visible = [rec for rec in recs if rec.tau <= t_star]
        chosen = _argmax_answer(visible, predictions)
        fallback = False
    else:
        t_star = trace.max_tau()
        chosen = _argmax_answer(trace.terminal_answers(), predictions)
        fallback = True
    return StopOutcome(
        problem_id=trace.problem_id,
        t_star=t_star,
        chosen=chosen,
        correct=_label_of(trace, chosen),
        fallback_used=fallback,
    )


def _argmax_answer(recs, predictions: PredictionSet) -> tuple[int, int]:
    best_key = None
    best_score = None
    for rec in recs:
        key = (rec.seq_index, rec.step)
        score = predictions.prob(*key)
        if best_score is None or score > best_score:
            best_key, best_score = key, score
    return best_key


def latency(outcome: StopOutcome) -> int:
    return outcome.t_star


def default_grid(predictions: list[PredictionSet]) -> list[float]:
    """All distinct scores, plus 0 and a >1 sentinel forcing pure fallback."""
    scores = {0.0, GRID_FALLBACK_SENTINEL}
    for preds in predictions:
        for pred in preds.entries.values():
            scores.add(pred.prob)
    return sorted(scores)


def sweep(
    traces: list[ProblemTrace],
    predictions: list[PredictionSet],
    grid: list[float] | None = None,
    token_budget: int | None = None,
) -> TradeoffCurve:
    """Mean latency and accuracy of the stopping rule at each threshold."""
    if len(traces) != len(predictions):
        raise ContractError("one prediction set per trace required")
    if not traces:
        raise ContractError("sweep needs at least one trace")
    if grid is None:
        grid = default_grid(predictions)
    if any(b < a for a, b in zip(grid, grid[1:])):
        raise ContractError("lambda grid must be sorted ascending")
    if grid and grid[0] < 0:
        raise ContractError("lambda grid must be nonnegative")
    points = []
    for lam in grid:
        outcomes = [stop(tr, pr, lam) for tr, pr in zip(traces, predictions)]
        mean_latency = sum(o.t_star for o in outcomes) / len(outcomes)
        accuracy = sum(o.correct for o in outcomes) / len(outcomes)
        points.append(CurvePoint(lam, mean_latency, accuracy))
    curve = TradeoffCurve(points=points)
    if token_budget is None:
        token_budget = max(trace.max_tau() for trace in traces)
    curve.autc = autc(curve, token_budget)
    return curve


def autc(curve: TradeoffCurve, token_budget: float) -> float:
    """Trapezoidal area of accuracy over latency on [0, token_budget]."""
    points = curve.points
    if not points:
        raise ContractError("autc needs a non-empty curve")
    lats = [p.latency for p in points]
    if any(b < a for a, b in zip(lats, lats[1:])):
        raise ContractError("curve latencies must be nondecreasing")
    if token_budget < lats[-1]:
        raise ContractError(
            f"token_budget {token_budget} < max latency {lats[-1]}"
        )
    area = points[0].accuracy * lats[0]
    for a, b in zip(points, points[1:]):
        area += 0.5 * (a.accuracy + b.accuracy) * (b.latency - a.latency)
    area += points[-1].accuracy * (token_budget - lats[-1])
    return area
