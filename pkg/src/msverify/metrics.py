"""Calibration and selection metrics.

AUROC uses the mid-rank statistic, which realizes Pr[p+ > p-] plus half the
tie probability exactly.  A single-class set has no defined AUROC and yields
None rather than a silent 0.5.  ECE uses equal-width bins with a right-closed
last bin.  Best-of-N breaks score ties by lowest sequence index, keeping
reported tables deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .autodiff import ContractError
from .model import PredictionSet
from .traces import ProblemTrace

_CLIP = 1e-12


@dataclass
class ScoredSet:
    """Predicted probabilities with binary labels, plus optional metadata."""

    probs: np.ndarray
    labels: np.ndarray
    taus: np.ndarray | None = None
    keys: list | None = None

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        if self.probs.ndim != 1 or self.probs.size == 0:
            raise ContractError("ScoredSet needs a non-empty flat probability list")
        if self.labels.shape != self.probs.shape:
            raise ContractError("labels and probs must align")
        if not np.all((self.labels == 0) | (self.labels == 1)):
            raise ContractError("labels must be binary")
        if np.any(self.probs < 0) or np.any(self.probs > 1):
            raise ContractError("probabilities must lie in [0, 1]")
        if self.taus is not None:
            self.taus = np.asarray(self.taus)
            if self.taus.shape != self.probs.shape:
                raise ContractError("taus must align with probs")

    @property
    def size(self) -> int:
        return self.probs.size


def auroc(scored: ScoredSet) -> float | None:
    """Pr[score(pos) > score(neg)] + 0.5 Pr[equal]; None if single-class."""
    positives = int(scored.labels.sum())
    negatives = scored.size - positives
    if positives == 0 or negatives == 0:
        return None
    ranks = rankdata(scored.probs, method="average")
    rank_sum = float(ranks[scored.labels == 1].sum())
    return (rank_sum - positives * (positives + 1) / 2.0) / (positives * negatives)


def brier(scored: ScoredSet) -> float:
    diff = scored.probs - scored.labels
    return float(np.mean(diff * diff))


def nll(scored: ScoredSet) -> float:
    p = np.clip(scored.probs, _CLIP, 1.0 - _CLIP)
    y = scored.labels
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log1p(-p)))


@dataclass(frozen=True)
class ReliabilityBin:
    lo: float
    hi: float
    count: int
    confidence: float | None
    accuracy: float | None


def ece(scored: ScoredSet, n_bins: int = 10) -> tuple[float, list[ReliabilityBin]]:
    """Expected calibration error over equal-width bins on [0, 1].

    Bin j covers [j/J, (j+1)/J), the last bin [1-1/J, 1].  Empty bins
    contribute zero and report no confidence/accuracy.
    """
    if n_bins < 1:
        raise ContractError("ece needs at least one bin")
    idx = np.minimum((scored.probs * n_bins).astype(int), n_bins - 1)
    total = 0.0
    bins: list[ReliabilityBin] = []
    for j in range(n_bins):
        member = idx == j
        count = int(member.sum())
        lo, hi = j / n_bins, (j + 1) / n_bins
        if count == 0:
            bins.append(ReliabilityBin(lo, hi, 0, None, None))
            continue
        conf = float(scored.probs[member].mean())
        acc = float(scored.labels[member].mean())
        total += (count / scored.size) * abs(conf - acc)
        bins.append(ReliabilityBin(lo, hi, count, conf, acc))
    return total, bins


def best_of_n(
    trace: ProblemTrace, predictions: PredictionSet
) -> tuple[tuple[int, int], float]:
    """Highest-scored terminal answer; ties go to the lowest sequence index."""
    best_key = None
    best_score = -1.0
    for rec in trace.terminal_answers():
        key = (rec.seq_index, rec.step)
        score = predictions.prob(*key)
        if score > best_score:
            best_key, best_score = key, score
    return best_key, best_score


def bon_metrics(
    traces: list[ProblemTrace], predictions: list[PredictionSet], n_bins: int = 10
) -> dict:
    """Accuracy/ECE/Brier of the chosen answers across problems."""
    if len(traces) != len(predictions):
        raise ContractError("one prediction set per trace required")
    confs, labels = [], []
    for trace, preds in zip(traces, predictions):
        key, conf = best_of_n(trace, preds)
        label = trace.answer(*key).label
        if label is None:
            raise ContractError(f"trace {trace.problem_id!r} is unlabeled")
        confs.append(conf)
        labels.append(label)
    chosen = ScoredSet(np.array(confs), np.array(labels))
    ece_value, _ = ece(chosen, n_bins)
    return {
        "accuracy": float(np.mean(labels)),
        "ece": ece_value,
        "brier": brier(chosen),
    }


@dataclass(frozen=True)
class TokenBin:
    lo: float
    hi: float
    count: int
    brier: float


def brier_by_token_bins(scored: ScoredSet, edges: list[float]) -> list[TokenBin]:
    """Brier per tau range [edges[i], edges[i+1]); last bin right-closed.

    Empty bins are absent from the result.
    """
    if scored.taus is None:
        raise ContractError("brier_by_token_bins needs tau metadata")
    if len(edges) < 2 or any(b <= a for a, b in zip(edges, edges[1:])):
        raise ContractError("edges must be strictly increasing with >= 2 entries")
    out = []
    for i in range(len(edges) - 1):
        lo, hi = edges[i], edges[i + 1]
        if i == len(edges) - 2:
            member = (scored.taus >= lo) & (scored.taus <= hi)
        else:
            member = (scored.taus >= lo) & (scored.taus < hi)
        count = int(member.sum())
        if count == 0:
            continue
        sub = ScoredSet(scored.probs[member], scored.labels[member])
        out.append(TokenBin(lo, hi, count, brier(sub)))
    return out
