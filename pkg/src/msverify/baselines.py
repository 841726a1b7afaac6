"""Single-sequence and aggregation baselines.

Probe: a 2-layer MLP scoring each answer from its own pooled hidden state,
blind to the other sequences.  Token-probability: geometric mean of the
answer's token probabilities.  Weighted voting: sums verifier probabilities
within equivalence classes and normalizes across classes.  Self-consistency:
vote counts alone (weighted voting under a constant verifier).

Streaming aggregation pools every answer decoded by the query answer's tau.
When that candidate pool has at most R members (default 16), weighted voting
returns the raw probability unchanged and self-consistency returns the
neutral score 0.5; both activate only once the pool exceeds R.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, DimensionError, Tensor
from .equivalence import EquivalencePartition
from .model import Prediction, PredictionSet
from .rng import CounterRng
from .traces import AnswerRecord, ProblemTrace

PROBE_CHECKPOINT_FORMAT_VERSION = 1
DEFAULT_VOTE_THRESHOLD = 16

_CLIP = 1e-12


@dataclass(frozen=True)
class ProbeConfig:
    d_model: int
    hidden: int = 64
    pooling: str = "last_token"
    mode: str = "terminal"

    def __post_init__(self):
        if self.d_model < 1 or self.hidden < 1:
            raise ContractError("probe sizes must be positive")
        if self.pooling not in ("last_token", "mean_tokens"):
            raise ContractError(f"unknown pooling {self.pooling!r}")
        if self.mode not in ("terminal", "streaming"):
            raise ContractError(f"unknown mode {self.mode!r}")

    def to_dict(self) -> dict:
        return {
            "kind": "probe",
            "d_model": self.d_model,
            "hidden": self.hidden,
            "pooling": self.pooling,
            "mode": self.mode,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "ProbeConfig":
        obj = dict(obj)
        kind = obj.pop("kind", "probe")
        if kind != "probe":
            raise ContractError(f"not a probe config: kind={kind!r}")
        return cls(**obj)


@dataclass
class ProbeParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def named(self) -> dict[str, Tensor]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def tensors(self) -> list[Tensor]:
        return list(self.named().values())

    def zero_grads(self) -> None:
        for t in self.tensors():
            t.zero_grad()

    def copy(self) -> "ProbeParams":
        return ProbeParams(
            *(Tensor(t.data.copy(), requires_grad=t.requires_grad) for t in self.tensors())
        )


def _logit(p: float) -> float:
    p = min(max(p, _CLIP), 1.0 - _CLIP)
    return math.log(p / (1.0 - p))


def init_probe(config: ProbeConfig, rng: CounterRng, base_rate: float = 0.5) -> ProbeParams:
    d, hidden = config.d_model, config.hidden
    w1 = rng.normals(d * hidden).reshape(d, hidden) * d ** -0.5
    w2 = rng.normals(hidden).reshape(hidden, 1) * hidden ** -0.5
    base = min(max(base_rate, 1e-3), 1.0 - 1e-3)
    return ProbeParams(
        w1=Tensor(w1, requires_grad=True),
        b1=Tensor(np.zeros((1, hidden)), requires_grad=True),
        w2=Tensor(w2, requires_grad=True),
        b2=Tensor(np.full((1, 1), math.log(base / (1.0 - base))), requires_grad=True),
    )


def _pooled_states(trace: ProblemTrace, pooling: str) -> tuple[np.ndarray, list]:
    keys = []
    rows = []
    for rec in trace.answers():
        keys.append((rec.seq_index, rec.step))
        if pooling == "last_token":
            rows.append(rec.hidden[-1])
        else:
            rows.append(rec.hidden.mean(axis=0))
    return np.stack(rows), keys


def _probe_forward(states: np.ndarray, params: ProbeParams) -> tuple[Tensor, Tensor]:
    x = Tensor(states)
    inner = ad.gelu(ad.add(ad.matmul(x, params.w1), params.b1))
    logits = ad.add(ad.matmul(inner, params.w2), params.b2)
    return logits, ad.sigmoid(logits)


def probe_predict(
    trace: ProblemTrace, params: ProbeParams, pooling: str = "last_token"
) -> PredictionSet:
    """Independent per-answer scores; blind to all other answers."""
    states, keys = _pooled_states(trace, pooling)
    logits, probs = _probe_forward(states, params)
    out = PredictionSet(readout_time=None)
    for i, key in enumerate(keys):
        out.entries[key] = Prediction(float(logits.data[i, 0]), float(probs.data[i, 0]))
    return out


def probe_loss(
    traces: list[ProblemTrace], params: ProbeParams, pooling: str = "last_token"
) -> Tensor:
    """Summed BCE over all answers of all traces."""
    if not traces:
        raise ContractError("probe_loss needs at least one trace")
    total = None
    for trace in traces:
        states, keys = _pooled_states(trace, pooling)
        _, probs = _probe_forward(states, params)
        labels = []
        for key in keys:
            label = trace.answer(*key).label
            if label is None:
                raise ContractError(
                    f"trace {trace.problem_id!r} answer {key} is unlabeled"
                )
            labels.append(float(label))
        term = ad.bce_sum(probs, np.array(labels).reshape(-1, 1))
        total = term if total is None else ad.add(total, term)
    return total


def token_prob_score(rec: AnswerRecord) -> float:
    """Geometric mean of token probabilities: exp(mean logprob)."""
    if rec.logprobs is None:
        raise ContractError(
            f"answer (n={rec.seq_index},k={rec.step}) has no logprobs"
        )
    return math.exp(sum(rec.logprobs) / len(rec.logprobs))


def token_prob_predict(trace: ProblemTrace) -> PredictionSet:
    out = PredictionSet(readout_time=None)
    for rec in trace.answers():
        s = token_prob_score(rec)
        out.entries[(rec.seq_index, rec.step)] = Prediction(_logit(s), s)
    return out


def _candidates_by(trace: ProblemTrace, tau: int) -> list[AnswerRecord]:
    return [rec for rec in trace.answers() if rec.tau <= tau]


def weighted_vote(
    trace: ProblemTrace,
    predictions: PredictionSet,
    part: EquivalencePartition,
    r: int = DEFAULT_VOTE_THRESHOLD,
) -> PredictionSet:
    """Class-summed, normalized probabilities per answer.

    Terminal mode aggregates over the N terminal answers.  Streaming mode
    aggregates, for each answer, over all answers decoded by its tau, and
    leaves the raw probability unchanged while that pool has <= r members.
    """
    if predictions.is_empty:
        raise ContractError("weighted_vote needs a non-empty prediction set")
    out = PredictionSet(readout_time=predictions.readout_time)
    if trace.mode == "terminal":
        recs = trace.terminal_answers()
        class_sum: dict[int, float] = {}
        for rec in recs:
            key = (rec.seq_index, rec.step)
            cls = part.class_of[key]
            class_sum[cls] = class_sum.get(cls, 0.0) + predictions.prob(*key)
        total = sum(class_sum.values())
        for rec in recs:
            key = (rec.seq_index, rec.step)
            p = class_sum[part.class_of[key]] / total
            out.entries[key] = Prediction(_logit(p), p)
        return out
    for rec in trace.answers():
        key = (rec.seq_index, rec.step)
        pool = _candidates_by(trace, rec.tau)
        if len(pool) <= r:
            out.entries[key] = predictions.entries[key]
            continue
        class_sum = {}
        for cand in pool:
            cand_key = (cand.seq_index, cand.step)
            cls = part.class_of[cand_key]
            class_sum[cls] = class_sum.get(cls, 0.0) + predictions.prob(*cand_key)
        total = sum(class_sum.values())
        p = class_sum[part.class_of[key]] / total
        out.entries[key] = Prediction(_logit(p), p)
    return out


def self_consistency(
    trace: ProblemTrace,
    part: EquivalencePartition,
    r: int = DEFAULT_VOTE_THRESHOLD,
) -> PredictionSet:
    """Vote-count scores: the fraction of agreeing candidates.

    Terminal mode scores each terminal answer by its class share of the N
    sequences.  Streaming mode uses the fraction among all answers decoded
    by tau, returning the neutral 0.5 while that pool has <= r members (the
    same guard as weighted voting, so the two rank identically under a
    constant verifier).
    """
    out = PredictionSet(readout_time=None)
    if trace.mode == "terminal":
        recs = trace.terminal_answers()
        counts: dict[int, int] = {}
        for rec in recs:
            cls = part.class_of[(rec.seq_index, rec.step)]
            counts[cls] = counts.get(cls, 0) + 1
        for rec in recs:
            key = (rec.seq_index, rec.step)
            p = counts[part.class_of[key]] / trace.n_sequences
            out.entries[key] = Prediction(_logit(p), p)
        return out
    for rec in trace.answers():
        key = (rec.seq_index, rec.step)
        pool = _candidates_by(trace, rec.tau)
        if len(pool) <= r:
            out.entries[key] = Prediction(0.0, 0.5)
            continue
        own = part.class_of[key]
        agree = sum(
            1 for cand in pool if part.class_of[(cand.seq_index, cand.step)] == own
        )
        p = agree / len(pool)
        out.entries[key] = Prediction(_logit(p), p)
    return out


def save_probe_checkpoint(path: str, params: ProbeParams, config: ProbeConfig) -> None:
    obj = {
        "format_version": PROBE_CHECKPOINT_FORMAT_VERSION,
        "config": config.to_dict(),
        "params": {name: t.data.tolist() for name, t in params.named().items()},
    }
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def load_probe_checkpoint(path: str) -> tuple[ProbeParams, ProbeConfig]:
    with open(path, "r", encoding="utf-8") as fh:
        obj = json.load(fh)
    if obj.get("format_version") != PROBE_CHECKPOINT_FORMAT_VERSION:
        raise ContractError(
            f"unsupported probe checkpoint format_version {obj.get('format_version')!r}"
        )
    config = ProbeConfig.from_dict(obj["config"])
    named = obj["params"]
    expected = {"w1": (config.d_model, config.hidden), "b1": (1, config.hidden),
                "w2": (config.hidden, 1), "b2": (1, 1)}
    if set(named) != set(expected):
        raise ContractError(f"probe checkpoint params mismatch: {sorted(named)}")
    tensors = {}
    for name, shape in expected.items():
        arr = np.asarray(named[name], dtype=np.float64)
        if arr.shape != shape:
            raise DimensionError(f"param {name!r} has shape {arr.shape}, expected {shape}")
        tensors[name] = Tensor(arr, requires_grad=True)
    return ProbeParams(**tensors), config
