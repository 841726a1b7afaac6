"""Training loop, learning-rate selection, and evaluation orchestration.

Training uses AdamW with decoupled weight decay, a constant-with-warmup
schedule, global-norm gradient clipping, and per-group learning rates (the
mask mixture logits and sequence embeddings train much faster than the
body).  Each epoch shuffles problems into batches; multi-sequence models
also reshuffle the sequence-to-embedding assignment per problem and, when a
trace holds more sequences than the model width, train on a fresh uniform
subset each epoch.  The returned parameters are the best-validation-loss
snapshot.

Evaluation runs one verifier (optionally wrapped in weighted voting) over a
trace set and produces the metrics report; streaming sets also get the
threshold sweep and AUTC.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import model as msv
from .autodiff import ContractError, NumericError, Tape, Tensor, backward
from .baselines import (
    DEFAULT_VOTE_THRESHOLD,
    ProbeConfig,
    ProbeParams,
    init_probe,
    probe_loss,
    probe_predict,
    self_consistency,
    token_prob_predict,
    weighted_vote,
)
from .earlystop import TradeoffCurve, sweep
from .equivalence import partition as build_partition
from .metrics import ScoredSet, auroc, bon_metrics, brier, ece, nll
from .model import MsvConfig, MsvParams, PredictionSet
from .rng import CounterRng
from .traces import ProblemTrace

VERIFIER_KINDS = ("probe", "msv", "token_prob", "self_consistency")
AGGREGATION_KINDS = ("none", "weighted_vote")


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class TrainConfig:
    lr_probe: float = 1e-3
    lr_body: float = 5e-5
    lr_mask: float = 1e-1
    lr_embed: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    warmup_frac: float = 0.03
    max_grad_norm: float = 1.0
    batch_size: int = 16
    epochs: int | None = None
    lr_grid: tuple[float, ...] = (1e-5, 5e-5, 1e-4, 5e-4, 1e-3, 5e-3)
    seed: int = 0
    shuffle_sequences: bool = True

    def __post_init__(self):
        for name in ("lr_probe", "lr_body", "lr_mask", "lr_embed"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} must be nonnegative")
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")
        if self.epochs is not None and self.epochs < 0:
            raise ContractError("epochs must be >= 0")
        if not 0.0 <= self.warmup_frac <= 1.0:
            raise ContractError("warmup_frac must lie in [0, 1]")

    def resolved_epochs(self, mode: str) -> int:
        if self.epochs is not None:
            return self.epochs
        return 1 if mode == "terminal" else 2

    def to_dict(self) -> dict:
        out = {name: getattr(self, name) for name in self.__dataclass_fields__}
        out["lr_grid"] = list(self.lr_grid)
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(obj) - known
        if extra:
            raise ContractError(f"unknown TrainConfig fields: {sorted(extra)}")
        kwargs = dict(obj)
        if "lr_grid" in kwargs:
            kwargs["lr_grid"] = tuple(kwargs["lr_grid"])
        return cls(**kwargs)


@dataclass(frozen=True)
class StepStats:
    step: int
    loss: float
    lr_scale: float
    grad_norm: float
    clipped_norm: float


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float


@dataclass
class History:
    epochs: list[EpochStats] = field(default_factory=list)
    steps: list[StepStats] = field(default_factory=list)
    best_epoch: int | None = None


class AdamW:
    """Decoupled-weight-decay Adam with one learning rate per tensor."""

    def __init__(
        self,
        named: dict[str, Tensor],
        lr_by_name: dict[str, float],
        config: TrainConfig,
    ):
        self.named = named
        self.lr_by_name = lr_by_name
        self.config = config
        self.m = {name: np.zeros_like(t.data) for name, t in named.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in named.items()}
        self.t = 0

    def step(self, lr_scale: float) -> None:
        cfg = self.config
        self.t += 1
        bias1 = 1.0 - cfg.beta1 ** self.t
        bias2 = 1.0 - cfg.beta2 ** self.t
        for name, p in self.named.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[name] = cfg.beta1 * self.m[name] + (1.0 - cfg.beta1) * g
            self.v[name] = cfg.beta2 * self.v[name] + (1.0 - cfg.beta2) * g * g
            m_hat = self.m[name] / bias1
            v_hat = self.v[name] / bias2
            lr = self.lr_by_name[name] * lr_scale
            p.data = (
                p.data
                - lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
                - lr * cfg.weight_decay * p.data
            )


def clip_global_norm(tensors: list[Tensor], max_norm: float) -> tuple[float, float]:
    """Scale all grads so their joint L2 norm is at most max_norm."""
    total = 0.0
    for t in tensors:
        if t.grad is not None:
            total += float((t.grad * t.grad).sum())
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0:
        factor = max_norm / norm
        for t in tensors:
            if t.grad is not None:
                t.grad *= factor
        return norm, norm * factor
    return norm, norm


def _valid_answer_count(traces: list[ProblemTrace]) -> int:
    return sum(sum(len(seq) for seq in trace.sequences) for trace in traces)


def base_rate(traces: list[ProblemTrace]) -> float:
    labels = [rec.label for trace in traces for rec in trace.answers()]
    if any(label is None for label in labels):
        raise ContractError("training requires labeled traces")
    return float(np.mean(labels))


def _subsample(trace: ProblemTrace, width: int, rng: CounterRng) -> ProblemTrace:
    """Uniform width-subset of sequences, original order preserved."""
    if trace.n_sequences <= width:
        return trace
    pool = list(range(1, trace.n_sequences + 1))
    rng.shuffle(pool)
    return trace.subset(sorted(pool[:width]))


def _first_sequences(trace: ProblemTrace, width: int) -> ProblemTrace:
    if trace.n_sequences <= width:
        return trace
    return trace.subset(list(range(1, width + 1)))


def _lr_by_name(kind: str, named: dict[str, Tensor], cfg: TrainConfig) -> dict[str, float]:
    if kind == "probe":
        return {name: cfg.lr_probe for name in named}
    out = {}
    for name in named:
        if name == "mask_logits":
            out[name] = cfg.lr_mask
        elif name == "seq_embed":
            out[name] = cfg.lr_embed
        else:
            out[name] = cfg.lr_body
    return out


def train(
    kind: str,
    model_config,
    train_config: TrainConfig,
    train_traces: list[ProblemTrace],
    val_traces: list[ProblemTrace],
):
    """Fit a verifier; returns (best-validation params, history).

    kind "msv" takes an MsvConfig, kind "probe" a ProbeConfig.  Aborts with
    DivergenceError if the loss turns non-finite.
    """
    if kind not in ("msv", "probe"):
        raise ContractError(f"unknown trainable kind {kind!r}")
    if not train_traces or not val_traces:
        raise ContractError("train and val trace sets must be non-empty")
    mode = model_config.mode
    epochs = train_config.resolved_epochs(mode)
    root = CounterRng(train_config.seed)
    init_rng = root.derive(0)
    shuffle_rng = root.derive(1)
    sample_rng = root.derive(2)
    rate = base_rate(train_traces)
    if kind == "msv":
        params = msv.init_params(model_config, init_rng, rate)
        width = model_config.n_max
    else:
        params = init_probe(model_config, init_rng, rate)
        width = None
    named = params.named()
    optimizer = AdamW(named, _lr_by_name(kind, named, train_config), train_config)
    history = History()
    best_params = params.copy()
    best_val = math.inf
    n_batches = math.ceil(len(train_traces) / train_config.batch_size)
    total_steps = max(1, epochs * n_batches)
    warmup_steps = max(1, math.ceil(train_config.warmup_frac * total_steps))
    step = 0
    for epoch in range(1, epochs + 1):
        order = list(range(len(train_traces)))
        shuffle_rng.shuffle(order)
        epoch_loss = 0.0
        epoch_count = 0
        for b in range(n_batches):
            batch_idx = order[
                b * train_config.batch_size: (b + 1) * train_config.batch_size
            ]
            batch = [train_traces[i] for i in batch_idx]
            if kind == "msv":
                batch = [_subsample(tr, width, sample_rng) for tr in batch]
                embed_orders = None
                if train_config.shuffle_sequences:
                    embed_orders = []
                    for tr in batch:
                        perm = list(range(model_config.n_max))
                        sample_rng.shuffle(perm)
                        embed_orders.append(perm)
            step += 1
            params.zero_grads()
            try:
                with Tape() as tape:
                    if kind == "msv":
                        batch_loss = msv.loss(batch, params, model_config, embed_orders)
                    else:
                        batch_loss = probe_loss(batch, params, model_config.pooling)
                    value = batch_loss.item()
                    if not math.isfinite(value):
                        raise NumericError(f"loss value {value}")
                    backward(batch_loss, tape)
            except NumericError as exc:
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch} step {step}: {exc}"
                ) from exc
            pre, post = clip_global_norm(params.tensors(), train_config.max_grad_norm)
            lr_scale = min(1.0, step / warmup_steps)
            optimizer.step(lr_scale)
            history.steps.append(StepStats(step, value, lr_scale, pre, post))
            epoch_loss += value
            epoch_count += _valid_answer_count(batch)
        val_loss = validation_loss(kind, params, model_config, val_traces)
        history.epochs.append(
            EpochStats(epoch, epoch_loss / max(1, epoch_count), val_loss)
        )
        if val_loss < best_val:
            best_val = val_loss
            best_params = params.copy()
            history.best_epoch = epoch
    return best_params, history


def validation_loss(kind: str, params, model_config, traces: list[ProblemTrace]) -> float:
    """Mean per-answer BCE on a held-out set (no grads)."""
    if kind == "msv":
        width = model_config.n_max
        capped = [_first_sequences(tr, width) for tr in traces]
        total = msv.loss(capped, params, model_config).item()
        return total / _valid_answer_count(capped)
    total = probe_loss(traces, params, model_config.pooling).item()
    return total / _valid_answer_count(traces)


def lr_select(
    kind: str,
    grid: tuple[float, ...],
    model_config,
    train_config: TrainConfig,
    train_traces: list[ProblemTrace],
    val_traces: list[ProblemTrace],
) -> float:
    """Best grid LR by validation loss; diverging LRs rank last, ties go low."""
    if not grid:
        raise ContractError("lr grid must be non-empty")
    best_lr = None
    best_val = math.inf
    for lr in sorted(grid):
        if kind == "probe":
            candidate = replace(train_config, lr_probe=lr)
        else:
            candidate = replace(train_config, lr_body=lr)
        try:
            _, history = train(kind, model_config, candidate, train_traces, val_traces)
            score = min((e.val_loss for e in history.epochs), default=math.inf)
        except DivergenceError:
            score = math.inf
        if score < best_val:
            best_val = score
            best_lr = lr
    if best_lr is None:
        best_lr = sorted(grid)[0]
    return best_lr


def _predict_one(
    trace: ProblemTrace,
    verifier: str,
    aggregation: str,
    msv_params: MsvParams | None,
    msv_config: MsvConfig | None,
    probe_params: ProbeParams | None,
    probe_config: ProbeConfig | None,
    group_size: int | None,
    vote_threshold: int,
) -> PredictionSet:
    part = build_partition(trace)
    if verifier == "msv":
        width = group_size or msv_config.group_size or min(
            msv_config.n_max, trace.n_sequences
        )
        preds = msv.group_predict(trace, msv_params, msv_config, t=None, group_size=width)
    elif verifier == "probe":
        if probe_config.mode != trace.mode:
            raise ContractError(
                f"probe mode {probe_config.mode!r} != trace mode {trace.mode!r}"
            )
        preds = probe_predict(trace, probe_params, probe_config.pooling)
    elif verifier == "token_prob":
        preds = token_prob_predict(trace)
    else:
        preds = self_consistency(trace, part, vote_threshold)
    if aggregation == "weighted_vote":
        preds = weighted_vote(trace, preds, part, vote_threshold)
    return preds


def evaluate(
    traces: list[ProblemTrace],
    verifier: str,
    aggregation: str = "none",
    msv_params: MsvParams | None = None,
    msv_config: MsvConfig | None = None,
    probe_params: ProbeParams | None = None,
    probe_config: ProbeConfig | None = None,
    group_size: int | None = None,
    vote_threshold: int = DEFAULT_VOTE_THRESHOLD,
    lambda_grid: list[float] | None = None,
    token_budget: int | None = None,
    ece_bins: int = 10,
    jobs: int = 1,
) -> tuple[dict, TradeoffCurve | None]:
    """Metrics report for one verifier over labeled traces.

    Returns (report, curve); the curve is None for terminal sets.  The
    report keys follow the documented schema: verifier, aggregation, N,
    auroc, brier, nll, ece, bon, bins (+ autc and token_budget when
    streaming).
    """
    if not traces:
        raise ContractError("evaluate needs at least one trace")
    if verifier not in VERIFIER_KINDS:
        raise ContractError(f"unknown verifier {verifier!r}")
    if aggregation not in AGGREGATION_KINDS:
        raise ContractError(f"unknown aggregation {aggregation!r}")
    if verifier == "self_consistency" and aggregation == "weighted_vote":
        raise ContractError("self_consistency is already an aggregate")
    if verifier == "msv" and (msv_params is None or msv_config is None):
        raise ContractError("msv evaluation needs msv_params and msv_config")
    if verifier == "probe" and (probe_params is None or probe_config is None):
        raise ContractError("probe evaluation needs probe_params and probe_config")
    mode = traces[0].mode
    if any(tr.mode != mode for tr in traces):
        raise ContractError("evaluate needs a homogeneous trace mode")

    def run(trace: ProblemTrace) -> PredictionSet:
        return _predict_one(
            trace, verifier, aggregation, msv_params, msv_config,
            probe_params, probe_config, group_size, vote_threshold,
        )

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            predictions = list(pool.map(run, traces))
    else:
        predictions = [run(trace) for trace in traces]

    probs, labels, taus, keys = [], [], [], []
    for trace, preds in zip(traces, predictions):
        recs = trace.terminal_answers() if mode == "terminal" else list(trace.answers())
        for rec in recs:
            key = (rec.seq_index, rec.step)
            if rec.label is None:
                raise ContractError(f"trace {trace.problem_id!r} is unlabeled")
            probs.append(preds.prob(*key))
            labels.append(rec.label)
            taus.append(rec.tau)
            keys.append((trace.problem_id, rec.seq_index, rec.step))
    scored = ScoredSet(np.array(probs), np.array(labels), np.array(taus), keys)
    ece_value, bins = ece(scored, ece_bins)
    report = {
        "verifier": verifier,
        "aggregation": aggregation,
        "N": max(tr.n_sequences for tr in traces),
        "auroc": auroc(scored),
        "brier": brier(scored),
        "nll": nll(scored),
        "ece": ece_value,
        "bon": bon_metrics(traces, predictions, ece_bins),
        "bins": [
            {
                "lo": b.lo,
                "hi": b.hi,
                "count": b.count,
                "confidence": b.confidence,
                "accuracy": b.accuracy,
            }
            for b in bins
        ],
        "n_problems": len(traces),
        "n_answers": scored.size,
    }
    curve = None
    if mode == "streaming":
        budget = token_budget
        if budget is None:
            budget = max(trace.max_tau() for trace in traces)
        curve = sweep(traces, predictions, lambda_grid, budget)
        report["autc"] = curve.autc
        report["token_budget"] = budget
    return report, curve
