"""Multi-sequence verifier: cross-sequence scoring of candidate answers.

The model concatenates the answer-token hidden states of all sequences
(plus a learned per-sequence embedding), runs one multi-mask attention
block, and scores each answer from its pooled representation, optionally
augmented with the answer's vote fraction.  Each attention head h attends
under every enabled mask kind j:

    A_{h,j} = row_softmax(Q_h K_h^T / sqrt(d_head) + log M_j) V_h

and the per-(head, mask) outputs, projected back to model width per head,
are combined with learned mixture weights alpha_h = softmax(w_h):

    U~ = sum_h sum_j alpha_{h,j} (A_{h,j} W_O,h)
    Z  = (U + U~) + MLP(LN(U + U~))

In streaming mode the masks are causal, so a single forward pass at the
final time yields each answer's prediction as of its own emission; the
incremental session reproduces those scores answer by answer from per-head
key/value caches.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, DimensionError, Tensor
from .equivalence import (
    EquivalencePartition,
    canonicalize,
    partition as build_partition,
    vote_fraction,
)
from .masks import MASK_KINDS, MaskSet, TokenTable, effective_kinds, masks_from_table, token_table
from .rng import CounterRng
from .traces import AnswerRecord, ProblemTrace

CHECKPOINT_FORMAT_VERSION = 1


class CapacityError(ValueError):
    """A sequence index exceeds the embedding table."""


class NoAnswersError(ValueError):
    """Readout time precedes every answer emission."""


class OrderError(ValueError):
    """Streaming session fed answers with decreasing tau."""


@dataclass(frozen=True)
class MsvConfig:
    d_model: int
    n_heads: int = 2
    masks: tuple[str, ...] = MASK_KINDS
    mode: str = "terminal"
    n_max: int = 8
    feature_augmentation: bool = True
    logit_averaging: bool = True
    streaming_logit_averaging: bool = False
    pooling: str = "last_token"
    group_size: int | None = None

    def __post_init__(self):
        if self.mode not in ("terminal", "streaming"):
            raise ContractError(f"unknown mode {self.mode!r}")
        if self.d_model < 1 or self.n_heads < 1 or self.d_model % self.n_heads:
            raise ContractError(
                f"n_heads={self.n_heads} must divide d_model={self.d_model}"
            )
        if self.logit_averaging and self.mode != "terminal":
            raise ContractError("logit_averaging requires terminal mode")
        if self.streaming_logit_averaging and self.mode != "streaming":
            raise ContractError("streaming_logit_averaging requires streaming mode")
        if self.pooling not in ("last_token", "mean_tokens"):
            raise ContractError(f"unknown pooling {self.pooling!r}")
        if self.n_max < 1:
            raise ContractError("n_max must be >= 1")
        if self.group_size is not None and self.group_size < 1:
            raise ContractError("group_size must be >= 1")
        effective_kinds(self.masks, self.mode)

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def block_mlp_hidden(self) -> int:
        return 4 * self.d_model

    @property
    def effective_masks(self) -> tuple[str, ...]:
        return effective_kinds(self.masks, self.mode)[0]

    @property
    def n_masks(self) -> int:
        return len(self.effective_masks)

    def to_dict(self) -> dict:
        return {
            "kind": "msv",
            "d_model": self.d_model,
            "n_heads": self.n_heads,
            "masks": list(self.masks),
            "mode": self.mode,
            "n_max": self.n_max,
            "feature_augmentation": self.feature_augmentation,
            "logit_averaging": self.logit_averaging,
            "streaming_logit_averaging": self.streaming_logit_averaging,
            "pooling": self.pooling,
            "group_size": self.group_size,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "MsvConfig":
        kwargs = dict(obj)
        kind = kwargs.pop("kind", "msv")
        if kind != "msv":
            raise ContractError(f"not an msv config: kind={kind!r}")
        known = {f for f in cls.__dataclass_fields__}
        extra = set(kwargs) - known
        if extra:
            raise ContractError(f"unknown MsvConfig fields: {sorted(extra)}")
        if "masks" in kwargs:
            kwargs["masks"] = tuple(kwargs["masks"])
        return cls(**kwargs)


@dataclass
class MsvParams:
    seq_embed: Tensor
    w_q: list[Tensor]
    w_k: list[Tensor]
    w_v: list[Tensor]
    w_o: list[Tensor]
    mask_logits: Tensor
    ln_gain: Tensor
    ln_shift: Tensor
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor
    vote_w1: Tensor
    vote_b1: Tensor
    vote_w2: Tensor
    vote_b2: Tensor
    head_w: Tensor
    head_b: Tensor

    def named(self) -> dict[str, Tensor]:
        """Stable name -> tensor mapping (defines checkpoint and init order)."""
        out: dict[str, Tensor] = {"seq_embed": self.seq_embed}
        for h in range(len(self.w_q)):
            out[f"w_q.{h}"] = self.w_q[h]
            out[f"w_k.{h}"] = self.w_k[h]
            out[f"w_v.{h}"] = self.w_v[h]
            out[f"w_o.{h}"] = self.w_o[h]
        out["mask_logits"] = self.mask_logits
        out["ln_gain"] = self.ln_gain
        out["ln_shift"] = self.ln_shift
        out["mlp_w1"] = self.mlp_w1
        out["mlp_b1"] = self.mlp_b1
        out["mlp_w2"] = self.mlp_w2
        out["mlp_b2"] = self.mlp_b2
        out["vote_w1"] = self.vote_w1
        out["vote_b1"] = self.vote_b1
        out["vote_w2"] = self.vote_w2
        out["vote_b2"] = self.vote_b2
        out["head_w"] = self.head_w
        out["head_b"] = self.head_b
        return out

    def tensors(self) -> list[Tensor]:
        return list(self.named().values())

    def zero_grads(self) -> None:
        for t in self.tensors():
            t.zero_grad()

    def copy(self) -> "MsvParams":
        def dup(t: Tensor) -> Tensor:
            return Tensor(t.data.copy(), requires_grad=t.requires_grad)

        return MsvParams(
            seq_embed=dup(self.seq_embed),
            w_q=[dup(t) for t in self.w_q],
            w_k=[dup(t) for t in self.w_k],
            w_v=[dup(t) for t in self.w_v],
            w_o=[dup(t) for t in self.w_o],
            mask_logits=dup(self.mask_logits),
            ln_gain=dup(self.ln_gain),
            ln_shift=dup(self.ln_shift),
            mlp_w1=dup(self.mlp_w1),
            mlp_b1=dup(self.mlp_b1),
            mlp_w2=dup(self.mlp_w2),
            mlp_b2=dup(self.mlp_b2),
            vote_w1=dup(self.vote_w1),
            vote_b1=dup(self.vote_b1),
            vote_w2=dup(self.vote_w2),
            vote_b2=dup(self.vote_b2),
            head_w=dup(self.head_w),
            head_b=dup(self.head_b),
        )


def _logit(p: float) -> float:
    p = min(max(p, 1e-3), 1.0 - 1e-3)
    return math.log(p / (1.0 - p))


def init_params(config: MsvConfig, rng: CounterRng, base_rate: float = 0.5) -> MsvParams:
    """Fresh parameters.

    Projections ~ N(0, 1/d_model); seq_embed ~ N(0, 0.02^2); mixture logits
    zero (uniform alpha); block MLP ~ N(0, 1/fan_in); vote-feature MLP has a
    zero output layer so augmentation starts as a no-op; head weight zero
    with bias at the logit of the training base rate, for a calibrated
    start.  Draw order follows MsvParams.named().
    """
    d = config.d_model
    dh = config.d_head
    proj_std = d ** -0.5

    def draw(rows: int, cols: int, std: float) -> Tensor:
        data = rng.normals(rows * cols).reshape(rows, cols) * std
        return Tensor(data, requires_grad=True)

    def zeros(rows: int, cols: int) -> Tensor:
        return Tensor(np.zeros((rows, cols)), requires_grad=True)

    seq_embed = draw(config.n_max, d, 0.02)
    w_q, w_k, w_v, w_o = [], [], [], []
    for _ in range(config.n_heads):
        w_q.append(draw(d, dh, proj_std))
        w_k.append(draw(d, dh, proj_std))
        w_v.append(draw(d, dh, proj_std))
        w_o.append(draw(dh, d, proj_std))
    hidden = config.block_mlp_hidden
    params = MsvParams(
        seq_embed=seq_embed,
        w_q=w_q,
        w_k=w_k,
        w_v=w_v,
        w_o=w_o,
        mask_logits=zeros(config.n_heads, config.n_masks),
        ln_gain=Tensor(np.ones((1, d)), requires_grad=True),
        ln_shift=zeros(1, d),
        mlp_w1=draw(d, hidden, d ** -0.5),
        mlp_b1=zeros(1, hidden),
        mlp_w2=draw(hidden, d, hidden ** -0.5),
        mlp_b2=zeros(1, d),
        vote_w1=draw(1, d, 1.0),
        vote_b1=zeros(1, d),
        vote_w2=zeros(d, d),
        vote_b2=zeros(1, d),
        head_w=zeros(d, 1),
        head_b=Tensor(np.full((1, 1), _logit(base_rate)), requires_grad=True),
    )
    return params


@dataclass(frozen=True)
class Prediction:
    logit: float
    prob: float


@dataclass
class PredictionSet:
    readout_time: int | None
    entries: dict[tuple[int, int], Prediction] = field(default_factory=dict)

    @property
    def is_empty(self) -> bool:
        return not self.entries

    def prob(self, n: int, k: int) -> float:
        return self.entries[(n, k)].prob

    def logit(self, n: int, k: int) -> float:
        return self.entries[(n, k)].logit


def assemble_input(
    trace: ProblemTrace,
    t: int | None,
    params: MsvParams,
    part: EquivalencePartition | None = None,
    embed_order: list[int] | None = None,
) -> tuple[Tensor, TokenTable]:
    """U^(t): rows h^(n)_{k,i} + e^(n), sequence-major, no separators.

    embed_order optionally remaps sequence n to embedding row
    embed_order[n-1]; training uses this to shuffle embedding assignment.
    """
    if part is None:
        part = build_partition(trace)
    table = token_table(trace, t, part)
    if table.n_tokens == 0:
        raise NoAnswersError(f"no answers at or before t={t}")
    n_max = params.seq_embed.shape[0]
    if trace.n_sequences > n_max:
        raise CapacityError(
            f"trace has {trace.n_sequences} sequences but n_max={n_max}"
        )
    if embed_order is None:
        embed_order = list(range(trace.n_sequences))
    rows = []
    for tok in table.tokens:
        row = embed_order[tok.seq - 1]
        if row < 0 or row >= n_max:
            raise CapacityError(f"embedding row {row} outside table of {n_max}")
        rows.append(row)
    hidden = np.concatenate(
        [trace.answer(n, k).hidden for (n, k) in table.order], axis=0
    )
    embeds = ad.gather_rows(params.seq_embed, rows)
    return ad.add(Tensor(hidden), embeds), table


def mmtb_forward(u: Tensor, maskset: MaskSet, params: MsvParams) -> Tensor:
    """One multi-mask attention block; output shape equals input shape."""
    n_heads = len(params.w_q)
    n_masks = len(maskset.kinds)
    if params.mask_logits.shape != (n_heads, n_masks):
        raise DimensionError(
            f"mask_logits shape {params.mask_logits.shape} != ({n_heads}, {n_masks})"
        )
    if maskset.n_tokens != u.shape[0]:
        raise DimensionError(
            f"maskset covers {maskset.n_tokens} tokens, input has {u.shape[0]} rows"
        )
    d_head = params.w_q[0].shape[1]
    additive = {kind: maskset.additive(kind) for kind in maskset.kinds}
    no_mask = np.zeros(params.mask_logits.shape)
    alpha = ad.row_softmax_with_additive_mask(params.mask_logits, no_mask)
    mixed = None
    for h in range(n_heads):
        q = ad.matmul(u, params.w_q[h])
        k = ad.matmul(u, params.w_k[h])
        v = ad.matmul(u, params.w_v[h])
        scores = ad.scale(ad.matmul(q, ad.transpose(k)), d_head ** -0.5)
        alpha_h = ad.transpose(ad.gather_rows(alpha, [h]))
        for j, kind in enumerate(maskset.kinds):
            attended = ad.matmul(
                ad.row_softmax_with_additive_mask(scores, additive[kind]), v
            )
            projected = ad.matmul(attended, params.w_o[h])
            term = ad.mul(projected, ad.gather_rows(alpha_h, [j]))
            mixed = term if mixed is None else ad.add(mixed, term)
    residual = ad.add(u, mixed)
    normed = ad.add(ad.mul(ad.layer_norm(residual), params.ln_gain), params.ln_shift)
    inner = ad.gelu(ad.add(ad.matmul(normed, params.mlp_w1), params.mlp_b1))
    mlp_out = ad.add(ad.matmul(inner, params.mlp_w2), params.mlp_b2)
    return ad.add(residual, mlp_out)


def _vote_feature(params: MsvParams, votes: np.ndarray) -> Tensor:
    gamma = Tensor(votes.reshape(-1, 1))
    inner = ad.gelu(ad.add(ad.matmul(gamma, params.vote_w1), params.vote_b1))
    return ad.add(ad.matmul(inner, params.vote_w2), params.vote_b2)


def _averaging_matrix(
    table: TokenTable, part: EquivalencePartition, trace: ProblemTrace, causal: bool
) -> np.ndarray:
    """Row i averages logits over answers equivalent to answer i.

    causal restricts the average to answers emitted by answer i's tau.
    """
    classes = np.array([part.class_of[key] for key in table.order])
    taus = np.array([trace.answer(*key).tau for key in table.order])
    same = classes[:, None] == classes[None, :]
    if causal:
        same &= taus[None, :] <= taus[:, None]
    return same / same.sum(axis=1, keepdims=True)


def _forward(
    trace: ProblemTrace,
    t: int | None,
    params: MsvParams,
    config: MsvConfig,
    part: EquivalencePartition | None = None,
    embed_order: list[int] | None = None,
) -> tuple[Tensor, Tensor, TokenTable, EquivalencePartition] | None:
    """Logits and probabilities for every answer with tau <= t, or None."""
    if trace.mode != config.mode:
        raise ContractError(
            f"trace mode {trace.mode!r} != model mode {config.mode!r}"
        )
    if part is None:
        part = build_partition(trace)
    table = token_table(trace, t, part)
    if table.n_tokens == 0:
        return None
    maskset = masks_from_table(table, config.masks, config.mode)
    u, _ = assemble_input(trace, t, params, part, embed_order)
    z = mmtb_forward(u, maskset, params)
    if config.pooling == "last_token":
        idx = [table.spans[key][1] - 1 for key in table.order]
        pooled = ad.gather_rows(z, idx)
    else:
        pool = np.zeros((table.n_answers, table.n_tokens))
        for i, key in enumerate(table.order):
            start, stop = table.spans[key]
            pool[i, start:stop] = 1.0 / (stop - start)
        pooled = ad.matmul(Tensor(pool), z)
    if config.feature_augmentation:
        votes = np.array(
            [vote_fraction(trace, n, k, part) for (n, k) in table.order]
        )
        pooled = ad.add(pooled, _vote_feature(params, votes))
    logits = ad.add(ad.matmul(pooled, params.head_w), params.head_b)
    if (config.mode == "terminal" and config.logit_averaging) or (
        config.mode == "streaming" and config.streaming_logit_averaging
    ):
        averaging = _averaging_matrix(
            table, part, trace, causal=config.mode == "streaming"
        )
        logits = ad.matmul(Tensor(averaging), logits)
    probs = ad.sigmoid(logits)
    return logits, probs, table, part


def predict(
    trace: ProblemTrace,
    t: int | None,
    params: MsvParams,
    config: MsvConfig,
    part: EquivalencePartition | None = None,
    embed_order: list[int] | None = None,
) -> PredictionSet:
    """Score every answer with tau <= t (t = None scores all answers)."""
    result = _forward(trace, t, params, config, part, embed_order)
    out = PredictionSet(readout_time=t)
    if result is None:
        return out
    logits, probs, table, _ = result
    flat_logits = logits.data.reshape(-1)
    flat_probs = probs.data.reshape(-1)
    for i, key in enumerate(table.order):
        out.entries[key] = Prediction(float(flat_logits[i]), float(flat_probs[i]))
    return out


def loss(
    traces: list[ProblemTrace],
    params: MsvParams,
    config: MsvConfig,
    embed_orders: list[list[int] | None] | None = None,
) -> Tensor:
    """Summed BCE over every valid (n, k) of every trace.

    Streaming sums all answers (each scored as of its emission, via the
    causal masks); terminal sums the terminal answers.  Probabilities are
    clamped to [1e-12, 1 - 1e-12] inside the BCE.
    """
    if not traces:
        raise ContractError("loss needs at least one trace")
    total = None
    for i, trace in enumerate(traces):
        order = embed_orders[i] if embed_orders is not None else None
        result = _forward(trace, None, params, config, embed_order=order)
        if result is None:
            raise NoAnswersError(f"trace {trace.problem_id!r} has no answers")
        _, probs, table, _ = result
        labels = []
        for key in table.order:
            label = trace.answer(*key).label
            if label is None:
                raise ContractError(
                    f"trace {trace.problem_id!r} answer {key} is unlabeled"
                )
            labels.append(float(label))
        term = ad.bce_sum(probs, np.array(labels).reshape(-1, 1))
        total = term if total is None else ad.add(total, term)
    return total


def group_predict(
    trace: ProblemTrace,
    params: MsvParams,
    config: MsvConfig,
    t: int | None = None,
    group_size: int | None = None,
) -> PredictionSet:
    """Score in independent groups of M sequences (last group may be smaller).

    Equivalence classes and vote fractions are group-local; keys in the
    result use the original sequence numbering.
    """
    m = group_size or config.group_size or trace.n_sequences
    if m < 1:
        raise ContractError("group size must be >= 1")
    merged = PredictionSet(readout_time=t)
    for start in range(0, trace.n_sequences, m):
        members = list(range(start + 1, min(start + m, trace.n_sequences) + 1))
        sub = trace.subset(members)
        sub_pred = predict(sub, t, params, config)
        for (local_n, k), pred in sub_pred.entries.items():
            merged.entries[(members[local_n - 1], k)] = pred
    return merged


class StreamingSession:
    """Incremental scoring of one problem's answers in emission order.

    Caches per-head keys/values of all tokens seen so far; each new answer
    is scored exactly as a full forward pass at its tau would score it
    (within float tolerance), provided taus are distinct across sequences.
    With tied taus the session conditions only on answers already received.
    Prior answers' scores are never revised.
    """

    def __init__(self, params: MsvParams, config: MsvConfig, n_sequences: int):
        if config.mode != "streaming":
            raise ContractError("sessions require streaming mode")
        if n_sequences > params.seq_embed.shape[0]:
            raise CapacityError(
                f"{n_sequences} sequences exceed n_max={params.seq_embed.shape[0]}"
            )
        self.params = params
        self.config = config
        self.n_sequences = n_sequences
        self.kinds = config.effective_masks
        no_mask = np.zeros(params.mask_logits.shape)
        self.alphas = ad.row_softmax_with_additive_mask(
            params.mask_logits, no_mask
        ).data
        self.k_cache = [np.zeros((0, config.d_head)) for _ in range(config.n_heads)]
        self.v_cache = [np.zeros((0, config.d_head)) for _ in range(config.n_heads)]
        self.tok_seq = np.zeros(0, dtype=np.intp)
        self.tok_step = np.zeros(0, dtype=np.intp)
        self.tok_cls = np.zeros(0, dtype=np.intp)
        self.tok_tau = np.zeros(0, dtype=np.int64)
        self.class_ids: dict[str, int] = {}
        self.latest_class: dict[int, int] = {}
        self.answer_logits: list[tuple[int, float]] = []
        self.last_tau: int | None = None

    def _mask_rows(self, kind: str, seq: int, step: int, cls: int, n_new: int) -> np.ndarray:
        n_old = self.tok_seq.size
        if kind == "full":
            old = np.ones(n_old, dtype=bool)
        elif kind == "within_sequence":
            old = self.tok_seq == seq
        elif kind == "equivalence":
            old = self.tok_cls == cls
        else:
            old = (self.tok_seq == seq) & (self.tok_step == step)
        row = np.concatenate([old, np.ones(n_new, dtype=bool)])
        blocked = np.where(row, 0.0, -np.inf)
        return np.tile(blocked, (n_new, 1))

    def add_answer(self, rec: AnswerRecord) -> Prediction:
        params, config = self.params, self.config
        if self.last_tau is not None and rec.tau < self.last_tau:
            raise OrderError(
                f"answer tau {rec.tau} arrived after tau {self.last_tau}"
            )
        if rec.seq_index > self.n_sequences:
            raise CapacityError(
                f"sequence {rec.seq_index} exceeds session width {self.n_sequences}"
            )
        canonical = rec.canonical or canonicalize(rec.text)
        cls = self.class_ids.setdefault(canonical, len(self.class_ids))
        n_new = rec.n_tokens
        u_new = Tensor(rec.hidden + params.seq_embed.data[rec.seq_index - 1])
        mixed = None
        scale = config.d_head ** -0.5
        for h in range(config.n_heads):
            q = ad.matmul(u_new, params.w_q[h])
            k_new = u_new.data @ params.w_k[h].data
            v_new = u_new.data @ params.w_v[h].data
            keys = np.concatenate([self.k_cache[h], k_new], axis=0)
            values = np.concatenate([self.v_cache[h], v_new], axis=0)
            self.k_cache[h] = keys
            self.v_cache[h] = values
            scores = ad.scale(ad.matmul(q, ad.transpose(Tensor(keys))), scale)
            for j, kind in enumerate(self.kinds):
                mask = self._mask_rows(kind, rec.seq_index, rec.step, cls, n_new)
                att = ad.row_softmax_with_additive_mask(scores, mask)
                projected = ad.matmul(
                    ad.matmul(att, Tensor(values)), params.w_o[h]
                )
                term = ad.scale(projected, float(self.alphas[h, j]))
                mixed = term if mixed is None else ad.add(mixed, term)
        residual = ad.add(u_new, mixed)
        normed = ad.add(
            ad.mul(ad.layer_norm(residual), params.ln_gain), params.ln_shift
        )
        inner = ad.gelu(ad.add(ad.matmul(normed, params.mlp_w1), params.mlp_b1))
        z = ad.add(residual, ad.add(ad.matmul(inner, params.mlp_w2), params.mlp_b2))
        if config.pooling == "last_token":
            pooled = ad.gather_rows(z, [n_new - 1])
        else:
            pooled = ad.mean_rows(z)
        self.tok_seq = np.concatenate([self.tok_seq, np.full(n_new, rec.seq_index, dtype=np.intp)])
        self.tok_step = np.concatenate([self.tok_step, np.full(n_new, rec.step, dtype=np.intp)])
        self.tok_cls = np.concatenate([self.tok_cls, np.full(n_new, cls, dtype=np.intp)])
        self.tok_tau = np.concatenate([self.tok_tau, np.full(n_new, rec.tau, dtype=np.int64)])
        self.latest_class[rec.seq_index] = cls
        if config.feature_augmentation:
            agree = sum(1 for c in self.latest_class.values() if c == cls)
            votes = np.array([agree / self.n_sequences])
            pooled = ad.add(pooled, _vote_feature(params, votes))
        logit_t = ad.add(ad.matmul(pooled, params.head_w), params.head_b)
        raw_logit = logit_t.item()
        self.answer_logits.append((cls, raw_logit))
        self.last_tau = rec.tau
        out_logit = raw_logit
        if config.streaming_logit_averaging:
            peers = [lg for c, lg in self.answer_logits if c == cls]
            out_logit = sum(peers) / len(peers)
        prob = ad.sigmoid(Tensor(np.full((1, 1), out_logit))).item()
        return Prediction(out_logit, prob)


def save_checkpoint(path: str, params: MsvParams, config: MsvConfig) -> None:
    """One JSON document, deterministic key order, atomic write."""
    obj = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": config.to_dict(),
        "params": {name: t.data.tolist() for name, t in params.named().items()},
    }
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def params_from_named(config: MsvConfig, named: dict[str, np.ndarray]) -> MsvParams:
    """Rebuild MsvParams from named arrays; validates names and shapes."""
    template = init_params(config, CounterRng(0))
    expected = template.named()
    if set(named) != set(expected):
        missing = sorted(set(expected) - set(named))
        extra = sorted(set(named) - set(expected))
        raise ContractError(f"checkpoint params mismatch: missing={missing} extra={extra}")
    for name, t in expected.items():
        arr = np.asarray(named[name], dtype=np.float64)
        if arr.shape != t.data.shape:
            raise DimensionError(
                f"param {name!r} has shape {arr.shape}, expected {t.data.shape}"
            )
        t.data = arr
    return template


def load_checkpoint(path: str) -> tuple[MsvParams, MsvConfig]:
    with open(path, "r", encoding="utf-8") as fh:
        obj = json.load(fh)
    version = obj.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ContractError(f"unsupported checkpoint format_version {version!r}")
    config = MsvConfig.from_dict(obj["config"])
    params = params_from_named(config, obj["params"])
    return params, config
