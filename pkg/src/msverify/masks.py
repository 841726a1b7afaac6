"""Boolean attention masks over concatenated answer tokens.

Four mask kinds are defined over token pairs (u attends to v):

    full             causal only (streaming) or always true (terminal)
    within_sequence  same sequence, causal
    equivalence      equivalent answers, causal
    within_answer    same answer instance

where causal means tau(u) >= tau(v) in streaming mode (ties mutually
visible) and is vacuous in terminal mode.  In terminal mode every sequence
holds one answer, so within_sequence and within_answer coincide; requesting
both yields the deduplicated set with `collapsed` flagged.

Token order is the concatenation order of the model input: sequence-major,
then step, then token.  A readout time below every tau yields an empty mask
set rather than an error.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ContractError
from .equivalence import EquivalencePartition
from .traces import ProblemTrace

MASK_KINDS = ("full", "within_sequence", "equivalence", "within_answer")


@dataclass(frozen=True)
class TokenIndex:
    pos: int
    seq: int
    step: int
    cls: int
    tau: int


@dataclass
class TokenTable:
    """Flat token metadata for all answers with tau <= readout time."""

    tokens: list[TokenIndex]
    order: list[tuple[int, int]]
    spans: dict[tuple[int, int], tuple[int, int]]

    @property
    def n_tokens(self) -> int:
        return len(self.tokens)

    @property
    def n_answers(self) -> int:
        return len(self.order)


def token_table(
    trace: ProblemTrace, t: int | None, part: EquivalencePartition
) -> TokenTable:
    tokens: list[TokenIndex] = []
    order: list[tuple[int, int]] = []
    spans: dict[tuple[int, int], tuple[int, int]] = {}
    for seq in trace.sequences:
        for rec in seq:
            if t is not None and rec.tau > t:
                continue
            key = (rec.seq_index, rec.step)
            cls = part.class_of[key]
            start = len(tokens)
            for _ in range(rec.n_tokens):
                tokens.append(TokenIndex(len(tokens), rec.seq_index, rec.step, cls, rec.tau))
            order.append(key)
            spans[key] = (start, len(tokens))
    return TokenTable(tokens=tokens, order=order, spans=spans)


def allowed(u: TokenIndex, v: TokenIndex, kind: str, mode: str) -> bool:
    """May token u attend to token v under the given mask kind and mode?"""
    if kind not in MASK_KINDS:
        raise ContractError(f"unknown mask kind {kind!r}")
    if mode not in ("terminal", "streaming"):
        raise ContractError(f"unknown mode {mode!r}")
    causal = mode == "terminal" or u.tau >= v.tau
    if kind == "full":
        return causal
    if kind == "within_sequence":
        return u.seq == v.seq and causal
    if kind == "equivalence":
        return u.cls == v.cls and causal
    return u.seq == v.seq and u.step == v.step


@dataclass
class MaskSet:
    kinds: tuple[str, ...]
    matrices: dict[str, np.ndarray]
    table: TokenTable
    mode: str
    collapsed: bool = False

    @property
    def n_tokens(self) -> int:
        return self.table.n_tokens

    def additive(self, kind: str) -> np.ndarray:
        """log M: 0 where permitted, -inf where blocked."""
        return np.where(self.matrices[kind], 0.0, -np.inf)


def effective_kinds(kinds: tuple[str, ...], mode: str) -> tuple[tuple[str, ...], bool]:
    """Deduplicate the kind list for the mode; terminal collapses ws/wa."""
    if not kinds:
        raise ContractError("at least one mask kind must be enabled")
    seen = []
    for kind in kinds:
        if kind not in MASK_KINDS:
            raise ContractError(f"unknown mask kind {kind!r}")
        if kind not in seen:
            seen.append(kind)
    collapsed = False
    if mode == "terminal" and "within_sequence" in seen and "within_answer" in seen:
        seen.remove("within_answer")
        collapsed = True
    return tuple(seen), collapsed


def masks_from_table(
    table: TokenTable, kinds: tuple[str, ...], mode: str
) -> MaskSet:
    kept, collapsed = effective_kinds(kinds, mode)
    n = table.n_tokens
    seq = np.array([tok.seq for tok in table.tokens], dtype=np.intp)
    cls = np.array([tok.cls for tok in table.tokens], dtype=np.intp)
    step = np.array([tok.step for tok in table.tokens], dtype=np.intp)
    tau = np.array([tok.tau for tok in table.tokens], dtype=np.int64)
    if mode == "streaming":
        causal = tau[:, None] >= tau[None, :]
    else:
        causal = np.ones((n, n), dtype=bool)
    matrices: dict[str, np.ndarray] = {}
    for kind in kept:
        if kind == "full":
            m = causal.copy()
        elif kind == "within_sequence":
            m = (seq[:, None] == seq[None, :]) & causal
        elif kind == "equivalence":
            m = (cls[:, None] == cls[None, :]) & causal
        else:
            m = (seq[:, None] == seq[None, :]) & (step[:, None] == step[None, :])
        matrices[kind] = m
    maskset = MaskSet(kinds=kept, matrices=matrices, table=table, mode=mode, collapsed=collapsed)
    for kind, m in matrices.items():
        if n and not np.all(np.diagonal(m)):
            raise ContractError(f"mask {kind!r} blocks a token from its own answer")
    return maskset


def build_masks(
    trace: ProblemTrace,
    t: int | None,
    part: EquivalencePartition,
    kinds: tuple[str, ...],
    mode: str,
) -> MaskSet:
    """One boolean token-by-token matrix per enabled kind, at readout time t.

    t = None reads out after all answers (terminal convention).  A t before
    the first emission returns an empty mask set.
    """
    return masks_from_table(token_table(trace, t, part), kinds, mode)
