"""Verifiers for parallel reasoning traces.

The package scores candidate answers produced by N parallel decoding
sequences, letting information flow across sequences through masked
attention, and turns those scores into selection (best-of-N) and early
stopping decisions.
"""

from .autodiff import ContractError, DimensionError, NumericError, Tape, Tensor
from .baselines import (
    DEFAULT_VOTE_THRESHOLD,
    ProbeConfig,
    ProbeParams,
    init_probe,
    load_probe_checkpoint,
    probe_loss,
    probe_predict,
    save_probe_checkpoint,
    self_consistency,
    token_prob_predict,
    weighted_vote,
)
from .earlystop import StopOutcome, TradeoffCurve, autc, stop, sweep
from .equivalence import (
    EquivalencePartition,
    canonicalize,
    equivalent,
    partition,
    vote_fraction,
)
from .masks import MASK_KINDS, MaskSet, allowed, build_masks, token_table
from .metrics import ScoredSet, auroc, best_of_n, bon_metrics, brier, ece, nll
from .model import (
    MsvConfig,
    MsvParams,
    Prediction,
    PredictionSet,
    StreamingSession,
    group_predict,
    init_params,
    load_checkpoint,
    predict,
    save_checkpoint,
)
from .rng import CounterRng
from .synthetic import GenConfig, generate, split
from .traces import (
    AnswerRecord,
    ProblemTrace,
    TraceError,
    TraceParseError,
    TraceValidationError,
    label_answers,
    load_traces,
    save_traces,
    validate_trace,
)
from .training import DivergenceError, TrainConfig, evaluate, lr_select, train

__version__ = "0.1.0"

__all__ = [
    "AnswerRecord",
    "ContractError",
    "CounterRng",
    "DEFAULT_VOTE_THRESHOLD",
    "DimensionError",
    "DivergenceError",
    "EquivalencePartition",
    "GenConfig",
    "MASK_KINDS",
    "MaskSet",
    "MsvConfig",
    "MsvParams",
    "NumericError",
    "Prediction",
    "PredictionSet",
    "ProbeConfig",
    "ProbeParams",
    "ProblemTrace",
    "ScoredSet",
    "StopOutcome",
    "StreamingSession",
    "Tape",
    "Tensor",
    "TraceError",
    "TraceParseError",
    "TraceValidationError",
    "TradeoffCurve",
    "TrainConfig",
    "allowed",
    "auroc",
    "autc",
    "best_of_n",
    "bon_metrics",
    "brier",
    "build_masks",
    "canonicalize",
    "ece",
    "equivalent",
    "evaluate",
    "generate",
    "group_predict",
    "init_params",
    "init_probe",
    "label_answers",
    "load_checkpoint",
    "load_probe_checkpoint",
    "load_traces",
    "lr_select",
    "nll",
    "partition",
    "predict",
    "probe_loss",
    "probe_predict",
    "save_checkpoint",
    "save_probe_checkpoint",
    "save_traces",
    "self_consistency",
    "split",
    "stop",
    "sweep",
    "token_prob_predict",
    "token_table",
    "train",
    "validate_trace",
    "vote_fraction",
    "weighted_vote",
]
