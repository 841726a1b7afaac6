"""Drive a causal language model through parallel decoding and export traces.

For each problem, N sequences are sampled independently. In streaming mode,
whenever a sampled step detokenizes to the delimiter, the sequence branches:
a copy of the decoding state continues with the elicitation prompt and
samples a short answer, while the main chain carries on unmodified (the
delimiter token stays in the main chain; the branch starts after it). At
sequence end (end-of-sequence token or token budget) a terminal answer is
elicited the same way. Each elicited answer is recorded with its text, the
emission time tau (tokens generated so far in that sequence), the last-layer
hidden states of the answer tokens, and their sampling log-probabilities.

Traces are written as JSONL, one problem per line:

    {"problem_id": str, "prompt": str, "gold": str?,
     "mode": "terminal"|"streaming", "d": int,
     "sequences": [{"answers": [{"k": int, "tau": int, "text": str,
                                 "hidden": [[real x d] x L],
                                 "logprobs": [real x L]}]}]}

Hidden states are float32. A sidecar <out>.summary.json records counts and
which sequences hit the token budget before finishing. Tokenizers are used
through a narrow protocol (encode, decode, eos_token_id), so any model
exposing the causal-LM forward convention works, not just transformers ones.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
import torch


class ExportError(Exception):
    """Invalid configuration or a model that cannot be driven."""


DEFAULT_DELIMITER = "Wait"
DEFAULT_ELICITATION = "### Final Answer ### \\boxed"


@dataclass
class ExportConfig:
    problems: list[dict]
    out: str
    model: str | None = None
    n_sequences: int = 2
    mode: str = "streaming"
    delimiter: str = DEFAULT_DELIMITER
    elicitation: str = DEFAULT_ELICITATION
    temperature: float = 1.0
    max_sequence_tokens: int = 4096
    max_answer_tokens: int = 40
    seed: int = 0

    def __post_init__(self):
        if self.n_sequences < 1:
            raise ExportError("n_sequences must be >= 1")
        if self.mode not in ("terminal", "streaming"):
            raise ExportError(f"mode must be terminal or streaming, got {self.mode!r}")
        if self.temperature <= 0:
            raise ExportError("temperature must be positive")
        if self.max_sequence_tokens < 1 or self.max_answer_tokens < 1:
            raise ExportError("token budgets must be positive")
        if self.mode == "streaming" and not self.delimiter.strip():
            raise ExportError("streaming mode needs a non-empty delimiter")
        if not self.problems:
            raise ExportError("problem list must be non-empty")
        for i, prob in enumerate(self.problems):
            if not isinstance(prob, dict) or not str(prob.get("prompt", "")).strip():
                raise ExportError(f"problem {i} has no prompt")
        if not self.out:
            raise ExportError("an output path is required")

    def to_dict(self) -> dict:
        return {
            "model": self.model, "n_sequences": self.n_sequences,
            "mode": self.mode, "delimiter": self.delimiter,
            "elicitation": self.elicitation, "temperature": self.temperature,
            "max_sequence_tokens": self.max_sequence_tokens,
            "max_answer_tokens": self.max_answer_tokens, "seed": self.seed,
            "out": self.out, "problems": self.problems,
        }


@dataclass
class ExportSummary:
    path: str
    n_traces: int = 0
    n_answers: int = 0
    d: int = 0
    truncated_sequences: list[dict] = field(default_factory=list)
    truncated_answers: int = 0

    def to_dict(self) -> dict:
        return {
            "path": self.path, "n_traces": self.n_traces,
            "n_answers": self.n_answers, "d": self.d,
            "truncated_sequences": self.truncated_sequences,
            "truncated_answers": self.truncated_answers,
        }


def load_model(identifier: str):
    """(model, tokenizer) for a hub name or local path, CPU, eval mode."""
    try:
        from transformers import AutoModelForCausalLM, AutoTokenizer
    except ImportError as exc:
        raise ExportError("loading by identifier needs the transformers package") from exc
    try:
        tokenizer = AutoTokenizer.from_pretrained(identifier)
        model = AutoModelForCausalLM.from_pretrained(identifier)
    except Exception as exc:
        raise ExportError(f"cannot load model {identifier!r}: {exc}") from exc
    model.eval()
    return model, tokenizer


class _Decoder:
    """One decoding chain; uses the model's KV cache when it offers one."""

    def __init__(self, model):
        self.model = model
        self.ids: list[int] = []
        self.past = None

    def _call(self, ids, past):
        return self.model(
            input_ids=torch.tensor([ids], dtype=torch.long),
            past_key_values=past, use_cache=True,
        )

    def prime(self, ids: list[int]) -> torch.Tensor:
        if not ids:
            raise ExportError("cannot decode from an empty context")
        self.ids = list(ids)
        out = self._call(self.ids, None)
        self.past = out.past_key_values
        return out.logits[0, -1]

    def feed(self, token: int) -> torch.Tensor:
        self.ids.append(token)
        if self.past is None:
            out = self._call(self.ids, None)
        else:
            out = self._call([token], self.past)
        self.past = out.past_key_values
        return out.logits[0, -1]


def _sample(logits: torch.Tensor, temperature: float, gen: torch.Generator) -> int:
    probs = torch.softmax(logits.double() / temperature, dim=-1)
    return int(torch.multinomial(probs, 1, generator=gen).item())


def _stream_seed(seed: int, problem_index: int, seq_index: int) -> int:
    # one independent sampling stream per (problem, sequence)
    mix = (seed * 0x9E3779B97F4A7C15
           + problem_index * 0xBF58476D1CE4E5B9
           + seq_index * 0x94D049BB133111EB)
    return mix % (2 ** 63 - 1)


@dataclass
class _Answer:
    k: int
    tau: int
    text: str
    hidden: np.ndarray
    logprobs: list[float]
    closed: bool


def _elicit(model, tokenizer, config, context_ids, k, tau, gen) -> _Answer:
    elic_ids = tokenizer.encode(config.elicitation)
    branch_ids = list(context_ids) + list(elic_ids)
    eos = getattr(tokenizer, "eos_token_id", None)
    dec = _Decoder(model)
    logits = dec.prime(branch_ids)
    ans_ids: list[int] = []
    closed = False
    for _ in range(config.max_answer_tokens):
        tok = _sample(logits, config.temperature, gen)
        if eos is not None and tok == eos:
            if not ans_ids:
                ans_ids.append(tok)  # keep L >= 1 even on immediate eos
            closed = True
            break
        ans_ids.append(tok)
        if "}" in tokenizer.decode([tok]):
            closed = True
            break
        logits = dec.feed(tok)
    full = branch_ids + ans_ids
    out = model(
        input_ids=torch.tensor([full], dtype=torch.long),
        output_hidden_states=True, use_cache=False,
    )
    start = len(branch_ids)
    hidden = out.hidden_states[-1][0, start:].detach().to(torch.float32).numpy()
    logprobs = []
    for i, tok in enumerate(ans_ids):
        row = torch.log_softmax(out.logits[0, start + i - 1].double(), dim=-1)
        logprobs.append(float(row[tok]))
    gen_text = tokenizer.decode(ans_ids)
    if config.elicitation.rstrip().endswith("\\boxed"):
        text = "\\boxed" + gen_text.lstrip()
    else:
        text = gen_text.strip()
    return _Answer(k=k, tau=tau, text=text, hidden=hidden,
                   logprobs=logprobs, closed=closed)


def _run_sequence(model, tokenizer, config, prompt_ids, gen):
    """All answers of one sequence plus a budget-truncation flag."""
    eos = getattr(tokenizer, "eos_token_id", None)
    dec = _Decoder(model)
    logits = dec.prime(prompt_ids)
    generated: list[int] = []
    answers: list[_Answer] = []
    truncated = False
    while True:
        if len(prompt_ids) + len(generated) >= config.max_sequence_tokens:
            truncated = True
            break
        tok = _sample(logits, config.temperature, gen)
        generated.append(tok)
        if eos is not None and tok == eos:
            break
        if (config.mode == "streaming"
                and tokenizer.decode([tok]).strip() == config.delimiter):
            answers.append(_elicit(
                model, tokenizer, config, prompt_ids + generated,
                k=len(answers) + 1, tau=len(generated), gen=gen,
            ))
        logits = dec.feed(tok)
    tau_term = len(generated)
    if answers and answers[-1].tau == tau_term:
        # the budget cut decoding right after a delimiter; the terminal
        # answer supersedes the intermediate one at the same tau
        answers.pop()
    answers.append(_elicit(
        model, tokenizer, config, prompt_ids + generated,
        k=len(answers) + 1, tau=tau_term, gen=gen,
    ))
    return answers, truncated


def _answer_obj(ans: _Answer) -> dict:
    return {
        "k": ans.k,
        "tau": ans.tau,
        "text": ans.text,
        "hidden": [[float(x) for x in row] for row in ans.hidden],
        "logprobs": [float(v) for v in ans.logprobs],
    }


def _atomic_write(path: str, payload: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def export(config: ExportConfig, model=None, tokenizer=None) -> ExportSummary:
    """Sample traces for every configured problem and write them to disk."""
    if (model is None) != (tokenizer is None):
        raise ExportError("pass model and tokenizer together, or neither")
    if model is None:
        if not config.model:
            raise ExportError("config.model is required when none is passed in")
        model, tokenizer = load_model(config.model)
    if hasattr(model, "eval"):
        model.eval()  # dropout would break byte-identical reruns
    summary = ExportSummary(path=config.out)
    d = 0
    lines = []
    with torch.no_grad():
        for p_idx, prob in enumerate(config.problems):
            prompt = str(prob["prompt"])
            prompt_ids = tokenizer.encode(prompt)
            if not prompt_ids:
                raise ExportError(f"problem {p_idx} prompt encodes to no tokens")
            problem_id = str(prob.get("id", f"p{p_idx}"))
            sequences = []
            for n in range(1, config.n_sequences + 1):
                gen = torch.Generator()
                gen.manual_seed(_stream_seed(config.seed, p_idx, n))
                answers, truncated = _run_sequence(
                    model, tokenizer, config, prompt_ids, gen,
                )
                kept = answers if config.mode == "streaming" else answers[-1:]
                for ans in kept:
                    if d == 0:
                        d = int(ans.hidden.shape[1])
                    elif int(ans.hidden.shape[1]) != d:
                        raise ExportError("model hidden width changed mid-export")
                    if not all(math.isfinite(v) for v in ans.logprobs):
                        raise ExportError("non-finite logprobs emitted")
                    summary.n_answers += 1
                    summary.truncated_answers += 0 if ans.closed else 1
                if truncated:
                    summary.truncated_sequences.append(
                        {"problem_id": problem_id, "sequence": n}
                    )
                sequences.append({"answers": [_answer_obj(a) for a in kept]})
            obj = {
                "problem_id": problem_id,
                "prompt": prompt,
                "mode": config.mode,
                "d": d,
                "sequences": sequences,
            }
            if prob.get("gold") is not None:
                obj["gold"] = str(prob["gold"])
            lines.append(json.dumps(obj, sort_keys=True))
            summary.n_traces += 1
    summary.d = d
    _atomic_write(config.out, "".join(line + "\n" for line in lines))
    base, _ = os.path.splitext(config.out)
    _atomic_write(base + ".summary.json",
                  json.dumps(summary.to_dict(), indent=2, sort_keys=True) + "\n")
    return summary
