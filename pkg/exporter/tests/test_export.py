"""Exporter tests: scripted-model semantics, determinism, and the round trip
into the verifier engine.

A FakeModel with one-hot logits makes the decoding protocol exactly
predictable (branch positions, tau bookkeeping, answer stopping, truncation),
while the round-trip test drives a small randomly initialized transformer to
prove real causal-LM outputs validate and evaluate end to end.
"""

import importlib
import json
import math
import types

import pytest

torch = pytest.importorskip("torch")
pytest.importorskip("traceexport")

import numpy as np

from traceexport import (
    DEFAULT_ELICITATION,
    ExportConfig,
    ExportError,
    export,
)

EOS, UNK = "<eos>", "<unk>"
VOCAB = (
    [EOS, UNK, "Wait", "###", "Final", "Answer", "\\boxed", "{", "}"]
    + [str(i) for i in range(10)]
    + ["+", "-", "*", "/", "^", "(", ")", "=", "?", "What", "is"]
    + [f"w{i}" for i in range(34)]
)
assert len(VOCAB) == 64


class WordTokenizer:
    """Whitespace tokenizer over a fixed word list."""

    def __init__(self, words=VOCAB):
        self.words = list(words)
        self.index = {w: i for i, w in enumerate(self.words)}
        self.eos_token_id = self.index[EOS]

    def encode(self, text):
        return [self.index.get(w, self.index[UNK]) for w in text.split()]

    def decode(self, ids):
        return " ".join(self.words[i] for i in ids)


class FakeModel:
    """Causal LM whose next token is a pure function of the context.

    Main-chain continuations come from main_script (indexed by tokens
    generated past the prompt). A context containing the elicitation prompt
    is a branch; its continuation comes from answers_by_tau keyed by how many
    main-chain tokens preceded the branch. Hidden state rows encode
    (token id, absolute position) so tests can check exactly which rows the
    exporter captured.
    """

    D = 4

    def __init__(self, tokenizer, prompt, main_script, answers_by_tau,
                 default_answer=("{", "0", "}")):
        self.tok = tokenizer
        self.prompt_len = len(tokenizer.encode(prompt))
        self.elic_len = len(tokenizer.encode(DEFAULT_ELICITATION))
        self.boxed_id = tokenizer.index["\\boxed"]
        self.eos_id = tokenizer.eos_token_id
        self.prompt_ids = tokenizer.encode(prompt)
        self.main = [tokenizer.index[w] for w in main_script]
        self.answers = {
            tau: [tokenizer.index[w] for w in script]
            for tau, script in answers_by_tau.items()
        }
        self.default = [tokenizer.index[w] for w in default_answer]

    def eval(self):
        return self

    def _next(self, prefix):
        if len(prefix) < self.prompt_len:
            return self.prompt_ids[len(prefix)]
        if self.boxed_id in prefix:
            last_boxed = max(i for i, t in enumerate(prefix) if t == self.boxed_id)
            tau = last_boxed - self.prompt_len - self.elic_len + 1
            script = self.answers.get(tau, self.default)
            done = len(prefix) - 1 - last_boxed
            return script[done] if done < len(script) else self.eos_id
        done = len(prefix) - self.prompt_len
        return self.main[done] if done < len(self.main) else self.eos_id

    @staticmethod
    def hidden_row(token_id, position):
        return float(token_id) + (position + 1) / 100.0

    def __call__(self, input_ids, past_key_values=None, use_cache=False,
                 output_hidden_states=False):
        ids = input_ids[0].tolist()
        n, v = len(ids), len(self.tok.words)
        logits = torch.zeros(1, n, v)
        for j in range(n):
            logits[0, j, self._next(ids[: j + 1])] = 50.0
        result = types.SimpleNamespace(logits=logits, past_key_values=None)
        if output_hidden_states:
            last = torch.tensor(
                [[[self.hidden_row(t, j)] * self.D for j, t in enumerate(ids)]]
            )
            result.hidden_states = (last,)
        return result


PROMPT = "What is 2 + 2 ?"


def scripted_config(tmp_path, **over):
    base = dict(
        problems=[{"id": "p0", "prompt": PROMPT, "gold": "4"}],
        out=str(tmp_path / "traces.jsonl"),
        n_sequences=1, mode="streaming",
        max_sequence_tokens=64, max_answer_tokens=8, seed=0,
    )
    base.update(over)
    return ExportConfig(**base)


def read_lines(path):
    with open(path, "r", encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


class TestConfig:
    def test_rejects_bad_values(self, tmp_path):
        good = dict(problems=[{"prompt": "x"}], out=str(tmp_path / "t.jsonl"))
        with pytest.raises(ExportError):
            ExportConfig(**good, n_sequences=0)
        with pytest.raises(ExportError):
            ExportConfig(**good, mode="batch")
        with pytest.raises(ExportError):
            ExportConfig(**good, temperature=0.0)
        with pytest.raises(ExportError):
            ExportConfig(**good, max_sequence_tokens=0)
        with pytest.raises(ExportError):
            ExportConfig(**good, max_answer_tokens=-1)
        with pytest.raises(ExportError):
            ExportConfig(**good, delimiter="  ")
        with pytest.raises(ExportError):
            ExportConfig(problems=[], out=good["out"])
        with pytest.raises(ExportError):
            ExportConfig(problems=[{"prompt": "  "}], out=good["out"])
        with pytest.raises(ExportError):
            ExportConfig(problems=[{"prompt": "x"}], out="")

    def test_model_and_tokenizer_travel_together(self, tmp_path):
        cfg = scripted_config(tmp_path)
        with pytest.raises(ExportError):
            export(cfg, model=FakeModel(WordTokenizer(), PROMPT, [], {}))

    def test_missing_identifier(self, tmp_path):
        with pytest.raises(ExportError):
            export(scripted_config(tmp_path))


class TestScriptedSemantics:
    def test_delimiter_branches_with_correct_taus(self, tmp_path):
        tok = WordTokenizer()
        model = FakeModel(
            tok, PROMPT,
            main_script=["w1", "Wait", "w2", "Wait", EOS],
            answers_by_tau={2: ["{", "4", "}"], 4: ["{", "5", "}"],
                            5: ["{", "4", "}"]},
        )
        cfg = scripted_config(tmp_path)
        summary = export(cfg, model=model, tokenizer=tok)
        (trace,) = read_lines(cfg.out)
        answers = trace["sequences"][0]["answers"]
        assert [a["k"] for a in answers] == [1, 2, 3]
        # delimiter tokens stay in the main chain: the second branch fires
        # two tokens after the first, the terminal eos one token later
        assert [a["tau"] for a in answers] == [2, 4, 5]
        assert [a["text"] for a in answers] == [
            "\\boxed{ 4 }", "\\boxed{ 5 }", "\\boxed{ 4 }",
        ]
        assert trace["d"] == FakeModel.D
        assert summary.n_answers == 3 and summary.truncated_answers == 0
        assert summary.truncated_sequences == []

    def test_hidden_rows_are_answer_token_states(self, tmp_path):
        tok = WordTokenizer()
        model = FakeModel(
            tok, PROMPT,
            main_script=["w1", "Wait", "w2", EOS],
            answers_by_tau={2: ["{", "4", "}"], 4: ["{", "4", "}"]},
        )
        cfg = scripted_config(tmp_path)
        export(cfg, model=model, tokenizer=tok)
        (trace,) = read_lines(cfg.out)
        first = trace["sequences"][0]["answers"][0]
        # branch context: 6 prompt + 2 main + 5 elicitation = 13 tokens, so
        # the three answer tokens sit at absolute positions 13, 14, 15
        want = [
            [FakeModel.hidden_row(tok.index[w], pos)] * FakeModel.D
            for w, pos in (("{", 13), ("4", 14), ("}", 15))
        ]
        got = np.asarray(first["hidden"], dtype=np.float64)
        assert got.shape == (3, FakeModel.D)
        assert np.allclose(got, np.asarray(want), atol=1e-6)
        assert len(first["logprobs"]) == 3
        assert all(-1e-12 < lp <= 0.0 for lp in first["logprobs"])

    def test_terminal_mode_single_answer(self, tmp_path):
        tok = WordTokenizer()
        model = FakeModel(
            tok, PROMPT,
            main_script=["w1", "Wait", "w2", EOS],
            answers_by_tau={4: ["{", "7", "}"]},
        )
        cfg = scripted_config(tmp_path, mode="terminal")
        export(cfg, model=model, tokenizer=tok)
        (trace,) = read_lines(cfg.out)
        answers = trace["sequences"][0]["answers"]
        # delimiters are ignored; only the terminal elicitation remains
        assert len(answers) == 1
        assert answers[0]["k"] == 1 and answers[0]["tau"] == 4
        assert answers[0]["text"] == "\\boxed{ 7 }"

    def test_no_delimiter_degenerates_to_single_answer(self, tmp_path):
        tok = WordTokenizer()
        model = FakeModel(
            tok, PROMPT,
            main_script=["w1", "w2", EOS],
            answers_by_tau={3: ["{", "9", "}"]},
        )
        cfg = scripted_config(tmp_path)
        export(cfg, model=model, tokenizer=tok)
        (trace,) = read_lines(cfg.out)
        answers = trace["sequences"][0]["answers"]
        assert len(answers) == 1 and answers[0]["tau"] == 3

    def test_budget_truncation_is_flagged(self, tmp_path):
        tok = WordTokenizer()
        model = FakeModel(
            tok, PROMPT,
            main_script=["w1", "w2", "w3", "w4", "w5"],
            answers_by_tau={3: ["{", "1", "}"]},
        )
        cfg = scripted_config(tmp_path, max_sequence_tokens=9)  # 6 prompt + 3
        summary = export(cfg, model=model, tokenizer=tok)
        (trace,) = read_lines(cfg.out)
        answers = trace["sequences"][0]["answers"]
        assert len(answers) == 1 and answers[0]["tau"] == 3
        assert summary.truncated_sequences == [
            {"problem_id": "p0", "sequence": 1}
        ]

    def test_delimiter_at_budget_edge_keeps_taus_strict(self, tmp_path):
        tok = WordTokenizer()
        model = FakeModel(
            tok, PROMPT,
            main_script=["w1", "w2", "Wait", "w3"],
            answers_by_tau={3: ["{", "1", "}"]},
        )
        cfg = scripted_config(tmp_path, max_sequence_tokens=9)
        export(cfg, model=model, tokenizer=tok)
        (trace,) = read_lines(cfg.out)
        answers = trace["sequences"][0]["answers"]
        # the branch at tau 3 collides with the truncation-point terminal
        # answer; only the terminal one is kept
        assert [(a["k"], a["tau"]) for a in answers] == [(1, 3)]

    def test_unclosed_answer_counts_as_truncated(self, tmp_path):
        tok = WordTokenizer()
        model = FakeModel(
            tok, PROMPT,
            main_script=["w1", EOS],
            answers_by_tau={2: ["{", "1", "1", "1", "1", "1", "1", "1", "1"]},
        )
        cfg = scripted_config(tmp_path, max_answer_tokens=4)
        summary = export(cfg, model=model, tokenizer=tok)
        (trace,) = read_lines(cfg.out)
        answer = trace["sequences"][0]["answers"][0]
        assert "}" not in answer["text"]
        assert len(answer["logprobs"]) == 4
        assert summary.truncated_answers == 1

    def test_summary_sidecar_written(self, tmp_path):
        tok = WordTokenizer()
        model = FakeModel(
            tok, PROMPT,
            main_script=["w1", EOS],
            answers_by_tau={2: ["{", "3", "}"]},
        )
        cfg = scripted_config(tmp_path)
        export(cfg, model=model, tokenizer=tok)
        side = json.loads((tmp_path / "traces.summary.json").read_text())
        assert side["n_traces"] == 1
        assert side["n_answers"] == 1
        assert side["d"] == FakeModel.D


@pytest.fixture(scope="module")
def tiny_lm():
    transformers = pytest.importorskip("transformers")
    torch.manual_seed(0)
    model_cfg = transformers.GPT2Config(
        vocab_size=len(VOCAB), n_positions=128, n_embd=32,
        n_layer=2, n_head=2, bos_token_id=0, eos_token_id=0,
    )
    model = transformers.GPT2LMHeadModel(model_cfg).eval()
    return model, WordTokenizer()


def lm_config(tmp_path, name="traces.jsonl", **over):
    base = dict(
        problems=[
            {"id": "p0", "prompt": "What is 2 + 2 ?", "gold": "4"},
            {"id": "p1", "prompt": "What is 3 * 3 ?", "gold": "9"},
        ],
        out=str(tmp_path / name),
        n_sequences=2, mode="streaming",
        max_sequence_tokens=96, max_answer_tokens=12, seed=11,
    )
    base.update(over)
    return ExportConfig(**base)


class TestTinyModel:
    def test_rerun_is_byte_identical(self, tiny_lm, tmp_path):
        model, tok = tiny_lm
        export(lm_config(tmp_path, "a.jsonl"), model=model, tokenizer=tok)
        export(lm_config(tmp_path, "b.jsonl"), model=model, tokenizer=tok)
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()

    def test_seed_changes_samples(self, tiny_lm, tmp_path):
        model, tok = tiny_lm
        export(lm_config(tmp_path, "a.jsonl", seed=11), model=model, tokenizer=tok)
        export(lm_config(tmp_path, "b.jsonl", seed=12), model=model, tokenizer=tok)
        assert (tmp_path / "a.jsonl").read_bytes() != (tmp_path / "b.jsonl").read_bytes()

    def test_cli_runs_with_injected_loader(self, tiny_lm, tmp_path, monkeypatch, capsys):
        from traceexport import cli

        export_mod = importlib.import_module("traceexport.export")
        model, tok = tiny_lm
        monkeypatch.setattr(export_mod, "load_model", lambda name: (model, tok))
        cfg_path = tmp_path / "run.json"
        cfg_path.write_text(json.dumps({
            "export": {
                "model": "tiny-under-test",
                "problems": [{"id": "p0", "prompt": "What is 2 + 2 ?", "gold": "4"}],
                "out": str(tmp_path / "cli.jsonl"),
                "n_sequences": 1,
                "max_sequence_tokens": 48,
                "max_answer_tokens": 8,
            }
        }))
        assert cli.main(["--config", str(cfg_path), "--seed", "3"]) == 0
        summary = json.loads(capsys.readouterr().out)
        assert summary["n_traces"] == 1
        assert (tmp_path / "cli.jsonl").exists()

    def test_cli_reports_errors_as_json(self, tmp_path, capsys):
        from traceexport import cli

        assert cli.main(["--out", str(tmp_path / "x.jsonl")]) == 1
        assert "error" in json.loads(capsys.readouterr().err)


def test_criterion_12_exporter_round_trip(tiny_lm, tmp_path):
    msverify_traces = pytest.importorskip("msverify.traces")
    msverify_training = pytest.importorskip("msverify.training")
    model, tok = tiny_lm

    first = lm_config(tmp_path, "discover.jsonl")
    export(first, model=model, tokenizer=tok)
    discovered = msverify_traces.load_traces(first.out)
    assert len(discovered) == 2
    for trace in discovered:
        assert msverify_traces.validate_trace(trace) == []

    # pin gold for one problem to an answer the model actually produced, so
    # the labeled corpus contains both classes; sampling ignores gold, so the
    # re-export reproduces identical text
    matched = next(discovered[0].answers())
    problems = [
        {"id": "p0", "prompt": "What is 2 + 2 ?", "gold": matched.text},
        {"id": "p1", "prompt": "What is 3 * 3 ?", "gold": "### no such answer ###"},
    ]
    second = lm_config(tmp_path, "final.jsonl", problems=problems)
    export(second, model=model, tokenizer=tok)

    traces = msverify_traces.load_traces(second.out)
    assert len(traces) == 2
    labels = []
    for trace in traces:
        assert msverify_traces.validate_trace(trace) == []
        assert trace.mode == "streaming"
        assert trace.d == 32
        labels.extend(rec.label for rec in trace.answers())
    assert set(labels) == {0, 1}

    report, curve = msverify_training.evaluate(
        traces, "self_consistency", vote_threshold=1,
    )
    assert report["verifier"] == "self_consistency"
    assert report["n_problems"] == 2
    assert report["n_answers"] == len(labels)
    for key in ("auroc", "brier", "nll", "ece", "autc"):
        assert math.isfinite(report[key])
    assert 0.0 <= report["brier"] <= 1.0
    assert curve is not None and len(curve.points) >= 1
