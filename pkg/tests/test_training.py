import math
from dataclasses import replace

import numpy as np
import pytest

from msverify.autodiff import ContractError, Tensor
from msverify.baselines import ProbeConfig, init_probe, probe_loss, probe_predict
from msverify.model import MsvConfig
from msverify.rng import CounterRng
from msverify.synthetic import GenConfig, generate, split
from msverify.training import (
    AdamW,
    DivergenceError,
    History,
    EpochStats,
    TrainConfig,
    base_rate,
    clip_global_norm,
    evaluate,
    lr_select,
    train,
    validation_loss,
)
from conftest import make_trace


def corpus(n_problems=24, n_sequences=3, d=6, mode="terminal", seed=3, **over):
    cfg = GenConfig(
        n_problems=n_problems, n_sequences=n_sequences, d=d, mode=mode,
        p_correct_base=0.4, snr_individual=2.5, noise_sigma=0.3, seed=seed,
        **over,
    )
    return generate(cfg)


class TestTrainConfig:
    def test_documented_defaults(self):
        cfg = TrainConfig()
        assert cfg.lr_probe == 1e-3
        assert cfg.lr_body == 5e-5
        assert cfg.lr_mask == 1e-1
        assert cfg.lr_embed == 1e-3
        assert (cfg.beta1, cfg.beta2, cfg.eps) == (0.9, 0.999, 1e-8)
        assert cfg.weight_decay == 0.0
        assert cfg.warmup_frac == 0.03
        assert cfg.max_grad_norm == 1.0
        assert cfg.batch_size == 16
        assert cfg.lr_grid == (1e-5, 5e-5, 1e-4, 5e-4, 1e-3, 5e-3)

    def test_default_epochs_by_mode(self):
        cfg = TrainConfig()
        assert cfg.resolved_epochs("terminal") == 1
        assert cfg.resolved_epochs("streaming") == 2
        assert TrainConfig(epochs=5).resolved_epochs("terminal") == 5

    def test_zero_lr_allowed_negative_rejected(self):
        TrainConfig(lr_probe=0.0)
        with pytest.raises(ContractError):
            TrainConfig(lr_body=-1e-5)

    @pytest.mark.parametrize(
        "over", [{"batch_size": 0}, {"epochs": -1}, {"warmup_frac": 1.5}]
    )
    def test_invalid_rejected(self, over):
        with pytest.raises(ContractError):
            TrainConfig(**over)

    def test_round_trip(self):
        cfg = TrainConfig(lr_body=1e-4, epochs=3, lr_grid=(1e-4, 1e-3))
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg
        with pytest.raises(ContractError, match="mystery"):
            TrainConfig.from_dict({"mystery": 1})


class TestOptimizer:
    def test_adamw_first_step_closed_form(self):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        p.grad = np.array([0.5, -0.25])
        cfg = TrainConfig(weight_decay=0.01)
        opt = AdamW({"w": p}, {"w": 0.1}, cfg)
        opt.step(lr_scale=1.0)
        g = np.array([0.5, -0.25])
        # bias-corrected m_hat = g, v_hat = g*g on the first step
        want = np.array([1.0, -2.0])
        want = want - 0.1 * g / (np.abs(g) + 1e-8) - 0.1 * 0.01 * want
        np.testing.assert_allclose(p.data, want, rtol=1e-12)

    def test_adamw_skips_missing_grads(self):
        p = Tensor(np.ones(3), requires_grad=True)
        opt = AdamW({"w": p}, {"w": 0.1}, TrainConfig())
        opt.step(1.0)
        np.testing.assert_array_equal(p.data, np.ones(3))

    def test_clip_rescales_to_max_norm(self):
        a = Tensor(np.zeros(2), requires_grad=True)
        b = Tensor(np.zeros(2), requires_grad=True)
        a.grad = np.array([3.0, 0.0])
        b.grad = np.array([0.0, 4.0])
        pre, post = clip_global_norm([a, b], 1.0)
        assert pre == pytest.approx(5.0, rel=1e-12)
        assert post == pytest.approx(1.0, rel=1e-12)
        np.testing.assert_allclose(a.grad, [0.6, 0.0], rtol=1e-12)
        np.testing.assert_allclose(b.grad, [0.0, 0.8], rtol=1e-12)

    def test_clip_leaves_small_grads_alone(self):
        a = Tensor(np.zeros(2), requires_grad=True)
        a.grad = np.array([0.3, 0.4])
        pre, post = clip_global_norm([a], 1.0)
        assert pre == post == pytest.approx(0.5, rel=1e-12)
        np.testing.assert_array_equal(a.grad, [0.3, 0.4])


def fresh_probe_init(train_traces, seed=0, d=6, hidden=16):
    rng = CounterRng(seed).derive(0)
    return init_probe(ProbeConfig(d_model=d, hidden=hidden), rng, base_rate(train_traces))


class TestTrainSemantics:
    def test_zero_epochs_returns_init(self):
        traces = corpus()
        params, history = train(
            "probe", ProbeConfig(d_model=6, hidden=16),
            TrainConfig(epochs=0, seed=0), traces, traces,
        )
        want = fresh_probe_init(traces)
        for name, t in params.named().items():
            np.testing.assert_array_equal(t.data, want.named()[name].data)
        assert history.epochs == [] and history.steps == []
        assert history.best_epoch is None

    def test_zero_lr_leaves_params_unchanged(self):
        traces = corpus()
        cfg = TrainConfig(epochs=2, lr_probe=0.0, seed=0)
        params, history = train(
            "probe", ProbeConfig(d_model=6, hidden=16), cfg, traces, traces,
        )
        want = fresh_probe_init(traces)
        for name, t in params.named().items():
            np.testing.assert_array_equal(t.data, want.named()[name].data)
        assert len(history.epochs) == 2

    def test_loss_decreases_on_planted_signal(self):
        traces = corpus(n_problems=32)
        cfg = TrainConfig(epochs=3, lr_probe=1e-2, batch_size=8, seed=0)
        _, history = train(
            "probe", ProbeConfig(d_model=6, hidden=16), cfg, traces, traces,
        )
        losses = [e.train_loss for e in history.epochs]
        assert losses == sorted(losses, reverse=True)
        assert losses[-1] < 0.6 * losses[0]

    def test_returned_params_reproduce_best_val_loss(self):
        data = corpus(n_problems=30)
        train_t, val_t = data[:20], data[20:]
        cfg = TrainConfig(epochs=4, lr_probe=5e-3, batch_size=8, seed=1)
        probe_cfg = ProbeConfig(d_model=6, hidden=16)
        params, history = train("probe", probe_cfg, cfg, train_t, val_t)
        best = min(e.val_loss for e in history.epochs)
        assert history.epochs[history.best_epoch - 1].val_loss == best
        again = validation_loss("probe", params, probe_cfg, val_t)
        assert again == pytest.approx(best, rel=1e-12)

    def test_warmup_schedule_recorded(self):
        traces = corpus(n_problems=8)
        cfg = TrainConfig(epochs=2, batch_size=4, warmup_frac=0.5, seed=0)
        _, history = train(
            "probe", ProbeConfig(d_model=6, hidden=16), cfg, traces, traces,
        )
        # 2 batches/epoch, 4 total steps, warmup ceil(0.5 * 4) = 2
        assert [s.lr_scale for s in history.steps] == [0.5, 1.0, 1.0, 1.0]

    def test_clip_invariant_holds_every_step(self):
        traces = corpus(n_problems=16)
        cfg = TrainConfig(epochs=2, batch_size=4, max_grad_norm=1e-3, seed=0)
        _, history = train(
            "probe", ProbeConfig(d_model=6, hidden=16), cfg, traces, traces,
        )
        for s in history.steps:
            assert s.clipped_norm <= 1e-3 * (1 + 1e-9)
            assert s.clipped_norm <= s.grad_norm

    def test_divergence_raises(self):
        tr = make_trace([[(10, "4")], [(20, "5")]], mode="terminal", gold="4", d=4)
        for rec in tr.answers():
            rec.hidden = np.full((2, 4), 1e308)
        with pytest.raises(DivergenceError):
            train(
                "probe", ProbeConfig(d_model=4, hidden=16),
                TrainConfig(epochs=1), [tr], [tr],
            )

    def test_same_seed_bitwise_identical(self):
        traces = corpus(n_problems=12)
        cfg = TrainConfig(epochs=2, batch_size=4, seed=5)
        a, ha = train("probe", ProbeConfig(d_model=6, hidden=16), cfg, traces, traces)
        b, hb = train("probe", ProbeConfig(d_model=6, hidden=16), cfg, traces, traces)
        for name, t in a.named().items():
            np.testing.assert_array_equal(t.data, b.named()[name].data)
        assert [s.loss for s in ha.steps] == [s.loss for s in hb.steps]

    def test_msv_trains_with_subsampling(self):
        traces = corpus(n_problems=8, n_sequences=4, d=8)
        cfg = MsvConfig(d_model=8, n_heads=2, n_max=2, mode="terminal")
        for shuffle in (True, False):
            tcfg = TrainConfig(epochs=1, batch_size=4, seed=0, shuffle_sequences=shuffle)
            params, history = train("msv", cfg, tcfg, traces, traces)
            assert len(history.steps) == 2
            assert all(math.isfinite(s.loss) for s in history.steps)

    def test_input_validation(self):
        traces = corpus(n_problems=4)
        with pytest.raises(ContractError, match="kind"):
            train("oracle", ProbeConfig(d_model=6), TrainConfig(), traces, traces)
        with pytest.raises(ContractError, match="non-empty"):
            train("probe", ProbeConfig(d_model=6), TrainConfig(), [], traces)


class TestValidationLoss:
    def test_probe_val_is_mean_bce(self):
        traces = corpus(n_problems=6)
        params = fresh_probe_init(traces)
        got = validation_loss("probe", params, ProbeConfig(d_model=6, hidden=16), traces)
        total, count = 0.0, 0
        for tr in traces:
            preds = probe_predict(tr, params)
            for rec in tr.answers():
                p = preds.entries[(rec.seq_index, rec.step)].prob
                total += -(rec.label * math.log(p) + (1 - rec.label) * math.log(1 - p))
                count += 1
        assert got == pytest.approx(total / count, rel=1e-9)

    def test_msv_val_truncates_to_first_n_max(self):
        from msverify import model as msv

        traces = corpus(n_problems=3, n_sequences=4, d=8)
        cfg = MsvConfig(d_model=8, n_heads=2, n_max=2, mode="terminal")
        params = msv.init_params(cfg, CounterRng(0), 0.5)
        got = validation_loss("msv", params, cfg, traces)
        capped = [tr.subset([1, 2]) for tr in traces]
        want = msv.loss(capped, params, cfg).item() / sum(
            len(s) for tr in capped for s in tr.sequences
        )
        assert got == pytest.approx(want, rel=1e-12)


class TestLrSelect:
    def test_singleton_grid(self):
        traces = corpus(n_problems=6)
        got = lr_select(
            "probe", (1e-3,), ProbeConfig(d_model=6, hidden=16),
            TrainConfig(epochs=1), traces[:4], traces[4:],
        )
        assert got == 1e-3

    def test_empty_grid_rejected(self):
        with pytest.raises(ContractError):
            lr_select("probe", (), ProbeConfig(d_model=6), TrainConfig(), [], [])

    def test_selection_matches_run_and_check_oracle(self):
        data = corpus(n_problems=24)
        train_t, val_t = data[:16], data[16:]
        grid = (1e-5, 1e-3)
        base = TrainConfig(epochs=1, batch_size=8, seed=0)
        probe_cfg = ProbeConfig(d_model=6, hidden=16)
        got = lr_select("probe", grid, probe_cfg, base, train_t, val_t)
        scores = {}
        for lr in grid:
            _, hist = train(
                "probe", probe_cfg, replace(base, lr_probe=lr), train_t, val_t
            )
            scores[lr] = min(e.val_loss for e in hist.epochs)
        assert got == min(grid, key=lambda lr: (scores[lr], lr))
        assert got == 1e-3  # planted signal needs the larger step size

    def test_divergent_lr_excluded(self, monkeypatch):
        def fake_train(kind, model_config, train_config, train_traces, val_traces):
            if train_config.lr_probe >= 1e-2:
                raise DivergenceError("boom")
            hist = History(epochs=[EpochStats(1, 0.5, train_config.lr_probe)])
            return None, hist

        monkeypatch.setattr("msverify.training.train", fake_train)
        got = lr_select("probe", (1e-2, 1e-4, 1e-3), None, TrainConfig(), [1], [1])
        assert got == 1e-4

    def test_tie_goes_to_smaller_lr(self, monkeypatch):
        def fake_train(kind, model_config, train_config, train_traces, val_traces):
            return None, History(epochs=[EpochStats(1, 0.5, 0.25)])

        monkeypatch.setattr("msverify.training.train", fake_train)
        got = lr_select("probe", (1e-3, 1e-4), None, TrainConfig(), [1], [1])
        assert got == 1e-4

    def test_all_divergent_falls_back_to_smallest(self, monkeypatch):
        def fake_train(*args, **kwargs):
            raise DivergenceError("boom")

        monkeypatch.setattr("msverify.training.train", fake_train)
        got = lr_select("probe", (1e-3, 1e-4), None, TrainConfig(), [1], [1])
        assert got == 1e-4


def token_prob_fixture():
    tr = make_trace(
        [[(10, "4")], [(20, "5")]], mode="terminal", gold="4", d=4,
    )
    tr.answer(1, 1).logprobs = [math.log(0.8), math.log(0.8)]
    tr.answer(2, 1).logprobs = [math.log(0.4), math.log(0.4)]
    return tr


class TestEvaluate:
    def test_report_schema_terminal(self):
        report, curve = evaluate([token_prob_fixture()], "token_prob")
        assert curve is None
        want_keys = {
            "verifier", "aggregation", "N", "auroc", "brier", "nll", "ece",
            "bon", "bins", "n_problems", "n_answers",
        }
        assert want_keys <= set(report)
        assert "autc" not in report
        assert report["verifier"] == "token_prob"
        assert report["N"] == 2
        assert report["n_answers"] == 2

    def test_token_prob_metrics_closed_form(self):
        report, _ = evaluate([token_prob_fixture()], "token_prob")
        assert report["auroc"] == pytest.approx(1.0)
        assert report["brier"] == pytest.approx((0.2**2 + 0.4**2) / 2, rel=1e-9)
        assert report["nll"] == pytest.approx(
            -(math.log(0.8) + math.log(0.6)) / 2, rel=1e-9
        )
        assert report["bon"]["accuracy"] == 1.0

    def test_streaming_report_has_curve(self):
        traces = corpus(n_problems=4, mode="streaming", k_min=1, k_max=2)
        report, curve = evaluate(traces, "token_prob")
        assert curve is not None
        assert report["autc"] == curve.autc
        assert report["token_budget"] == max(tr.max_tau() for tr in traces)

    def test_jobs_do_not_change_results(self):
        traces = corpus(n_problems=6, n_sequences=4, d=8)
        cfg = MsvConfig(d_model=8, n_heads=2, n_max=4, mode="terminal")
        from msverify import model as msv

        params = msv.init_params(cfg, CounterRng(3), 0.5)
        one, _ = evaluate(traces, "msv", msv_params=params, msv_config=cfg, jobs=1)
        four, _ = evaluate(traces, "msv", msv_params=params, msv_config=cfg, jobs=4)
        assert one == four

    def test_weighted_vote_changes_probs(self):
        traces = corpus(n_problems=6)
        raw, _ = evaluate(traces, "token_prob")
        agg, _ = evaluate(traces, "token_prob", aggregation="weighted_vote")
        assert raw["brier"] != agg["brier"]
        assert agg["aggregation"] == "weighted_vote"

    def test_validation_errors(self):
        tr = token_prob_fixture()
        with pytest.raises(ContractError):
            evaluate([], "token_prob")
        with pytest.raises(ContractError):
            evaluate([tr], "psychic")
        with pytest.raises(ContractError):
            evaluate([tr], "token_prob", aggregation="mean")
        with pytest.raises(ContractError):
            evaluate([tr], "self_consistency", aggregation="weighted_vote")
        with pytest.raises(ContractError):
            evaluate([tr], "msv")
        with pytest.raises(ContractError):
            evaluate([tr], "probe")

    def test_mode_mismatch_rejected(self):
        terminal = token_prob_fixture()
        streaming = corpus(n_problems=1, mode="streaming", k_min=2, k_max=2)[0]
        with pytest.raises(ContractError, match="homogeneous"):
            evaluate([terminal, streaming], "token_prob")
        params = fresh_probe_init([terminal], d=6)
        with pytest.raises(ContractError, match="mode"):
            evaluate(
                [streaming], "probe",
                probe_params=params,
                probe_config=ProbeConfig(d_model=6, hidden=16, mode="terminal"),
            )

    def test_self_consistency_probs_are_vote_fractions(self):
        tr = make_trace(
            [[(10, "4")], [(20, "4")], [(30, "7")]],
            mode="terminal", gold="4", d=4,
        )
        report, _ = evaluate([tr], "self_consistency")
        assert report["bon"]["accuracy"] == 1.0
        assert report["n_answers"] == 3
