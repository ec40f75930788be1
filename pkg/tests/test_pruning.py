"""Importance scores, EMA, TopK pruning, threshold variant, loss oracle."""

import numpy as np
import pytest

from prunecast import autodiff as ad
from prunecast.analysis import collect_activation_probs, collect_head_norms
from prunecast.data import WindowSet, synth_dataset, make_windows, SplitSpec
from prunecast.errors import ConfigError
from prunecast.model import Forecaster, ForwardContext, MaskedLinear
from prunecast.pruning import (ChannelRef, ImportanceLedger, PruneSchedule,
                               default_protected, ema_update, oracle_importance,
                               per_sample_grads, progressive_prune, prune_stat,
                               prune_step, raw_importance, taylor2_importance)

from conftest import assert_grads_close, plant_dead_ffn_channels, plant_dead_head
from test_model import tiny_config


def small_windows(model, n, rng):
    contexts = rng.normal(0, 1, (n, model.cfg.context_len)) \
        + np.sin(np.arange(model.cfg.context_len) * 0.3)
    targets = rng.normal(0, 1, (n, model.cfg.horizon))
    return WindowSet(contexts, targets, np.zeros(n, dtype=np.intp), ["c"])


def training_windows(n_points=400, channels=2, seed=3, L=24, hz=6):
    table = synth_dataset("sines", seed, (n_points, channels))
    spec = SplitSpec(n_points, 0.0, 0.0, context_len=L, horizon=hz)
    return make_windows(table, spec, "train")


class TestRawImportance:
    def test_single_sample_formula(self):
        assert raw_importance(np.array([0.2])) == pytest.approx(0.18)

    def test_zero_gradients_zero_score(self):
        assert raw_importance(np.zeros(5)) == 0.0

    def test_matrix_form(self):
        g = np.array([[0.2, 1.0], [0.2, -1.0]])
        s = raw_importance(g)
        np.testing.assert_allclose(s, [0.18, 0.5])

    def test_empty_batch_rejected(self):
        with pytest.raises(ConfigError, match="at least one sample"):
            raw_importance(np.zeros((0, 3)))


class TestTaylor2:
    def test_quadratic_exactness(self, rng):
        """On L(m) = ½ mᵀQm + bᵀm + c the estimate is the exact loss delta."""
        n = 12
        q = rng.normal(0, 1, (n, n))
        q = q + q.T
        b = rng.normal(0, 1, n)
        m = np.ones(n)

        def loss(mv):
            return 0.5 * mv @ q @ mv + b @ mv + 3.0

        grad = q @ m + b
        estimates = taylor2_importance(grad, np.diag(q))
        for i in range(n):
            e = np.zeros(n)
            e[i] = 1.0
            oracle = abs(loss(m - e) - loss(m))
            assert abs(estimates[i] - oracle) <= 1e-10

    def test_fisher_variant_on_quadratic_surrogate(self):
        """L(m) = Σ c_i (m_i − 1)²: oracle is c_i, the gradient at m=1 is 0."""
        c = np.array([0.4, 1.3, 0.02])
        grad_at_ones = -2 * c * 0.0
        fisher = raw_importance(grad_at_ones[None, :])
        np.testing.assert_array_equal(fisher, np.zeros(3))
        oracle = np.abs(c * (0.0 - 1.0) ** 2)
        np.testing.assert_allclose(oracle, c)


class TestPerSampleGrads:
    def test_handrolled_two_by_two_closed_form(self):
        layer = MaskedLinear("ml", np.array([[0.5, -1.0], [2.0, 0.25]]),
                             np.array([0.1, -0.3]))
        x = np.array([[1.5, -0.7]])
        t = np.array([[0.2, 0.9]])
        tape = ad.Tape()
        ctx = ForwardContext(tape)
        h = layer.forward(ad.constant(x), ctx)
        tape.backward(ad.mse_loss(h, ad.constant(t)))
        m_in_leaf, m_out_leaf = ctx.mask_leaves["ml"]

        y = x @ layer.w + layer.b
        dl_dh = (y - t) * (2.0 / 2.0)  # mean over the two output elements
        expected_m_out = (y * dl_dh)[0]
        expected_m_in = x[0] * (layer.w @ (dl_dh[0] * layer.m_out))
        assert_grads_close(tape.grad(m_out_leaf), expected_m_out, rtol=1e-12,
                           label="m_out")
        assert_grads_close(tape.grad(m_in_leaf), expected_m_in, rtol=1e-12,
                           label="m_in")

    def test_zeroed_downstream_kills_mask_grads(self, rng):
        model = Forecaster(tiny_config(layers=1), seed=4)
        model.head.w[...] = 0.0
        ws = small_windows(model, 3, rng)
        grads = per_sample_grads(model, ws.contexts, ws.targets)
        for layer in model.masked_linears():
            if layer.layer_id == "head":
                continue
            assert np.abs(grads.arrays[(layer.layer_id, "input")]).max() == 0.0
            assert np.abs(grads.arrays[(layer.layer_id, "output")]).max() == 0.0

    def test_per_sample_mean_equals_tape_leaf_gradient(self, rng):
        """Manual x·∂L/∂(xm) assembly must agree with the tape's own leaf grads."""
        model = Forecaster(tiny_config(layers=2), seed=7)
        ws = small_windows(model, 5, rng)
        tape = ad.Tape()
        fp = model.forward_batch(ws.contexts, tape=tape, capture_grads=True)
        loss = ad.mse_loss(fp.pred_norm, ad.constant(fp.normalized_targets(ws.targets)))
        tape.backward(loss)

        grads = per_sample_grads(model, ws.contexts, ws.targets)
        for layer in model.masked_linears():
            m_in_leaf, m_out_leaf = fp.ctx.mask_leaves[layer.layer_id]
            manual_in = grads.arrays[(layer.layer_id, "input")].mean(axis=0)
            manual_out = grads.arrays[(layer.layer_id, "output")].mean(axis=0)
            assert np.abs(manual_in - tape.grad(m_in_leaf)).max() <= 1e-10
            assert np.abs(manual_out - tape.grad(m_out_leaf)).max() <= 1e-10

    def test_against_finite_differences_on_masks(self, rng):
        model = Forecaster(tiny_config(layers=1, d_model=8, d_ffn=8,
                                       context_len=12, patch_len=4, horizon=3),
                           seed=9)
        ws = small_windows(model, 2, rng)
        grads = per_sample_grads(model, ws.contexts, ws.targets)

        h = 1e-4
        probe = [ChannelRef("block0.attn.v", "output", 2),
                 ChannelRef("block0.ffn.up", "output", 5),
                 ChannelRef("block0.ffn.down", "input", 1),
                 ChannelRef("embed", "output", 3),
                 ChannelRef("head", "input", 6)]
        for n in range(2):
            ctx1, tgt1 = ws.contexts[n:n + 1], ws.targets[n:n + 1]
            for ref in probe:
                layer = model.layer_by_id(ref.layer_id)
                mask = layer.m_in if ref.side == "input" else layer.m_out

                def loss_at(v):
                    mask[ref.index] = v
                    fp = model.forward_batch(ctx1)
                    out = float(((fp.pred_norm.data - fp.normalized_targets(tgt1)) ** 2).mean())
                    mask[ref.index] = 1.0
                    return out

                fd = (loss_at(1.0 + h) - loss_at(1.0 - h)) / (2 * h)
                assert_grads_close(grads.vector(ref)[n], fd, rtol=1e-4,
                                   label=str(ref))


class TestEmaAndPruneStep:
    def test_ema_recurrence(self):
        ledger = ImportanceLedger([ChannelRef("l", "input", 0)], alpha=0.5)
        ledger.ema[0] = 0.2
        ema_update(ledger, np.array([0.4]))
        assert ledger.ema[0] == pytest.approx(0.3)

    def test_alpha_one_copies_raw(self):
        ledger = ImportanceLedger([ChannelRef("l", "input", 0)], alpha=1.0)
        ledger.ema[0] = 0.9
        ema_update(ledger, np.array([0.4]))
        assert ledger.ema[0] == 0.4

    def test_first_update_scales_by_alpha(self):
        ledger = ImportanceLedger([ChannelRef("l", "input", 0)], alpha=0.3)
        ema_update(ledger, np.array([1.0]))
        assert ledger.ema[0] == pytest.approx(0.3)

    def test_alpha_out_of_range(self):
        with pytest.raises(ConfigError, match="alpha"):
            ImportanceLedger([ChannelRef("l", "input", 0)], alpha=0.0)
        ledger = ImportanceLedger([ChannelRef("l", "input", 0)], alpha=0.5)
        with pytest.raises(ConfigError, match="alpha"):
            ema_update(ledger, np.array([1.0]), alpha=1.5)

    def test_prune_step_takes_lowest(self):
        model = Forecaster(tiny_config(layers=1), seed=0)
        layer = model.blocks[0].ffn_up
        refs = [ChannelRef(layer.layer_id, "output", i) for i in range(4)]
        ledger = ImportanceLedger(refs, alpha=0.5)
        ledger.ema[:] = [0.5, 0.1, 0.3, 0.1]
        pruned = prune_step(ledger, model, 2)
        assert {r.index for r in pruned} == {1, 3}
        assert layer.m_out[1] == 0.0 and layer.m_out[3] == 0.0

    def test_prune_step_zero_is_noop(self):
        model = Forecaster(tiny_config(layers=1), seed=0)
        ledger = ImportanceLedger.from_model(model, alpha=0.5)
        assert prune_step(ledger, model, 0) == []
        assert all(l.m_in.all() and l.m_out.all() for l in model.masked_linears())

    def test_prune_step_matches_sort_oracle(self, rng):
        model = Forecaster(tiny_config(layers=1), seed=1)
        ledger = ImportanceLedger.from_model(model, alpha=0.5)
        ledger.ema[:] = rng.random(len(ledger.refs))
        dead = rng.choice(len(ledger.refs), 30, replace=False)
        ledger.alive[dead] = False
        protected = default_protected(model)

        expected = sorted(
            ((ledger.ema[i], r) for i, r in enumerate(ledger.refs)
             if ledger.alive[i] and r not in protected))[:17]
        pruned = prune_step(ledger, model, 17, protected)
        assert pruned == [r for _, r in expected]

    def test_prune_step_too_large(self):
        model = Forecaster(tiny_config(layers=1), seed=0)
        ledger = ImportanceLedger.from_model(model, alpha=0.5)
        with pytest.raises(ConfigError, match="cannot prune"):
            prune_step(ledger, model, len(ledger.refs) + 1)


class TestProgressive:
    def test_zero_target_leaves_model_unchanged(self):
        model = Forecaster(tiny_config(), seed=3)
        ws = training_windows()
        schedule = PruneSchedule(ratio_per_epoch=0.0, epochs=1, batch_size=64)
        ledger, trace = progressive_prune(model, ws, schedule, alpha=0.5)
        assert trace.pruned_refs() == []
        assert all(l.m_in.all() and l.m_out.all() for l in model.masked_linears())
        assert ledger.alive_count() == len(ledger.refs)

    def test_dead_channels_pruned_before_useful_ones(self, rng):
        model = Forecaster(tiny_config(layers=1, heads=2, d_model=8, d_ffn=12,
                                       context_len=24, patch_len=4, horizon=4),
                           seed=11)
        dead_ffn = [2, 5, 9]
        plant_dead_ffn_channels(model, 0, dead_ffn)
        plant_dead_head(model, 0, 1)
        g = model.head_group(1)
        dead_refs = {ChannelRef("block0.ffn.down", "input", c) for c in dead_ffn}
        dead_refs |= {ChannelRef("block0.attn.o", "input", i)
                      for i in range(g.start, g.stop)}

        ws = training_windows(L=24, hz=4)
        # oracle loss deltas measured before pruning mutates anything
        eval_ws = ws.subset(np.arange(64))
        deltas = {}
        ledger0 = ImportanceLedger.from_model(model, alpha=0.5)
        for ref in ledger0.refs:
            if ref not in default_protected(model):
                deltas[ref] = oracle_importance(model, eval_ws, ref)
        for ref in dead_refs:
            assert deltas[ref] <= 1e-12

        schedule = PruneSchedule(ratio_per_epoch=0.15, epochs=1, batch_size=64, seed=5)
        _, trace = progressive_prune(model, ws, schedule, alpha=0.5)
        order = trace.pruned_refs()
        assert dead_refs <= set(order)
        seen_useful = False
        for ref in order:
            if deltas.get(ref, 0.0) > 1e-3:
                seen_useful = True
            if ref in dead_refs:
                assert not seen_useful, f"{ref} pruned after a useful channel"

    def test_determinism(self):
        ws = training_windows()

        def run():
            model = Forecaster(tiny_config(), seed=3)
            schedule = PruneSchedule(ratio_per_epoch=0.1, epochs=1,
                                     batch_size=32, seed=7)
            _, trace = progressive_prune(model, ws, schedule, alpha=0.4)
            return trace

        t1, t2 = run(), run()
        assert t1.pruned_refs() == t2.pruned_refs()
        assert t1.to_jsonl() == t2.to_jsonl()

    def test_alive_count_monotone_and_masks_stay_zero(self):
        model = Forecaster(tiny_config(), seed=3)
        ws = training_windows()
        schedule = PruneSchedule(ratio_per_epoch=0.08, epochs=2, batch_size=48, seed=1)
        ledger, trace = progressive_prune(model, ws, schedule, alpha=0.5)
        alive = [r.alive_count for r in trace.records]
        assert all(a >= b for a, b in zip(alive, alive[1:]))
        for ref in trace.pruned_refs():
            layer = model.layer_by_id(ref.layer_id)
            mask = layer.m_in if ref.side == "input" else layer.m_out
            assert mask[ref.index] == 0.0
        assert (ledger.ema >= 0).all()

    def test_param_floor_stops_early(self):
        model = Forecaster(tiny_config(), seed=3)
        ws = training_windows()
        schedule = PruneSchedule(ratio_per_epoch=0.9, epochs=1, batch_size=32,
                                 target_param_fraction=0.8, seed=2)
        progressive_prune(model, ws, schedule, alpha=0.5)
        assert model.param_fraction() <= 0.8
        assert model.param_fraction() > 0.4  # stopped near the floor, not at 90%


class TestPruneStat:
    def collect(self, model, rng, n=6):
        windows = rng.normal(0, 1, (n, model.cfg.context_len))
        return (collect_head_norms(model, windows),
                collect_activation_probs(model, windows))

    def test_zero_thresholds_prune_nothing(self, rng):
        model = Forecaster(tiny_config(layers=1), seed=2)
        head_stats, act_stats = self.collect(model, rng)
        pruned = prune_stat(model, head_stats, act_stats, 0.0, 0.0)
        assert pruned == []

    def test_dead_value_head_removed(self, rng):
        model = Forecaster(tiny_config(layers=1, heads=2, activation="relu"), seed=2)
        plant_dead_head(model, 0, 0)
        head_stats, act_stats = self.collect(model, rng)
        pruned = prune_stat(model, head_stats, act_stats, 0.01, 0.0)
        g = model.head_group(0)
        expected = {ChannelRef("block0.attn.o", "input", i)
                    for i in range(g.start, g.stop)}
        assert set(pruned) == expected
        assert (model.blocks[0].wo.m_in[g] == 0.0).all()

    def test_dead_ffn_channel_pruned_jointly(self, rng):
        model = Forecaster(tiny_config(layers=1, activation="relu"), seed=2)
        plant_dead_ffn_channels(model, 0, [4])
        head_stats, act_stats = self.collect(model, rng)
        pruned = prune_stat(model, head_stats, act_stats, 0.0, 0.01)
        assert ChannelRef("block0.ffn.up", "output", 4) in pruned
        assert ChannelRef("block0.ffn.down", "input", 4) in pruned

    def test_threshold_sweep_monotone(self, rng):
        model = Forecaster(tiny_config(layers=2, heads=4, d_model=16,
                                       activation="relu"), seed=13)
        plant_dead_head(model, 0, 2)
        head_stats, act_stats = self.collect(model, rng, n=10)
        previous = set()
        for thr in (0.0, 0.005, 0.01, 0.02):
            trial = model.clone()
            pruned = set(prune_stat(trial, head_stats, act_stats, thr, thr))
            assert previous <= pruned
            previous = pruned

    def test_threshold_out_of_range(self, rng):
        model = Forecaster(tiny_config(layers=1), seed=2)
        head_stats, act_stats = self.collect(model, rng)
        with pytest.raises(ConfigError, match="head_threshold"):
            prune_stat(model, head_stats, act_stats, 1.5, 0.0)


class TestOracle:
    def test_zeroed_downstream_gives_zero(self, rng):
        model = Forecaster(tiny_config(layers=1), seed=4)
        model.head.w[...] = 0.0
        ws = small_windows(model, 4, rng)
        ref = ChannelRef("block0.ffn.up", "output", 1)
        assert oracle_importance(model, ws, ref) == 0.0

    def test_dead_input_channel_gives_zero(self, rng):
        model = Forecaster(tiny_config(layers=1), seed=4)
        plant_dead_ffn_channels(model, 0, [3])
        ws = small_windows(model, 4, rng)
        assert oracle_importance(model, ws,
                                 ChannelRef("block0.ffn.down", "input", 3)) == 0.0

    def test_oracle_restores_mask(self, rng):
        model = Forecaster(tiny_config(layers=1), seed=4)
        ws = small_windows(model, 4, rng)
        oracle_importance(model, ws, ChannelRef("block0.attn.q", "output", 0))
        assert model.blocks[0].wq.m_out.all()
