import math
from dataclasses import replace

import numpy as np
import pytest

from hdst import autograd as ag
from hdst import corpus as cp
from hdst import training as tr
from hdst.autograd import Tensor
from hdst.decoder import AttentionTrace, decode_slots, hier_context, slot_query_embeddings
from hdst.encoder import encode_dialogue
from hdst.optim import adam_step
from hdst.params import ConfigError, ModelConfig


def dist_row(probs):
    return Tensor(np.asarray([probs], dtype=np.float64))


class TestCeLoss:
    def test_perfect_predictions_zero_loss(self):
        dists = [dist_row([1.0, 0.0]), dist_row([0.0, 1.0])]
        loss = tr.ce_loss(dists, np.array([0, 1]))
        assert abs(loss.item()) < 1e-9

    def test_half_quarter_arithmetic(self):
        dists = [dist_row([0.5, 0.5]), dist_row([0.25, 0.75])]
        loss = tr.ce_loss(dists, np.array([0, 0]))
        expected = -(math.log(0.5) + math.log(0.25)) / 2
        assert abs(loss.item() - expected) < 1e-9
        assert abs(expected - 1.0397) < 1e-4

    def test_nonnegative(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            k = int(rng.integers(1, 5))
            dists = []
            for _ in range(k):
                p = rng.random(4) + 1e-3
                dists.append(dist_row(p / p.sum()))
            loss = tr.ce_loss(dists, rng.integers(0, 4, size=k))
            assert loss.item() >= 0

    def test_needs_gold(self):
        with pytest.raises(ValueError):
            tr.ce_loss([dist_row([1.0])], np.array([], dtype=np.int64))


def trace_with_betas(betas, mode=None):
    t = AttentionTrace(dialogue_id="d", slot="s", context_turn=1)
    t.beta = [np.asarray(b, dtype=np.float64) for b in betas]
    t.p_gen = [0.5] * len(betas)
    return t


class TestFocusLoss:
    def test_two_turns_equal_mass_is_ln2(self):
        t = trace_with_betas([[0.5, 0.5], [0.5, 0.5]])
        # summed beta = [1, 1] -> softmax uniform -> -log 1/2
        assert abs(tr.focus_loss(t, 0) - math.log(2)) < 1e-9

    def test_equal_mass_over_t_turns_is_ln_t(self):
        for n in (2, 3, 5, 8):
            t = trace_with_betas([np.full(n, 1.0 / n)] * 3)
            assert abs(tr.focus_loss(t, n - 1) - math.log(n)) < 1e-9

    def test_strictly_decreases_as_label_mass_grows(self):
        losses = []
        for boost in (0.0, 0.5, 1.0, 2.0):
            t = trace_with_betas([[1.0 + boost, 1.0, 1.0]])
            losses.append(tr.focus_loss(t, 0))
        assert all(a > b for a, b in zip(losses, losses[1:]))

    def test_nonnegative_and_sentry_allowed(self):
        t = trace_with_betas([[0.9, 0.05, 0.05]])
        assert tr.focus_loss(t, 0) >= 0

    def test_empty_trace_rejected(self):
        t = trace_with_betas([])
        with pytest.raises(ValueError):
            tr.focus_loss(t, 0)

    def test_batched_matches_trace_version(self, tiny_world):
        w = tiny_world(mode="plain", n_slots=2)
        enc = encode_dialogue(w.nums[0], w.mp, w.cfg)
        ctx = hier_context(enc, w.nums[0].n_turns - 1, w.mp, "plain")
        emb = slot_query_embeddings(w.queries, w.mp.embed)
        teacher = np.full((2, 3), cp.EOS_ID, dtype=np.int64)
        mask = np.ones((2, 3))
        out = decode_slots(ctx, w.queries, emb, w.mp, w.cfg, teacher_ids=teacher)
        info = np.array([1, 0])
        per_slot = tr._focus_batched(out.step_betas, mask, info)
        for si, q in enumerate(w.queries):
            t = AttentionTrace(dialogue_id="d", slot=q.slot, context_turn=1)
            t.beta = [b.data[si] for b in out.step_betas]
            t.p_gen = [0.5] * len(t.beta)
            assert abs(per_slot.data[si, 0] - tr.focus_loss(t, info[si])) < 1e-9


class TestTotalLoss:
    def build_example(self, world, focus_ratio, gate_w, seed=0):
        num = world.nums[0]
        enc = encode_dialogue(num, world.mp, world.cfg)
        ctx = hier_context(enc, num.n_turns - 1, world.mp, world.cfg.mode)
        emb = slot_query_embeddings(world.queries, world.mp.embed)
        table = cp.information_turn_table(num.dialogue.states, world.corpus.slots)
        tg = tr.prefix_targets(num, num.dialogue.n_real_turns, world.corpus.slots, table)
        out = decode_slots(ctx, world.queries, emb, world.mp, world.cfg, teacher_ids=tg.target_ids)
        return out, tg

    def test_zero_ratio_drops_focus_term(self, tiny_world):
        w = tiny_world(mode="plain")
        out, tg = self.build_example(w, 0.0, 0.0)
        loss0, per_slot = tr.example_loss(out, tg, focus_ratio=0.0, gate_loss_weight=0.0)
        assert abs(loss0.item() - per_slot.sum()) < 1e-9

    def test_arithmetic_composition(self, tiny_world):
        # ce 1.0, focus 0.5, ratio 0.1, no gate -> 1.05
        w = tiny_world(mode="plain")
        out, tg = self.build_example(w, 0.1, 0.0)
        ce = tr._ce_batched(out.step_dists, tg.target_ids, tg.step_mask)
        focus = tr._focus_batched(out.step_betas, tg.step_mask, tg.info_turns)
        loss, _ = tr.example_loss(out, tg, focus_ratio=0.1, gate_loss_weight=0.0)
        expected = ce.data.sum() + 0.1 * focus.data.sum()
        assert abs(loss.item() - expected) < 1e-9

    def test_linearity_in_focus_ratio(self, tiny_world):
        w = tiny_world(mode="cover", n_slots=3)
        out, tg = self.build_example(w, 0.0, 1.0)
        base, _ = tr.example_loss(out, tg, focus_ratio=0.0, gate_loss_weight=1.0)
        with_focus, _ = tr.example_loss(out, tg, focus_ratio=0.1, gate_loss_weight=1.0)
        focus = tr._focus_batched(out.step_betas, tg.step_mask, tg.info_turns)
        delta = with_focus.item() - base.item()
        expected = 0.1 * focus.data.sum()
        assert abs(delta - expected) / max(1.0, abs(expected)) < 1e-9

    def test_loss_finite_on_random_init(self, tiny_world):
        w = tiny_world(mode="cover", n_slots=3, seed=5)
        out, tg = self.build_example(w, 0.1, 1.0)
        loss, _ = tr.example_loss(out, tg, focus_ratio=0.1, gate_loss_weight=1.0)
        assert np.isfinite(loss.item())


class TestPrefixTargets:
    def test_targets_and_gates(self, tiny_world):
        w = tiny_world()
        num = w.nums[0]
        slots = w.corpus.slots
        table = cp.information_turn_table(num.dialogue.states, slots)
        t = num.dialogue.n_real_turns
        tg = tr.prefix_targets(num, t, slots, table)
        for si, slot in enumerate(slots):
            gold = num.dialogue.gold_value(t, slot)
            k = len(gold.value) + 1
            assert tg.step_mask[si].sum() == k
            assert tg.target_ids[si, k - 1] == cp.EOS_ID
            assert tg.gate_ids[si] == cp.GATE_CLASSES.index(gold.gate)
            assert tg.info_turns[si] == table[t - 1][slot]

    def test_teacher_inputs_are_shifted_gold(self, tiny_world):
        # the decoder consumes gold token k-1 as the input at step k
        captured = []
        w = tiny_world(mode="plain")
        num = w.nums[0]
        enc = encode_dialogue(num, w.mp, w.cfg)
        ctx = hier_context(enc, 1, w.mp, "plain")
        emb = slot_query_embeddings(w.queries, w.mp.embed)
        gold = np.array([[7, 9, cp.EOS_ID], [8, cp.EOS_ID, cp.EOS_ID]], dtype=np.int64)

        import hdst.decoder as dmod

        orig = dmod.ag.embedding_lookup

        def spy(table, ids):
            captured.append(np.asarray(ids).copy())
            return orig(table, ids)

        dmod.ag.embedding_lookup = spy
        try:
            decode_slots(ctx, w.queries, emb, w.mp, w.cfg, teacher_ids=gold, record_traces=False)
        finally:
            dmod.ag.embedding_lookup = orig
        # inputs after the slot embedding: gold[:, 0] then gold[:, 1]
        fed = [ids for ids in captured if ids.shape == (2,)]
        np.testing.assert_array_equal(fed[0], gold[:, 0])
        np.testing.assert_array_equal(fed[1], gold[:, 1])


class TestTrainLoop:
    def small_setup(self, mode="cover", seed=3):
        synth = cp.SynthConfig(
            n_dialogues=10, n_turns_min=2, n_turns_max=3, n_slots=2, vocab_size=60, distractor_rate=0.2
        )
        train_c = cp.generate_synthetic(synth, seed=7)
        dev_c = cp.Corpus(dialogues=cp.generate_synthetic(synth, seed=8).dialogues[:5], slots=train_c.slots)
        cfg = tr.TrainConfig(
            epochs=2, batch_size=4, seed=seed, patience=10, lr=1e-3,
            model=ModelConfig(
                mode=mode, encoder_init="last", hidden_dim=12, embed_dim=12,
                n_layers=1, dropout=0.1, max_decode_len=4,
            ),
        )
        return cfg, train_c, dev_c

    def test_two_epochs_reduce_loss(self):
        cfg, train_c, dev_c = self.small_setup()
        res = tr.train(cfg, train_c, dev_c)
        assert res.metrics[1]["train_loss"] < res.metrics[0]["train_loss"]

    def test_fixed_seed_identical_metrics(self):
        cfg, train_c, dev_c = self.small_setup()
        a = tr.train(cfg, train_c, dev_c)
        b = tr.train(cfg, train_c, dev_c)
        assert a.metrics == b.metrics

    def test_different_seed_differs(self):
        cfg, train_c, dev_c = self.small_setup()
        a = tr.train(cfg, train_c, dev_c)
        b = tr.train(replace(cfg, seed=4), train_c, dev_c)
        assert a.metrics != b.metrics

    def test_flat_mode_trains(self):
        cfg, train_c, dev_c = self.small_setup(mode="flat")
        res = tr.train(cfg, train_c, dev_c)
        assert np.isnan(res.metrics[0]["dev_focus_acc"])
        assert res.metrics[1]["train_loss"] < res.metrics[0]["train_loss"]

    def test_writes_checkpoint_and_metrics(self, tmp_path):
        cfg, train_c, dev_c = self.small_setup()
        res = tr.train(cfg, train_c, dev_c, out_dir=tmp_path)
        assert res.checkpoint_path.exists()
        lines = res.metrics_path.read_text().splitlines()
        assert lines[0] == "epoch,train_loss,dev_joint_acc,dev_focus_acc,w_c"
        assert len(lines) == 1 + len(res.metrics)

    def test_single_adam_step_reduces_single_example_loss(self, tiny_world):
        w = tiny_world(mode="cover", n_slots=2, seed=2, dtype=np.float32)
        num = w.nums[0]
        slots = w.corpus.slots
        table = cp.information_turn_table(num.dialogue.states, slots)
        tg = tr.prefix_targets(num, 1, slots, table)

        def loss_value():
            enc = encode_dialogue(num, w.mp, w.cfg)
            ctx = hier_context(enc, 1, w.mp, w.cfg.mode)
            emb = slot_query_embeddings(w.queries, w.mp.embed)
            out = decode_slots(ctx, w.queries, emb, w.mp, w.cfg, teacher_ids=tg.target_ids, record_traces=False)
            loss, _ = tr.example_loss(out, tg, focus_ratio=0.1, gate_loss_weight=1.0)
            return loss

        before = loss_value()
        before_val = before.item()
        before.backward()
        adam_step(w.mp.store, lr=1e-4)
        after_val = loss_value().item()
        assert after_val < before_val


class TestEmbeddingFile:
    def test_rows_loaded_by_token(self, tmp_path, tiny_world):
        from hdst.params import load_embedding_file

        w = tiny_world(hidden=4)
        path = tmp_path / "vectors.txt"
        path.write_text(
            "none 1.0 2.0 3.0 4.0\n"
            "not-in-vocab 9.0 9.0 9.0 9.0\n"
            "w0 0.5 0.5 0.5 0.5\n"
            "badline 1.0\n"
        )
        hits = load_embedding_file(path, w.vocab.tokens, w.mp.embed)
        assert hits == 2
        np.testing.assert_allclose(w.mp.embed.data[w.vocab.none_id], [1.0, 2.0, 3.0, 4.0])
        np.testing.assert_allclose(w.mp.embed.data[w.vocab.lookup("w0")], [0.5] * 4)

    def test_train_config_accepts_embedding_file(self, tmp_path):
        cfg = tr.train_config_from({"embedding_file": str(tmp_path / "v.txt")})
        assert cfg.embedding_file.endswith("v.txt")


class TestConfigFiles:
    def test_parse_kv_roundtrip(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text(
            """
            # training
            focus_ratio = 0.1
            batch_size = 2
            lr = 0.003
            epochs = 5
            mode = cover
            encoder_init = last
            hidden_dim = 32
            embed_dim = 32
            n_layers = 1
            dropout = 0.1
            n_dialogues = 20   # generator keys may share the file
            n_turns_min = 2
            n_turns_max = 4
            n_slots = 3
            vocab_size = 80
            distractor_rate = 0.3
            """
        )
        kv = tr.parse_kv_file(p)
        cfg = tr.train_config_from(kv)
        assert cfg.batch_size == 2 and cfg.lr == 0.003 and cfg.model.mode == "cover"
        synth = tr.synth_config_from(kv)
        assert synth.n_dialogues == 20 and synth.distractor_rate == 0.3

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError):
            tr.train_config_from({"learning_rate_typo": "1"})

    def test_bad_values_rejected(self):
        with pytest.raises(ConfigError):
            tr.train_config_from({"focus_ratio": "-0.5"})
        with pytest.raises(ConfigError):
            tr.train_config_from({"batch_size": "0"})
        with pytest.raises(ConfigError):
            tr.train_config_from({"hidden_dim": "8", "embed_dim": "16"})

    def test_malformed_line_reported_with_number(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("lr = 0.001\nnot a kv line\n")
        with pytest.raises(ConfigError, match=":2"):
            tr.parse_kv_file(p)


def test_full_model_gradients_match_finite_differences():
    synth = cp.SynthConfig(
        n_dialogues=1, n_turns_min=2, n_turns_max=2, n_slots=2, vocab_size=40, distractor_rate=0.3
    )
    corpus = cp.generate_synthetic(synth, seed=3)
    vocab = cp.build_vocab(corpus)
    cfg = ModelConfig(
        mode="cover", encoder_init="last", hidden_dim=3, embed_dim=3,
        n_layers=1, dropout=0.0, max_decode_len=4,
    )
    from hdst.params import build_params
    from hdst.decoder import make_slot_queries

    mp = build_params(cfg, vocab.size, np.random.default_rng(0), dtype=np.float64)
    queries = make_slot_queries(corpus.slots, vocab)
    ex = tr.prepare_dialogue(corpus.dialogues[0], vocab, corpus.slots)

    def f():
        enc = encode_dialogue(ex.num, mp, cfg)
        emb = slot_query_embeddings(queries, mp.embed)
        total = None
        for tg in ex.prefixes:
            ctx = hier_context(enc, tg.turn, mp, cfg.mode)
            out = decode_slots(ctx, queries, emb, mp, cfg, teacher_ids=tg.target_ids, record_traces=False)
            loss, _ = tr.example_loss(out, tg, focus_ratio=0.1, gate_loss_weight=1.0)
            total = loss if total is None else ag.add(total, loss)
        return total

    err = ag.grad_check(f, list(mp.store.items()), epsilon=1e-5)
    assert err < 1e-3, f"full-model gradient error {err}"
