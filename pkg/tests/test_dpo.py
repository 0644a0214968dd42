"""LoRA adapters, DPO loss identities, and the preference training loop."""

import json
import math

import mpmath
import numpy as np
import pytest

from deskllm.chat import Conversation, Turn, chat_vocab
from deskllm.dpo import (DpoPlan, DpoStage, PreferencePair, build_preference_pairs,
                         dpo_loss, dpo_train, init_lora_adapters, load_preference_records,
                         lora_forward, lora_merge, render_pair, save_preference_records,
                         sequence_logprob, two_stage_plan)
from deskllm.errors import ConfigError
from deskllm.model import forward, linear
from deskllm.tensor import Tensor, no_grad

from modelutil import tiny_model

CHAT_VOCAB = chat_vocab()


def prompt(*texts):
    turns = []
    for i, t in enumerate(texts):
        turns.append(Turn("user" if i % 2 == 0 else "assistant", t))
    return Conversation(tuple(turns))


class TestDpoLoss:
    def test_policy_equals_reference_gives_ln2(self):
        rng = np.random.default_rng(0)
        for beta in (0.05, 0.2, 1.0, 7.5):
            lp = rng.normal(size=4) * 10
            loss = dpo_loss(list(lp[:2]), list(lp[2:]), list(lp[:2]), list(lp[2:]),
                            beta=beta)
            assert abs(float(loss.item()) - math.log(2.0)) < 1e-12

    def test_unit_argument_value(self):
        # beta * margin = 1: policy margin 5, reference margin 0, beta 0.2
        loss = dpo_loss([3.0], [-2.0], [0.0], [0.0], beta=0.2)
        with mpmath.workdps(50):
            expected = float(-mpmath.log(1 / (1 + mpmath.exp(-1))))
        assert expected == pytest.approx(0.313262, abs=5e-7)
        assert abs(float(loss.item()) - expected) < 1e-9

    def test_monotone_decreasing_in_margin(self):
        margins = np.linspace(-30, 30, 121)
        losses = [float(dpo_loss([m], [0.0], [0.0], [0.0], beta=0.2).item())
                  for m in margins]
        assert all(b < a for a, b in zip(losses, losses[1:]))

    def test_limits(self):
        assert float(dpo_loss([1e4], [0.0], [0.0], [0.0], beta=1.0).item()) < 1e-12
        assert float(dpo_loss([-1e2], [0.0], [0.0], [0.0], beta=1.0).item()) > 50

    def test_batch_mean(self):
        separate = [float(dpo_loss([c], [r], [0.0], [0.0], beta=0.2).item())
                    for c, r in ((1.0, 0.5), (-2.0, 3.0), (0.1, 0.1))]
        batched = dpo_loss([1.0, -2.0, 0.1], [0.5, 3.0, 0.1], [0.0] * 3, [0.0] * 3,
                           beta=0.2)
        assert float(batched.item()) == pytest.approx(np.mean(separate), rel=1e-14)

    def test_gradient_signs(self):
        plc = Tensor(np.asarray(0.3), requires_grad=True)
        plr = Tensor(np.asarray(-0.2), requires_grad=True)
        loss = dpo_loss([plc], [plr], [0.1], [0.0], beta=0.2)
        loss.backward()
        assert plc.grad is not None and float(plc.grad) < 0
        assert plr.grad is not None and float(plr.grad) > 0

    def test_gradient_matches_finite_difference(self):
        def f(m):
            return float(dpo_loss([m], [0.0], [0.4], [-0.3], beta=0.2).item())
        for m0 in (-3.0, 0.0, 2.5):
            t = Tensor(np.asarray(m0), requires_grad=True)
            loss = dpo_loss([t], [0.0], [0.4], [-0.3], beta=0.2)
            loss.backward()
            h = 1e-6
            fd = (f(m0 + h) - f(m0 - h)) / (2 * h)
            assert float(t.grad) == pytest.approx(fd, rel=1e-6, abs=1e-12)
            assert float(t.grad) < 0

    def test_validation(self):
        with pytest.raises(ValueError):
            dpo_loss([], [], [], [])
        with pytest.raises(ValueError):
            dpo_loss([1.0], [1.0, 2.0], [0.0], [0.0])
        with pytest.raises(ConfigError):
            dpo_loss([1.0], [0.0], [0.0], [0.0], beta=0.0)


class TestSequenceLogprob:
    def test_uniform_model_gives_minus_l_log_v(self):
        cfg, params = tiny_model(seed=0, vocab_size=32)
        for t in params.named_tensors().values():
            t.data[...] = 0.0
        params.final_norm.data[...] = 1.0
        lp = sequence_logprob(params, cfg, [1, 2], [3, 4, 5])
        assert float(lp.item()) == pytest.approx(-3 * math.log(32), rel=1e-12)

    def test_empty_response_is_zero(self):
        cfg, params = tiny_model(seed=1)
        lp = sequence_logprob(params, cfg, [1, 2, 3], [])
        assert float(lp.item()) == 0.0

    def test_three_token_straight_line_recompute(self):
        cfg, params = tiny_model(seed=2, vocab_size=16)
        prompt_ids = np.array([1, 2, 3, 4])
        response_ids = np.array([5, 6, 7])
        lp = sequence_logprob(params, cfg, prompt_ids, response_ids)
        with no_grad():
            logits = forward(params, np.concatenate([prompt_ids, response_ids])[:-1],
                             cfg).data.astype(np.float64)
        total = 0.0
        for k, tok in enumerate(response_ids):
            row = logits[len(prompt_ids) - 1 + k]
            row = row - row.max()
            total += row[tok] - math.log(np.sum(np.exp(row)))
        assert float(lp.item()) == pytest.approx(total, rel=1e-12)

    def test_chain_rule_additivity(self):
        cfg, params = tiny_model(seed=3, vocab_size=16)
        p = np.array([1, 2])
        r = np.array([3, 4, 5, 6])
        whole = float(sequence_logprob(params, cfg, p, r).item())
        first = float(sequence_logprob(params, cfg, p, r[:2]).item())
        second = float(sequence_logprob(params, cfg, np.concatenate([p, r[:2]]),
                                        r[2:]).item())
        assert whole == pytest.approx(first + second, rel=1e-10)

    def test_overlength_rejected(self):
        cfg, params = tiny_model(seed=4, max_context=8)
        with pytest.raises(ValueError):
            sequence_logprob(params, cfg, np.arange(6) % 16, np.arange(6) % 16)

    def test_empty_prompt_rejected(self):
        cfg, params = tiny_model(seed=4)
        with pytest.raises(ValueError):
            sequence_logprob(params, cfg, [], [1, 2])

    def test_adapters_change_logprob(self):
        cfg, params = tiny_model(seed=5, vocab_size=16)
        adapters = init_lora_adapters(params, seed=0)
        for a in adapters.values():
            a.b.data[...] = 0.05
        base = float(sequence_logprob(params, cfg, [1, 2], [3, 4]).item())
        adapted = float(sequence_logprob(params, cfg, [1, 2], [3, 4],
                                         adapters=adapters).item())
        assert base != adapted


class TestLoraAdapters:
    def test_target_set_and_shapes(self):
        cfg, params = tiny_model(seed=6)
        adapters = init_lora_adapters(params, rank=4, alpha=16.0, seed=0)
        assert len(adapters) == 7 * cfg.n_layers
        named = params.named_tensors()
        for name, adapter in adapters.items():
            assert ".attn." in name or ".mlp." in name
            w = named[name]
            assert adapter.a.shape == (w.shape[0], 4)
            assert adapter.b.shape == (4, w.shape[1])
            assert adapter.scale == 4.0
            assert adapter.a.dtype == w.dtype

    def test_b_starts_zero_and_a_near_init_std(self):
        cfg, params = tiny_model(seed=7, hidden_size=64, intermediate_size=96)
        adapters = init_lora_adapters(params, rank=8, seed=1)
        all_a = np.concatenate([ad.a.data.ravel() for ad in adapters.values()])
        for adapter in adapters.values():
            assert not adapter.b.data.any()
        assert abs(all_a.std() - 0.02) < 0.002
        assert abs(all_a.mean()) < 0.002

    def test_zero_b_forward_equals_base(self):
        cfg, params = tiny_model(seed=8)
        adapters = init_lora_adapters(params, seed=2)
        x = Tensor(np.random.default_rng(0).normal(size=(5, cfg.hidden_size)))
        w = params.layers[0].wq
        with no_grad():
            base = linear(x, w).data
            adapted = lora_forward(x, w, adapters["layers.0.attn.wq"]).data
        assert np.array_equal(base, adapted)

    def test_zero_b_merge_equals_base(self):
        cfg, params = tiny_model(seed=9)
        merged = lora_merge(params, init_lora_adapters(params, seed=3))
        base_named = params.named_tensors()
        for name, t in merged.named_tensors().items():
            assert np.array_equal(t.data, base_named[name].data)

    def test_merged_vs_adapter_forward(self):
        cfg, params = tiny_model(seed=10, vocab_size=16)
        adapters = init_lora_adapters(params, seed=4)
        rng = np.random.default_rng(5)
        for adapter in adapters.values():
            adapter.b.data[...] = rng.normal(0, 0.05, size=adapter.b.shape)
        ids = np.array([1, 5, 2, 9, 3])
        with no_grad():
            unmerged = forward(params, ids, cfg, adapters=adapters).data
            merged = forward(lora_merge(params, adapters), ids, cfg).data
        assert np.max(np.abs(unmerged - merged)) < 1e-10

    def test_merge_leaves_input_params_untouched(self):
        cfg, params = tiny_model(seed=11)
        adapters = init_lora_adapters(params, seed=6)
        for adapter in adapters.values():
            adapter.b.data[...] = 1.0
        before = {n: t.data.copy() for n, t in params.named_tensors().items()}
        lora_merge(params, adapters)
        for name, t in params.named_tensors().items():
            assert np.array_equal(t.data, before[name])

    def test_unknown_target_rejected(self):
        cfg, params = tiny_model(seed=12)
        adapters = init_lora_adapters(params, seed=7)
        adapters["layers.9.attn.wq"] = adapters.pop("layers.0.attn.wq")
        with pytest.raises(ConfigError):
            lora_merge(params, adapters)

    def test_bad_rank_rejected(self):
        cfg, params = tiny_model(seed=13)
        with pytest.raises(ConfigError):
            init_lora_adapters(params, rank=0)

    def test_seeded_determinism(self):
        cfg, params = tiny_model(seed=14)
        a1 = init_lora_adapters(params, seed=9)
        a2 = init_lora_adapters(params, seed=9)
        for name in a1:
            assert a1[name].a.data.tobytes() == a2[name].a.data.tobytes()


class TestBuildPreferencePairs:
    def record(self, answers, lang="en"):
        return {"prompt_turns": [{"role": "user", "text": "q"}],
                "answers": answers, "lang": lang}

    def test_min_and_max_rank(self):
        rec = self.record([{"text": "mid", "rank": 1}, {"text": "best", "rank": 0},
                           {"text": "worst", "rank": 2}])
        pairs = build_preference_pairs([rec])
        assert len(pairs) == 1
        assert pairs[0].chosen == "best"
        assert pairs[0].rejected == "worst"

    def test_all_equal_ranks_dropped(self):
        rec = self.record([{"text": "a", "rank": 1}, {"text": "b", "rank": 1}])
        assert build_preference_pairs([rec]) == []

    def test_tie_at_minimum_takes_first_listed(self):
        rec = self.record([{"text": "first", "rank": 0}, {"text": "second", "rank": 0},
                           {"text": "bad", "rank": 3}])
        pairs = build_preference_pairs([rec])
        assert pairs[0].chosen == "first"
        assert pairs[0].rejected == "bad"

    def test_non_english_excluded(self):
        rec = self.record([{"text": "gut", "rank": 0}, {"text": "schlecht", "rank": 1}],
                          lang="de")
        assert build_preference_pairs([rec]) == []

    def test_single_answer_dropped(self):
        assert build_preference_pairs([self.record([{"text": "only", "rank": 0}])]) == []

    def test_identical_texts_dropped(self):
        rec = self.record([{"text": "same", "rank": 0}, {"text": "same", "rank": 2}])
        assert build_preference_pairs([rec]) == []

    def test_pure_function(self):
        recs = [self.record([{"text": "a", "rank": 0}, {"text": "b", "rank": 1}])]
        snapshot = json.dumps(recs, sort_keys=True)
        p1 = build_preference_pairs(recs)
        p2 = build_preference_pairs(recs)
        assert p1 == p2
        assert json.dumps(recs, sort_keys=True) == snapshot

    def test_pair_invariants(self):
        with pytest.raises(ValueError):
            PreferencePair(prompt("q"), "same", "same")
        with pytest.raises(ValueError):
            PreferencePair(prompt("q", "already answered"), "a", "b")


class TestRenderPair:
    def test_layout(self):
        pair = PreferencePair(prompt("hi"), "good", "bad")
        p_ids, chosen, rejected = render_pair(pair, CHAT_VOCAB)
        asst = CHAT_VOCAB.token_to_id[b"<|assistant|>"]
        end = CHAT_VOCAB.token_to_id[b"<|end|>"]
        assert p_ids[-1] == asst
        assert chosen[-1] == end and rejected[-1] == end
        assert bytes(int(i) for i in chosen[:-1]) == b"good"
        assert bytes(int(i) for i in rejected[:-1]) == b"bad"


def toy_pairs():
    return (PreferencePair(prompt("ab"), "yes", "no"),
            PreferencePair(prompt("cd"), "up", "down"))


class TestDpoTrain:
    def make_model(self, seed=20):
        return tiny_model(seed=seed, vocab_size=len(CHAT_VOCAB), max_context=64)

    def test_initial_loss_is_ln2(self):
        cfg, params = self.make_model()
        stages = [DpoStage(toy_pairs(), lr=1e-5, epochs=1)]
        _, records = dpo_train(params, cfg, stages, CHAT_VOCAB, DpoPlan(seed=0))
        assert abs(records[0]["train_loss"] - math.log(2.0)) < 1e-12

    def test_margin_positive_after_training(self):
        cfg, params = self.make_model(seed=21)
        pairs = toy_pairs()
        stages = [DpoStage(pairs, lr=5e-3, epochs=30)]
        adapters, records = dpo_train(params, cfg, stages, CHAT_VOCAB, DpoPlan(seed=1))
        assert records[-1]["train_loss"] < records[0]["train_loss"]
        for pair in pairs:
            p_ids, chosen, rejected = render_pair(pair, CHAT_VOCAB)
            with no_grad():
                plc = float(sequence_logprob(params, cfg, p_ids, chosen,
                                             adapters=adapters).item())
                plr = float(sequence_logprob(params, cfg, p_ids, rejected,
                                             adapters=adapters).item())
                rlc = float(sequence_logprob(params, cfg, p_ids, chosen).item())
                rlr = float(sequence_logprob(params, cfg, p_ids, rejected).item())
            assert (plc - rlc) - (plr - rlr) > 0

    def test_fresh_adapters_reproduce_reference(self):
        cfg, params = self.make_model(seed=22)
        adapters = init_lora_adapters(params, seed=0)
        pair = toy_pairs()[0]
        p_ids, chosen, _ = render_pair(pair, CHAT_VOCAB)
        with no_grad():
            ref = float(sequence_logprob(params, cfg, p_ids, chosen).item())
            pol = float(sequence_logprob(params, cfg, p_ids, chosen,
                                         adapters=adapters).item())
        assert pol == ref

    def test_base_weights_frozen(self):
        cfg, params = self.make_model(seed=23)
        before = {n: t.data.copy() for n, t in params.named_tensors().items()}
        stages = [DpoStage(toy_pairs(), lr=1e-2, epochs=3)]
        dpo_train(params, cfg, stages, CHAT_VOCAB, DpoPlan(seed=2))
        for name, t in params.named_tensors().items():
            assert t.data.tobytes() == before[name].data.tobytes()

    def test_rerun_is_deterministic(self):
        stages_lr = 1e-3
        runs = []
        for _ in range(2):
            cfg, params = self.make_model(seed=24)
            stages = [DpoStage(toy_pairs(), lr=stages_lr, epochs=2)]
            _, records = dpo_train(params, cfg, stages, CHAT_VOCAB, DpoPlan(seed=3))
            runs.append(records)
        assert runs[0] == runs[1]

    def test_two_stages_share_one_adapter(self, tmp_path):
        cfg, params = self.make_model(seed=25)
        stage1, stage2 = two_stage_plan([toy_pairs()[0]], [toy_pairs()[1]])
        assert stage1.lr == 1e-5 and stage2.lr == 3e-6
        log = tmp_path / "dpo.jsonl"
        adapters, records = dpo_train(params, cfg, (stage1, stage2), CHAT_VOCAB,
                                      DpoPlan(seed=4), log_path=log)
        assert [r["stage"] for r in records] == [0, 1]
        assert [r["lr"] for r in records] == [1e-5, 3e-6]
        assert len(adapters) == 7 * cfg.n_layers
        lines = [json.loads(l) for l in log.read_text().splitlines()]
        assert lines == records

    def test_adapter_passthrough_continues_training(self):
        cfg, params = self.make_model(seed=26)
        adapters = init_lora_adapters(params, seed=5)
        out, _ = dpo_train(params, cfg, [DpoStage(toy_pairs(), lr=1e-3)], CHAT_VOCAB,
                           DpoPlan(seed=5), adapters=adapters)
        assert out is adapters

    def test_overlength_pair_rejected(self):
        cfg, params = tiny_model(seed=27, vocab_size=len(CHAT_VOCAB), max_context=16)
        pair = PreferencePair(prompt("x" * 40), "yes", "no")
        with pytest.raises(ValueError):
            dpo_train(params, cfg, [DpoStage((pair,), lr=1e-4)], CHAT_VOCAB)

    def test_empty_stage_warns(self):
        cfg, params = self.make_model(seed=28)
        with pytest.warns(RuntimeWarning):
            _, records = dpo_train(params, cfg, [DpoStage((), lr=1e-4)], CHAT_VOCAB)
        assert records == []

    def test_plan_validation(self):
        for kwargs in ({"beta": 0.0}, {"batch_size": 0}, {"rank": 0}):
            with pytest.raises(ConfigError):
                DpoPlan(**kwargs)
        with pytest.raises(ConfigError):
            DpoStage(toy_pairs(), lr=0.0)
        with pytest.raises(ConfigError):
            DpoStage(toy_pairs(), lr=1e-5, epochs=0)


class TestPreferenceIO:
    def test_round_trip(self, tmp_path):
        records = [{"prompt_turns": [{"role": "user", "text": "qü"}],
                    "answers": [{"text": "a", "rank": 0}, {"text": "b", "rank": 1}],
                    "lang": "en"}]
        path = tmp_path / "prefs.jsonl"
        save_preference_records(records, path)
        assert load_preference_records(path) == records
