"""Training-loop tests: schedule wiring, logs, curriculum, shard equivalence."""

from __future__ import annotations

import json

import numpy as np
import pytest

from deskllm.data import DataStage, Document
from deskllm.errors import ConfigError
from deskllm.optim import LrSchedule, OptimHyper
from deskllm.pretrain import (
    TrainPlan,
    Trainer,
    TrainingDiverged,
    batch_grads,
    batch_loss,
    no_decay_names,
    shard_gradient_gap,
)
from deskllm.tokenizer import byte_fallback_vocab, encode
from deskllm.tensor import IGNORE_INDEX

from modelutil import tiny_model

VOCAB = byte_fallback_vocab()


def make_sources(n_docs=8):
    texts = ["the cat sat on the mat", "a quick brown fox", "pack my box",
             "hello world again", "numbers 123 and 456", "short", "x" * 30,
             "the end of the corpus"]
    docs = [Document(texts[i % len(texts)], "web") for i in range(n_docs)]
    return {"web": docs}


def stage(seq_len=8, budget=1e9, mix=None):
    return DataStage(token_budget=budget, mix=mix or {"web": 1.0}, seq_len=seq_len)


def make_trainer(params=None, cfg=None, stages=None, log_path=None, val=False,
                 **plan_kw):
    if cfg is None:
        cfg, params = tiny_model(seed=0, vocab_size=len(VOCAB))
    plan_defaults = dict(
        stages=stages or [stage()],
        schedule=LrSchedule(warmup_tokens=1000, total_tokens=1_000_000,
                            peak_lr=2e-4, min_lr=1e-5),
        hyper=OptimHyper(),
        batch_sequences=2,
        seed=0,
    )
    plan_defaults.update(plan_kw)
    plan = TrainPlan(**plan_defaults)
    return Trainer(params, cfg, plan, make_sources(), VOCAB,
                   val_sources=make_sources(4) if val else None,
                   log_path=log_path), cfg, params


def fixed_batch(cfg, seq_len=8, n=2, seed=0):
    rng = np.random.default_rng(seed)
    batch = []
    for _ in range(n):
        window = rng.integers(0, min(cfg.vocab_size, 200), seq_len)
        targets = np.concatenate([window[1:], [IGNORE_INDEX]])
        batch.append((window, targets))
    return batch


class TestTrainStep:
    def test_first_record_lr_is_warmup_line(self):
        trainer, cfg, _ = make_trainer()
        records = trainer.run(max_steps=1)
        batch_tokens = 2 * 8
        assert records[0]["lr"] == pytest.approx(2e-4 * batch_tokens / 1000, rel=1e-12)
        assert records[0]["tokens_seen"] == batch_tokens
        assert records[0]["step"] == 1

    def test_loss_decreases_on_repeated_batch(self):
        trainer, cfg, _ = make_trainer(
            schedule=LrSchedule(warmup_tokens=16, total_tokens=1e9,
                                peak_lr=1e-2, min_lr=1e-3))
        batch = fixed_batch(cfg)
        losses = [trainer.train_step(batch, seq_len=8)["train_loss"]
                  for _ in range(50)]
        assert losses[-1] < 0.5 * losses[0]
        drops = np.diff(losses) < 0
        assert drops.mean() > 0.9
        assert losses[-1] == min(losses)

    def test_nonfinite_loss_aborts_with_diagnostic(self):
        trainer, cfg, params = make_trainer()
        params.token_embedding.data[: ] = np.nan
        with pytest.raises(TrainingDiverged):
            trainer.train_step(fixed_batch(cfg), seq_len=8)

    def test_fp8_step_runs_and_is_finite(self):
        trainer, cfg, _ = make_trainer(fp8=True)
        batch = fixed_batch(cfg)
        for _ in range(3):
            record = trainer.train_step(batch, seq_len=8)
            assert np.isfinite(record["train_loss"])


class TestRunLoop:
    def test_seq_len_staircase(self):
        stages = [stage(seq_len=4, budget=64), stage(seq_len=8, budget=64)]
        trainer, _, _ = make_trainer(stages=stages)
        records = trainer.run()
        seq_lens = [r["seq_len"] for r in records]
        assert seq_lens == [4] * 8 + [8] * 4
        assert records[-1]["tokens_seen"] == 128
        assert all(a <= b for a, b in zip(seq_lens, seq_lens[1:]))

    def test_budget_terminates_run(self):
        trainer, _, _ = make_trainer(stages=[stage(seq_len=8, budget=32)])
        records = trainer.run()
        assert len(records) == 2
        assert records[-1]["tokens_seen"] == 32

    def test_log_file_and_schema(self, tmp_path):
        log = tmp_path / "train.jsonl"
        trainer, _, _ = make_trainer(stages=[stage(seq_len=8, budget=48)],
                                     log_path=log)
        records = trainer.run()
        lines = log.read_text().splitlines()
        assert [json.loads(line) for line in lines] == records
        for i, r in enumerate(records):
            assert set(r) == {"step", "tokens_seen", "lr", "seq_len", "train_loss"}
            assert r["step"] == i + 1

    def test_validation_logged_at_interval(self):
        trainer, _, _ = make_trainer(stages=[stage(seq_len=8, budget=96)],
                                     val=True, val_every=2)
        records = trainer.run()
        for r in records:
            if r["step"] % 2 == 0:
                assert "val_loss" in r and np.isfinite(r["val_loss"])
            else:
                assert "val_loss" not in r

    def test_rerun_is_bitwise_identical(self):
        runs = []
        for _ in range(2):
            trainer, _, _ = make_trainer(stages=[stage(seq_len=8, budget=64)],
                                         val=True, val_every=3)
            runs.append(trainer.run())
        assert runs[0] == runs[1]

    def test_step_cap(self):
        trainer, _, _ = make_trainer(max_steps=3)
        assert len(trainer.run()) == 3


class TestShardEquivalence:
    def test_shard_means_match_whole_batch(self):
        cfg, params = tiny_model(seed=1, vocab_size=64)
        batch = fixed_batch(cfg, seq_len=8, n=4, seed=2)
        assert shard_gradient_gap(params, cfg, batch, k=1) == 0.0
        assert shard_gradient_gap(params, cfg, batch, k=2) < 1e-10
        assert shard_gradient_gap(params, cfg, batch, k=4) < 1e-10

    def test_indivisible_batch_rejected(self):
        cfg, params = tiny_model(seed=1, vocab_size=64)
        with pytest.raises(ValueError):
            shard_gradient_gap(params, cfg, fixed_batch(cfg, n=3), k=2)

    def test_batch_grads_leaves_grads_clear(self):
        cfg, params = tiny_model(seed=3, vocab_size=64)
        grads = batch_grads(params, cfg, fixed_batch(cfg))
        assert set(grads) == set(params.named_tensors())
        assert all(t.grad is None for t in params.named_tensors().values())


class TestWiring:
    def test_no_decay_covers_exactly_norms(self):
        cfg, params = tiny_model(seed=0, vocab_size=64)
        names = no_decay_names(params)
        assert "final_norm" in names
        assert "layers.0.norm_attn" in names
        assert "layers.1.norm_mlp" in names
        assert all("norm" in n for n in names)
        assert "token_embedding" not in names
        assert len(names) == 2 * cfg.n_layers + 1

    def test_vocab_without_eos_rejected(self):
        cfg, params = tiny_model(seed=0, vocab_size=300)
        plan = TrainPlan(stages=[stage()], schedule=LrSchedule(1000, 1e6))
        with pytest.raises(ConfigError):
            Trainer(params, cfg, plan, make_sources(),
                    byte_fallback_vocab(specials=False))

    def test_vocab_larger_than_model_rejected(self):
        cfg, params = tiny_model(seed=0, vocab_size=64)
        plan = TrainPlan(stages=[stage()], schedule=LrSchedule(1000, 1e6))
        with pytest.raises(ConfigError):
            Trainer(params, cfg, plan, make_sources(), VOCAB)

    def test_plan_validation(self):
        sched = LrSchedule(1000, 1e6)
        with pytest.raises(ConfigError):
            TrainPlan(stages=[], schedule=sched)
        with pytest.raises(ConfigError):
            TrainPlan(stages=[stage()], schedule=sched, batch_sequences=0)
        with pytest.raises(ConfigError):
            TrainPlan(stages=[stage()], schedule=sched, val_every=0)

    def test_batch_loss_matches_manual_mean(self):
        cfg, params = tiny_model(seed=4, vocab_size=64)
        batch = fixed_batch(cfg, n=3, seed=5)
        from deskllm.model import forward
        from deskllm.tensor import cross_entropy
        manual = np.mean([cross_entropy(forward(params, w, cfg), t).item()
                          for w, t in batch])
        assert batch_loss(params, cfg, batch).item() == pytest.approx(manual, rel=1e-12)
