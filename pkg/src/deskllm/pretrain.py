"""Staged pretraining loop: curriculum, cosine LR, clipping, JSONL logs.

The learning-rate schedule is evaluated after counting the current
batch into tokens_seen, so the first logged lr is peak * batch/warmup
rather than zero. Stage membership (and with it the training sequence
length) is decided from tokens_seen before each batch is drawn.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import reduce
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .data import DataStage, Document, pack_sequences, sample_mix
from .errors import ConfigError
from .model import ModelConfig, ModelParams, attention_mask, forward
from .optim import AdamW, LrSchedule, OptimHyper, clip_grad_norm, cosine_lr
from .tensor import Tensor, add, cross_entropy, mul, no_grad
from .tokenizer import Vocab, encode


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; the run was aborted."""


def no_decay_names(params: ModelParams) -> set[str]:
    """Norm weights are exempt from weight decay; everything else decays."""
    return {name for name in params.named_tensors() if "norm" in name}


@dataclass(frozen=True)
class TrainPlan:
    stages: Sequence[DataStage]
    schedule: LrSchedule
    hyper: OptimHyper = OptimHyper()
    batch_sequences: int = 4
    fp8: bool = False
    seed: int = 0
    max_steps: int | None = None
    val_every: int | None = None
    val_batches: int = 2

    def __post_init__(self):
        if not self.stages:
            raise ConfigError("plan needs at least one stage")
        if self.batch_sequences < 1:
            raise ConfigError(f"batch_sequences must be >= 1, got {self.batch_sequences}")
        if self.val_every is not None and self.val_every < 1:
            raise ConfigError(f"val_every must be >= 1, got {self.val_every}")

    @property
    def total_budget(self) -> float:
        return sum(stage.token_budget for stage in self.stages)


def batch_loss(params: ModelParams, config: ModelConfig, batch, *,
               fp8: bool = False, mask: Tensor | None = None) -> Tensor:
    """Mean cross-entropy over a batch of (window, targets) pairs.

    Every packed window scores the same number of positions, so the mean
    of per-sequence means equals the global per-position mean.
    """
    losses = [cross_entropy(forward(params, window, config, fp8=fp8, mask=mask), targets)
              for window, targets in batch]
    return mul(reduce(add, losses), 1.0 / len(losses))


def batch_grads(params: ModelParams, config: ModelConfig, batch, *,
                fp8: bool = False) -> dict[str, np.ndarray]:
    """Gradients of the mean batch loss, leaving params' grads cleared."""
    named = params.named_tensors()
    for t in named.values():
        t.zero_grad()
    batch_loss(params, config, batch, fp8=fp8).backward()
    out = {name: t.grad.copy() for name, t in named.items()}
    for t in named.values():
        t.zero_grad()
    return out


def shard_gradient_gap(params: ModelParams, config: ModelConfig, batch, k: int, *,
                       fp8: bool = False) -> float:
    """Max elementwise gap between whole-batch grads and the k-shard mean.

    This is the data-parallel correctness contract: averaging each
    shard's mean-loss gradient must reproduce the whole-batch gradient.
    """
    if len(batch) % k != 0:
        raise ValueError(f"batch of {len(batch)} not divisible into {k} shards")
    whole = batch_grads(params, config, batch, fp8=fp8)
    size = len(batch) // k
    shard_sums: dict[str, np.ndarray] = {name: np.zeros_like(g) for name, g in whole.items()}
    for i in range(k):
        shard = batch[i * size:(i + 1) * size]
        for name, g in batch_grads(params, config, shard, fp8=fp8).items():
            shard_sums[name] += g
    return max(float(np.max(np.abs(whole[name] - shard_sums[name] / k)))
               for name in whole)


class Trainer:
    """Drives the staged loop over a named-source document corpus."""

    def __init__(self, params: ModelParams, config: ModelConfig, plan: TrainPlan,
                 sources: Mapping[str, Sequence[Document]], vocab: Vocab,
                 val_sources: Mapping[str, Sequence[Document]] | None = None,
                 log_path=None):
        if vocab.eos_id is None:
            raise ConfigError("training requires a vocab with an eos token")
        if len(vocab) > config.vocab_size:
            raise ConfigError(
                f"vocab size {len(vocab)} exceeds model vocab {config.vocab_size}")
        self.params = params
        self.config = config
        self.plan = plan
        self.sources = sources
        self.vocab = vocab
        self.val_sources = val_sources
        self.log_path = Path(log_path) if log_path is not None else None
        self.opt = AdamW(params.named_tensors(), plan.hyper,
                         no_decay=no_decay_names(params))
        self.tokens_seen = 0
        self.step = 0
        self.records: list[dict] = []
        self._stage_index = -1
        self._stream = None
        self._val_set: list = []
        self._masks: dict[int, Tensor] = {}

    def _mask(self, seq_len: int) -> Tensor:
        if seq_len not in self._masks:
            self._masks[seq_len] = attention_mask(seq_len, self.config.sliding_window,
                                                  dtype=self.params.dtype)
        return self._masks[seq_len]

    def _packed_stream(self, stage: DataStage, sources, seed: int):
        docs = sample_mix(stage, sources, seed=seed)
        tokens = (encode(doc.text, self.vocab) for doc in docs)
        return pack_sequences(tokens, stage.seq_len, self.vocab.eos_id)

    def _enter_stage(self, index: int, stage: DataStage) -> None:
        self._stage_index = index
        self._stream = self._packed_stream(stage, self.sources,
                                           seed=self.plan.seed + 7919 * index)
        self._val_set = []
        if self.val_sources is not None:
            val_stream = self._packed_stream(stage, self.val_sources,
                                             seed=self.plan.seed + 7919 * index + 1)
            n = self.plan.val_batches * self.plan.batch_sequences
            self._val_set = [next(val_stream) for _ in range(n)]

    def _current_stage(self) -> tuple[int, DataStage]:
        stages = self.plan.stages
        start = 0.0
        for i, stage in enumerate(stages):
            end = start + stage.token_budget
            if self.tokens_seen < end:
                return i, stage
            start = end
        return len(stages) - 1, stages[-1]

    def _val_loss(self) -> float | None:
        if not self._val_set:
            return None
        stage = self.plan.stages[self._stage_index]
        with no_grad():
            loss = batch_loss(self.params, self.config, self._val_set,
                              fp8=self.plan.fp8, mask=self._mask(stage.seq_len))
        return float(loss.item())

    def train_step(self, batch, seq_len: int) -> dict:
        """One optimization step on an explicit batch; returns the log record."""
        self.opt.zero_grad()
        loss = batch_loss(self.params, self.config, batch, fp8=self.plan.fp8,
                          mask=self._mask(seq_len))
        train_loss = float(loss.item())
        if not np.isfinite(train_loss):
            raise TrainingDiverged(f"step {self.step}: loss is {train_loss}")
        loss.backward()
        clip_grad_norm(self.opt.grads(), self.plan.hyper.clip_norm)
        self.tokens_seen += sum(len(window) for window, _ in batch)
        lr = cosine_lr(self.tokens_seen, self.plan.schedule)
        self.opt.step(lr)
        self.opt.zero_grad()
        self.step += 1
        record = {"step": self.step, "tokens_seen": self.tokens_seen, "lr": lr,
                  "seq_len": seq_len, "train_loss": train_loss}
        return record

    def _emit(self, record: dict) -> None:
        self.records.append(record)
        if self.log_path is not None:
            with self.log_path.open("a", encoding="utf-8") as f:
                f.write(json.dumps(record) + "\n")

    def run(self, max_steps: int | None = None) -> list[dict]:
        """Train until the total token budget (or a step cap) is reached."""
        cap = max_steps if max_steps is not None else self.plan.max_steps
        while self.tokens_seen < self.plan.total_budget:
            if cap is not None and self.step >= cap:
                break
            index, stage = self._current_stage()
            if index != self._stage_index:
                self._enter_stage(index, stage)
            batch = [next(self._stream) for _ in range(self.plan.batch_sequences)]
            record = self.train_step(batch, stage.seq_len)
            if (self.plan.val_every is not None
                    and self.step % self.plan.val_every == 0):
                val = self._val_loss()
                if val is not None:
                    record["val_loss"] = val
            self._emit(record)
        return self.records
