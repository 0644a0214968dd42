"""Staged pre-training: token budgets, a length curriculum, cosine decay.

Trains a pocket model on a synthetic digit-word corpus through two stages
that double the sequence length midway, the same shape as the production
recipe's 2048 -> 16384 staircase. The log shows the stage switch, the
token-denominated learning-rate schedule, and the loss falling from the
uniform baseline ln(vocab) toward the corpus entropy.
"""

import math

import numpy as np

from deskllm.data import DataStage, Document
from deskllm.model import ModelConfig, init_params
from deskllm.optim import LrSchedule, OptimHyper, cosine_lr
from deskllm.pretrain import Trainer, TrainPlan
from deskllm.tokenizer import Vocab

config = ModelConfig(hidden_size=32, intermediate_size=48, n_layers=2,
                     n_heads=4, n_kv_heads=2, vocab_size=64, max_context=64)
vocab = Vocab([bytes([i]) for i in range(64)], eos_id=0)

rng = np.random.default_rng(42)
words = ["01", "234", "5678", "99", "314", "27"]
docs = []
for _ in range(400):
    text = " ".join(words[i] for i in rng.integers(0, len(words), size=20)) + "."
    docs.append(Document(text=text, source="synthetic"))

stages = (
    DataStage(token_budget=8192, mix={"synthetic": 1.0}, seq_len=16),
    DataStage(token_budget=8192, mix={"synthetic": 1.0}, seq_len=32),
)
plan = TrainPlan(
    stages=stages,
    schedule=LrSchedule(warmup_tokens=1638, total_tokens=16384,
                        peak_lr=3e-3, min_lr=3e-4),
    hyper=OptimHyper(),
    batch_sequences=4,
    seed=0,
)

print(f"uniform baseline: ln({config.vocab_size}) = "
      f"{math.log(config.vocab_size):.4f}")
print(f"budget: {int(plan.total_budget)} tokens in {len(stages)} stages, "
      f"seq_len {[s.seq_len for s in stages]}")
print()

params = init_params(config, seed=0, dtype="f64")
trainer = Trainer(params, config, plan, {"synthetic": docs}, vocab)
records = trainer.run()

shown = set()
for rec in records:
    stage_len = rec["seq_len"]
    milestone = rec["step"] % 32 == 0 or rec["step"] == 1
    if stage_len not in shown:
        print(f"-- stage switch: seq_len {stage_len} --")
        shown.add(stage_len)
    if milestone:
        print(f"step {rec['step']:4d}  tokens {rec['tokens_seen']:6d}  "
              f"lr {rec['lr']:.5f}  loss {rec['train_loss']:.4f}")

first, last = records[0]["train_loss"], records[-1]["train_loss"]
print(f"\nloss {first:.4f} -> {last:.4f} over {len(records)} steps")

print("\nschedule checkpoints (warmup peak, cosine fall, floor):")
for tokens in (0, 819, 1638, 8192, 16384):
    print(f"  tokens {tokens:6d}: lr {cosine_lr(tokens, plan.schedule):.6f}")
