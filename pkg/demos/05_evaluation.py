"""The evaluation harness: perplexity, multiple choice, and generation.

Shows the three measurement modes on a small trained model: corpus
perplexity computed over training-style packed windows, multiple-choice
scoring where raw log-probability and byte-length-normalized
log-probability can disagree, and greedy decoding with the repetition
penalty that divides positive logits and multiplies negative ones.
"""

import numpy as np

from deskllm.data import DataStage, Document
from deskllm.evals import (MCTask, apply_repetition_penalty, few_shot_render,
                           generate_text, mc_pick, mc_score, perplexity)
from deskllm.model import ModelConfig, init_params
from deskllm.optim import LrSchedule, OptimHyper
from deskllm.pretrain import Trainer, TrainPlan
from deskllm.tokenizer import Vocab, encode

config = ModelConfig(hidden_size=32, intermediate_size=48, n_layers=2,
                     n_heads=4, n_kv_heads=2, vocab_size=64, max_context=64)
vocab = Vocab([bytes([i]) for i in range(64)], eos_id=0)
params = init_params(config, seed=0, dtype="f64")

rng = np.random.default_rng(7)
words = ["012", "345", "678", "9"]
docs = [Document(" ".join(words[i] for i in rng.integers(0, 4, size=18)),
                 "s") for _ in range(300)]
plan = TrainPlan(
    stages=(DataStage(token_budget=12288, mix={"s": 1.0}, seq_len=32),),
    schedule=LrSchedule(warmup_tokens=1228, total_tokens=12288,
                        peak_lr=3e-3, min_lr=3e-4),
    hyper=OptimHyper(), batch_sequences=4, seed=0)
Trainer(params, config, plan, {"s": docs}, vocab).run()

print("== perplexity over packed windows ==")
held_out = [encode(d.text, vocab) for d in docs[:40]]
ppl = perplexity(params, config, held_out, seq_len=32, eos_id=0)
print(f"trained model: {ppl:.3f}")
fresh = init_params(config, seed=9, dtype="f64")
print(f"untrained model: {perplexity(fresh, config, held_out, 32, 0):.3f} "
      f"(~vocab size {config.vocab_size}, as expected at uniform)")

print("\n== multiple choice: raw vs length-normalized ==")
# Fixture log-probs: the short choice wins on raw sum, the long one per byte.
pick, pick_norm = mc_pick([-1.0, -2.0], ["9", "012 345"])
print("choices ['9', '012 345'] with log-probs [-1.0, -2.0]:")
print(f"  raw pick: choice {pick} ('9')      -1.0 > -2.0")
print(f"  normalized pick: choice {pick_norm} ('012 345')  "
      f"-2.0/7 bytes > -1.0/1 byte")

task = MCTask(question="012", choices=["345", "9 9 9"], gold=0,
              exemplars=(("678", "9"), ("012", "345")))
result = mc_score(params, config, task, vocab, k=0)
print(f"model on continuation task: pick {result['acc_pick']}, "
      f"normalized pick {result['acc_norm_pick']}, "
      f"log-probs {[round(v, 2) for v in result['logprobs']]}")

print("\n== few-shot prompts ==")
print(repr(few_shot_render(task, k=2, seed=0)))
print("(exemplar blocks joined by a blank line, order seeded)")

print("\n== repetition penalty arithmetic ==")
logits = np.array([2.0, -1.0, 0.5])
adjusted = apply_repetition_penalty(logits, token_ids=[0, 1], penalty=1.1)
print(f"logits {logits.tolist()} with tokens 0 and 1 already seen:")
print(f"  -> {[round(v, 4) for v in adjusted.tolist()]}  "
      f"(2.0/1.1, -1.0*1.1, untouched)")

print("\n== greedy generation ==")
text = generate_text(params, config, "012 ", vocab, max_new=24,
                     temperature=0.0, repetition_penalty=1.1)
print(f"prompt '012 ' -> {text!r}")
again = generate_text(params, config, "012 ", vocab, max_new=24,
                      temperature=0.0, repetition_penalty=1.1)
print(f"rerun identical: {text == again}")
sampled = generate_text(params, config, "012 ", vocab, max_new=24,
                        temperature=0.8, repetition_penalty=1.1, seed=3)
print(f"temperature 0.8, seed 3 -> {sampled!r}")
