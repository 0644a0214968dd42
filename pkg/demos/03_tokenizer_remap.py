"""Swapping the vocabulary under a trained model without starting over.

A model trained with one tokenizer can adopt another: token byte strings
present in both vocabularies keep their embedding rows and output-head
columns bit for bit, and only genuinely new tokens get fresh random
vectors. The demo trains briefly, remaps to an extended vocabulary, shows
that shared-token predictions are preserved, then fine-tunes the handful
of new rows into place.
"""

import dataclasses

import numpy as np

from deskllm.data import DataStage, Document
from deskllm.model import ModelConfig, forward, init_params
from deskllm.optim import LrSchedule, OptimHyper
from deskllm.pretrain import Trainer, TrainPlan
from deskllm.tensor import no_grad
from deskllm.tokenizer import Vocab, encode, remap_embeddings

rng = np.random.default_rng(0)

old_vocab = Vocab([bytes([i]) for i in range(64)], eos_id=0)
config = ModelConfig(hidden_size=32, intermediate_size=48, n_layers=2,
                     n_heads=4, n_kv_heads=2, vocab_size=64, max_context=64)
params = init_params(config, seed=0, dtype="f64")

docs = [Document(text=" ".join("0123 45 678 9".split()[i] for i in
                               rng.integers(0, 4, size=20)),
                 source="s") for _ in range(200)]
plan = TrainPlan(
    stages=(DataStage(token_budget=6144, mix={"s": 1.0}, seq_len=24),),
    schedule=LrSchedule(warmup_tokens=614, total_tokens=6144,
                        peak_lr=3e-3, min_lr=3e-4),
    hyper=OptimHyper(), batch_sequences=4, seed=0)
records = Trainer(params, config, plan, {"s": docs}, old_vocab).run()
print(f"trained {len(records)} steps, loss "
      f"{records[0]['train_loss']:.3f} -> {records[-1]['train_loss']:.3f}")

# New vocabulary: all old byte tokens plus merged word tokens (and the
# intermediate pairs the merge chain passes through).
new_tokens = [bytes([i]) for i in range(64)]
new_tokens += [b"01", b"23", b"0123", b"45", b"67", b"678"]
new_vocab = Vocab(new_tokens, eos_id=0,
                  merges=[(b"0", b"1"), (b"2", b"3"), (b"4", b"5"),
                          (b"6", b"7"), (b"01", b"23"), (b"67", b"8")])

embedding, head, matched = remap_embeddings(
    old_vocab, new_vocab, params.token_embedding, params.lm_head,
    init_std=config.init_std, seed=1)
new_config = dataclasses.replace(config, vocab_size=len(new_vocab))
new_params = dataclasses.replace(params, token_embedding=embedding,
                                 lm_head=head)
print(f"\nremap: {len(old_vocab)} -> {len(new_vocab)} tokens, "
      f"{matched} vectors carried over, {len(new_vocab) - matched} fresh")

ids = np.array(encode("9 9 9", old_vocab))
with no_grad():
    old_logits = forward(params, ids, config).data
    new_logits = forward(new_params, ids, new_config).data
shared = np.array_equal(old_logits, new_logits[:, :64])
print(f"logits over shared tokens preserved bitwise: {shared}")
print(f"new-token logits finite: {bool(np.all(np.isfinite(new_logits)))}")

old_ids = encode("0123 45", old_vocab)
new_ids = encode("0123 45", new_vocab)
print(f"\n'0123 45' under old vocab: {len(old_ids)} tokens {old_ids}")
print(f"'0123 45' under new vocab: {len(new_ids)} tokens {new_ids}")

plan2 = TrainPlan(
    stages=(DataStage(token_budget=3072, mix={"s": 1.0}, seq_len=24),),
    schedule=LrSchedule(warmup_tokens=307, total_tokens=3072,
                        peak_lr=1e-3, min_lr=1e-4),
    hyper=OptimHyper(), batch_sequences=4, seed=2)
records2 = Trainer(new_params, new_config, plan2, {"s": docs},
                   new_vocab).run()
print(f"\ncontinued training on the new vocab: loss "
      f"{records2[0]['train_loss']:.3f} -> {records2[-1]['train_loss']:.3f}")
print("(shorter sequences now: the word tokens compress the corpus)")
