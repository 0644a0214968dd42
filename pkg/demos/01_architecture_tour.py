"""Tour of the decoder architecture: GQA, RoPE, sliding window, scaling.

Builds a pocket-sized model and demonstrates the properties that make the
architecture work: grouped key/value heads shrink the KV projections,
rotary embeddings make attention scores depend on relative position only,
the sliding window bounds how far information flows per layer, and the
parameter count has a closed form that reaches 1.8B at production shape.
"""

import dataclasses

import numpy as np

from deskllm.model import (ModelConfig, attention_mask, count_params,
                           forward, init_params, rope_rotate)
from deskllm.tensor import Tensor

config = ModelConfig(hidden_size=32, intermediate_size=48, n_layers=2,
                     n_heads=4, n_kv_heads=2, vocab_size=64, max_context=64,
                     sliding_window=4)
params = init_params(config, seed=0, dtype="f64")

print("== shapes: grouped-query attention ==")
layer = params.layers[0]
print(f"hidden {config.hidden_size}, {config.n_heads} query heads of "
      f"dim {config.head_dim}, {config.n_kv_heads} kv heads")
print(f"  wq {layer.wq.shape}   (hidden -> all query heads)")
print(f"  wk {layer.wk.shape}   (hidden -> kv heads only: "
      f"{config.n_heads // config.n_kv_heads} query heads share each)")
print(f"  wv {layer.wv.shape}")

print("\n== rotary embeddings encode relative position ==")
q = np.random.default_rng(1).normal(size=config.head_dim)
k = np.random.default_rng(2).normal(size=config.head_dim)


def score(p_q, p_k):
    rq = rope_rotate(Tensor(q[None, :]), [p_q], config.rope_theta).data[0]
    rk = rope_rotate(Tensor(k[None, :]), [p_k], config.rope_theta).data[0]
    return float(rq @ rk)


print(f"  score(q@2, k@0) = {score(2, 0):+.10f}")
print(f"  score(q@5, k@3) = {score(5, 3):+.10f}   (same gap, same score)")
print(f"  score(q@5, k@0) = {score(5, 0):+.10f}   (different gap)")

print("\n== sliding window bounds information flow ==")
rng = np.random.default_rng(3)
ids = rng.integers(0, config.vocab_size, size=12)
edited = ids.copy()
edited[0] = (edited[0] + 1) % config.vocab_size
base = forward(params, ids, config).data
bumped = forward(params, edited, config).data
reach = np.where(np.any(base != bumped, axis=1))[0]
horizon = config.n_layers * (config.sliding_window - 1)
print(f"  window {config.sliding_window}, {config.n_layers} layers: a token "
      f"can influence at most {horizon} positions ahead")
print(f"  editing position 0 changed logits at positions {reach.tolist()}")

print("\n== causal mask ==")
mask = attention_mask(6, config.sliding_window, "f64")
print((mask.data == 0).astype(int))
print("  rows attend only to themselves, the recent past, and never ahead")

print("\n== closed-form parameter count ==")
full = ModelConfig(hidden_size=2560, intermediate_size=6912, n_layers=24,
                   n_heads=32, n_kv_heads=8, vocab_size=32000)
print(f"  production shape: {count_params(full):,} parameters")
mha = dataclasses.replace(full, n_kv_heads=32)
print(f"  same shape with full kv heads: {count_params(mha):,}")
print(f"  grouped kv saves {count_params(mha) - count_params(full):,} "
      f"parameters and 4x the KV cache")
