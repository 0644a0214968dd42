"""Eight-bit floats, emulated exactly: the E4M3 grid and training on it.

E4M3 spends 4 bits on exponent and 3 on mantissa, giving 253 distinct
finite values up to 448. The emulation rounds matmul inputs to that grid
(round-to-nearest-even) while keeping accumulation and everything else in
the working precision, mirroring hardware that multiplies in 8 bits and
accumulates wide. The demo walks the grid, shows saturation and the
worst-case relative step, and trains the same tiny model with and without
quantized matmuls.
"""

import numpy as np

from deskllm.data import DataStage, Document
from deskllm.fp8 import E4M3_MAX, fp8_e4m3
from deskllm.model import ModelConfig, init_params
from deskllm.optim import LrSchedule, OptimHyper
from deskllm.pretrain import Trainer, TrainPlan
from deskllm.tokenizer import Vocab

print("== the E4M3 grid ==")
codes = set()
for exp_field in range(16):
    for mant in range(8):
        if exp_field == 15 and mant == 7:
            continue  # the lone NaN code
        if exp_field == 0:
            v = (mant / 8.0) * 2.0 ** -6  # subnormals
        else:
            v = (1.0 + mant / 8.0) * 2.0 ** (exp_field - 7)
        codes.add(v)
        codes.add(-v)
codes = np.array(sorted(codes))
print(f"{codes.size} finite values, max {codes.max()} (= E4M3_MAX "
      f"{E4M3_MAX}), smallest positive {codes[codes > 0].min():.2e}")
print(f"all round-trip exactly: {np.array_equal(fp8_e4m3(codes), codes)}")

print("\nvalues around 1.0 (spacing is 1/8 of the binade):")
window = codes[(codes >= 0.8125) & (codes <= 2.25)]
print(" ", window.tolist())

print("\n== rounding and saturation ==")
probes = [1.05, 1.0625, 3.14159, 447.9, 448.0, 450.0, 1e9, -1e9]
for x in probes:
    print(f"  {x:12g} -> {float(fp8_e4m3(np.array(x))):8g}")
print("(1.0625 sits exactly between 1.0 and 1.125: ties go to the even "
      "mantissa, 1.0)")

rng = np.random.default_rng(0)
x = np.exp(rng.uniform(np.log(2.0 ** -6), np.log(448.0), size=100_000))
rel = np.abs(fp8_e4m3(x) - x) / x
print(f"\nworst relative error over the normal range: {rel.max():.5f} "
      f"<= 2^-4 = {2.0 ** -4}")

print("\n== training with quantized matmuls ==")
config = ModelConfig(hidden_size=32, intermediate_size=48, n_layers=2,
                     n_heads=4, n_kv_heads=2, vocab_size=64, max_context=64)
vocab = Vocab([bytes([i]) for i in range(64)], eos_id=0)
words = ["012", "345", "678", "9"]
docs = [Document(" ".join(words[i] for i in rng.integers(0, 4, size=18)),
                 "s") for _ in range(300)]


def train(fp8: bool) -> list[dict]:
    plan = TrainPlan(
        stages=(DataStage(token_budget=8192, mix={"s": 1.0}, seq_len=32),),
        schedule=LrSchedule(warmup_tokens=819, total_tokens=8192,
                            peak_lr=3e-3, min_lr=3e-4),
        hyper=OptimHyper(), batch_sequences=4, fp8=fp8, seed=0)
    params = init_params(config, seed=0, dtype="f64")
    return Trainer(params, config, plan, {"s": docs}, vocab).run()


exact = train(fp8=False)
quant = train(fp8=True)
print(f"{'step':>6} {'full precision':>16} {'fp8 matmuls':>14}")
for i in sorted({0, 15, 31, len(exact) - 1}):
    print(f"{exact[i]['step']:6d} {exact[i]['train_loss']:16.4f} "
          f"{quant[i]['train_loss']:14.4f}")
print("the trajectories track closely; the gradient flows through the "
      "rounded values as if rounding were identity (straight-through)")
