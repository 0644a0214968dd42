"""Preference alignment: LoRA adapters, the DPO loss, and its training loop.

The policy is the base model plus low-rank adapters on every attention
and MLP linear; the reference is the same model with the adapters off,
so it is frozen by construction and costs no copy. Reference response
log-probs are computed once per pair and cached as plain floats.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from functools import reduce
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .chat import (Conversation, END_MARKER, ROLE_MARKERS, Turn, _marker_ids,
                   render_chat)
from .errors import ConfigError
from .model import LayerParams, LoraAdapter, ModelConfig, ModelParams, forward, linear
from .optim import AdamW, OptimHyper, clip_grad_norm
from .tensor import (IGNORE_INDEX, Tensor, add, cross_entropy, log_sigmoid, mul, neg,
                     no_grad)
from .tokenizer import Vocab, encode

LORA_INIT_STD = 0.02


def lora_target_names(params: ModelParams) -> list[str]:
    """Attention and MLP linear weights, the adapter target set."""
    return [name for name in params.named_tensors()
            if ".attn." in name or ".mlp." in name]


def init_lora_adapters(params: ModelParams, rank: int = 4, alpha: float = 16.0,
                       seed: int = 0) -> dict[str, LoraAdapter]:
    """One adapter per target linear: A ~ N(0, 0.02), B = 0."""
    if rank < 1:
        raise ConfigError(f"rank must be >= 1, got {rank}")
    rng = np.random.default_rng(seed)
    named = params.named_tensors()
    adapters: dict[str, LoraAdapter] = {}
    for name in lora_target_names(params):
        w = named[name]
        d_in, d_out = w.shape
        a = rng.normal(0.0, LORA_INIT_STD, size=(d_in, rank)).astype(w.dtype)
        b = np.zeros((rank, d_out), dtype=w.dtype)
        adapters[name] = LoraAdapter(a=Tensor(a, requires_grad=True),
                                     b=Tensor(b, requires_grad=True), alpha=alpha)
    return adapters


def lora_forward(x: Tensor, w: Tensor, adapter: LoraAdapter) -> Tensor:
    """Base linear plus the scaled low-rank delta."""
    return linear(x, w, adapter=adapter)


def lora_merge(params: ModelParams, adapters: dict[str, LoraAdapter]) -> ModelParams:
    """New parameters with each adapter folded into its base weight."""
    named = params.named_tensors()
    unknown = set(adapters) - set(named)
    if unknown:
        raise ConfigError(f"adapters target unknown tensors: {sorted(unknown)}")

    def fold(name: str) -> Tensor:
        base = named[name].data
        adapter = adapters.get(name)
        if adapter is None:
            return Tensor(base.copy())
        if adapter.a.shape[0] != base.shape[0] or adapter.b.shape[1] != base.shape[1]:
            raise ConfigError(f"adapter shape mismatch on {name}")
        delta = adapter.scale * (adapter.a.data.astype(np.float64)
                                 @ adapter.b.data.astype(np.float64))
        return Tensor((base.astype(np.float64) + delta).astype(base.dtype))

    layers = [LayerParams(wq=fold(f"layers.{i}.attn.wq"), wk=fold(f"layers.{i}.attn.wk"),
                          wv=fold(f"layers.{i}.attn.wv"), wo=fold(f"layers.{i}.attn.wo"),
                          w_gate=fold(f"layers.{i}.mlp.w_gate"),
                          w_up=fold(f"layers.{i}.mlp.w_up"),
                          w_down=fold(f"layers.{i}.mlp.w_down"),
                          norm_attn=fold(f"layers.{i}.norm_attn"),
                          norm_mlp=fold(f"layers.{i}.norm_mlp"))
              for i in range(len(params.layers))]
    return ModelParams(token_embedding=fold("token_embedding"), layers=layers,
                       final_norm=fold("final_norm"), lm_head=fold("lm_head"))


def _scalar_list(x) -> list:
    if isinstance(x, (Tensor, float, int)):
        return [x]
    return list(x)


def dpo_loss(policy_lp_c, policy_lp_r, ref_lp_c, ref_lp_r, beta: float = 0.2) -> Tensor:
    """Batch-mean of -log sigmoid(beta * (policy margin - reference margin))."""
    plc, plr = _scalar_list(policy_lp_c), _scalar_list(policy_lp_r)
    rlc, rlr = _scalar_list(ref_lp_c), _scalar_list(ref_lp_r)
    if not plc or not len(plc) == len(plr) == len(rlc) == len(rlr):
        raise ValueError("dpo_loss needs four equal-length nonempty batches")
    if beta <= 0:
        raise ConfigError(f"beta must be positive, got {beta}")
    terms = [neg(log_sigmoid(mul((c - rc) - (r - rr), beta)))
             for c, r, rc, rr in zip(plc, plr, rlc, rlr)]
    return mul(reduce(add, terms), 1.0 / len(terms))


def sequence_logprob(params: ModelParams, config: ModelConfig, prompt_ids,
                     response_ids, *, adapters=None, fp8: bool = False) -> Tensor:
    """Summed log-probability of the response tokens given the prompt."""
    prompt = np.asarray(prompt_ids, dtype=np.int64)
    response = np.asarray(response_ids, dtype=np.int64)
    if prompt.ndim != 1 or prompt.size == 0:
        raise ValueError("prompt must be a nonempty 1-D id sequence")
    if response.ndim != 1:
        raise ValueError("response must be a 1-D id sequence")
    if response.size == 0:
        return Tensor(np.zeros((), dtype=params.dtype))
    total = prompt.size + response.size
    if total > config.max_context:
        raise ValueError(f"prompt+response of {total} tokens exceeds context "
                         f"{config.max_context}")
    full = np.concatenate([prompt, response])
    inputs = full[:-1]
    targets = np.full(inputs.size, IGNORE_INDEX, dtype=np.int64)
    targets[prompt.size - 1:] = response
    logits = forward(params, inputs, config, adapters=adapters, fp8=fp8)
    mean_nll = cross_entropy(logits, targets)
    return mul(mean_nll, -float(response.size))


@dataclass(frozen=True)
class PreferencePair:
    prompt: Conversation
    chosen: str
    rejected: str

    def __post_init__(self):
        if self.prompt.turns[-1].role != "user":
            raise ValueError("preference prompt must end with a user turn")
        if self.chosen == self.rejected:
            raise ValueError("chosen and rejected responses must differ")


def build_preference_pairs(records: Iterable[dict], language: str = "en") -> list[PreferencePair]:
    """Rank-based pairs: chosen = lowest rank, rejected = highest, ties to
    the first-listed answer; non-matching languages and all-equal ranks drop."""
    pairs: list[PreferencePair] = []
    for rec in records:
        if rec.get("lang") != language:
            continue
        answers = rec["answers"]
        if len(answers) < 2:
            continue
        ranks = [int(a["rank"]) for a in answers]
        if min(ranks) == max(ranks):
            continue
        chosen = answers[ranks.index(min(ranks))]["text"]
        rejected = answers[ranks.index(max(ranks))]["text"]
        if chosen == rejected:
            continue
        prompt = Conversation(tuple(Turn(t["role"], t["text"])
                                    for t in rec["prompt_turns"]))
        pairs.append(PreferencePair(prompt, chosen, rejected))
    return pairs


def render_pair(pair: PreferencePair, vocab: Vocab) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Prompt ids (through the assistant marker) and both response id arrays."""
    ids, _ = render_chat(pair.prompt, vocab)
    head = np.array(_marker_ids(ROLE_MARKERS["assistant"], vocab), dtype=np.int64)
    prompt_ids = np.concatenate([ids, head])
    end = _marker_ids(END_MARKER, vocab)
    chosen = np.array(encode(pair.chosen, vocab) + end, dtype=np.int64)
    rejected = np.array(encode(pair.rejected, vocab) + end, dtype=np.int64)
    return prompt_ids, chosen, rejected


@dataclass(frozen=True)
class DpoStage:
    pairs: tuple[PreferencePair, ...]
    lr: float
    epochs: int = 1

    def __post_init__(self):
        object.__setattr__(self, "pairs", tuple(self.pairs))
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")


def two_stage_plan(general_pairs: Sequence[PreferencePair],
                   curated_pairs: Sequence[PreferencePair],
                   epochs: int = 1) -> tuple[DpoStage, DpoStage]:
    """The published recipe: general pairs at 1e-5, curated pairs at 3e-6."""
    return (DpoStage(tuple(general_pairs), lr=1e-5, epochs=epochs),
            DpoStage(tuple(curated_pairs), lr=3e-6, epochs=epochs))


@dataclass(frozen=True)
class DpoPlan:
    beta: float = 0.2
    rank: int = 4
    alpha: float = 16.0
    batch_size: int = 2
    hyper: OptimHyper = field(default_factory=lambda: OptimHyper(weight_decay=0.0))
    seed: int = 0

    def __post_init__(self):
        if self.beta <= 0:
            raise ConfigError(f"beta must be positive, got {self.beta}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.rank < 1:
            raise ConfigError(f"rank must be >= 1, got {self.rank}")


def dpo_train(params: ModelParams, config: ModelConfig, stages: Sequence[DpoStage],
              vocab: Vocab, plan: DpoPlan | None = None, log_path=None,
              adapters: dict[str, LoraAdapter] | None = None
              ) -> tuple[dict[str, LoraAdapter], list[dict]]:
    """Train one shared adapter set across the stages; base weights frozen.

    Returns the adapters and the per-step log records. The caller merges
    with lora_merge when a standalone model is wanted.
    """
    plan = plan if plan is not None else DpoPlan()
    if adapters is None:
        adapters = init_lora_adapters(params, rank=plan.rank, alpha=plan.alpha,
                                      seed=plan.seed)
    trainable: dict[str, Tensor] = {}
    for name, adapter in adapters.items():
        trainable[f"{name}.lora_a"] = adapter.a
        trainable[f"{name}.lora_b"] = adapter.b
    opt = AdamW(trainable, plan.hyper)
    log_file = Path(log_path) if log_path is not None else None
    records: list[dict] = []
    step = 0
    for stage_idx, stage in enumerate(stages):
        rendered = [render_pair(pair, vocab) for pair in stage.pairs]
        for prompt_ids, chosen, rejected in rendered:
            for resp in (chosen, rejected):
                if prompt_ids.size + resp.size > config.max_context:
                    raise ValueError("rendered pair exceeds model context")
        ref_cache = []
        with no_grad():
            for prompt_ids, chosen, rejected in rendered:
                ref_c = float(sequence_logprob(params, config, prompt_ids, chosen).item())
                ref_r = float(sequence_logprob(params, config, prompt_ids, rejected).item())
                ref_cache.append((ref_c, ref_r))
        if not rendered:
            warnings.warn(f"stage {stage_idx} has no pairs", RuntimeWarning)
            continue
        for epoch in range(stage.epochs):
            rng = np.random.default_rng(plan.seed + 104729 * stage_idx + epoch)
            order = rng.permutation(len(rendered))
            for lo in range(0, len(order), plan.batch_size):
                idx = order[lo:lo + plan.batch_size]
                plc, plr, rlc, rlr = [], [], [], []
                for i in idx:
                    prompt_ids, chosen, rejected = rendered[i]
                    plc.append(sequence_logprob(params, config, prompt_ids, chosen,
                                                adapters=adapters))
                    plr.append(sequence_logprob(params, config, prompt_ids, rejected,
                                                adapters=adapters))
                    rlc.append(ref_cache[i][0])
                    rlr.append(ref_cache[i][1])
                loss = dpo_loss(plc, plr, rlc, rlr, beta=plan.beta)
                opt.zero_grad()
                loss.backward()
                clip_grad_norm(opt.grads(), plan.hyper.clip_norm)
                opt.step(stage.lr)
                opt.zero_grad()
                for t in params.named_tensors().values():
                    t.zero_grad()  # base weights are frozen; drop their grads
                step += 1
                record = {"step": step, "stage": stage_idx, "lr": stage.lr,
                          "train_loss": float(loss.item())}
                records.append(record)
                if log_file is not None:
                    with log_file.open("a", encoding="utf-8") as f:
                        f.write(json.dumps(record) + "\n")
    return adapters, records


# ---------------------------------------------------------------------------
# preference files: newline-delimited
# {"prompt_turns": [{"role", "text"}, ...], "answers": [{"text", "rank"}, ...], "lang": "en"}

def load_preference_records(path) -> list[dict]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            out.append(json.loads(line))
    return out


def save_preference_records(records: Iterable[dict], path) -> None:
    lines = [json.dumps(rec, ensure_ascii=False) for rec in records]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
