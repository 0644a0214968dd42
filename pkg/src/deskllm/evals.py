"""Evaluation surface: perplexity, multiple-choice scoring, few-shot
prompt assembly, exact match, and deterministic generation.

Generation decodes incrementally with a per-layer KV cache held as plain
numpy arrays; the cached path must pick the same tokens as recomputing
the full forward pass each step, which the tests assert.
"""

from __future__ import annotations

import json
import math
import string
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .data import pack_sequences
from .errors import ConfigError
from .fp8 import fp8_e4m3
from .model import LoraAdapter, ModelConfig, ModelParams, forward, rope_angles
from .tensor import IGNORE_INDEX, cross_entropy, no_grad, _sigmoid
from .tokenizer import Vocab, decode, encode

# few-shot constants: exemplar blocks are "question\nanswer" joined by a
# blank line, and the scored choice follows the query question plus "\n"
FEW_SHOT_DELIMITER = "\n\n"
QUERY_SUFFIX = "\n"


# ---------------------------------------------------------------------------
# perplexity

def perplexity(params: ModelParams, config: ModelConfig, token_docs, seq_len: int,
               eos_id: int, *, adapters=None, fp8: bool = False) -> float:
    """exp(mean next-token NLL) over corpus windows packed like training."""
    if seq_len > config.max_context:
        raise ValueError(f"seq_len {seq_len} exceeds context {config.max_context}")
    total_nll = 0.0
    scored = 0
    with no_grad():
        for window, targets in pack_sequences(token_docs, seq_len, eos_id):
            n = int(np.sum(targets != IGNORE_INDEX))
            loss = cross_entropy(forward(params, window, config, adapters=adapters,
                                         fp8=fp8), targets)
            total_nll += float(loss.item()) * n
            scored += n
    if scored == 0:
        raise ValueError("corpus produced no scoreable windows")
    return float(math.exp(total_nll / scored))


# ---------------------------------------------------------------------------
# multiple choice

@dataclass(frozen=True)
class MCTask:
    question: str
    choices: tuple[str, ...]
    gold: int
    exemplars: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "choices", tuple(self.choices))
        object.__setattr__(self, "exemplars", tuple(tuple(e) for e in self.exemplars))
        if len(self.choices) < 2:
            raise ValueError(f"need >= 2 choices, got {len(self.choices)}")
        if not 0 <= self.gold < len(self.choices):
            raise ValueError(f"gold index {self.gold} out of range")


@dataclass(frozen=True)
class EMTask:
    question: str
    answers: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "answers", tuple(self.answers))
        if not self.answers:
            raise ValueError("need >= 1 gold alias")


def few_shot_render(task: MCTask, k: int, delimiter: str = FEW_SHOT_DELIMITER,
                    seed: int = 0) -> str:
    """k seeded-shuffled exemplar blocks, then the query question."""
    if k < 0 or k > len(task.exemplars):
        raise ValueError(f"k={k} outside [0, {len(task.exemplars)}]")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(task.exemplars))[:k]
    blocks = [f"{task.exemplars[i][0]}\n{task.exemplars[i][1]}" for i in order]
    return delimiter.join(blocks + [task.question])


def mc_pick(logprobs: Sequence[float], choices: Sequence[str]) -> tuple[int, int]:
    """acc pick (raw argmax) and acc_norm pick (argmax of lp / byte length)."""
    lp = np.asarray(logprobs, dtype=np.float64)
    lens = np.array([len(c.encode("utf-8")) for c in choices], dtype=np.float64)
    if lp.shape != lens.shape:
        raise ValueError("one log-prob per choice required")
    if np.any(lens == 0):
        raise ValueError("choices must be nonempty strings")
    return int(np.argmax(lp)), int(np.argmax(lp / lens))


def mc_score(params, config, task: MCTask, vocab: Vocab | None = None, *, k: int = 0,
             delimiter: str = FEW_SHOT_DELIMITER, seed: int = 0,
             logprob_fn: Callable[[str, str], float] | None = None,
             adapters=None, fp8: bool = False) -> dict:
    """Score one task; `logprob_fn(prompt_text, choice_text)` overrides the
    model path (used for fixtures and statistical oracles)."""
    prompt_text = few_shot_render(task, k, delimiter, seed) + QUERY_SUFFIX
    if logprob_fn is not None:
        lps = [float(logprob_fn(prompt_text, c)) for c in task.choices]
    else:
        from .dpo import sequence_logprob
        prompt_ids = np.array(encode(prompt_text, vocab), dtype=np.int64)
        lps = []
        with no_grad():
            for choice in task.choices:
                ids = np.array(encode(choice, vocab), dtype=np.int64)
                lps.append(float(sequence_logprob(params, config, prompt_ids, ids,
                                                  adapters=adapters, fp8=fp8).item()))
    acc_pick, acc_norm_pick = mc_pick(lps, task.choices)
    return {"acc_pick": acc_pick, "acc_norm_pick": acc_norm_pick,
            "acc_correct": acc_pick == task.gold,
            "acc_norm_correct": acc_norm_pick == task.gold,
            "logprobs": lps}


# ---------------------------------------------------------------------------
# exact match

def _normalize(text: str) -> str:
    text = text.lower()
    text = text.translate(str.maketrans("", "", string.punctuation))
    return " ".join(text.split())


def exact_match(prediction: str, aliases: Iterable[str]) -> bool:
    """Case-normalized, punctuation-stripped equality against any alias."""
    pred = _normalize(prediction)
    return any(pred == _normalize(a) for a in aliases)


# ---------------------------------------------------------------------------
# generation

def apply_repetition_penalty(logits: np.ndarray, token_ids, penalty: float) -> np.ndarray:
    """CTRL convention: for seen tokens, z -> z/p when z > 0 else z*p."""
    if penalty <= 0:
        raise ConfigError(f"repetition penalty must be positive, got {penalty}")
    out = np.array(logits, dtype=np.float64, copy=True)
    if penalty == 1.0:
        return out
    seen = np.unique(np.asarray(list(token_ids), dtype=np.int64))
    if seen.size and (seen.min() < 0 or seen.max() >= out.shape[-1]):
        raise ValueError("seen token id outside vocabulary")
    vals = out[seen]
    out[seen] = np.where(vals > 0, vals / penalty, vals * penalty)
    return out


class DecodeSession:
    """Incremental forward pass over raw numpy weights with a KV cache.

    Mirrors the training forward exactly in structure (pre-norm blocks,
    rotate-half RoPE, grouped KV broadcast, sliding-window causal
    restriction, quantized linears under fp8) so greedy decoding picks
    the same tokens as full re-forwarding.
    """

    def __init__(self, params: ModelParams, config: ModelConfig, *,
                 adapters: dict[str, LoraAdapter] | None = None, fp8: bool = False):
        self.config = config
        self.fp8 = fp8
        self.adapters = adapters or {}
        self.w = {name: t.data for name, t in params.named_tensors().items()}
        self.n_layers = len(params.layers)
        dt = params.dtype
        shape = (config.n_kv_heads, 0, config.head_dim)
        self.k_cache = [np.zeros(shape, dtype=dt) for _ in range(self.n_layers)]
        self.v_cache = [np.zeros(shape, dtype=dt) for _ in range(self.n_layers)]
        self.pos = 0

    def _linear(self, x: np.ndarray, name: str) -> np.ndarray:
        w = self.w[name]
        y = (fp8_e4m3(x) @ fp8_e4m3(w)) if self.fp8 else (x @ w)
        adapter = self.adapters.get(name)
        if adapter is not None:
            y = y + adapter.scale * ((x @ adapter.a.data) @ adapter.b.data)
        return y

    def _rms(self, x: np.ndarray, name: str) -> np.ndarray:
        r = np.sqrt((x * x).mean(axis=-1, keepdims=True) + self.config.norm_eps)
        return x / r * self.w[name]

    @staticmethod
    def _rotate(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
        half = x.shape[-1] // 2
        c = cos[:, None, :].astype(x.dtype)
        s = sin[:, None, :].astype(x.dtype)
        x1, x2 = x[..., :half], x[..., half:]
        return np.concatenate([x1 * c - x2 * s, x1 * s + x2 * c], axis=-1)

    def step(self, tokens) -> np.ndarray:
        """Process new tokens; returns their [t, vocab] logit rows."""
        cfg = self.config
        ids = np.asarray(tokens, dtype=np.int64).reshape(-1)
        t = ids.size
        if t == 0:
            raise ValueError("step needs at least one token")
        if self.pos + t > cfg.max_context:
            raise ValueError(f"decode would exceed context {cfg.max_context}")
        if ids.min() < 0 or ids.max() >= cfg.vocab_size:
            raise ValueError("token id outside vocabulary")
        positions = np.arange(self.pos, self.pos + t)
        cos, sin = rope_angles(positions, cfg.head_dim, cfg.rope_theta)
        group = cfg.group_size
        scale = 1.0 / math.sqrt(cfg.head_dim)
        x = self.w["token_embedding"][ids]
        for li in range(self.n_layers):
            prefix = f"layers.{li}"
            h = self._rms(x, f"{prefix}.norm_attn")
            q = self._linear(h, f"{prefix}.attn.wq").reshape(t, cfg.n_heads, cfg.head_dim)
            k = self._linear(h, f"{prefix}.attn.wk").reshape(t, cfg.n_kv_heads, cfg.head_dim)
            v = self._linear(h, f"{prefix}.attn.wv").reshape(t, cfg.n_kv_heads, cfg.head_dim)
            q = self._rotate(q, cos, sin)
            k = self._rotate(k, cos, sin)
            self.k_cache[li] = np.concatenate([self.k_cache[li], k.transpose(1, 0, 2)], axis=1)
            self.v_cache[li] = np.concatenate([self.v_cache[li], v.transpose(1, 0, 2)], axis=1)
            kq = np.repeat(self.k_cache[li], group, axis=0)
            vq = np.repeat(self.v_cache[li], group, axis=0)
            scores = np.einsum("thd,hjd->htj", q, kq) * scale
            j = np.arange(kq.shape[1])[None, :]
            i = positions[:, None]
            allowed = j <= i
            if cfg.sliding_window is not None:
                allowed &= j > i - cfg.sliding_window
            scores = np.where(allowed[None, :, :], scores, -np.inf)
            m = scores.max(axis=-1, keepdims=True)
            e = np.exp(scores - m)
            probs = e / e.sum(axis=-1, keepdims=True)
            ctx = np.einsum("htj,hjd->thd", probs, vq).reshape(t, cfg.n_heads * cfg.head_dim)
            x = x + self._linear(ctx, f"{prefix}.attn.wo")
            h2 = self._rms(x, f"{prefix}.norm_mlp")
            gate = self._linear(h2, f"{prefix}.mlp.w_gate")
            gate = gate * _sigmoid(gate)
            up = self._linear(h2, f"{prefix}.mlp.w_up")
            x = x + self._linear(gate * up, f"{prefix}.mlp.w_down")
        self.pos += t
        return self._rms(x, "final_norm") @ self.w["lm_head"]


def _pick_token(row: np.ndarray, seen_ids, temperature: float, penalty: float,
                rng: np.random.Generator) -> int:
    row = apply_repetition_penalty(row, seen_ids, penalty)
    if temperature == 0.0:
        return int(np.argmax(row))
    z = row / temperature
    z -= z.max()
    e = np.exp(z)
    return int(rng.choice(row.shape[-1], p=e / e.sum()))


def generate(params: ModelParams, config: ModelConfig, prompt_ids, *, max_new: int,
             temperature: float = 0.0, repetition_penalty: float = 1.1, seed: int = 0,
             eos_id: int | None = None, adapters=None, fp8: bool = False,
             use_cache: bool = True) -> np.ndarray:
    """Decode up to max_new tokens; stops at eos or the context limit.

    Returns the generated ids only (including the terminating eos when
    one is emitted). temperature 0 is strict argmax with ties to the
    lowest id; temperature > 0 divides logits by it and samples with the
    seeded generator.
    """
    prompt = np.asarray(prompt_ids, dtype=np.int64).reshape(-1)
    if prompt.size == 0:
        raise ValueError("prompt must be nonempty")
    if prompt.size > config.max_context:
        raise ValueError(f"prompt of {prompt.size} tokens exceeds context "
                         f"{config.max_context}")
    if temperature < 0:
        raise ConfigError(f"temperature must be >= 0, got {temperature}")
    if max_new < 0:
        raise ValueError(f"max_new must be >= 0, got {max_new}")
    rng = np.random.default_rng(seed)
    ids = prompt.tolist()
    generated: list[int] = []
    session = None
    if use_cache:
        session = DecodeSession(params, config, adapters=adapters, fp8=fp8)

    def last_row() -> np.ndarray:
        if session is not None:
            new = ids[session.pos:]
            return session.step(new)[-1].astype(np.float64)
        with no_grad():
            out = forward(params, np.asarray(ids, dtype=np.int64), config,
                          adapters=adapters, fp8=fp8)
        return out.data[-1].astype(np.float64)

    while len(generated) < max_new and len(ids) < config.max_context:
        row = last_row()
        nxt = _pick_token(row, ids, temperature, repetition_penalty, rng)
        generated.append(nxt)
        ids.append(nxt)
        if eos_id is not None and nxt == eos_id:
            break
    return np.asarray(generated, dtype=np.int64)


def generate_text(params, config, prompt: str, vocab: Vocab, *, max_new: int,
                  temperature: float = 0.0, repetition_penalty: float = 1.1,
                  seed: int = 0, adapters=None, fp8: bool = False) -> str:
    """Encode, generate with the vocab's eos as stop, and decode to text."""
    ids = np.array(encode(prompt, vocab), dtype=np.int64)
    out = generate(params, config, ids, max_new=max_new, temperature=temperature,
                   repetition_penalty=repetition_penalty, seed=seed,
                   eos_id=vocab.eos_id, adapters=adapters, fp8=fp8)
    if vocab.eos_id is not None and out.size and out[-1] == vocab.eos_id:
        out = out[:-1]
    return decode(out, vocab).decode("utf-8", errors="replace")


# ---------------------------------------------------------------------------
# task files and batch evaluation

def load_tasks(path) -> tuple[list[MCTask], list[EMTask]]:
    """Newline-delimited {question, choices, gold[, exemplars]} or
    {question, answers} records."""
    mc: list[MCTask] = []
    em: list[EMTask] = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        if "choices" in obj:
            mc.append(MCTask(obj["question"], tuple(obj["choices"]), int(obj["gold"]),
                             tuple(tuple(e) for e in obj.get("exemplars", ()))))
        elif "answers" in obj:
            em.append(EMTask(obj["question"], tuple(obj["answers"])))
        else:
            raise ValueError(f"task record needs choices+gold or answers: {obj}")
    return mc, em


def evaluate_tasks(params, config, tasks: Sequence[MCTask], vocab: Vocab, *, k: int = 0,
                   delimiter: str = FEW_SHOT_DELIMITER, seed: int = 0,
                   logprob_fn=None, adapters=None, fp8: bool = False
                   ) -> tuple[list[dict], dict]:
    """Per-task records plus aggregate accuracies; order-independent."""
    records = []
    for task in tasks:
        result = mc_score(params, config, task, vocab, k=k, delimiter=delimiter,
                          seed=seed, logprob_fn=logprob_fn, adapters=adapters, fp8=fp8)
        result["question"] = task.question
        records.append(result)
    if records:
        aggregates = {"acc": float(np.mean([r["acc_correct"] for r in records])),
                      "acc_norm": float(np.mean([r["acc_norm_correct"] for r in records])),
                      "n_tasks": len(records)}
    else:
        aggregates = {"acc": 0.0, "acc_norm": 0.0, "n_tasks": 0}
    return records, aggregates


def evaluate_em_tasks(params, config, tasks: Sequence[EMTask], vocab: Vocab, *,
                      max_new: int = 32, repetition_penalty: float = 1.1,
                      adapters=None, fp8: bool = False) -> tuple[list[dict], dict]:
    """Greedy-generate an answer per question and score exact match.

    The prediction is the generated text up to its first newline.
    """
    records = []
    for task in tasks:
        text = generate_text(params, config, task.question + QUERY_SUFFIX, vocab,
                             max_new=max_new, temperature=0.0,
                             repetition_penalty=repetition_penalty,
                             adapters=adapters, fp8=fp8)
        prediction = text.split("\n", 1)[0].strip()
        records.append({"question": task.question, "prediction": prediction,
                        "em_correct": exact_match(prediction, task.answers)})
    em = float(np.mean([r["em_correct"] for r in records])) if records else 0.0
    return records, {"em": em, "n_tasks": len(records)}


def save_results(records: Sequence[dict], aggregates: dict, path) -> None:
    """One record per task, then a final {"aggregate": ...} line."""
    lines = [json.dumps(rec, ensure_ascii=False) for rec in records]
    lines.append(json.dumps({"aggregate": aggregates}, ensure_ascii=False))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
