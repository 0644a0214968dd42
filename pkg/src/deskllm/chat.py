"""Chat templating with prompt-loss masking, plus the SFT training loop.

The template is a fixed constant: every turn renders as
`<|role|>text<|end|>`. Markers are encoded atomically when the vocab
contains them as whole tokens and spelled out as ordinary text
otherwise. The loss mask is 1 exactly on assistant text tokens and the
assistant turn's end marker; everything else (markers, system and user
text) is prompt and contributes neither loss nor gradient.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError
from .model import ModelConfig, ModelParams
from .optim import AdamW, LrSchedule, OptimHyper, clip_grad_norm, cosine_lr
from .pretrain import batch_loss, no_decay_names
from .tensor import IGNORE_INDEX, Tensor
from .tokenizer import Vocab, encode

ROLE_MARKERS = {"system": b"<|system|>", "user": b"<|user|>", "assistant": b"<|assistant|>"}
END_MARKER = b"<|end|>"


@dataclass(frozen=True)
class Turn:
    role: str
    text: str


@dataclass(frozen=True)
class Conversation:
    turns: tuple[Turn, ...]

    def __post_init__(self):
        object.__setattr__(self, "turns", tuple(self.turns))
        if not self.turns:
            raise ValueError("conversation has no turns")
        for turn in self.turns:
            if turn.role not in ROLE_MARKERS:
                raise ValueError(f"unknown role {turn.role!r}")
        rest = list(self.turns)
        if rest[0].role == "system":
            rest = rest[1:]
            if not rest:
                raise ValueError("conversation has only a system turn")
        for i, turn in enumerate(rest):
            expected = "user" if i % 2 == 0 else "assistant"
            if turn.role != expected:
                raise ValueError(
                    f"turn {i} after system must be {expected!r}, got {turn.role!r}")


def _marker_ids(marker: bytes, vocab: Vocab) -> list[int]:
    tid = vocab.token_to_id.get(marker)
    return [tid] if tid is not None else encode(marker, vocab)


def render_chat(conv: Conversation, vocab: Vocab) -> tuple[np.ndarray, np.ndarray]:
    """Token ids and per-token loss mask for the fixed chat template."""
    ids: list[int] = []
    mask: list[int] = []
    for turn in conv.turns:
        head = _marker_ids(ROLE_MARKERS[turn.role], vocab)
        body = encode(turn.text, vocab)
        tail = _marker_ids(END_MARKER, vocab)
        flag = 1 if turn.role == "assistant" else 0
        ids.extend(head)
        mask.extend([0] * len(head))
        ids.extend(body)
        mask.extend([flag] * len(body))
        ids.extend(tail)
        mask.extend([flag] * len(tail))
    return np.array(ids, dtype=np.int64), np.array(mask, dtype=np.int64)


def chat_vocab() -> Vocab:
    """Byte fallback plus atomic template markers; the natural test vocab."""
    tokens = [bytes([i]) for i in range(256)]
    tokens += [b"<|bos|>", b"<|eos|>", b"<|pad|>"]
    tokens += [ROLE_MARKERS["system"], ROLE_MARKERS["user"], ROLE_MARKERS["assistant"],
               END_MARKER]
    return Vocab(tokens, bos_id=256, eos_id=257, pad_id=258)


def sft_example(tokens: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Next-token training pair scoring exactly the mask-1 positions.

    Position i of the inputs predicts token i+1; the target there is kept
    when mask[i+1] is 1 and IGNORE_INDEX otherwise.
    """
    if tokens.shape != mask.shape or tokens.ndim != 1:
        raise ValueError(f"tokens/mask shapes differ: {tokens.shape} vs {mask.shape}")
    if tokens.size < 2:
        raise ValueError("need at least two tokens to form a next-token pair")
    inputs = tokens[:-1]
    targets = np.where(mask[1:] == 1, tokens[1:], IGNORE_INDEX)
    return inputs, targets


def sft_loss(params: ModelParams, config: ModelConfig, examples) -> Tensor | None:
    """Mean over usable examples of mask-restricted cross-entropy.

    Examples with no scored position are skipped with a warning; None is
    returned when nothing in the batch is usable.
    """
    usable = [(x, t) for x, t in examples if np.any(t != IGNORE_INDEX)]
    if len(usable) < len(examples):
        warnings.warn(f"skipped {len(examples) - len(usable)} example(s) with no "
                      "assistant tokens", RuntimeWarning)
    if not usable:
        return None
    return batch_loss(params, config, usable)


@dataclass(frozen=True)
class SftPlan:
    lr: float = 1e-5
    batch_size: int = 8
    epochs: int = 1
    warmup_fraction: float = 0.05
    min_lr_fraction: float = 0.1
    hyper: OptimHyper = field(default_factory=OptimHyper)
    seed: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be >= 1")
        if not 0.0 < self.warmup_fraction < 1.0:
            raise ConfigError(f"warmup_fraction must be in (0, 1), got {self.warmup_fraction}")
        if not 0.0 < self.min_lr_fraction <= 1.0:
            raise ConfigError(f"min_lr_fraction must be in (0, 1], got {self.min_lr_fraction}")


def run_sft(params: ModelParams, config: ModelConfig,
            conversations: Sequence[Conversation], vocab: Vocab,
            plan: SftPlan | None = None, log_path=None) -> list[dict]:
    """Epoch-based SFT over rendered conversations; returns the log records."""
    plan = plan if plan is not None else SftPlan()
    examples = [sft_example(*render_chat(conv, vocab)) for conv in conversations]
    for inputs, _ in examples:
        if len(inputs) > config.max_context:
            raise ValueError(
                f"rendered conversation of {len(inputs)} tokens exceeds context "
                f"{config.max_context}")
    total_tokens = plan.epochs * sum(len(x) for x, _ in examples)
    if total_tokens == 0:
        warnings.warn("no conversations to train on", RuntimeWarning)
        return []
    schedule = LrSchedule(
        warmup_tokens=max(1.0, plan.warmup_fraction * total_tokens),
        total_tokens=float(total_tokens),
        peak_lr=plan.lr,
        min_lr=plan.lr * plan.min_lr_fraction)
    opt = AdamW(params.named_tensors(), plan.hyper, no_decay=no_decay_names(params))
    log_file = Path(log_path) if log_path is not None else None
    records: list[dict] = []
    tokens_seen = 0
    step = 0
    for epoch in range(plan.epochs):
        rng = np.random.default_rng(plan.seed + epoch)
        order = rng.permutation(len(examples))
        for lo in range(0, len(order), plan.batch_size):
            batch = [examples[i] for i in order[lo:lo + plan.batch_size]]
            loss = sft_loss(params, config, batch)
            tokens_seen += sum(len(x) for x, _ in batch)
            if loss is None:
                continue
            opt.zero_grad()
            loss.backward()
            clip_grad_norm(opt.grads(), plan.hyper.clip_norm)
            lr = cosine_lr(min(tokens_seen, total_tokens), schedule)
            opt.step(lr)
            opt.zero_grad()
            step += 1
            record = {"step": step, "tokens_seen": tokens_seen, "lr": lr,
                      "train_loss": float(loss.item())}
            records.append(record)
            if log_file is not None:
                with log_file.open("a", encoding="utf-8") as f:
                    f.write(json.dumps(record) + "\n")
    return records


# ---------------------------------------------------------------------------
# conversation files: newline-delimited {"turns": [{"role", "text"}, ...]}

def load_conversations(path) -> list[Conversation]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        out.append(Conversation(tuple(Turn(t["role"], t["text"]) for t in obj["turns"])))
    return out


def save_conversations(conversations: Iterable[Conversation], path) -> None:
    lines = [json.dumps({"turns": [{"role": t.role, "text": t.text} for t in conv.turns]},
                        ensure_ascii=False)
             for conv in conversations]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
