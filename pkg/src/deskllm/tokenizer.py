"""Token tables, greedy BPE encoding, vocab files, and embedding transplant.

A vocabulary is an immutable list of byte-string tokens (line number =
id in the file format) with optional special ids and an optional merge
table. A 256-token byte-level fallback ships so every pipeline stage
runs without external vocabulary files; external BPE vocabularies are
loaded, never trained here.
"""

from __future__ import annotations

import base64
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .tensor import Tensor


class Vocab:
    """Immutable token table with optional specials and BPE merge ranks."""

    def __init__(self, id_to_token: Sequence[bytes], bos_id: int | None = None,
                 eos_id: int | None = None, pad_id: int | None = None,
                 merges: Iterable[tuple[bytes, bytes]] = ()):
        self.id_to_token: list[bytes] = [bytes(t) for t in id_to_token]
        self.token_to_id: dict[bytes, int] = {}
        for i, tok in enumerate(self.id_to_token):
            if tok in self.token_to_id:
                raise ValueError(
                    f"duplicate token {tok!r} at ids {self.token_to_id[tok]} and {i}")
            self.token_to_id[tok] = i
        size = len(self.id_to_token)
        for name, sid in (("bos_id", bos_id), ("eos_id", eos_id), ("pad_id", pad_id)):
            if sid is not None and not 0 <= sid < size:
                raise ValueError(f"{name} {sid} out of range for vocab size {size}")
        self.bos_id = bos_id
        self.eos_id = eos_id
        self.pad_id = pad_id
        self.merges: list[tuple[bytes, bytes]] = [(bytes(l), bytes(r)) for l, r in merges]
        self.merge_ranks: dict[tuple[bytes, bytes], int] = {}
        for rank, (left, right) in enumerate(self.merges):
            for part in (left, right, left + right):
                if part not in self.token_to_id:
                    raise ValueError(
                        f"merge {left!r}+{right!r} references token {part!r} not in vocab")
            self.merge_ranks.setdefault((left, right), rank)

    def __len__(self) -> int:
        return len(self.id_to_token)


def byte_fallback_vocab(specials: bool = True) -> Vocab:
    """256 single-byte tokens, optionally followed by bos/eos/pad markers."""
    tokens = [bytes([i]) for i in range(256)]
    if specials:
        tokens += [b"<|bos|>", b"<|eos|>", b"<|pad|>"]
        return Vocab(tokens, bos_id=256, eos_id=257, pad_id=258)
    return Vocab(tokens)


def encode(text: str | bytes, vocab: Vocab) -> list[int]:
    """Greedy BPE: repeatedly merge the lowest-rank adjacent pair, left to right.

    Starts from single bytes; with no merge table this is plain
    byte-level encoding.
    """
    if isinstance(text, str):
        text = text.encode("utf-8")
    symbols = [bytes([b]) for b in text]
    ranks = vocab.merge_ranks
    while len(symbols) > 1 and ranks:
        best = None
        for i in range(len(symbols) - 1):
            rank = ranks.get((symbols[i], symbols[i + 1]))
            if rank is not None and (best is None or rank < best[0]):
                best = (rank, symbols[i], symbols[i + 1])
        if best is None:
            break
        _, left, right = best
        merged = left + right
        out: list[bytes] = []
        i = 0
        while i < len(symbols):
            if i + 1 < len(symbols) and symbols[i] == left and symbols[i + 1] == right:
                out.append(merged)
                i += 2
            else:
                out.append(symbols[i])
                i += 1
        symbols = out
    try:
        return [vocab.token_to_id[s] for s in symbols]
    except KeyError as exc:
        raise ValueError(f"token {exc.args[0]!r} not in vocabulary") from None


def decode(ids: Iterable[int], vocab: Vocab) -> bytes:
    out = []
    size = len(vocab)
    for i in ids:
        i = int(i)
        if not 0 <= i < size:
            raise ValueError(f"token id {i} out of range for vocab size {size}")
        out.append(vocab.id_to_token[i])
    return b"".join(out)


# ---------------------------------------------------------------------------
# file format: one base64 token per line, line number = id

def save_vocab(vocab: Vocab, path) -> None:
    lines = [base64.b64encode(tok).decode("ascii") for tok in vocab.id_to_token]
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def load_vocab(path, merges_path=None, bos_id: int | None = None,
               eos_id: int | None = None, pad_id: int | None = None) -> Vocab:
    tokens = [base64.b64decode(line)
              for line in Path(path).read_text(encoding="ascii").splitlines()]
    merges = load_merges(merges_path) if merges_path is not None else ()
    return Vocab(tokens, bos_id=bos_id, eos_id=eos_id, pad_id=pad_id, merges=merges)


def save_merges(merges: Iterable[tuple[bytes, bytes]], path) -> None:
    lines = [base64.b64encode(l).decode("ascii") + " " + base64.b64encode(r).decode("ascii")
             for l, r in merges]
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def load_merges(path) -> list[tuple[bytes, bytes]]:
    out = []
    for line in Path(path).read_text(encoding="ascii").splitlines():
        if not line:
            continue
        left, right = line.split(" ")
        out.append((base64.b64decode(left), base64.b64decode(right)))
    return out


# ---------------------------------------------------------------------------
# embedding transplant across vocabularies

def remap_embeddings(old_vocab: Vocab, new_vocab: Vocab, old_embedding: Tensor,
                     old_head: Tensor, init_std: float = 0.02,
                     seed: int = 0) -> tuple[Tensor, Tensor, int]:
    """Carry embedding rows and head columns over to a new vocabulary.

    Tokens present in both vocabularies (exact byte-string equality) keep
    their old vectors bit for bit; tokens only in the new vocabulary get
    normal(0, init_std) draws from the seeded generator. Returns
    (new_embedding, new_head, matched_count).
    """
    emb = old_embedding.data
    head = old_head.data
    if emb.ndim != 2 or emb.shape[0] != len(old_vocab):
        raise ValueError(
            f"embedding shape {emb.shape} does not match old vocab size {len(old_vocab)}")
    if head.ndim != 2 or head.shape[1] != len(old_vocab):
        raise ValueError(
            f"head shape {head.shape} does not match old vocab size {len(old_vocab)}")
    if emb.shape[1] != head.shape[0]:
        raise ValueError(f"hidden extents differ: embedding {emb.shape}, head {head.shape}")
    hidden = emb.shape[1]
    rng = np.random.default_rng(seed)
    new_emb = rng.normal(0.0, init_std, size=(len(new_vocab), hidden)).astype(emb.dtype)
    new_head = rng.normal(0.0, init_std, size=(hidden, len(new_vocab))).astype(head.dtype)
    matched = 0
    for tok, new_id in new_vocab.token_to_id.items():
        old_id = old_vocab.token_to_id.get(tok)
        if old_id is not None:
            new_emb[new_id] = emb[old_id]
            new_head[:, new_id] = head[:, old_id]
            matched += 1
    return (Tensor(new_emb, requires_grad=old_embedding.requires_grad),
            Tensor(new_head, requires_grad=old_head.requires_grad), matched)
