"""Bit-exact binary checkpoints.

Layout, all integers little-endian:

    bytes 0-3    magic b"DKPT"
    bytes 4-7    format version, uint32
    bytes 8-15   header length H, uint64
    bytes 16-    header: UTF-8 JSON with
                   config:  the model configuration fields
                   tensors: [{name, dtype, shape, offset, nbytes}, ...]
                   extra:   scalar metadata (step counts, token counts)
    ...          payload: raw tensor bytes at the listed offsets
    last 32      SHA-256 of header JSON + payload

Optimizer moments are stored beside the weights as "optim.m.<name>" and
"optim.v.<name>"; the step count rides in extra. Round-tripping is
bitwise: load(save(x)) reproduces every tensor byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .model import LayerParams, ModelConfig, ModelParams, count_params
from .optim import AdamW
from .tensor import Tensor

MAGIC = b"DKPT"
VERSION = 1
_ALLOWED_DTYPES = ("<f4", "<f8")


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class Checkpoint:
    version: int
    config: ModelConfig
    tensors: dict[str, np.ndarray]
    extra: dict


def save_checkpoint(path, config: ModelConfig, tensors: dict[str, np.ndarray],
                    extra: dict | None = None) -> None:
    entries = []
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        if le.dtype.str not in _ALLOWED_DTYPES:
            raise CheckpointError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        raw = le.tobytes()
        entries.append({"name": name, "dtype": le.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {"config": asdict(config), "tensors": entries, "extra": dict(extra or {})}
    header_json = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(blobs)
    digest = hashlib.sha256(header_json + payload).digest()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(header_json)))
        f.write(header_json)
        f.write(payload)
        f.write(digest)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < 16 + 32 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic or truncated)")
    version = struct.unpack("<I", raw[4:8])[0]
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    hlen = struct.unpack("<Q", raw[8:16])[0]
    if 16 + hlen + 32 > len(raw):
        raise CheckpointError(f"{path}: truncated header")
    header_json = raw[16:16 + hlen]
    payload = raw[16 + hlen:-32]
    if hashlib.sha256(header_json + payload).digest() != raw[-32:]:
        raise CheckpointError(f"{path}: checksum mismatch")
    header = json.loads(header_json)
    tensors: dict[str, np.ndarray] = {}
    for e in header["tensors"]:
        if e["dtype"] not in _ALLOWED_DTYPES:
            raise CheckpointError(f"tensor {e['name']!r} has unsupported dtype")
        dt = np.dtype(e["dtype"])
        if e["offset"] + e["nbytes"] > len(payload):
            raise CheckpointError(f"tensor {e['name']!r} extends past payload")
        arr = np.frombuffer(payload, dtype=dt, count=e["nbytes"] // dt.itemsize,
                            offset=e["offset"]).reshape(e["shape"]).copy()
        tensors[e["name"]] = arr
    config = ModelConfig(**header["config"])
    return Checkpoint(version, config, tensors, header.get("extra", {}))


# ---------------------------------------------------------------------------
# model and optimizer conveniences

def save_model_checkpoint(path, params: ModelParams, config: ModelConfig, *,
                          optimizer: AdamW | None = None,
                          extra: dict | None = None) -> None:
    tensors = {name: t.data for name, t in params.named_tensors().items()}
    merged = dict(extra or {})
    if optimizer is not None:
        for name in optimizer.params:
            tensors[f"optim.m.{name}"] = optimizer.m[name]
            tensors[f"optim.v.{name}"] = optimizer.v[name]
        merged["optim.step"] = optimizer.step_count
    save_checkpoint(path, config, tensors, merged)


def build_params(ckpt: Checkpoint) -> ModelParams:
    """Reconstruct trainable parameters from a loaded checkpoint."""

    def grab(name: str) -> Tensor:
        if name not in ckpt.tensors:
            raise CheckpointError(f"checkpoint is missing tensor {name!r}")
        return Tensor(ckpt.tensors[name].copy(), requires_grad=True)

    layers = [LayerParams(wq=grab(f"layers.{i}.attn.wq"), wk=grab(f"layers.{i}.attn.wk"),
                          wv=grab(f"layers.{i}.attn.wv"), wo=grab(f"layers.{i}.attn.wo"),
                          w_gate=grab(f"layers.{i}.mlp.w_gate"),
                          w_up=grab(f"layers.{i}.mlp.w_up"),
                          w_down=grab(f"layers.{i}.mlp.w_down"),
                          norm_attn=grab(f"layers.{i}.norm_attn"),
                          norm_mlp=grab(f"layers.{i}.norm_mlp"))
              for i in range(ckpt.config.n_layers)]
    return ModelParams(token_embedding=grab("token_embedding"), layers=layers,
                       final_norm=grab("final_norm"), lm_head=grab("lm_head"))


def load_model(path) -> tuple[ModelConfig, ModelParams, dict]:
    ckpt = load_checkpoint(path)
    return ckpt.config, build_params(ckpt), ckpt.extra


def apply_optimizer_state(optimizer: AdamW, ckpt: Checkpoint) -> None:
    """Restore moments and step count saved by save_model_checkpoint."""
    for name in optimizer.params:
        for kind, store in (("m", optimizer.m), ("v", optimizer.v)):
            key = f"optim.{kind}.{name}"
            if key not in ckpt.tensors:
                raise CheckpointError(f"checkpoint has no optimizer state {key!r}")
            arr = ckpt.tensors[key]
            if arr.shape != store[name].shape:
                raise CheckpointError(f"optimizer state {key!r} shape mismatch")
            store[name][...] = arr
    if "optim.step" not in ckpt.extra:
        raise CheckpointError("checkpoint has no optimizer step count")
    optimizer.step_count = int(ckpt.extra["optim.step"])


def inspect_checkpoint(path) -> dict:
    """Summary for display: config, tensor table, parameter totals."""
    ckpt = load_checkpoint(path)
    table = [{"name": name, "dtype": str(arr.dtype), "shape": list(arr.shape),
              "size": int(arr.size)}
             for name, arr in ckpt.tensors.items()]
    n_model = sum(arr.size for name, arr in ckpt.tensors.items()
                  if not name.startswith("optim."))
    return {"version": ckpt.version, "config": asdict(ckpt.config), "tensors": table,
            "n_model_params": int(n_model),
            "config_params": count_params(ckpt.config), "extra": ckpt.extra}
