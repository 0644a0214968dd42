"""Decoder-only transformer with grouped-query attention and rotary positions.

One code path instantiates both the reference 1.8B shape and tiny test
shapes: untied embeddings, RMSNorm, rotary position embeddings, optional
sliding-window causal masking, grouped-query attention, and a gated
(silu) MLP. No biases and no dropout anywhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .fp8 import fp8_emulate
from .tensor import DTYPES, MASK_NEG, ShapeError, Tensor


def _np_dtype(dtype) -> np.dtype:
    if isinstance(dtype, str):
        return np.dtype(DTYPES[dtype])
    return np.dtype(dtype)


@dataclass(frozen=True)
class ModelConfig:
    hidden_size: int
    intermediate_size: int
    n_layers: int
    n_heads: int
    n_kv_heads: int
    vocab_size: int
    max_context: int = 16384
    sliding_window: int | None = None
    rope_theta: float = 10000.0
    norm_eps: float = 1e-5
    tie_embeddings: bool = False
    use_bias: bool = False
    init_std: float = 0.02

    def __post_init__(self):
        for name in ("hidden_size", "intermediate_size", "n_layers", "n_heads",
                     "n_kv_heads", "vocab_size", "max_context"):
            value = getattr(self, name)
            if not isinstance(value, int) or value <= 0:
                raise ConfigError(f"{name} must be a positive int, got {value!r}")
        if self.n_heads % self.n_kv_heads != 0:
            raise ConfigError(
                f"n_heads ({self.n_heads}) must be a multiple of n_kv_heads ({self.n_kv_heads})")
        if self.hidden_size % self.n_heads != 0:
            raise ConfigError(
                f"hidden_size ({self.hidden_size}) must be divisible by n_heads ({self.n_heads})")
        if self.head_dim % 2 != 0:
            raise ConfigError(f"head_dim must be even for rotary embeddings, got {self.head_dim}")
        if self.sliding_window is not None:
            window = self.sliding_window
            if not isinstance(window, int) or window <= 0:
                raise ConfigError(f"sliding_window must be a positive int, got {window!r}")
            if window > self.max_context:
                raise ConfigError(
                    f"sliding_window ({window}) cannot exceed max_context ({self.max_context})")
        if not self.rope_theta > 0:
            raise ConfigError(f"rope_theta must be positive, got {self.rope_theta!r}")
        if not self.norm_eps > 0:
            raise ConfigError(f"norm_eps must be positive, got {self.norm_eps!r}")
        if not self.init_std > 0:
            raise ConfigError(f"init_std must be positive, got {self.init_std!r}")
        if self.use_bias:
            raise ConfigError("biased linear layers are not supported")

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.n_heads

    @property
    def kv_dim(self) -> int:
        return self.head_dim * self.n_kv_heads

    @property
    def group_size(self) -> int:
        return self.n_heads // self.n_kv_heads


def config_1p8b() -> ModelConfig:
    """Reference 1.8B shape: 16k context with a 4096-token sliding window."""
    return ModelConfig(hidden_size=2560, intermediate_size=6912, n_layers=24,
                       n_heads=32, n_kv_heads=8, vocab_size=32000,
                       max_context=16384, sliding_window=4096)


def config_1p8b_v2(vocab_size: int = 32000) -> ModelConfig:
    """Revised 1.8B shape: plain causal attention over an 8k context."""
    return ModelConfig(hidden_size=2560, intermediate_size=6912, n_layers=24,
                       n_heads=32, n_kv_heads=8, vocab_size=vocab_size,
                       max_context=8192, sliding_window=None)


@dataclass
class LayerParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    w_gate: Tensor
    w_up: Tensor
    w_down: Tensor
    norm_attn: Tensor
    norm_mlp: Tensor


@dataclass
class ModelParams:
    token_embedding: Tensor
    layers: list[LayerParams]
    final_norm: Tensor
    lm_head: Tensor

    def named_tensors(self) -> dict[str, Tensor]:
        """Stable name -> tensor mapping; fixes checkpoint and optimizer order."""
        out = {"token_embedding": self.token_embedding}
        for i, layer in enumerate(self.layers):
            for key in ("wq", "wk", "wv", "wo"):
                out[f"layers.{i}.attn.{key}"] = getattr(layer, key)
            for key in ("w_gate", "w_up", "w_down"):
                out[f"layers.{i}.mlp.{key}"] = getattr(layer, key)
            out[f"layers.{i}.norm_attn"] = layer.norm_attn
            out[f"layers.{i}.norm_mlp"] = layer.norm_mlp
        out["final_norm"] = self.final_norm
        out["lm_head"] = self.lm_head
        return out

    @property
    def dtype(self) -> np.dtype:
        return self.token_embedding.dtype


def _trunc_normal(rng: np.random.Generator, shape, std: float, np_dtype) -> np.ndarray:
    """Normal(0, std) with values beyond 3 std redrawn until none remain."""
    out = rng.normal(0.0, std, size=shape)
    while True:
        bad = np.abs(out) > 3.0 * std
        n_bad = int(bad.sum())
        if n_bad == 0:
            return out.astype(np_dtype)
        out[bad] = rng.normal(0.0, std, size=n_bad)


def init_params(config: ModelConfig, seed: int = 0, dtype: str = "f32") -> ModelParams:
    """Truncated-normal weight matrices, unit norm scales, untied head."""
    if config.tie_embeddings:
        raise ConfigError("tied embeddings are not supported; the head is a distinct matrix")
    np_dtype = _np_dtype(dtype)
    rng = np.random.default_rng(seed)
    h, inter, kv = config.hidden_size, config.intermediate_size, config.kv_dim

    def mat(n_in, n_out):
        return Tensor(_trunc_normal(rng, (n_in, n_out), config.init_std, np_dtype),
                      requires_grad=True)

    def ones():
        return Tensor(np.ones(h, dtype=np_dtype), requires_grad=True)

    token_embedding = Tensor(
        _trunc_normal(rng, (config.vocab_size, h), config.init_std, np_dtype),
        requires_grad=True)
    layers = [
        LayerParams(wq=mat(h, h), wk=mat(h, kv), wv=mat(h, kv), wo=mat(h, h),
                    w_gate=mat(h, inter), w_up=mat(h, inter), w_down=mat(inter, h),
                    norm_attn=ones(), norm_mlp=ones())
        for _ in range(config.n_layers)
    ]
    return ModelParams(token_embedding=token_embedding, layers=layers,
                       final_norm=ones(), lm_head=mat(h, config.vocab_size))


def count_params(config: ModelConfig) -> int:
    """Exact parameter count of the architecture, in scalars."""
    h, inter, kv = config.hidden_size, config.intermediate_size, config.kv_dim
    per_layer = h * h + 2 * h * kv + h * h + 3 * h * inter + 2 * h
    embed = config.vocab_size * h
    head = 0 if config.tie_embeddings else config.vocab_size * h
    return embed + head + config.n_layers * per_layer + h


# ---------------------------------------------------------------------------
# adapters and linear application

@dataclass
class LoraAdapter:
    """Additive low-rank delta for one weight matrix: w_eff = w + scale * (a @ b).

    a is [in, r] and b is [r, out], matching the x @ w orientation used
    throughout the model. scale = alpha / r.
    """
    a: Tensor
    b: Tensor
    alpha: float

    @property
    def rank(self) -> int:
        return self.a.shape[1]

    @property
    def scale(self) -> float:
        return self.alpha / self.rank


def linear(x: Tensor, w: Tensor, *, fp8: bool = False, adapter: LoraAdapter | None = None) -> Tensor:
    """x @ w, optionally with E4M3-rounded operands and a low-rank adapter.

    The adapter path reads the unquantized activations and always runs in
    full precision.
    """
    if fp8:
        y = T.matmul(fp8_emulate(x), fp8_emulate(w))
    else:
        y = T.matmul(x, w)
    if adapter is not None:
        if adapter.a.shape[0] != w.shape[0] or adapter.b.shape[1] != w.shape[1]:
            raise ShapeError(
                f"adapter shapes {adapter.a.shape} @ {adapter.b.shape} do not fit weight {w.shape}")
        delta = T.matmul(T.matmul(x, adapter.a), adapter.b)
        y = T.add(y, T.mul(delta, adapter.scale))
    return y


# ---------------------------------------------------------------------------
# positional rotation and masking

def rope_angles(positions, d_head: int, theta: float) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin tables [T, d_head/2] for integer positions (may be negative)."""
    half = d_head // 2
    inv = float(theta) ** (-2.0 * np.arange(half, dtype=np.float64) / d_head)
    ang = np.asarray(positions, dtype=np.float64)[:, None] * inv[None, :]
    return np.cos(ang), np.sin(ang)


def rope_rotate(x: Tensor, positions, theta: float) -> Tensor:
    """Rotate head vectors by position-dependent angles.

    x is [T, ..., d_head]; dimension i pairs with i + d_head/2 and turns
    by angle p * theta**(-2i/d_head) at position p.
    """
    d = x.shape[-1]
    if d % 2 != 0:
        raise ConfigError(f"rotary embedding needs an even head dim, got {d}")
    positions = np.asarray(positions)
    if positions.ndim != 1 or positions.shape[0] != x.shape[0]:
        raise ShapeError(
            f"positions shape {positions.shape} does not match sequence length {x.shape[0]}")
    cos, sin = rope_angles(positions, d, theta)
    lift = (x.shape[0],) + (1,) * (x.data.ndim - 2) + (d // 2,)
    cos_t = Tensor(cos.reshape(lift).astype(x.dtype))
    sin_t = Tensor(sin.reshape(lift).astype(x.dtype))
    half = d // 2
    x1 = T.slice_last(x, 0, half)
    x2 = T.slice_last(x, half, d)
    out1 = T.add(T.mul(x1, cos_t), T.neg(T.mul(x2, sin_t)))
    out2 = T.add(T.mul(x1, sin_t), T.mul(x2, cos_t))
    return T.concat_last(out1, out2)


def attention_mask(seq_len: int, window: int | None = None, dtype="f32") -> Tensor:
    """Additive mask: position i may attend j in [max(0, i-window+1), i].

    Window absent means plain causal. Disallowed entries carry the
    dtype's masking constant; allowed entries are zero.
    """
    if seq_len < 1:
        raise ValueError(f"seq_len must be >= 1, got {seq_len}")
    if window is not None and window < 1:
        raise ConfigError(f"sliding window must be positive, got {window!r}")
    np_dtype = _np_dtype(dtype)
    i = np.arange(seq_len)[:, None]
    j = np.arange(seq_len)[None, :]
    allowed = j <= i
    if window is not None:
        allowed &= j >= i - window + 1
    data = np.where(allowed, 0.0, MASK_NEG[np_dtype]).astype(np_dtype)
    return Tensor(data)


# ---------------------------------------------------------------------------
# forward pass

def gqa_attention(q: Tensor, k: Tensor, v: Tensor, wo: Tensor, mask: Tensor,
                  config: ModelConfig, *, fp8: bool = False,
                  wo_adapter: LoraAdapter | None = None) -> Tensor:
    """Grouped-query scaled dot-product attention with output projection.

    q is [T, hidden]; k and v are [T, kv_dim]. Each group of
    n_heads/n_kv_heads query heads shares one KV head; scores are scaled
    by 1/sqrt(head_dim), masked, softmaxed, applied to values, and the
    concatenated heads are projected by wo.
    """
    n_h, n_kv, d = config.n_heads, config.n_kv_heads, config.head_dim
    t_len = q.shape[0]
    if q.shape != (t_len, n_h * d):
        raise ShapeError(f"q shape {q.shape} inconsistent with {n_h} heads of dim {d}")
    if k.shape != (t_len, n_kv * d) or v.shape != (t_len, n_kv * d):
        raise ShapeError(
            f"k/v shapes {k.shape}/{v.shape} inconsistent with {n_kv} KV heads of dim {d}")
    group = config.group_size
    # Query head h = kv*group + g lands at [kv, g]; k and v broadcast over g.
    qh = T.reshape(T.transpose(T.reshape(q, (t_len, n_h, d)), (1, 0, 2)), (n_kv, group, t_len, d))
    kh = T.reshape(T.transpose(T.reshape(k, (t_len, n_kv, d)), (1, 0, 2)), (n_kv, 1, t_len, d))
    vh = T.reshape(T.transpose(T.reshape(v, (t_len, n_kv, d)), (1, 0, 2)), (n_kv, 1, t_len, d))
    scores = T.mul(T.matmul(qh, T.transpose(kh, (0, 1, 3, 2))), 1.0 / math.sqrt(d))
    weights = T.softmax(T.add(scores, mask), axis=-1)
    ctx = T.matmul(weights, vh)
    ctx = T.reshape(T.transpose(T.reshape(ctx, (n_h, t_len, d)), (1, 0, 2)), (t_len, n_h * d))
    return linear(ctx, wo, fp8=fp8, adapter=wo_adapter)


def _adapter_lookup(adapters, prefix: str):
    def get(key: str):
        if not adapters:
            return None
        return adapters.get(f"{prefix}.{key}" if prefix else key)
    return get


def decoder_block(x: Tensor, layer: LayerParams, mask: Tensor, config: ModelConfig,
                  positions=None, *, fp8: bool = False, adapters=None,
                  prefix: str = "") -> Tensor:
    """Pre-norm attention and gated-MLP sublayers around residual adds."""
    t_len = x.shape[0]
    if positions is None:
        positions = np.arange(t_len)
    adapter = _adapter_lookup(adapters, prefix)

    h = T.rms_norm(x, layer.norm_attn, config.norm_eps)
    q = linear(h, layer.wq, fp8=fp8, adapter=adapter("attn.wq"))
    k = linear(h, layer.wk, fp8=fp8, adapter=adapter("attn.wk"))
    v = linear(h, layer.wv, fp8=fp8, adapter=adapter("attn.wv"))
    d = config.head_dim
    q = T.reshape(rope_rotate(T.reshape(q, (t_len, config.n_heads, d)),
                              positions, config.rope_theta),
                  (t_len, config.hidden_size))
    k = T.reshape(rope_rotate(T.reshape(k, (t_len, config.n_kv_heads, d)),
                              positions, config.rope_theta),
                  (t_len, config.kv_dim))
    attn = gqa_attention(q, k, v, layer.wo, mask, config,
                         fp8=fp8, wo_adapter=adapter("attn.wo"))
    x = T.add(x, attn)

    h = T.rms_norm(x, layer.norm_mlp, config.norm_eps)
    gate = T.silu(linear(h, layer.w_gate, fp8=fp8, adapter=adapter("mlp.w_gate")))
    up = linear(h, layer.w_up, fp8=fp8, adapter=adapter("mlp.w_up"))
    y = linear(T.mul(gate, up), layer.w_down, fp8=fp8, adapter=adapter("mlp.w_down"))
    return T.add(x, y)


def forward(params: ModelParams, tokens, config: ModelConfig, *, fp8: bool = False,
            adapters=None, positions=None, mask: Tensor | None = None) -> Tensor:
    """Logits [T, vocab] for one token sequence.

    fp8 rounds attention/MLP linear operands to E4M3 at forward time;
    the embedding, lm_head, and norm weights are never rounded.
    adapters maps tensor names (as in named_tensors) to LoraAdapter.
    """
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.ndim != 1 or ids.size == 0:
        raise ValueError(f"tokens must be a non-empty 1-D sequence, got shape {ids.shape}")
    t_len = int(ids.shape[0])
    if t_len > config.max_context:
        raise ValueError(f"sequence length {t_len} exceeds max_context {config.max_context}")
    if ids.min() < 0 or ids.max() >= config.vocab_size:
        raise ValueError(
            f"token id out of range [0, {config.vocab_size}): min={ids.min()}, max={ids.max()}")
    if positions is None:
        positions = np.arange(t_len)
    if mask is None:
        mask = attention_mask(t_len, config.sliding_window, dtype=params.dtype)

    x = T.embedding(params.token_embedding, ids)
    for i, layer in enumerate(params.layers):
        x = decoder_block(x, layer, mask, config, positions, fp8=fp8,
                          adapters=adapters, prefix=f"layers.{i}")
    x = T.rms_norm(x, params.final_norm, config.norm_eps)
    return T.matmul(x, params.lm_head)
