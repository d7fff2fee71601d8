"""Miniature decoder-only transformer with compression tokens and LoRA adapters.

Token ids live in one table: text ids first, then patch ids, then the K
compression-token ids (whose embeddings are a separate learnable matrix
``comp_emb``). The output head scores the text vocabulary only.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .mask import Segment, SegmentLayout, additive, build_compression_mask, pad_mask
from .tensor import Tensor

ADAPTED = ("attn.q", "attn.k", "attn.v", "attn.o", "mlp.up", "mlp.down")


@dataclass
class ModelConfig:
    vocab_text: int
    vocab_patch: int
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 512
    n_comp_tokens: int = 32
    max_seq_len: int = 256
    rope_base: float = 10000.0
    lora_rank: int = 16
    lora_alpha: float = 16.0
    dropout: float = 0.0

    def __post_init__(self):
        problems = self.problems()
        if problems:
            raise ValueError("; ".join(f"{k}: {v}" for k, v in problems))

    def problems(self) -> list[tuple[str, str]]:
        out = []
        if self.d_model % self.n_heads:
            out.append(("d_model", f"{self.d_model} not divisible by n_heads={self.n_heads}"))
        if (self.d_model // max(self.n_heads, 1)) % 2:
            out.append(("d_model", "head dimension must be even for rotary positions"))
        if self.n_comp_tokens < 1:
            out.append(("n_comp_tokens", "must be >= 1"))
        if self.lora_rank < 0:
            out.append(("lora_rank", "must be >= 0"))
        if self.n_layers < 0:
            out.append(("n_layers", "must be >= 0"))
        if min(self.vocab_text, self.vocab_patch) < 1:
            out.append(("vocab_text", "vocabularies must be non-empty"))
        if not 0.0 <= self.dropout < 1.0:
            out.append(("dropout", "must lie in [0, 1)"))
        return out

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def patch_offset(self) -> int:
        return self.vocab_text

    @property
    def comp_offset(self) -> int:
        return self.vocab_text + self.vocab_patch

    @property
    def lora_scale(self) -> float:
        return self.lora_alpha / self.lora_rank if self.lora_rank else 0.0

    def comp_ids(self) -> np.ndarray:
        return self.comp_offset + np.arange(self.n_comp_tokens)

    def to_dict(self) -> dict:
        return asdict(self)


Params = dict[str, Tensor]


def init_params(config: ModelConfig, seed: int = 0, lora: bool = True) -> Params:
    rng = np.random.default_rng(seed)
    d, dff = config.d_model, config.d_ff

    def normal(shape, std):
        return Tensor(rng.normal(0.0, std, size=shape))

    p: Params = {
        "tok_emb": normal((config.vocab_text + config.vocab_patch, d), 1.0),
        "comp_emb": normal((config.n_comp_tokens, d), 1.0),
    }
    out_std = 1.0 / np.sqrt(2.0 * max(config.n_layers, 1))
    for i in range(config.n_layers):
        pre = f"layers.{i}."
        p[pre + "ln1.weight"] = Tensor(np.ones(d))
        p[pre + "ln1.bias"] = Tensor(np.zeros(d))
        for name in ("q", "k", "v"):
            p[pre + f"attn.{name}.weight"] = normal((d, d), 1.0 / np.sqrt(d))
        p[pre + "attn.o.weight"] = normal((d, d), out_std / np.sqrt(d))
        p[pre + "ln2.weight"] = Tensor(np.ones(d))
        p[pre + "ln2.bias"] = Tensor(np.zeros(d))
        p[pre + "mlp.up.weight"] = normal((dff, d), 1.0 / np.sqrt(d))
        p[pre + "mlp.up.bias"] = Tensor(np.zeros(dff))
        p[pre + "mlp.down.weight"] = normal((d, dff), out_std / np.sqrt(dff))
        p[pre + "mlp.down.bias"] = Tensor(np.zeros(d))
    p["ln_f.weight"] = Tensor(np.ones(d))
    p["ln_f.bias"] = Tensor(np.zeros(d))
    p["head.weight"] = Tensor(np.zeros((config.vocab_text, d)))
    if lora and config.lora_rank > 0:
        add_lora(p, config, rng)
    for name, t in p.items():
        t.name = name
    return p


def add_lora(params: Params, config: ModelConfig, rng: np.random.Generator | None = None):
    """Attach rank-r adapters to every attention and MLP projection; B starts at zero."""
    rng = rng or np.random.default_rng(0)
    r = config.lora_rank
    for i in range(config.n_layers):
        for m in ADAPTED:
            w = params[f"layers.{i}.{m}.weight"]
            d_out, d_in = w.shape
            params[f"layers.{i}.{m}.lora_a"] = Tensor(rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(r, d_in)), name=f"layers.{i}.{m}.lora_a")
            params[f"layers.{i}.{m}.lora_b"] = Tensor(np.zeros((d_out, r)), name=f"layers.{i}.{m}.lora_b")


def has_lora(params: Params) -> bool:
    return any(k.endswith(".lora_a") for k in params)


def cast_params(params: Params, dtype) -> Params:
    return {k: Tensor(v.data.astype(dtype), dtype=dtype, name=k) for k, v in params.items()}


def copy_params(params: Params) -> Params:
    return {k: Tensor(v.data.copy(), dtype=v.data.dtype, name=k) for k, v in params.items()}


def trainable_names(params: Params, mode: str = "adapters") -> list[str]:
    """Names updated during training.

    ``adapters``: LoRA pairs, compression embeddings and output head.
    ``full``: every tensor.
    """
    if mode == "full":
        return sorted(params)
    if mode != "adapters":
        raise ValueError(f"unknown trainable mode {mode!r}")
    keep = ("lora_a", "lora_b")
    return sorted(k for k in params if k.endswith(keep) or k in ("comp_emb", "head.weight"))


def set_trainable(params: Params, names) -> None:
    names = set(names)
    for k, v in params.items():
        v.requires_grad = k in names
        v.grad = None


def lora_linear(x: Tensor, weight: Tensor, a: Tensor | None, b: Tensor | None, scale: float, bias: Tensor | None = None) -> Tensor:
    """W·x + (alpha/r)·B·(A·x) (+ bias), on row-vector batches."""
    y = T.linear(x, weight, bias)
    if a is not None:
        y = y + T.scale(T.linear(T.linear(x, a), b), scale)
    return y


def lora_merge(params: Params, config: ModelConfig) -> Params:
    """Fold every adapter into its base matrix and drop the adapters."""
    if config.lora_rank == 0:
        if any(np.any(v.data) for k, v in params.items() if k.endswith(".lora_b")):
            raise ValueError("lora_rank is 0 but nonzero adapters are present")
    out = {}
    for k, v in params.items():
        if k.endswith((".lora_a", ".lora_b")):
            continue
        data = v.data.copy()
        stem = k[: -len(".weight")]
        if k.endswith(".weight") and stem + ".lora_a" in params:
            a, b = params[stem + ".lora_a"].data, params[stem + ".lora_b"].data
            delta = config.lora_scale * (b.astype(np.float64) @ a.astype(np.float64))
            data = (data.astype(np.float64) + delta).astype(data.dtype)
        out[k] = Tensor(data, dtype=data.dtype, name=k)
    return out


def lora_unmerge(merged: Params, adapters: Params, config: ModelConfig) -> Params:
    """Inverse of ``lora_merge``: subtract each B·A and re-attach the adapters."""
    out = {}
    for k, v in merged.items():
        data = v.data.copy()
        stem = k[: -len(".weight")]
        if k.endswith(".weight") and stem + ".lora_a" in adapters:
            data = data - config.lora_scale * (adapters[stem + ".lora_b"].data @ adapters[stem + ".lora_a"].data)
        out[k] = Tensor(data, dtype=data.dtype, name=k)
    for k, v in adapters.items():
        if k.endswith((".lora_a", ".lora_b")):
            out[k] = Tensor(v.data.copy(), dtype=v.dtype, name=k)
    return out


def rope_tables(positions: np.ndarray, head_dim: int, base: float, dtype) -> tuple[np.ndarray, np.ndarray]:
    inv = 1.0 / base ** (np.arange(0, head_dim // 2) * 2.0 / head_dim)
    ang = np.asarray(positions, dtype=np.float64)[..., None] * inv
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


@dataclass
class ForwardOutput:
    logits: Tensor
    hidden: list[Tensor]  # residual stream entering each layer, plus the final one
    final: Tensor  # final-norm states
    attention: list[np.ndarray] = field(default_factory=list)


def _adapter(params, key):
    a = params.get(key + ".lora_a")
    return a, (params.get(key + ".lora_b") if a is not None else None)


def _proj(params, config, key, x, bias=False):
    a, b = _adapter(params, key)
    return lora_linear(x, params[key + ".weight"], a, b, config.lora_scale, params.get(key + ".bias") if bias else None)


def _dropout(x: Tensor, p: float, rng) -> Tensor:
    if p == 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return T.mul(x, keep)


def block(params: Params, config: ModelConfig, i: int, x: Tensor, mask_add: np.ndarray, cos, sin, record=None, rng=None) -> Tensor:
    """One pre-norm transformer layer on (B, T, d) input."""
    pre = f"layers.{i}."
    bsz, n, d = x.shape
    h, hd = config.n_heads, config.head_dim
    xn = T.layer_norm(x, params[pre + "ln1.weight"], params[pre + "ln1.bias"])

    def heads(t):
        return T.transpose(T.reshape(t, (bsz, n, h, hd)), (0, 2, 1, 3))

    q = T.rotary(heads(_proj(params, config, pre + "attn.q", xn)), cos, sin)
    k = T.rotary(heads(_proj(params, config, pre + "attn.k", xn)), cos, sin)
    v = heads(_proj(params, config, pre + "attn.v", xn))
    scores = T.scale(T.matmul(q, T.swap_last(k)), 1.0 / np.sqrt(hd))
    probs = T.softmax(T.add(scores, mask_add), axis=-1)
    if record is not None:
        record.append(probs.data)
    ctx = T.reshape(T.transpose(T.matmul(probs, v), (0, 2, 1, 3)), (bsz, n, d))
    x = x + _dropout(_proj(params, config, pre + "attn.o", ctx), config.dropout, rng)
    xn = T.layer_norm(x, params[pre + "ln2.weight"], params[pre + "ln2.bias"])
    up = T.gelu(_proj(params, config, pre + "mlp.up", xn, bias=True))
    return x + _dropout(_proj(params, config, pre + "mlp.down", up, bias=True), config.dropout, rng)


def embed_tokens(params: Params, config: ModelConfig, tokens: np.ndarray) -> Tensor:
    table = T.concat([params["tok_emb"], params["comp_emb"]], axis=0)
    return T.embedding_lookup(table, tokens)


def head(params: Params, x: Tensor) -> tuple[Tensor, Tensor]:
    final = T.layer_norm(x, params["ln_f.weight"], params["ln_f.bias"])
    return T.linear(final, params["head.weight"]), final


def check_tokens(config: ModelConfig, tokens: np.ndarray):
    if tokens.shape[-1] > config.max_seq_len:
        raise ValueError(f"sequence length {tokens.shape[-1]} exceeds max_seq_len={config.max_seq_len}")
    hi = config.comp_offset + config.n_comp_tokens
    if tokens.size and (tokens.min() < 0 or tokens.max() >= hi):
        raise ValueError(f"token id out of vocabulary range [0, {hi})")


def forward(
    params: Params,
    config: ModelConfig,
    tokens,
    mask: np.ndarray,
    positions=None,
    record_attention: bool = False,
    rng: np.random.Generator | None = None,
) -> ForwardOutput:
    """Run the model on (T,) or (B, T) token ids under a boolean attention mask."""
    tokens = np.asarray(tokens, dtype=np.int64)
    single = tokens.ndim == 1
    if single:
        tokens = tokens[None]
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == 2:
        mask = np.broadcast_to(mask, (tokens.shape[0],) + mask.shape)
    n = tokens.shape[1]
    if mask.shape[1:] != (n, n):
        raise ValueError(f"mask shape {mask.shape} does not match sequence length {n}")
    check_tokens(config, tokens)
    if positions is None:
        positions = np.arange(n)
    dtype = params["tok_emb"].dtype
    cos, sin = rope_tables(positions, config.head_dim, config.rope_base, dtype)
    mask_add = additive(mask, dtype)[:, None]

    x = embed_tokens(params, config, tokens)
    hidden, attn = [x], [] if record_attention else None
    for i in range(config.n_layers):
        x = block(params, config, i, x, mask_add, cos, sin, attn, rng)
        hidden.append(x)
    logits, final = head(params, x)
    if single:
        logits, final = logits[0], final[0]
        hidden = [h[0] for h in hidden]
        attn = [a[0] for a in attn] if attn is not None else None
    return ForwardOutput(logits, hidden, final, attn or [])


def replay_qa(params: Params, config: ModelConfig, tokens, layout: SegmentLayout, hidden: list[Tensor]) -> Tensor:
    """Recompute QA logits from compression-position states alone.

    At every layer the compression rows are taken from ``hidden`` (the states a
    full forward produced) and only QA rows are recomputed; input-segment
    states are never touched. Returns (len_qa, vocab_text) logits.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    start = layout.len_input
    sub_layout = SegmentLayout(0, layout.len_comp, layout.len_qa)
    mask_add = additive(build_compression_mask(sub_layout), params["tok_emb"].dtype)[None, None]
    positions = np.arange(start, layout.total)
    cos, sin = rope_tables(positions, config.head_dim, config.rope_base, params["tok_emb"].dtype)
    qa = embed_tokens(params, config, tokens[None, layout.qa_slice])
    c = layout.len_comp
    for i in range(config.n_layers):
        comp_in = Tensor(hidden[i].data[layout.comp_slice][None])
        out = block(params, config, i, T.concat([comp_in, qa], axis=1), mask_add, cos, sin)
        qa = out[:, c:]
    logits, _ = head(params, qa)
    return logits[0]


def pooling_matrix(starts, k: int, length: int, dtype) -> np.ndarray:
    """(B, 1, length) weights averaging positions [start, start + k)."""
    w = np.zeros((len(starts), 1, length), dtype=dtype)
    for b, s in enumerate(starts):
        w[b, 0, s : s + k] = 1.0 / k
    return w


def pack_payloads(config: ModelConfig, payloads) -> tuple[np.ndarray, np.ndarray, list[int]]:
    """Append compression tokens to each payload and pad into one batch."""
    k = config.n_comp_tokens
    lens = [len(p) for p in payloads]
    if any(n == 0 for n in lens):
        raise ValueError("cannot embed an empty payload")
    n = max(lens) + k
    tokens = np.zeros((len(payloads), n), dtype=np.int64)
    masks = np.zeros((len(payloads), n, n), dtype=bool)
    for b, p in enumerate(payloads):
        tokens[b, : lens[b]] = p
        tokens[b, lens[b] : lens[b] + k] = config.comp_ids()
        masks[b] = pad_mask(build_compression_mask(SegmentLayout(lens[b], k, 0)), n)
    return tokens, masks, lens


def embed_batch(params: Params, config: ModelConfig, payloads, rng=None) -> Tensor:
    """Mean-pooled, L2-normalised final compression states, one row per payload."""
    tokens, masks, starts = pack_payloads(config, payloads)
    out = forward(params, config, tokens, masks, rng=rng)
    pool = pooling_matrix(starts, config.n_comp_tokens, tokens.shape[1], out.final.dtype)
    pooled = T.reshape(T.matmul(Tensor(pool), out.final), (len(payloads), config.d_model))
    return T.l2_normalize(pooled, axis=-1)


def embed(params: Params, config: ModelConfig, payload) -> np.ndarray:
    with T.no_grad():
        return embed_batch(params, config, [np.asarray(payload)]).data[0]


def comp_states(params: Params, config: ModelConfig, payloads) -> np.ndarray:
    """Final-layer compression states, shape (B, K, d)."""
    tokens, masks, starts = pack_payloads(config, payloads)
    with T.no_grad():
        final = forward(params, config, tokens, masks).final.data
    k = config.n_comp_tokens
    return np.stack([final[b, s : s + k] for b, s in enumerate(starts)])


def eos_states(params: Params, config: ModelConfig, payloads, eos_id: int) -> np.ndarray:
    """Final state of an EOS token appended to each payload under a causal mask."""
    reps = []
    with T.no_grad():
        for p in payloads:
            toks = np.append(np.asarray(p, dtype=np.int64), eos_id)
            out = forward(params, config, toks, np.tril(np.ones((len(toks), len(toks)), dtype=bool)))
            reps.append(out.final.data[-1])
    return np.stack(reps)


@dataclass
class SegmentedSequence:
    tokens: np.ndarray
    segments: np.ndarray
    loss_mask: np.ndarray
    record_id: str = ""

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        self.segments = np.asarray(self.segments, dtype=np.int64)
        self.loss_mask = np.asarray(self.loss_mask, dtype=bool)
        if not (len(self.tokens) == len(self.segments) == len(self.loss_mask)):
            raise ValueError("tokens, segments and loss_mask must have equal length")
        if np.any(self.loss_mask & (self.segments != Segment.ANSWER)):
            raise ValueError("loss mask may only cover ANSWER positions")
        seg = self.segments
        n_in = int(np.sum(seg == Segment.INPUT))
        n_c = int(np.sum(seg == Segment.COMPRESSION))
        if np.any(seg[:n_in] != Segment.INPUT) or np.any(seg[n_in : n_in + n_c] != Segment.COMPRESSION):
            raise ValueError("segments must be ordered INPUT*, COMPRESSION*, then conversation")
        if np.any(np.isin(seg[n_in + n_c :], (Segment.INPUT, Segment.COMPRESSION))):
            raise ValueError("input/compression tokens may not follow the conversation")

    def __len__(self):
        return len(self.tokens)

    @property
    def layout(self) -> SegmentLayout:
        n_in = int(np.sum(self.segments == Segment.INPUT))
        n_c = int(np.sum(self.segments == Segment.COMPRESSION))
        return SegmentLayout(n_in, n_c, len(self.tokens) - n_in - n_c)

    def compression_mask(self) -> np.ndarray:
        return build_compression_mask(self.layout)
