"""Pre-norm transformer encoder whose attention takes prepended prefix keys/values."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterator, NamedTuple

import numpy as np

from . import numerics as nx
from .numerics import Tensor

GATE_MODES = ("apt", "no_token_gate", "no_layer_gate", "no_hidden", "pt2", "pt2_plus", "pt2_star")


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 2
    num_heads: int = 2
    model_dim: int = 32
    ffn_dim: int = 64
    vocab_size: int = 64
    max_seq_len: int = 32
    prefix_len: int = 4
    prefix_lengths: tuple[int, ...] | None = None
    mode: str = "apt"
    dropout: float = 0.0

    def __post_init__(self):
        for name in ("num_layers", "prefix_len"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        for name in ("num_heads", "model_dim", "ffn_dim", "vocab_size", "max_seq_len"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.model_dim % self.num_heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}")
        if self.mode not in GATE_MODES:
            raise ValueError(f"unknown gate mode {self.mode!r}; expected one of {GATE_MODES}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.prefix_lengths is not None:
            lengths = tuple(int(n) for n in self.prefix_lengths)
            if len(lengths) != self.num_layers or any(n < 0 for n in lengths):
                raise ValueError(f"prefix_lengths needs {self.num_layers} nonnegative ints, got {lengths}")
            object.__setattr__(self, "prefix_lengths", lengths)
        if self.mode == "pt2_star" and self.prefix_lengths is None:
            raise ValueError("mode pt2_star requires per-layer prefix_lengths")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads

    def layer_prefix_lengths(self) -> list[int]:
        """Effective prefix length of every layer under this config's mode."""
        if self.mode == "pt2_plus":
            return [math.ceil(1.5 * self.prefix_len)] * self.num_layers
        if self.prefix_lengths is not None:
            return list(self.prefix_lengths)
        return [self.prefix_len] * self.num_layers

    def to_dict(self) -> dict:
        d = asdict(self)
        d["prefix_lengths"] = list(self.prefix_lengths) if self.prefix_lengths is not None else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if d.get("prefix_lengths") is not None:
            d["prefix_lengths"] = tuple(d["prefix_lengths"])
        return cls(**d)

    def with_mode(self, mode: str, **changes) -> "ModelConfig":
        return replace(self, mode=mode, **changes)


@dataclass
class LayerWeights:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    ln1_gain: Tensor
    ln1_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor

    def named(self) -> Iterator[tuple[str, Tensor]]:
        for k, v in self.__dict__.items():
            yield k, v


@dataclass
class Backbone:
    """Embeddings, encoder layers and the final layer norm. Frozen during tuning."""

    tok_emb: Tensor
    pos_emb: Tensor
    layers: list[LayerWeights]
    final_gain: Tensor
    final_bias: Tensor

    @classmethod
    def init(cls, config: ModelConfig, seed: int, dtype=np.float32) -> "Backbone":
        """Random stand-in for a pre-trained encoder, deterministic in ``seed``."""
        rng = np.random.default_rng(seed)
        d, f = config.model_dim, config.ffn_dim

        def w(*shape):
            return Tensor(rng.normal(0.0, 1.0 / math.sqrt(shape[0]), shape), dtype=dtype)

        tok = Tensor(rng.normal(0.0, 1.0, (config.vocab_size, d)), dtype=dtype)
        pos = Tensor(rng.normal(0.0, 0.1, (config.max_seq_len, d)), dtype=dtype)
        layers = []
        for _ in range(config.num_layers):
            layers.append(
                LayerWeights(
                    wq=w(d, d), wk=w(d, d), wv=w(d, d), wo=w(d, d),
                    w1=w(d, f), b1=Tensor(np.zeros(f), dtype=dtype),
                    w2=w(f, d), b2=Tensor(np.zeros(d), dtype=dtype),
                    ln1_gain=Tensor(np.ones(d), dtype=dtype), ln1_bias=Tensor(np.zeros(d), dtype=dtype),
                    ln2_gain=Tensor(np.ones(d), dtype=dtype), ln2_bias=Tensor(np.zeros(d), dtype=dtype),
                )
            )
        return cls(tok, pos, layers, Tensor(np.ones(d), dtype=dtype), Tensor(np.zeros(d), dtype=dtype))

    def named_tensors(self) -> Iterator[tuple[str, Tensor]]:
        yield "backbone.tok_emb", self.tok_emb
        yield "backbone.pos_emb", self.pos_emb
        for i, layer in enumerate(self.layers):
            for k, v in layer.named():
                yield f"backbone.layers.{i}.{k}", v
        yield "backbone.final_gain", self.final_gain
        yield "backbone.final_bias", self.final_bias

    @classmethod
    def from_tensors(cls, tensors: dict[str, Tensor], num_layers: int) -> "Backbone":
        layers = []
        for i in range(num_layers):
            pre = f"backbone.layers.{i}."
            layers.append(LayerWeights(**{k[len(pre):]: v for k, v in tensors.items() if k.startswith(pre)}))
        return cls(
            tensors["backbone.tok_emb"], tensors["backbone.pos_emb"], layers,
            tensors["backbone.final_gain"], tensors["backbone.final_bias"],
        )

    def astype(self, dtype) -> "Backbone":
        conv = {k: Tensor(v.data, dtype=dtype) for k, v in self.named_tensors()}
        return Backbone.from_tensors(conv, len(self.layers))

    def snapshot(self) -> bytes:
        return b"".join(t.data.tobytes() for _, t in self.named_tensors())


class LayerPrefix(NamedTuple):
    """Gated prefix handed to one layer: keys/values [b, l, d] and the token gate used."""

    key: Tensor
    value: Tensor
    alpha: np.ndarray | None = None


PrefixHook = Callable[[int, Tensor], "LayerPrefix | None"]


@dataclass
class EncoderState:
    hidden: list[Tensor]
    alphas: list[np.ndarray | None] = field(default_factory=list)

    @property
    def last(self) -> Tensor:
        return self.hidden[-1]


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, s, d = x.shape
    return nx.transpose(nx.reshape(x, (b, s, heads, d // heads)), (0, 2, 1, 3))


def prefix_attention(
    h_in: Tensor,
    layer: LayerWeights,
    num_heads: int,
    prefix: LayerPrefix | None = None,
    mask: np.ndarray | None = None,
    return_probs: bool = False,
):
    """Multi-head self-attention with prefix keys/values prepended.

    ``h_in`` is [b, s, d]; ``mask`` is a boolean [b, s] marking real tokens.
    Prefix positions are always attendable.
    """
    b, s, d = h_in.shape
    q = _split_heads(nx.matmul(h_in, layer.wq), num_heads)
    k = _split_heads(nx.matmul(h_in, layer.wk), num_heads)
    v = _split_heads(nx.matmul(h_in, layer.wv), num_heads)
    key_mask = np.ones((b, s), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if prefix is not None:
        pk, pv = prefix.key, prefix.value
        if pk.shape[-1] != d or pv.shape[-1] != d:
            raise ValueError(f"prefix width {pk.shape[-1]} does not match model width {d}")
        if pk.shape[0] != b or pv.shape != pk.shape:
            raise ValueError(f"prefix block {pk.shape} does not match batch {b}")
        plen = pk.shape[1]
        k = nx.concat([_split_heads(pk, num_heads), k], axis=2)
        v = nx.concat([_split_heads(pv, num_heads), v], axis=2)
        key_mask = np.concatenate([np.ones((b, plen), dtype=bool), key_mask], axis=1)
    scale = 1.0 / math.sqrt(d // num_heads)
    scores = nx.mul(nx.matmul(q, nx.transpose(k, (0, 1, 3, 2))), scale)
    probs = nx.softmax(scores, mask=key_mask[:, None, None, :])
    ctx = nx.matmul(probs, v)
    ctx = nx.reshape(nx.transpose(ctx, (0, 2, 1, 3)), (b, s, d))
    out = nx.matmul(ctx, layer.wo)
    if return_probs:
        return out, probs.data
    return out


def feed_forward(x: Tensor, layer: LayerWeights) -> Tensor:
    hidden = nx.relu(nx.add(nx.matmul(x, layer.w1), layer.b1))
    return nx.add(nx.matmul(hidden, layer.w2), layer.b2)


def encode(
    token_ids: np.ndarray,
    config: ModelConfig,
    backbone: Backbone,
    prefix_hook: PrefixHook | None = None,
    mask: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
) -> EncoderState:
    """Run the encoder. ``prefix_hook(i, h_first)`` supplies layer ``i``'s gated
    prefix from the previous layer's first-token hidden state."""
    ids = np.asarray(token_ids)
    if ids.ndim != 2:
        raise ValueError(f"token_ids must be [batch, seq], got shape {ids.shape}")
    b, s = ids.shape
    if s > config.max_seq_len:
        raise ValueError(f"sequence length {s} exceeds max_seq_len {config.max_seq_len}")
    if ids.size and (ids.min() < 0 or ids.max() >= config.vocab_size):
        raise ValueError(f"token id out of range [0, {config.vocab_size})")
    h = nx.add(nx.embedding(backbone.tok_emb, ids), nx.embedding(backbone.pos_emb, np.arange(s)))
    state = EncoderState(hidden=[h])
    for i, layer in enumerate(backbone.layers):
        prefix = None
        if prefix_hook is not None:
            prefix = prefix_hook(i, nx.take(h, 0, axis=1))
        state.alphas.append(None if prefix is None else prefix.alpha)
        attn = prefix_attention(
            nx.layer_norm(h, layer.ln1_gain, layer.ln1_bias), layer, config.num_heads, prefix, mask
        )
        h = nx.add(h, nx.dropout(attn, config.dropout, rng))
        ff = feed_forward(nx.layer_norm(h, layer.ln2_gain, layer.ln2_bias), layer)
        h = nx.add(h, nx.dropout(ff, config.dropout, rng))
        state.hidden.append(h)
    return state
