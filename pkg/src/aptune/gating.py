"""Prefix parameters and the adaptive gates that rescale them.

Each layer ``i`` owns prefix keys/values ``[l_i, d]``. Depending on the mode, a
token-level gate ``alpha_i = sigmoid(h_first @ W_i)`` (one weight per prefix
token, per example) and a layer-level scalar ``lambda_i`` multiply the prefix
before it is concatenated into attention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import numerics as nx
from .numerics import Tensor
from .transformer import GATE_MODES, LayerPrefix, ModelConfig

# which gate parameters each mode trains
_TOKEN_GATE_HIDDEN = {"apt", "no_layer_gate"}
_TOKEN_GATE_BIAS = {"no_hidden"}
_LAYER_GATE = {"apt", "no_token_gate", "no_hidden"}
PASS_THROUGH = {"pt2", "pt2_plus", "pt2_star"}

ABLATION_ARMS = ("apt", "no_token_gate", "no_layer_gate", "no_hidden")
ARM_LABELS = {
    "apt": "APT",
    "no_token_gate": "w/o token-level α",
    "no_layer_gate": "w/o layer-level λ",
    "no_hidden": "w/o hidden states h",
    "pt2": "PT-2",
    "pt2_plus": "PT-2+",
    "pt2_star": "PT-2*",
}


def has_token_gate(mode: str) -> bool:
    return mode in _TOKEN_GATE_HIDDEN or mode in _TOKEN_GATE_BIAS


def has_layer_gate(mode: str) -> bool:
    return mode in _LAYER_GATE


def token_gate(h_first: Tensor, weight: Tensor) -> Tensor:
    """Per-example gate over prefix tokens: sigmoid(h_first @ weight), [b, l]."""
    if h_first.data.ndim != 2:
        raise ValueError(f"h_first must be [batch, d], got {h_first.shape}")
    if weight.shape[0] != h_first.shape[1]:
        raise ValueError(f"gate weight {weight.shape} does not match hidden width {h_first.shape[1]}")
    return nx.sigmoid(nx.matmul(h_first, weight))


def gate_prefix(
    prefix_key: Tensor,
    prefix_value: Tensor,
    alpha: Tensor | None,
    lam: Tensor | None,
    batch: int,
) -> tuple[Tensor, Tensor]:
    """Scale the prefix by ``lam * alpha`` and expand it to [batch, l, d].

    ``alpha`` is [b, l] (per example) or [1, l] (shared); ``None`` for either
    factor means that factor is absent (pass-through).
    """
    l, d = prefix_key.shape
    if prefix_value.shape != (l, d):
        raise ValueError(f"prefix key {prefix_key.shape} and value {prefix_value.shape} differ")
    out = []
    for p in (prefix_key, prefix_value):
        if alpha is not None:
            if alpha.shape[-1] != l:
                raise ValueError(f"gate length {alpha.shape[-1]} does not match prefix length {l}")
            p = nx.mul(nx.reshape(alpha, (alpha.shape[0], l, 1)), p)
        if lam is not None:
            p = nx.mul(p, lam)
        if p.data.ndim == 2 or p.shape[0] != batch:
            p = nx.broadcast_to(p, (batch, l, d))
        out.append(p)
    return out[0], out[1]


@dataclass
class LayerGate:
    prefix_key: Tensor
    prefix_value: Tensor
    weight: Tensor | None = None
    bias: Tensor | None = None
    lam: Tensor | None = None

    @property
    def length(self) -> int:
        return self.prefix_key.shape[0]


class PrefixGates:
    """Per-layer prefix bank plus the gate parameters for one mode.

    Called as the encoder's prefix hook. ``forced`` pins ``(lambda, alpha)`` to
    constants for equivalence checks.
    """

    def __init__(self, config: ModelConfig, layers: list[LayerGate]):
        self.config = config
        self.mode = config.mode
        self.layers = layers
        self.forced: tuple[float, float] | None = None

    @classmethod
    def init(cls, config: ModelConfig, seed: int, dtype=np.float32, prefix_std: float = 0.02) -> "PrefixGates":
        rng = np.random.default_rng([seed, 0])
        d = config.model_dim
        mode = config.mode
        layers = []
        # prefixes first so every mode with the same lengths starts from the same prefix
        lengths = config.layer_prefix_lengths()
        prefixes = [
            (rng.normal(0.0, prefix_std, (n, d)), rng.normal(0.0, prefix_std, (n, d))) for n in lengths
        ]
        for n, (pk, pv) in zip(lengths, prefixes):
            gate = LayerGate(Tensor(pk, requires_grad=True, dtype=dtype), Tensor(pv, requires_grad=True, dtype=dtype))
            if mode in _TOKEN_GATE_HIDDEN:
                gate.weight = Tensor(np.zeros((d, n)), requires_grad=True, dtype=dtype)
            if mode in _TOKEN_GATE_BIAS:
                gate.bias = Tensor(np.zeros(n), requires_grad=True, dtype=dtype)
            if mode in _LAYER_GATE:
                gate.lam = Tensor(np.ones(1), requires_grad=True, dtype=dtype)
            layers.append(gate)
        return cls(config, layers)

    def named_tensors(self) -> Iterator[tuple[str, Tensor]]:
        for i, g in enumerate(self.layers):
            yield f"prefix.{i}.key", g.prefix_key
            yield f"prefix.{i}.value", g.prefix_value
            if g.weight is not None:
                yield f"gate.{i}.weight", g.weight
            if g.bias is not None:
                yield f"gate.{i}.bias", g.bias
            if g.lam is not None:
                yield f"gate.{i}.lambda", g.lam

    @classmethod
    def from_tensors(cls, config: ModelConfig, tensors: dict[str, Tensor]) -> "PrefixGates":
        layers = []
        for i in range(config.num_layers):
            layers.append(
                LayerGate(
                    tensors[f"prefix.{i}.key"],
                    tensors[f"prefix.{i}.value"],
                    tensors.get(f"gate.{i}.weight"),
                    tensors.get(f"gate.{i}.bias"),
                    tensors.get(f"gate.{i}.lambda"),
                )
            )
        return cls(config, layers)

    def alpha(self, i: int, h_first: Tensor) -> Tensor | None:
        g = self.layers[i]
        if self.forced is not None:
            return Tensor(np.full((h_first.shape[0], g.length), self.forced[1]), dtype=g.prefix_key.dtype)
        if self.mode in _TOKEN_GATE_HIDDEN:
            return token_gate(h_first, g.weight)
        if self.mode in _TOKEN_GATE_BIAS:
            return nx.sigmoid(nx.reshape(g.bias, (1, g.length)))
        return None

    def scale(self, i: int) -> Tensor | None:
        g = self.layers[i]
        if self.forced is not None:
            return Tensor(np.array([self.forced[0]]), dtype=g.prefix_key.dtype)
        return g.lam if self.mode in _LAYER_GATE else None

    def __call__(self, i: int, h_first: Tensor) -> LayerPrefix:
        g = self.layers[i]
        batch = h_first.shape[0]
        alpha = self.alpha(i, h_first)
        pk, pv = gate_prefix(g.prefix_key, g.prefix_value, alpha, self.scale(i), batch)
        alpha_values = None
        if alpha is not None:
            alpha_values = np.broadcast_to(alpha.data, (batch, g.length)).copy()
        return LayerPrefix(pk, pv, alpha_values)


def trainable_param_count(config: ModelConfig, mode: str | None = None) -> int:
    """Closed-form count of prefix and gate parameters (task head excluded)."""
    mode = config.mode if mode is None else mode
    if mode not in GATE_MODES:
        raise ValueError(f"unknown gate mode {mode!r}")
    d = config.model_dim
    if mode == "pt2_plus":
        lengths = [math.ceil(1.5 * config.prefix_len)] * config.num_layers
    elif mode == "pt2_star":
        if config.prefix_lengths is None:
            raise ValueError("pt2_star needs per-layer prefix lengths")
        lengths = list(config.prefix_lengths)
    else:
        lengths = list(config.prefix_lengths) if config.prefix_lengths is not None else [config.prefix_len] * config.num_layers
    total = 0
    for n in lengths:
        total += 2 * n * d
        if mode in _TOKEN_GATE_HIDDEN:
            total += d * n
        if mode in _TOKEN_GATE_BIAS:
            total += n
        if mode in _LAYER_GATE:
            total += 1
    return total
