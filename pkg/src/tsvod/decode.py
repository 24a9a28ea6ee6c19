"""Query assembling, transformer decoding over the enhanced memory, and heads."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoder import MemoryMap
from .errors import ContractError, DimensionError
from .nn import FeedForward, LayerNorm, Linear, Module, MultiHeadAttention, parameter
from .tensor import Tensor


@dataclass
class QuerySet:
    primal: Tensor
    assembled: Tensor

    @property
    def count(self) -> int:
        return self.assembled.shape[-2]


@dataclass
class DetectionSet:
    """Per-query class logits ``[Q x C]`` and sigmoid boxes ``[Q x 4]`` (cx, cy, w, h)."""

    logits: Tensor
    boxes: Tensor

    def __len__(self) -> int:
        return self.logits.shape[0]

    def scores(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.logits.data))


class DecoderLayer(Module):
    """Self-attention over queries, cross-attention onto memory, FFN (post-norm)."""

    def __init__(self, d: int, heads: int, self_attention: bool = True):
        self.self_attention = self_attention
        if self_attention:
            self.self_attn = MultiHeadAttention(d, heads)
            self.norm1 = LayerNorm(d)
        self.cross_attn = MultiHeadAttention(d, heads)
        self.norm2 = LayerNorm(d)
        self.ffn = FeedForward(d)

    def __call__(self, q: Tensor, memory: Tensor) -> tuple[Tensor, np.ndarray]:
        if self.self_attention:
            a, _ = self.self_attn(q, q)
            q = self.norm1(T.add(q, a))
        c, weights = self.cross_attn(q, memory)
        q = self.norm2(T.add(q, c))
        return self.ffn(q), weights


class Decoder(Module):
    def __init__(self, d: int, heads: int = 6, layers: int = 2, self_attention: bool = True):
        self.d = d
        self.layers = [DecoderLayer(d, heads, self_attention) for _ in range(layers)]
        self.last_cross_attention: list[np.ndarray] = []

    def __call__(self, queries: Tensor, memory: Tensor) -> Tensor:
        if queries.shape[-1] != self.d or memory.shape[-1] != self.d:
            raise DimensionError(
                f"decoder dim {self.d} vs queries {list(queries.shape)}, memory {list(memory.shape)}"
            )
        self.last_cross_attention = []
        for layer in self.layers:
            queries, w = layer(queries, memory)
            self.last_cross_attention.append(w)
        return queries


class QueryAssembler(Module):
    """Primal queries plus one shallow-decoder pass per context frame.

    The shallow decoder is shared across context frames, so identical context
    frames yield identical query blocks.
    """

    def __init__(self, d: int, num_queries: int = 100, heads: int = 6, sd_layers: int = 2,
                 enabled: bool = True):
        self.d, self.num_queries, self.enabled = d, num_queries, enabled
        self.primal = parameter((num_queries, d))
        if enabled:
            self.shallow = Decoder(d, heads, sd_layers)

    def reset_parameters(self, rng):
        self.primal.data = rng.standard_normal((self.num_queries, self.d))

    def assemble_queries(self, m_ctx: list[MemoryMap]) -> QuerySet:
        if not self.enabled:
            return QuerySet(self.primal, self.primal)
        if not m_ctx:
            raise ContractError("query assembling needs at least one context frame")
        lead = m_ctx[0].tokens.shape[:-2]
        primal = T.broadcast_to(self.primal, (*lead, *self.primal.shape)) if lead else self.primal
        blocks = [primal] + [self.shallow(primal, m.tokens) for m in m_ctx]
        return QuerySet(primal, T.concat(blocks, axis=-2))

    __call__ = assemble_queries


class DetectionHeads(Module):
    """Linear class head (sigmoid semantics) and 3-layer box MLP."""

    def __init__(self, d: int, num_classes: int):
        self.cls = Linear(d, num_classes, init="focal")
        self.box1 = Linear(d, d)
        self.box2 = Linear(d, d)
        self.box3 = Linear(d, 4)

    def __call__(self, decoded: Tensor) -> DetectionSet:
        logits = self.cls(decoded)
        h = T.relu(self.box1(decoded))
        h = T.relu(self.box2(h))
        return DetectionSet(logits, T.sigmoid(self.box3(h)))

