"""Plain and gated correlation between token sets.

The plain form adds the attended values back onto the queries::

    C(Q, V)   = softmax(Q K^T / sqrt(d_k)) V + Q

The gated form replaces the fixed residual with a learned convex mix::

    C_g(Q, V) = softmax(Q K^T / sqrt(d_k)) V + M * Q + (1 - M) * V
    M         = sigmoid(G([Q, V]))

where ``G`` is a fully connected layer on the feature-axis concatenation.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .nn import FeedForward, LayerNorm, Linear, Module, MultiHeadAttention, scaled_dot_attention
from .tensor import Tensor


def _check_dims(q: Tensor, kv: Tensor) -> None:
    if q.ndim < 2 or q.ndim != kv.ndim or q.shape[:-2] != kv.shape[:-2] or q.shape[-1] != kv.shape[-1]:
        raise DimensionError(
            f"correlation needs [(B,) N, d] inputs with equal d, got {list(q.shape)} and {list(kv.shape)}"
        )


def _check_same_size(q: Tensor, kv: Tensor) -> None:
    if q.shape != kv.shape:
        raise ContractError(
            "gated correlation needs Q, V and the gate mask to be the same size; "
            f"got Q {list(q.shape)} and V {list(kv.shape)}"
        )


def correlation(q: Tensor, v: Tensor) -> Tensor:
    """Bare single-head correlation with K = V and no projections."""
    _check_dims(q, v)
    att, _ = scaled_dot_attention(q, v, v)
    return T.add(att, q)


def gated_correlation(q: Tensor, v: Tensor, gate: Callable[[Tensor], Tensor]) -> Tensor:
    """Bare single-head gated correlation; ``gate`` maps ``[N x 2d] -> [N x d]``."""
    _check_dims(q, v)
    _check_same_size(q, v)
    att, _ = scaled_dot_attention(q, v, v)
    mask = gate_mask(q, v, gate)
    return T.add(att, gated_residual(q, v, mask))


def gate_mask(q: Tensor, v: Tensor, gate: Callable[[Tensor], Tensor]) -> Tensor:
    return T.sigmoid(gate(T.concat([q, v], axis=-1)))


def gated_residual(q: Tensor, v: Tensor, mask: Tensor) -> Tensor:
    """``M * q + (1 - M) * v`` written as ``v + M * (q - v)``."""
    return T.add(v, T.hadamard(mask, T.sub(q, v)))


class CorrelationLayer(Module):
    """One attention + residual (plain or gated) + FFN step."""

    def __init__(self, dim: int, heads: int = 6, gated: bool = False,
                 identity: bool = False, use_ffn: bool = True):
        self.gated = gated
        self.use_ffn = use_ffn
        self.attn = MultiHeadAttention(dim, heads, identity=identity)
        self.norm = LayerNorm(dim)
        if gated:
            self.gate = Linear(2 * dim, dim, init="zeros")
        if use_ffn:
            self.ffn = FeedForward(dim)

    def mix(self, q: Tensor, kv: Tensor):
        """Attention plus residual, before normalisation.

        Returns ``(combined, attn_weights, gate_mask_or_None)``.
        """
        _check_dims(q, kv)
        if self.gated:
            _check_same_size(q, kv)
        att, weights = self.attn(q, kv)
        if self.gated:
            mask = gate_mask(q, kv, self.gate)
            return T.add(att, gated_residual(q, kv, mask)), weights, mask
        return T.add(att, q), weights, None

    def __call__(self, q: Tensor, kv: Tensor) -> Tensor:
        x, _, _ = self.mix(q, kv)
        x = self.norm(x)
        return self.ffn(x) if self.use_ffn else x


class CorrelationBlock(Module):
    """Stack of ``layer_count`` correlation layers; kv is fixed across layers."""

    def __init__(self, dim: int, heads: int = 6, layer_count: int = 2, mode: str = "plain",
                 identity: bool = False, use_ffn: bool = True):
        if layer_count < 1:
            raise ContractError(f"layer_count must be >= 1, got {layer_count}")
        if mode not in ("plain", "gated"):
            raise ContractError(f"mode must be 'plain' or 'gated', got {mode!r}")
        self.mode = mode
        self.layers = [
            CorrelationLayer(dim, heads, gated=mode == "gated", identity=identity, use_ffn=use_ffn)
            for _ in range(layer_count)
        ]

    @property
    def gated(self) -> bool:
        return self.mode == "gated"

    def __call__(self, q: Tensor, kv: Tensor) -> Tensor:
        _check_dims(q, kv)
        if self.gated:
            _check_same_size(q, kv)
        for layer in self.layers:
            q = layer(q, kv)
        return q

    def correlate(self, q: Tensor, kv: Tensor) -> Tensor:
        return self(q, kv)


def attention_imbalance_report(n_values: Sequence[int], dim: int = 48, n_queries: int = 16,
                               seed: int = 0) -> list[tuple[int, float, float]]:
    """Row-mean attention weight against the fixed residual weight of 1.

    For each key count ``N_V`` random queries attend over ``N_V`` random keys;
    the mean attention weight per row is ``1 / N_V`` by normalisation, while
    the residual path always carries weight 1.
    """
    rng = np.random.default_rng(seed)
    rows = []
    for n_v in n_values:
        if n_v < 1:
            raise ContractError(f"N_V must be >= 1, got {n_v}")
        q = Tensor._wrap(rng.standard_normal((n_queries, dim)))
        k = Tensor._wrap(rng.standard_normal((n_v, dim)))
        _, attn = scaled_dot_attention(q, k, k)
        rows.append((int(n_v), float(attn.data.mean(axis=1).mean()), 1.0))
    return rows


def format_imbalance_tsv(rows: Sequence[tuple[int, float, float]]) -> str:
    lines = ["N_V\tmean_attn_weight\tresidual_weight"]
    lines += [f"{n}\t{w:.17g}\t{r:.17g}" for n, w, r in rows]
    return "\n".join(lines) + "\n"
