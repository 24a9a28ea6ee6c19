"""Temporal and spatial aggregation of context memories into the target memory.

Pipeline, per target frame ``t`` with context memories ``M_{t+i}``::

    h_t  = C(M_t, [M_{t+i} ...])           temporal memory (token-axis concat)
    f_i  = C_g(M_t, M_{t+i})               spatial memory, one per context frame
    E_t  = C(h_t, [f_i ...])               temporal-spatial memory
    R_t  = C_g(E_t, M_t)                   enhanced memory fed to the decoder

Every stage keeps the target's ``[N x d]`` token shape; a leading batch
axis ``[B, N, d]`` passes through unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .correlation import CorrelationBlock
from .encoder import MemoryMap, check_same_grid
from .errors import ContractError
from .nn import Module
from .tensor import Tensor

STAGES = ("M_t", "h_t", "f_i", "E_t", "R_t")


@dataclass
class TemporalMemory:
    h_t: Tensor


@dataclass
class SpatialMemory:
    f_i: Tensor
    offset: int = 0


@dataclass
class EnhancedMemory:
    E_t: Tensor
    R_t: Tensor


@dataclass
class AggregationTrace:
    """Intermediate memories kept for feature-map dumps."""

    m_t: Tensor
    h_t: Tensor | None = None
    f: list[Tensor] = field(default_factory=list)
    e_t: Tensor | None = None
    r_t: Tensor | None = None

    def stage(self, name: str) -> list[Tensor]:
        table = {
            "M_t": [self.m_t],
            "h_t": [self.h_t] if self.h_t is not None else [],
            "f_i": list(self.f),
            "E_t": [self.e_t] if self.e_t is not None else [],
            "R_t": [self.r_t] if self.r_t is not None else [],
        }
        if name not in table:
            raise ContractError(f"unknown stage {name!r}; expected one of {', '.join(STAGES)}")
        return table[name]


def _token_concat(tensors: list[Tensor]) -> Tensor:
    return tensors[0] if len(tensors) == 1 else T.concat(tensors, axis=-2)


class Aggregator(Module):
    """Holds the four correlation blocks and applies the ablation switches.

    ``enable_tfam=False`` sets ``h_t := M_t``; ``enable_stam=False`` skips the
    spatial memories so ``E_t := h_t``; ``residual_gated=False`` sets
    ``R_t := E_t``; ``gated=False`` swaps the spatial blocks' gate for the
    plain residual.
    """

    def __init__(self, d: int, heads: int = 6, layer_count: int = 2, *,
                 enable_tfam: bool = True, enable_stam: bool = True,
                 gated: bool = True, residual_gated: bool = True):
        self.enable_tfam = enable_tfam
        self.enable_stam = enable_stam
        self.residual_gated = residual_gated
        if enable_tfam:
            self.tfam_block = CorrelationBlock(d, heads, layer_count, "plain")
        if enable_stam:
            self.stam_block = CorrelationBlock(d, heads, layer_count, "gated" if gated else "plain")
            self.fuse_block = CorrelationBlock(d, heads, layer_count, "plain")
        if residual_gated and (enable_tfam or enable_stam):
            self.rgc_block = CorrelationBlock(d, heads, layer_count, "gated")

    @property
    def active(self) -> bool:
        return self.enable_tfam or self.enable_stam

    def tfam(self, m_t: MemoryMap, m_ctx: list[MemoryMap]) -> TemporalMemory:
        if not m_ctx:
            raise ContractError("tfam needs at least one context frame")
        check_same_grid([m_t, *m_ctx])
        kv = _token_concat([m.tokens for m in m_ctx])
        return TemporalMemory(self.tfam_block(m_t.tokens, kv))

    def stam(self, m_t: MemoryMap, m_ctx_i: MemoryMap) -> SpatialMemory:
        check_same_grid([m_t, m_ctx_i])
        return SpatialMemory(self.stam_block(m_t.tokens, m_ctx_i.tokens), m_ctx_i.frame_offset)

    def progressive_aggregate(self, h_t: TemporalMemory, f_list: list[SpatialMemory],
                              m_t: MemoryMap) -> EnhancedMemory:
        if not f_list:
            raise ContractError("progressive aggregation needs at least one spatial memory")
        e_t = self.fuse_block(h_t.h_t, _token_concat([f.f_i for f in f_list]))
        return EnhancedMemory(e_t, self.residual(e_t, m_t))

    def residual(self, e_t: Tensor, m_t: MemoryMap) -> Tensor:
        return self.rgc_block(e_t, m_t.tokens) if self.residual_gated else e_t

    def __call__(self, m_t: MemoryMap, m_ctx: list[MemoryMap]) -> tuple[Tensor, AggregationTrace]:
        trace = AggregationTrace(m_t.tokens)
        if not self.active:
            trace.r_t = m_t.tokens
            return m_t.tokens, trace
        if not m_ctx:
            raise ContractError("context modules are enabled but no context frames were given")
        h_t = self.tfam(m_t, m_ctx) if self.enable_tfam else TemporalMemory(m_t.tokens)
        trace.h_t = h_t.h_t
        if self.enable_stam:
            f_list = [self.stam(m_t, m) for m in m_ctx]
            trace.f = [f.f_i for f in f_list]
            enhanced = self.progressive_aggregate(h_t, f_list, m_t)
        else:
            enhanced = EnhancedMemory(h_t.h_t, self.residual(h_t.h_t, m_t))
        trace.e_t, trace.r_t = enhanced.E_t, enhanced.R_t
        return enhanced.R_t, trace


def heatmap(tokens: Tensor | np.ndarray, grid_h: int, grid_w: int) -> np.ndarray:
    """L2 norm over features, min-max scaled to ``uint8`` on the token grid."""
    arr = tokens.data if isinstance(tokens, Tensor) else np.asarray(tokens)
    if arr.shape[0] != grid_h * grid_w:
        raise ContractError(f"{arr.shape[0]} tokens for a {grid_h}x{grid_w} grid")
    norms = np.sqrt((arr * arr).sum(axis=1)).reshape(grid_h, grid_w)
    lo, hi = norms.min(), norms.max()
    if hi - lo <= 0:
        return np.zeros((grid_h, grid_w), dtype=np.uint8)
    return np.round((norms - lo) / (hi - lo) * 255.0).astype(np.uint8)


def write_pgm(path: str | Path, img: np.ndarray) -> None:
    img = np.asarray(img, dtype=np.uint8)
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    magic, (w, h), maxval, payload = read_netpbm(path)
    if magic != b"P5":
        raise ContractError(f"{path}: not a binary PGM")
    if maxval != 255:
        raise ContractError(f"{path}: unsupported maxval {maxval}")
    return np.frombuffer(payload[: w * h], dtype=np.uint8).reshape(h, w)


def read_netpbm(path: str | Path) -> tuple[bytes, tuple[int, int], int, bytes]:
    """Split a P5/P6 file into magic, (width, height), maxval and raw payload."""
    blob = Path(path).read_bytes()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if blob[pos : pos + 1] == b"#":
            pos = blob.index(b"\n", pos)
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        fields.append(blob[start:pos])
    # exactly one whitespace byte separates the header from the payload
    return fields[0], (int(fields[1]), int(fields[2])), int(fields[3]), blob[pos + 1 :]
