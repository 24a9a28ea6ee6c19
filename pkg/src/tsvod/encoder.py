"""Shared per-frame feature extraction: conv stem plus transformer encoder."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .nn import FeedForward, LayerNorm, Linear, Module, MultiHeadAttention, parameter, sine_positional_encoding
from .tensor import Tensor

STRIDE = 8


@dataclass
class FrameImage:
    """RGB frame as ``[H, W, 3]`` floats in ``[0, 1]``."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[2] != 3 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ContractError(f"frame must be [H, W, 3], got {list(arr.shape)}")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ContractError("frame values must lie in [0, 1]")
        self.data = arr

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass
class MemoryMap:
    """Encoded token grid of one frame; ``frame_offset`` is 0 for the target.

    ``tokens`` is ``[N, d]``, or ``[B, N, d]`` for a batch of frames sharing
    one offset.
    """

    tokens: Tensor
    grid_h: int
    grid_w: int
    frame_offset: int = 0

    def __post_init__(self):
        if self.tokens.ndim < 2 or self.tokens.shape[-2] != self.grid_h * self.grid_w:
            raise ContractError(
                f"{list(self.tokens.shape)} tokens for a {self.grid_h}x{self.grid_w} grid"
            )

    @property
    def dim(self) -> int:
        return self.tokens.shape[-1]


def check_same_grid(maps: list[MemoryMap]) -> None:
    if not maps:
        return
    ref = (maps[0].grid_h, maps[0].grid_w, maps[0].dim)
    for m in maps[1:]:
        if (m.grid_h, m.grid_w, m.dim) != ref:
            raise ContractError(
                f"memory maps differ in size: {ref} vs {(m.grid_h, m.grid_w, m.dim)}"
            )


@lru_cache(maxsize=16)
def _cached_posenc(h: int, w: int, d: int) -> np.ndarray:
    out = sine_positional_encoding(h, w, d).data
    out.flags.writeable = False
    return out


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int = 3, stride: int = 2, padding: int = 1):
        self.in_ch, self.out_ch, self.kernel = in_ch, out_ch, kernel
        self.stride, self.padding = stride, padding
        self.weight = parameter((out_ch, in_ch, kernel, kernel))
        self.bias = parameter((out_ch,))

    def reset_parameters(self, rng):
        # He-uniform: every stem conv feeds a relu, and xavier scaling shrinks
        # the content signal far below the positional encoding added after it
        a = math.sqrt(6.0 / (self.in_ch * self.kernel * self.kernel))
        self.weight.data = rng.uniform(-a, a, size=self.weight.shape)
        self.bias.data = np.zeros(self.out_ch)

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class Backbone(Module):
    """Three stride-2 conv+relu stages and a 1x1 projection to ``d``."""

    def __init__(self, d: int, channels=(16, 32, 64)):
        c1, c2, c3 = channels
        self.stages = [Conv2d(3, c1), Conv2d(c1, c2), Conv2d(c2, c3)]
        self.proj = Linear(c3, d)

    def __call__(self, img) -> tuple[Tensor, int, int]:
        x = as_chw(img)
        h, w = x.shape[-2:]
        if h % STRIDE or w % STRIDE:
            raise ConfigError(f"image {h}x{w} is not divisible by the backbone stride {STRIDE}")
        for conv in self.stages:
            x = T.relu(conv(x))
        *lead, c, gh, gw = x.shape
        tokens = T.transpose(T.reshape(x, (*lead, c, gh * gw)))
        return self.proj(tokens), gh, gw


def as_chw(img) -> Tensor:
    """``[H, W, 3]`` arrays (or ``[B, H, W, 3]`` stacks) to channel-first tensors."""
    if isinstance(img, Tensor):
        if img.ndim not in (3, 4) or img.shape[-3] != 3:
            raise ContractError(f"image tensor must be [(B,) 3, H, W], got {list(img.shape)}")
        return img
    if isinstance(img, FrameImage):
        img = img.data
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim not in (3, 4) or arr.shape[-1] != 3:
        raise ContractError(f"image must be [(B,) H, W, 3], got {list(arr.shape)}")
    return Tensor._wrap(np.moveaxis(arr, -1, -3).copy())


class EncoderLayer(Module):
    def __init__(self, d: int, heads: int):
        self.attn = MultiHeadAttention(d, heads)
        self.norm = LayerNorm(d)
        self.ffn = FeedForward(d)

    def __call__(self, x: Tensor) -> Tensor:
        a, _ = self.attn(x, x)
        return self.ffn(self.norm(T.add(x, a)))


class Encoder(Module):
    """Backbone + positional encoding + self-attention stack.

    One instance encodes the target and every context frame.
    """

    def __init__(self, d: int = 48, heads: int = 6, layers: int = 2, channels=(16, 32, 64)):
        self.d = d
        self.backbone = Backbone(d, channels)
        self.layers = [EncoderLayer(d, heads) for _ in range(layers)]

    def backbone_forward(self, img) -> Tensor:
        return self.backbone(img)[0]

    def encode(self, img, frame_offset: int = 0) -> MemoryMap:
        x, gh, gw = self.backbone(img)
        x = T.add(x, Tensor._wrap(_cached_posenc(gh, gw, self.d)))
        for layer in self.layers:
            x = layer(x)
        return MemoryMap(x, gh, gw, frame_offset)

    __call__ = encode
