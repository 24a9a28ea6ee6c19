"""Neural building blocks on top of :mod:`tsvod.tensor`."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError, NumericError
from .tensor import Tensor

CHECKPOINT_MAGIC = b"PTSE"
CHECKPOINT_VERSION = 1
FOCAL_PRIOR = 0.01


def parameter(shape, name: str | None = None) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, name=name)


class Module:
    """Minimal parameter container.

    Parameters are discovered by walking instance attributes in insertion
    order, which makes naming (and therefore checkpoints) deterministic.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        seen: set[int] = set()
        for name, t in self._walk(prefix):
            if id(t) not in seen:
                seen.add(id(t))
                yield name, t

    def _walk(self, prefix: str):
        for key, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                yield prefix + key, val
            elif isinstance(val, Module):
                yield from val._walk(f"{prefix}{key}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item._walk(f"{prefix}{key}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for val in vars(self).values():
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, (list, tuple)):
                for item in val:
                    if isinstance(item, Module):
                        yield from item.modules()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def reset_parameters(self, rng: np.random.Generator) -> None:
        """Initialise parameters owned directly by this module (not children)."""

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise ContractError(
                f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}"
            )
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise DimensionError(f"{name}: checkpoint shape {list(arr.shape)} vs {list(p.shape)}")
            p.data = arr.copy()


def xavier_bound(fan_in: int, fan_out: int) -> float:
    return math.sqrt(6.0 / (fan_in + fan_out))


class Linear(Module):
    """``y = x W^T + b`` with ``W`` stored as ``[out, in]``.

    ``init`` selects the scheme: ``"xavier"`` (default), ``"zeros"`` (weights
    and bias, used for gates) or ``"focal"`` (xavier weights, prior-probability
    bias for sigmoid classifiers).
    """

    def __init__(self, in_dim: int, out_dim: int, init: str = "xavier"):
        if init not in ("xavier", "zeros", "focal"):
            raise ConfigError(f"unknown init scheme {init!r}")
        self.in_dim, self.out_dim, self.init = in_dim, out_dim, init
        self.weight = parameter((out_dim, in_dim))
        self.bias = parameter((out_dim,))

    def reset_parameters(self, rng):
        if self.init == "zeros":
            self.weight.data = np.zeros((self.out_dim, self.in_dim))
            self.bias.data = np.zeros(self.out_dim)
            return
        a = xavier_bound(self.in_dim, self.out_dim)
        self.weight.data = rng.uniform(-a, a, size=(self.out_dim, self.in_dim))
        if self.init == "focal":
            self.bias.data = np.full(self.out_dim, -math.log((1 - FOCAL_PRIOR) / FOCAL_PRIOR))
        else:
            self.bias.data = np.zeros(self.out_dim)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise DimensionError(f"Linear({self.in_dim}->{self.out_dim}) got input {list(x.shape)}")
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.dim = dim
        self.gamma = parameter((dim,))
        self.beta = parameter((dim,))

    def reset_parameters(self, rng):
        self.gamma.data = np.ones(self.dim)
        self.beta.data = np.zeros(self.dim)

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
    """``softmax(q k^T / sqrt(d_k)) v`` over the last two axes.

    Returns the attended values and the attention weights (both on tape).
    """
    dk = q.shape[-1]
    scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(dk))
    attn = T.softmax_rows(scores)
    return T.matmul(attn, v), attn


class MultiHeadAttention(Module):
    """Projected multi-head attention.

    With ``identity=True`` the four projections are dropped, so each head
    attends over its raw feature slice; with ``heads=1`` this is the bare
    ``softmax(QK^T/sqrt(d_k))V`` operator.
    """

    def __init__(self, dim: int, heads: int = 6, identity: bool = False):
        if heads < 1 or dim % heads:
            raise ConfigError(f"model dim {dim} is not divisible by head count {heads}")
        self.dim, self.heads, self.identity = dim, heads, identity
        self.head_dim = dim // heads
        if not identity:
            self.q_proj = Linear(dim, dim)
            self.k_proj = Linear(dim, dim)
            self.v_proj = Linear(dim, dim)
            self.out_proj = Linear(dim, dim)

    def _split(self, x: Tensor) -> Tensor:
        # [..., n, d] -> [..., heads, n, head_dim]
        *lead, n, _ = x.shape
        nd = len(lead)
        x = T.reshape(x, (*lead, n, self.heads, self.head_dim))
        return T.transpose(x, (*range(nd), nd + 1, nd, nd + 2))

    def __call__(self, q_tokens: Tensor, kv_tokens: Tensor) -> tuple[Tensor, np.ndarray]:
        """Tokens are ``[N, d]`` or carry identical leading batch axes ``[B, N, d]``."""
        if (q_tokens.ndim < 2 or q_tokens.ndim != kv_tokens.ndim
                or q_tokens.shape[:-2] != kv_tokens.shape[:-2]):
            raise DimensionError(
                f"attention expects token matrices, got {list(q_tokens.shape)} and {list(kv_tokens.shape)}"
            )
        if q_tokens.shape[-1] != self.dim or kv_tokens.shape[-1] != self.dim:
            raise DimensionError(
                f"attention dim {self.dim} vs inputs {list(q_tokens.shape)}, {list(kv_tokens.shape)}"
            )
        if self.identity:
            q, k, v = q_tokens, kv_tokens, kv_tokens
        else:
            q, k, v = self.q_proj(q_tokens), self.k_proj(kv_tokens), self.v_proj(kv_tokens)
        out, attn = scaled_dot_attention(self._split(q), self._split(k), self._split(v))
        *lead, nq, _ = q_tokens.shape
        nd = len(lead)
        out = T.transpose(out, (*range(nd), nd + 1, nd, nd + 2))
        out = T.reshape(out, (*lead, nq, self.dim))
        if not self.identity:
            out = self.out_proj(out)
        return out, attn.data.mean(axis=-3)


class FeedForward(Module):
    """``LN(x + W2 relu(W1 x))`` with post-norm."""

    def __init__(self, dim: int, hidden: int | None = None):
        hidden = hidden or 4 * dim
        self.lin1 = Linear(dim, hidden)
        self.lin2 = Linear(hidden, dim)
        self.norm = LayerNorm(dim)

    def __call__(self, x: Tensor) -> Tensor:
        return self.norm(T.add(x, self.lin2(T.relu(self.lin1(x)))))


def sine_positional_encoding(h: int, w: int, d: int, temperature: float = 10000.0) -> Tensor:
    """2-D sine/cosine encoding, ``d/2`` channels for rows and ``d/2`` for columns.

    Each (sin, cos) channel pair shares a frequency, so every pair has unit
    norm at every grid position.
    """
    if d % 4:
        raise ConfigError(f"positional encoding dim {d} must be divisible by 4")
    half = d // 2
    scale = 2 * math.pi
    ys = (np.arange(h, dtype=np.float64) + 1) / (h + 1e-6) * scale
    xs = (np.arange(w, dtype=np.float64) + 1) / (w + 1e-6) * scale
    dim_t = temperature ** (2 * (np.arange(half) // 2) / half)

    def enc(pos):
        p = pos[:, None] / dim_t
        out = np.empty_like(p)
        out[:, 0::2] = np.sin(p[:, 0::2])
        out[:, 1::2] = np.cos(p[:, 1::2])
        return out

    ey, ex = enc(ys), enc(xs)
    grid = np.concatenate(
        [np.repeat(ey, w, axis=0), np.tile(ex, (h, 1))], axis=1
    )
    return Tensor._wrap(grid)


def init_params(module: Module, seed: int) -> dict[str, Tensor]:
    """Deterministically initialise every parameter of ``module``."""
    rng = np.random.default_rng(seed)
    for m in module.modules():
        m.reset_parameters(rng)
    return dict(module.named_parameters())


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], state: AdamState, lr: float | None = None) -> None:
    """One bias-corrected Adam update using each parameter's ``.grad``.

    A parameter without a gradient is treated as having a zero gradient.
    """
    lr = state.lr if lr is None else lr
    for name, p in params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NumericError(f"non-finite gradient for parameter {name}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if g.shape != p.shape:
            raise DimensionError(f"{name}: gradient {list(g.shape)} vs parameter {list(p.shape)}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        sq = (1 - b2) * g
        sq *= g
        v += sq
        # in-place form of lr * (m / c1) / (sqrt(v / c2) + eps), same rounding
        step = m / c1
        step *= lr
        den = v / c2
        np.sqrt(den, out=den)
        den += state.eps
        step /= den
        p.data = p.data - step


def save_checkpoint(path: str | Path, params: dict[str, np.ndarray] | Module) -> None:
    if isinstance(params, Module):
        params = params.state_dict()
    buf = bytearray(CHECKPOINT_MAGIC)
    buf += struct.pack("<I", CHECKPOINT_VERSION)
    for name, arr in params.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        buf += struct.pack("<I", len(raw)) + raw
        buf += struct.pack("<Q", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        buf += arr.tobytes()
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ContractError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ContractError(f"{path}: unsupported checkpoint version {version}")
    try:
        return _read_records(blob)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise ContractError(f"{path}: truncated or corrupt checkpoint ({exc})") from None


def _read_records(blob: bytes) -> dict[str, np.ndarray]:
    pos = 8
    out: dict[str, np.ndarray] = {}
    while pos < len(blob):
        (n,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos : pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<Q", blob, pos)
        pos += 8
        shape = struct.unpack_from(f"<{rank}Q", blob, pos)
        pos += 8 * rank
        count = int(np.prod(shape)) if rank else 1
        out[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * count
    return out
