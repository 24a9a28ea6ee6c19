"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations only record onto a :class:`Tape` while one is active::

    with Tape() as tape:
        loss = tsum(hadamard(x, x))
    tape.backward(loss)

Outside a tape every operation is a plain numpy computation, which is what
inference uses.
"""

from __future__ import annotations

import contextvars
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

_ACTIVE_TAPE: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar(
    "active_tape", default=None
)

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """Row-major float64 array that can take part in a gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "node_id", "name", "_tape", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64, copy=True, order="C")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node_id: Optional[int] = None
        self.name = name
        self._tape: Optional[Tape] = None

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        t.data = np.ascontiguousarray(data, dtype=np.float64)
        t.requires_grad = requires_grad
        t.grad = None
        t.node_id = None
        t.name = None
        t._tape = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.node_id is None

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data.copy())

    def backward(self) -> None:
        if self._tape is None:
            raise ContractError("tensor was not produced on a tape; nothing to differentiate")
        self._tape.backward(self)

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={list(self.shape)}{rg})"

    # operator sugar
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def _not_scalar(t: Tensor):
    raise ContractError(f"item() needs a single-element tensor, got shape {list(t.shape)}")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor._wrap(np.zeros(shape), requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor._wrap(np.ones(shape), requires_grad)


class _Entry:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs: tuple[Tensor, ...], output: Tensor, backward: BackwardFn):
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations for one forward pass.

    Entries are appended in execution order, so the list is topologically
    sorted by construction. ``backward`` walks it once in reverse.
    """

    def __init__(self):
        self.entries: list[_Entry] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.entries)

    def record(self, inputs: tuple[Tensor, ...], output: Tensor, backward: BackwardFn) -> None:
        output.node_id = len(self.entries)
        output._tape = self
        self.entries.append(_Entry(inputs, output, backward))

    def clear(self) -> None:
        self.entries.clear()

    def backward(self, loss: Tensor) -> None:
        """Populate ``.grad`` on every requires-grad ancestor of ``loss``.

        Gradients accumulate across calls until ``zero_grad``.
        """
        if loss.size != 1:
            raise ContractError(
                f"backward needs a scalar loss, got shape {list(loss.shape)}"
            )
        if loss._tape is not self or loss.node_id is None:
            raise ContractError("loss was not recorded on this tape")
        pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for entry in reversed(self.entries[: loss.node_id + 1]):
            out = entry.output
            g = pending.pop(id(out), None)
            if g is None:
                continue
            out.grad = g if out.grad is None else out.grad + g
            in_grads = entry.backward(g)
            for inp, gi in zip(entry.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.node_id is None:
                    inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
                else:
                    key = id(inp)
                    prev = pending.get(key)
                    pending[key] = gi if prev is None else prev + gi


def active_tape() -> Optional[Tape]:
    return _ACTIVE_TAPE.get()


def _result(data: np.ndarray, inputs: tuple[Tensor, ...], backward: BackwardFn) -> Tensor:
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        out = Tensor._wrap(data, True)
        tape.record(inputs, out, backward)
        return out
    return Tensor._wrap(data, False)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(
            f"{op}: shapes {list(a.shape)} and {list(b.shape)} do not broadcast"
        ) from None


# elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _result(
        a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb))
    )


def broadcast_add(x: Tensor, bias: Tensor) -> Tensor:
    """Add a bias vector along the trailing axis."""
    if bias.ndim != 1 or x.shape[-1] != bias.shape[0]:
        raise DimensionError(
            f"broadcast_add: bias {list(bias.shape)} does not match trailing dim of {list(x.shape)}"
        )
    return add(x, bias)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _result(
        a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb))
    )


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(
            f"hadamard: shapes {list(a.shape)} and {list(b.shape)} differ"
        )
    return mul(a, b)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def back(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _result(out, (a, b), back)


def pow_scalar(a: Tensor, p: float) -> Tensor:
    ad = a.data
    return _result(ad**p, (a,), lambda g: (g * p * ad ** (p - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a: Tensor, floor: float = 1e-12) -> Tensor:
    """Natural log with the argument clamped below at ``floor``."""
    ad = a.data
    clamped = np.maximum(ad, floor)
    return _result(np.log(clamped), (a,), lambda g: (np.where(ad > floor, g / clamped, 0.0),))


def tabs(a: Tensor) -> Tensor:
    ad = a.data
    return _result(np.abs(ad), (a,), lambda g: (g * np.sign(ad),))


def maximum(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "maximum")
    ad, bd = a.data, b.data
    pick_a = ad >= bd
    return _result(
        np.where(pick_a, ad, bd),
        (a, b),
        lambda g: (
            _unbroadcast(np.where(pick_a, g, 0.0), ad.shape),
            _unbroadcast(np.where(pick_a, 0.0, g), bd.shape),
        ),
    )


def minimum(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "minimum")
    ad, bd = a.data, b.data
    pick_a = ad <= bd
    return _result(
        np.where(pick_a, ad, bd),
        (a, b),
        lambda g: (
            _unbroadcast(np.where(pick_a, g, 0.0), ad.shape),
            _unbroadcast(np.where(pick_a, 0.0, g), bd.shape),
        ),
    )


def clamp_min(a: Tensor, floor: float) -> Tensor:
    ad = a.data
    keep = ad > floor
    return _result(np.where(keep, ad, floor), (a,), lambda g: (np.where(keep, g, 0.0),))


# activations


def relu(a: Tensor) -> Tensor:
    ad = a.data
    mask = ad > 0
    return _result(ad * mask, (a,), lambda g: (g * mask,))


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid_np(a.data)
    return _result(s, (a,), lambda g: (g * s * (1.0 - s),))


def log_sigmoid(a: Tensor) -> Tensor:
    """log(sigmoid(x)) without overflow for large |x|."""
    x = a.data
    out = np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))
    s = _sigmoid_np(x)
    return _result(out, (a,), lambda g: (g * (1.0 - s),))


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by per-row max subtraction."""
    x = a.data
    if x.shape[-1] < 1:
        raise DimensionError("softmax_rows: rows must be non-empty")
    if not np.all(np.isfinite(x)):
        raise NumericError("softmax_rows: non-finite input")
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    s = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _result(s, (a,), back)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply the affine ``gamma``/``beta``."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"layer_norm: gamma {list(gamma.shape)} / beta {list(beta.shape)} vs feature dim {d}"
        )
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data

    def back(g):
        gx = g * gd
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _result(xhat * gd + beta.data, (x, gamma, beta), back)


# reductions


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), back)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


# linear algebra and shape manipulation


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    Leading (batch) axes must be identical, except that a 2-D ``b`` is shared
    by every batch entry of ``a``.
    """
    shared = b.ndim == 2 and a.ndim > 2
    if (a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]
            or (not shared and a.shape[:-2] != b.shape[:-2])):
        raise DimensionError(
            f"matmul: cannot multiply {list(a.shape)} by {list(b.shape)}"
        )
    ad, bd = a.data, b.data
    if shared:
        k, n = bd.shape

        def back(g):
            return g @ bd.T, ad.reshape(-1, k).T @ g.reshape(-1, n)

        return _result(ad @ bd, (a, b), back)
    return _result(
        ad @ bd,
        (a, b),
        lambda g: (g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g),
    )


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w^T + b`` for ``w`` of shape ``[out, in]``, as one tape entry.

    Same arithmetic as ``broadcast_add(matmul(x, transpose(w)), b)``.
    """
    if w.ndim != 2 or x.ndim < 2 or x.shape[-1] != w.shape[1] or b.shape != (w.shape[0],):
        raise DimensionError(
            f"linear: input {list(x.shape)}, weight {list(w.shape)}, bias {list(b.shape)}"
        )
    xd, wt = x.data, w.data.T.copy()
    k, n = wt.shape
    shared = x.ndim > 2

    def back(g):
        gb = _unbroadcast(g, (n,))
        if shared:
            return g @ wt.T, (xd.reshape(-1, k).T @ g.reshape(-1, n)).T, gb
        return g @ wt.T, (xd.T @ g).T, gb

    return _result(xd @ wt + b.data, (x, w, b), back)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Swap the last two axes, or permute by ``axes``."""
    if axes is None:
        if a.ndim < 2:
            raise DimensionError(f"transpose: need ndim >= 2, got {list(a.shape)}")
        return _result(
            np.swapaxes(a.data, -1, -2).copy(), (a,), lambda g: (np.swapaxes(g, -1, -2),)
        )
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError(f"transpose: {axes} is not a permutation of {a.ndim} axes")
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes).copy(), (a,), lambda g: (np.transpose(g, inv),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {list(old)} as {list(shape)}") from None
    return _result(out, (a,), lambda g: (g.reshape(old),))


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Broadcast ``a`` to ``shape``; the gradient sums over the broadcast axes."""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise DimensionError(f"broadcast_to: cannot broadcast {list(a.shape)} to {list(shape)}") from None
    src = a.shape
    return _result(out, (a,), lambda g: (_unbroadcast(g, src),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ContractError("concat: empty tensor list")
    nd = tensors[0].ndim
    ax = axis % nd
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != nd or any(t.shape[i] != ref[i] for i in range(nd) if i != ax):
            raise DimensionError(
                f"concat on axis {axis}: {[list(x.shape) for x in tensors]} are incompatible"
            )
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def back(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors))
        )

    return _result(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), back)


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (slice, int, np.integer)) or p is None or p is Ellipsis for p in parts)


def slice_(a: Tensor, index) -> Tensor:
    """Indexed copy of ``a``; gradients scatter back (repeated indices add)."""
    shape = a.shape
    out = np.array(a.data[index], dtype=np.float64)
    basic = _is_basic_index(index)

    def back(g):
        z = np.zeros(shape)
        if basic:
            z[index] += g
        else:
            np.add.at(z, index, g)
        return (z,)

    return _result(out, (a,), back)


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution of a ``[C, H, W]`` or ``[B, C, H, W]`` input with ``[O, C, k, k]`` filters (im2col)."""
    if x.ndim not in (3, 4) or w.ndim != 4 or w.shape[1] != x.shape[-3] or w.shape[2] != w.shape[3]:
        raise DimensionError(f"conv2d: input {list(x.shape)} vs filters {list(w.shape)}")
    if b.shape != (w.shape[0],):
        raise DimensionError(f"conv2d: bias {list(b.shape)} vs {w.shape[0]} filters")
    batched = x.ndim == 4
    xd = x.data if batched else x.data[None]
    n, c, h, wd = xd.shape
    o, _, k, _ = w.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d: kernel {k} too large for input {list(x.shape)}")
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((n, c, k, k, ho, wo))
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    cols = cols.reshape(n, c * k * k, ho * wo)
    wmat = w.data.reshape(o, -1)
    out = (wmat @ cols + b.data[:, None]).reshape(n, o, ho, wo)

    def back(g):
        g2 = g.reshape(n, o, ho * wo)
        dw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(w.shape)
        db = g2.sum(axis=(0, 2))
        dcols = (wmat.T @ g2).reshape(n, c, k, k, ho, wo)
        dxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, :, i, j]
        dx = dxp[:, :, padding : padding + h, padding : padding + wd]
        return (dx if batched else dx[0]), dw, db

    return _result(out if batched else out[0], (x, w, b), back)


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
