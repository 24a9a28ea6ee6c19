"""Central finite-difference checks of every differentiable operation.

Each check draws random directions ``v`` over all inputs and compares the
tape gradient's projection ``<grad, v>`` with
``(f(x + h v) - f(x - h v)) / 2h``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .config import RunConfig
from .correlation import CorrelationBlock
from .decode import Decoder, DetectionHeads, QueryAssembler
from .encoder import Encoder, MemoryMap
from .aggregation import Aggregator
from .matching import GroundTruth, LossWeights, hungarian, matching_cost, total_loss
from .model import build_model
from .nn import FeedForward, Linear, Module, MultiHeadAttention, init_params
from .tensor import Tape, Tensor

TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    worst_rel_error: float
    probes: int
    seconds: float

    @property
    def passed(self) -> bool:
        return self.worst_rel_error < TOLERANCE


def relative_error(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-10)


def check_gradient(fn: Callable[[], Tensor], inputs: list[Tensor], rng: np.random.Generator,
                   probes: int = 10, h: float = 1e-5, min_h: float = 1e-8, redraws: int = 5) -> float:
    """Worst relative error between tape and finite-difference directional derivatives.

    ``fn`` must build a scalar from ``inputs`` (read through their ``.data``).
    A stencil that straddles a kink (relu, max, abs) shows up as disagreement
    between the two one-sided differences. That test uses function values
    only, so it cannot hide a wrong backward rule. On a kink the step shrinks
    tenfold down to ``min_h``; after that the direction is redrawn.
    """
    for t in inputs:
        t.grad = None
    with Tape() as tape:
        out = fn()
    tape.backward(out)
    grads = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs]
    originals = [t.data.copy() for t in inputs]
    f0 = out.item()

    def at(dirs, step):
        for t, x0, v in zip(inputs, originals, dirs):
            t.data = x0 + step * v
        return fn().item()

    def estimate(dirs):
        step = h
        while True:
            f_plus, f_minus = at(dirs, step), at(dirs, -step)
            central = (f_plus - f_minus) / (2 * step)
            gap = abs((f_plus - f0) - (f0 - f_minus)) / step
            smooth = gap <= 1e-5 * max(abs(central), 1e-6)
            if smooth or step / 10 < min_h:
                return central, smooth
            step /= 10

    worst = 0.0
    try:
        for _ in range(probes):
            for _ in range(redraws + 1):
                dirs = [rng.standard_normal(t.shape) for t in inputs]
                central, smooth = estimate(dirs)
                if smooth:
                    break
            analytic = sum(float((g * v).sum()) for g, v in zip(grads, dirs))
            worst = max(worst, relative_error(analytic, central))
    finally:
        for t, x0 in zip(inputs, originals):
            t.data = x0
            t.grad = None
    return worst


def _leaf(rng, shape, positive=False, scale=1.0):
    data = rng.standard_normal(shape) * scale
    if positive:
        data = np.abs(data) + 0.5
    return Tensor(data, requires_grad=True)


def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    return T.tsum(T.mul(out, Tensor._wrap(w)))


def _op_case(build):
    """Turn ``build(rng) -> (f(*inputs), inputs)`` into a check case."""

    def case(rng):
        f, inputs = build(rng)
        probe = f(*inputs)
        w = rng.standard_normal(probe.shape)
        return (lambda: _weighted(f(*inputs), w)), inputs

    return case


def _module_case(module: Module, seed: int, forward, data: list[Tensor]):
    init_params(module, seed)
    params = module.parameters()

    def case(rng):
        for p in params:
            p.data = p.data + 0.05 * rng.standard_normal(p.shape)
        probe = forward()
        w = rng.standard_normal(probe.shape)
        return (lambda: _weighted(forward(), w)), data + params

    return case


def _basic_cases() -> dict[str, Callable]:
    L = _leaf
    return {
        "add": _op_case(lambda r: (T.add, [L(r, (3, 4)), L(r, (3, 4))])),
        "broadcast_add": _op_case(lambda r: (T.broadcast_add, [L(r, (5, 4)), L(r, (4,))])),
        "sub": _op_case(lambda r: (T.sub, [L(r, (3, 4)), L(r, (1, 4))])),
        "scale": _op_case(lambda r: (lambda a: T.scale(a, -1.7), [L(r, (3, 4))])),
        "hadamard": _op_case(lambda r: (T.hadamard, [L(r, (3, 4)), L(r, (3, 4))])),
        "div": _op_case(lambda r: (T.div, [L(r, (3, 4)), L(r, (3, 4), positive=True)])),
        "pow_scalar": _op_case(lambda r: (lambda a: T.pow_scalar(a, 2.0), [L(r, (3, 4))])),
        "exp": _op_case(lambda r: (T.exp, [L(r, (3, 4))])),
        "log": _op_case(lambda r: (T.log, [L(r, (3, 4), positive=True)])),
        "abs": _op_case(lambda r: (T.tabs, [L(r, (3, 4))])),
        "maximum": _op_case(lambda r: (T.maximum, [L(r, (3, 4)), L(r, (3, 4))])),
        "minimum": _op_case(lambda r: (T.minimum, [L(r, (3, 4)), L(r, (3, 4))])),
        "clamp_min": _op_case(lambda r: (lambda a: T.clamp_min(a, 0.1), [L(r, (3, 4))])),
        "relu": _op_case(lambda r: (T.relu, [L(r, (4, 5))])),
        "sigmoid": _op_case(lambda r: (T.sigmoid, [L(r, (4, 5), scale=3.0)])),
        "log_sigmoid": _op_case(lambda r: (T.log_sigmoid, [L(r, (4, 5), scale=3.0)])),
        "softmax_rows": _op_case(lambda r: (T.softmax_rows, [L(r, (4, 6), scale=2.0)])),
        "layer_norm": _op_case(lambda r: (T.layer_norm, [L(r, (4, 6)), L(r, (6,)), L(r, (6,))])),
        "sum": _op_case(lambda r: (lambda a: T.tsum(a, axis=1, keepdims=True), [L(r, (4, 6))])),
        "mean": _op_case(lambda r: (lambda a: T.mean(a, axis=0), [L(r, (4, 6))])),
        "matmul": _op_case(lambda r: (T.matmul, [L(r, (3, 4)), L(r, (4, 5))])),
        "matmul_batched": _op_case(lambda r: (T.matmul, [L(r, (2, 3, 4)), L(r, (2, 4, 5))])),
        "matmul_shared": _op_case(lambda r: (T.matmul, [L(r, (2, 3, 4)), L(r, (4, 5))])),
        "linear_op": _op_case(lambda r: (T.linear, [L(r, (2, 3, 4)), L(r, (5, 4)), L(r, (5,))])),
        "broadcast_to": _op_case(lambda r: (lambda a: T.broadcast_to(a, (3, 2, 4)), [L(r, (2, 4))])),
        "transpose": _op_case(lambda r: (lambda a: T.transpose(a, (2, 0, 1)), [L(r, (2, 3, 4))])),
        "reshape": _op_case(lambda r: (lambda a: T.reshape(a, (6, 4)), [L(r, (2, 3, 4))])),
        "concat": _op_case(lambda r: (lambda a, b: T.concat([a, b, a], axis=1), [L(r, (3, 2)), L(r, (3, 4))])),
        "slice": _op_case(lambda r: (lambda a: T.slice_(a, (slice(1, 3), slice(None, None, 2))), [L(r, (4, 5))])),
        "slice_gather": _op_case(lambda r: (lambda a: T.slice_(a, np.array([2, 0, 2])), [L(r, (4, 5))])),
        "conv2d": _op_case(lambda r: (
            lambda x, w, b: T.conv2d(x, w, b, stride=2, padding=1),
            [L(r, (3, 8, 8)), L(r, (4, 3, 3, 3)), L(r, (4,))],
        )),
        "conv2d_batched": _op_case(lambda r: (
            lambda x, w, b: T.conv2d(x, w, b, stride=2, padding=1),
            [L(r, (2, 3, 6, 6)), L(r, (4, 3, 3, 3)), L(r, (4,))],
        )),
    }


def _layer_cases(seed: int) -> dict[str, Callable]:
    rng = np.random.default_rng(seed)
    d, heads = 12, 3
    x = Tensor(rng.standard_normal((5, d)), requires_grad=True)
    kv = Tensor(rng.standard_normal((7, d)), requires_grad=True)
    same = Tensor(rng.standard_normal((5, d)), requires_grad=True)
    lin, mha, ffn = Linear(d, 6), MultiHeadAttention(d, heads), FeedForward(d)
    plain = CorrelationBlock(d, heads, 2, "plain")
    gated = CorrelationBlock(d, heads, 2, "gated")
    cases = {
        "linear": _module_case(lin, seed, lambda: lin(x), [x]),
        "mha": _module_case(mha, seed, lambda: mha(x, kv)[0], [x, kv]),
        "ffn": _module_case(ffn, seed, lambda: ffn(x), [x]),
        "correlation": _module_case(plain, seed, lambda: plain(x, kv), [x, kv]),
        "gated_correlation": _module_case(gated, seed, lambda: gated(x, same), [x, same]),
    }

    enc = Encoder(d, heads, 2, channels=(4, 4, 6))
    img = Tensor(rng.random((3, 16, 16)), requires_grad=True)
    cases["encoder"] = _module_case(enc, seed, lambda: enc.encode(img).tokens, [img])

    agg = Aggregator(d, heads, 2)
    mt = Tensor(rng.standard_normal((4, d)), requires_grad=True)
    c1 = Tensor(rng.standard_normal((4, d)), requires_grad=True)
    c2 = Tensor(rng.standard_normal((4, d)), requires_grad=True)
    cases["aggregation"] = _module_case(
        agg, seed, lambda: agg(MemoryMap(mt, 2, 2), [MemoryMap(c1, 2, 2, -1), MemoryMap(c2, 2, 2, 1)])[0],
        [mt, c1, c2],
    )

    qa, dec, hd = QueryAssembler(d, 3, heads, 2), Decoder(d, heads, 2), DetectionHeads(d, 3)
    mem = Tensor(rng.standard_normal((4, d)), requires_grad=True)

    class _QD(Module):
        def __init__(self):
            self.qa, self.dec, self.hd = qa, dec, hd

    qd = _QD()

    def decode_forward():
        qs = qa.assemble_queries([MemoryMap(c1, 2, 2, -1), MemoryMap(c2, 2, 2, 1)])
        out = hd(dec(qs.assembled, mem))
        return T.concat([out.logits, out.boxes], axis=1)

    cases["query_decode"] = _module_case(qd, seed, decode_forward, [mem, c1, c2])

    logits = Tensor(rng.standard_normal((6, 3)), requires_grad=True)
    raw_boxes = Tensor(rng.standard_normal((6, 4)) * 0.5, requires_grad=True)
    gt = GroundTruth([[0.3, 0.4, 0.2, 0.3], [0.7, 0.6, 0.25, 0.2]], [0, 2])
    from .decode import DetectionSet

    def frozen():
        return DetectionSet(logits, T.sigmoid(raw_boxes))

    assignment = hungarian(matching_cost(frozen(), gt))

    def loss_case(r):
        return (lambda: total_loss(frozen(), gt, assignment, LossWeights())[0]), [logits, raw_boxes]

    cases["total_loss"] = loss_case

    cfg = RunConfig(d=d, heads=heads, num_queries=3, image_size=16, backbone_channels=(4, 4, 6))
    model = build_model(cfg, seed)
    frames = [Tensor(rng.random((3, 16, 16)), requires_grad=True) for _ in range(3)]

    def model_forward():
        det, _ = model(frames[0], [(-1, frames[1]), (1, frames[2])])
        return T.concat([det.logits, det.boxes], axis=1)

    cases["model_end_to_end"] = _module_case(model, seed, model_forward, frames)
    return cases


def registry(seed: int = 0) -> dict[str, Callable]:
    return {**_basic_cases(), **_layer_cases(seed)}


def run_gradcheck(seed: int | None = None, probes: int = 10) -> list[CheckResult]:
    seed = int(np.random.SeedSequence().entropy % (2**31)) if seed is None else seed
    rng = np.random.default_rng(seed)
    results = []
    for name, case in registry(seed).items():
        t0 = time.perf_counter()
        fn, inputs = case(rng)
        err = check_gradient(fn, inputs, rng, probes=probes)
        results.append(CheckResult(name, err, probes, time.perf_counter() - t0))
    return results


def format_report(results: list[CheckResult]) -> str:
    lines = [f"{'op':<20} {'worst_rel_err':>14}  status"]
    for r in results:
        lines.append(f"{r.name:<20} {r.worst_rel_error:>14.3e}  {'ok' if r.passed else 'FAIL'}")
    n_fail = sum(not r.passed for r in results)
    lines.append(f"{len(results)} ops checked, {n_fail} failed")
    return "\n".join(lines)
