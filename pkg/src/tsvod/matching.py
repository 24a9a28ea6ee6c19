"""Bipartite set matching and the detection loss."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .decode import DetectionSet
from .errors import ContractError
from .tensor import Tensor


@dataclass
class GroundTruth:
    """Normalised ``(cx, cy, w, h)`` boxes with integer class ids."""

    boxes: np.ndarray
    classes: np.ndarray

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.classes = np.asarray(self.classes, dtype=np.int64).reshape(-1)
        if len(self.boxes) != len(self.classes):
            raise ContractError(f"{len(self.boxes)} boxes but {len(self.classes)} class ids")

    def __len__(self) -> int:
        return len(self.classes)

    def validate(self, num_classes: int | None = None) -> None:
        b = self.boxes
        if len(b) and (np.any(b[:, 2:] <= 0) or np.any(b[:, 2:] > 1)
                       or np.any(b[:, :2] < 0) or np.any(b[:, :2] > 1)):
            raise ContractError("ground-truth boxes must satisfy 0 < w,h <= 1 and 0 <= cx,cy <= 1")
        if num_classes is not None and len(self.classes) and (
            self.classes.min() < 0 or self.classes.max() >= num_classes
        ):
            raise ContractError(f"class ids must lie in [0, {num_classes})")


@dataclass
class Assignment:
    pairs: list[tuple[int, int]]
    unmatched: list[int] = field(default_factory=list)

    @property
    def query_indices(self) -> np.ndarray:
        return np.array([q for q, _ in self.pairs], dtype=np.int64)

    @property
    def gt_indices(self) -> np.ndarray:
        return np.array([g for _, g in self.pairs], dtype=np.int64)


@dataclass(frozen=True)
class LossWeights:
    cls: float = 2.0
    box: float = 1.0
    l1: float = 5.0
    giou: float = 2.0

    def __post_init__(self):
        for name in ("cls", "box", "l1", "giou"):
            if getattr(self, name) < 0:
                raise ContractError(f"loss weight {name} must be >= 0")


def cxcywh_to_xyxy(boxes: np.ndarray) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64)
    half = b[..., 2:] / 2
    return np.concatenate([b[..., :2] - half, b[..., :2] + half], axis=-1)


def xyxy_to_cxcywh(boxes: np.ndarray) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64)
    return np.concatenate([(b[..., :2] + b[..., 2:]) / 2, b[..., 2:] - b[..., :2]], axis=-1)


def _safe_ratio(num, den):
    num, den = np.broadcast_arrays(np.asarray(num, float), np.asarray(den, float))
    out = np.zeros(num.shape)
    np.divide(num, den, out=out, where=den > 0)
    return out


def pairwise_iou_giou(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """IoU and GIoU between every box in ``a [n, 4]`` and ``b [m, 4]`` (xyxy)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)[:, None, :]
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)[None, :, :]
    area_a = np.clip(a[..., 2] - a[..., 0], 0, None) * np.clip(a[..., 3] - a[..., 1], 0, None)
    area_b = np.clip(b[..., 2] - b[..., 0], 0, None) * np.clip(b[..., 3] - b[..., 1], 0, None)
    iw = np.clip(np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]), 0, None)
    ih = np.clip(np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]), 0, None)
    inter = iw * ih
    union = area_a + area_b - inter
    iou = _safe_ratio(inter, union)
    ew = np.maximum(a[..., 2], b[..., 2]) - np.minimum(a[..., 0], b[..., 0])
    eh = np.maximum(a[..., 3], b[..., 3]) - np.minimum(a[..., 1], b[..., 1])
    encl = ew * eh
    return iou, iou - _safe_ratio(encl - union, encl)


def giou(box_a, box_b) -> float:
    """Generalised IoU of two ``(x0, y0, x1, y1)`` boxes.

    Zero-area inputs give an IoU term of 0 rather than NaN.
    """
    return float(pairwise_iou_giou(box_a, box_b)[1][0, 0])


def iou(box_a, box_b) -> float:
    return float(pairwise_iou_giou(box_a, box_b)[0][0, 0])


def focal_loss(logit, target, alpha: float = 0.25, gamma: float = 2.0) -> float:
    """Sigmoid focal loss summed over all entries (no normalisation)."""
    x = np.asarray(logit, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    p = 1.0 / (1.0 + np.exp(-x))
    p_t = np.where(t > 0.5, p, 1.0 - p)
    alpha_t = np.where(t > 0.5, alpha, 1.0 - alpha)
    return float(np.sum(-alpha_t * (1.0 - p_t) ** gamma * np.log(np.maximum(p_t, 1e-12))))


def matching_cost(preds: DetectionSet, gt: GroundTruth, w: LossWeights = LossWeights(),
                  class_cost: str = "prob", alpha: float = 0.25, gamma: float = 2.0) -> np.ndarray:
    """``[queries x gts]`` cost of assigning each query to each ground truth."""
    nq = len(preds)
    if len(gt) == 0:
        return np.zeros((nq, 0))
    prob = preds.scores()[:, gt.classes]
    if class_cost == "prob":
        c_cls = -prob
    elif class_cost == "focal":
        pos = alpha * (1 - prob) ** gamma * -np.log(np.maximum(prob, 1e-12))
        neg = (1 - alpha) * prob**gamma * -np.log(np.maximum(1 - prob, 1e-12))
        c_cls = pos - neg
    else:
        raise ContractError(f"unknown class cost {class_cost!r}")
    pb = preds.boxes.data
    c_l1 = np.abs(pb[:, None, :] - gt.boxes[None, :, :]).sum(axis=-1)
    _, g = pairwise_iou_giou(cxcywh_to_xyxy(pb), cxcywh_to_xyxy(gt.boxes))
    return w.cls * c_cls + w.l1 * c_l1 - w.giou * g


def hungarian(cost) -> Assignment:
    """Minimum-cost assignment of every column to a distinct row.

    Shortest augmenting paths with dual potentials, O(cols^2 * rows).
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2:
        raise ContractError(f"cost must be a matrix, got shape {list(c.shape)}")
    n_rows, n_cols = c.shape
    if n_rows < n_cols:
        raise ContractError(f"need rows >= cols, got {n_rows} x {n_cols}")
    if n_cols == 0:
        return Assignment([], list(range(n_rows)))
    if not np.all(np.isfinite(c)):
        raise ContractError("cost matrix has non-finite entries")
    a = c.T  # each row of `a` (a column of `cost`) gets a distinct column of `a`
    n, m = n_cols, n_rows
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    owner = np.zeros(m + 1, dtype=np.int64)  # owner[j]: 1-based row of `a` matched to column j
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used[1:]
            cur = a[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    pairs = sorted(((j - 1, int(owner[j]) - 1) for j in range(1, m + 1) if owner[j]), key=lambda p: p[1])
    matched = {q for q, _ in pairs}
    return Assignment(pairs, [q for q in range(n_rows) if q not in matched])


def assignment_cost(cost, assignment: Assignment) -> float:
    c = np.asarray(cost, dtype=np.float64)
    return float(sum(c[q, g] for q, g in assignment.pairs))


def sigmoid_focal_loss(logits: Tensor, targets: np.ndarray, alpha: float = 0.25,
                       gamma: float = 2.0) -> Tensor:
    """Differentiable focal loss summed over every entry of ``logits``."""
    t = Tensor._wrap(targets)
    nt = Tensor._wrap(1.0 - targets)
    p = T.sigmoid(logits)
    one_minus_p = T.sub(Tensor._wrap(np.ones(logits.shape)), p)
    pos = T.mul(T.mul(T.pow_scalar(one_minus_p, gamma), T.log_sigmoid(logits)), t)
    neg = T.mul(T.mul(T.pow_scalar(p, gamma), T.log_sigmoid(T.scale(logits, -1.0))), nt)
    total = T.add(T.scale(T.tsum(pos), -alpha), T.scale(T.tsum(neg), -(1.0 - alpha)))
    return total


def _xyxy_columns(boxes: Tensor):
    cx, cy, w, h = (T.slice_(boxes, (slice(None), slice(i, i + 1))) for i in range(4))
    hw, hh = T.scale(w, 0.5), T.scale(h, 0.5)
    return T.sub(cx, hw), T.sub(cy, hh), T.add(cx, hw), T.add(cy, hh), w, h


def giou_tensor(pred: Tensor, target: Tensor) -> Tensor:
    """Row-wise GIoU between ``[K x 4]`` cxcywh boxes, as a ``[K x 1]`` tensor."""
    ax0, ay0, ax1, ay1, aw, ah = _xyxy_columns(pred)
    bx0, by0, bx1, by1, bw, bh = _xyxy_columns(target)
    iw = T.clamp_min(T.sub(T.minimum(ax1, bx1), T.maximum(ax0, bx0)), 0.0)
    ih = T.clamp_min(T.sub(T.minimum(ay1, by1), T.maximum(ay0, by0)), 0.0)
    inter = T.mul(iw, ih)
    union = T.sub(T.add(T.mul(aw, ah), T.mul(bw, bh)), inter)
    ew = T.sub(T.maximum(ax1, bx1), T.minimum(ax0, bx0))
    eh = T.sub(T.maximum(ay1, by1), T.minimum(ay0, by0))
    encl = T.mul(ew, eh)
    return T.sub(T.div(inter, union), T.div(T.sub(encl, union), encl))


def total_loss(preds: DetectionSet, gt: GroundTruth, assignment: Assignment,
               w: LossWeights = LossWeights(), alpha: float = 0.25, gamma: float = 2.0):
    """Weighted focal + L1 + (1 - GIoU) loss for a fixed assignment.

    Classification covers every query (unmatched ones target all-zeros); box
    terms cover matched pairs only. All terms are normalised by the number of
    ground-truth objects (at least 1). Returns ``(loss, per-term floats)``.
    """
    nq, nc = preds.logits.shape
    norm = float(max(len(gt), 1))
    targets = np.zeros((nq, nc))
    qi, gi = assignment.query_indices, assignment.gt_indices
    if len(qi):
        targets[qi, gt.classes[gi]] = 1.0
    l_cls = T.scale(sigmoid_focal_loss(preds.logits, targets, alpha, gamma), 1.0 / norm)
    terms = {"cls": l_cls.item()}
    loss = T.scale(l_cls, w.cls)
    if len(qi):
        pb = T.slice_(preds.boxes, qi)
        gb = Tensor._wrap(gt.boxes[gi])
        l_l1 = T.scale(T.tsum(T.tabs(T.sub(pb, gb))), 1.0 / norm)
        l_giou = T.scale(T.tsum(T.sub(Tensor._wrap(np.ones((len(qi), 1))), giou_tensor(pb, gb))), 1.0 / norm)
        terms["l1"] = l_l1.item()
        terms["giou"] = l_giou.item()
        box = T.add(T.scale(l_l1, w.l1), T.scale(l_giou, w.giou))
        loss = T.add(loss, T.scale(box, w.box))
    else:
        terms["l1"] = terms["giou"] = 0.0
    terms["total"] = loss.item()
    return loss, terms
