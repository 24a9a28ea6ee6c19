"""Average precision at IoU 0.5 with occluded / clean frame splits."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Hashable, Iterable, Sequence as Seq

import numpy as np

from .matching import cxcywh_to_xyxy, pairwise_iou_giou
from .synthvid import Sequence, VideoSample, nearest_context


@dataclass
class Detection:
    frame_id: str
    class_id: int
    score: float
    box: list[float]  # cx, cy, w, h (normalised)

    def to_json(self) -> str:
        return json.dumps({"frame_id": self.frame_id, "class_id": self.class_id,
                           "score": self.score, "box": self.box})


def pr_curve(dets: Seq[tuple[float, Hashable, Seq[float]]],
             gts: dict[Hashable, np.ndarray], iou_thresh: float = 0.5):
    """Cumulative precision/recall for one class.

    ``dets`` are ``(score, image_key, cxcywh box)``; ``gts`` maps image keys to
    ``[n, 4]`` cxcywh boxes. Each detection, by descending score, claims the
    highest-IoU unmatched ground truth in its image if that IoU reaches the
    threshold.
    """
    n_gt = sum(len(v) for v in gts.values())
    order = sorted(range(len(dets)), key=lambda i: -dets[i][0])
    taken = {k: np.zeros(len(v), dtype=bool) for k, v in gts.items()}
    tp = np.zeros(len(dets))
    for rank, i in enumerate(order):
        _, key, box = dets[i]
        g = gts.get(key)
        if g is None or len(g) == 0:
            continue
        ious = pairwise_iou_giou(cxcywh_to_xyxy(np.asarray(box)[None]), cxcywh_to_xyxy(g))[0][0]
        ious = np.where(taken[key], -1.0, ious)
        j = int(np.argmax(ious))
        if ious[j] >= iou_thresh:
            taken[key][j] = True
            tp[rank] = 1.0
    ctp = np.cumsum(tp)
    precision = ctp / np.arange(1, len(dets) + 1)
    recall = ctp / n_gt if n_gt else np.zeros_like(ctp)
    return precision, recall


def average_precision(dets, gts, iou_thresh: float = 0.5) -> float:
    """All-point interpolated AP; NaN when the class has no ground truth."""
    n_gt = sum(len(v) for v in gts.values())
    if n_gt == 0:
        return float("nan")
    if not dets:
        return 0.0
    prec, rec = pr_curve(dets, gts, iou_thresh)
    mrec = np.concatenate(([0.0], rec, [1.0]))
    mpre = np.concatenate(([0.0], prec, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def ap_single_class(dets: Seq[tuple[float, Seq[float]]], gts: Seq[Seq[float]],
                    iou_thresh: float = 0.5) -> float:
    """AP for one class in one image; ``dets`` are ``(score, cxcywh box)``."""
    scored = [(float(s), 0, b) for s, b in dets]
    if not all(np.isfinite(s) for s, _, _ in scored):
        raise ValueError("detection scores must be finite")
    return average_precision(scored, {0: np.asarray(gts, dtype=np.float64).reshape(-1, 4)}, iou_thresh)


@dataclass
class SplitReport:
    per_class_ap: dict[int, float]
    mAP: float
    frames: int
    gt_count: int


@dataclass
class EvalReport:
    per_class_ap: dict[int, float]
    mAP: float
    detection_count: int
    gt_count: int
    splits: dict[str, SplitReport] = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        return json.loads(json.dumps(d, default=float))


Predictor = Callable[[VideoSample], list[tuple[int, float, Seq[float]]]]


def _split_report(frames, num_classes, iou_thresh) -> SplitReport:
    per_class = {}
    gt_count = 0
    for c in range(num_classes):
        dets = []
        gts = {}
        for key, gt, preds in frames:
            gts[key] = gt.boxes[gt.classes == c]
            dets += [(s, key, b) for cls, s, b in preds if cls == c]
        gt_count += sum(len(v) for v in gts.values())
        per_class[c] = average_precision(dets, gts, iou_thresh)
    valid = [v for v in per_class.values() if not np.isnan(v)]
    return SplitReport(per_class, float(np.mean(valid)) if valid else 0.0, len(frames), gt_count)


def eval_samples(sequences: Iterable[Sequence], n_context: int, frames_per_sequence: int | None = None):
    """Deterministic evaluation samples with nearest-frame context."""
    for seq in sequences:
        ts = range(len(seq))
        if frames_per_sequence is not None and frames_per_sequence < len(seq):
            ts = np.linspace(0, len(seq) - 1, frames_per_sequence).round().astype(int)
        for t in ts:
            yield nearest_context(seq, int(t), n_context)


def evaluate(predict: Predictor, samples: Iterable[VideoSample], num_classes: int,
             iou_thresh: float = 0.5) -> tuple[EvalReport, list[Detection]]:
    frames, detections = [], []
    for s in samples:
        key = f"{s.sequence_id}:{s.t}"
        preds = predict(s)
        frames.append((key, s.ground_truth, preds, s.occluded))
        detections += [Detection(key, int(c), float(sc), [float(x) for x in b]) for c, sc, b in preds]
    everything = _split_report([f[:3] for f in frames], num_classes, iou_thresh)
    occluded = _split_report([f[:3] for f in frames if f[3]], num_classes, iou_thresh)
    clean = _split_report([f[:3] for f in frames if not f[3]], num_classes, iou_thresh)
    report = EvalReport(everything.per_class_ap, everything.mAP, len(detections), everything.gt_count,
                        {"all": everything, "occluded": occluded, "clean": clean})
    return report, detections


def model_predictor(model, score_threshold: float = 0.05, max_dets: int = 100) -> Predictor:
    """Wrap a detector: top-scoring (query, class) pairs above the threshold."""

    def predict(sample: VideoSample):
        dets, _ = model(sample.target, sample.context)
        scores = dets.scores()
        boxes = dets.boxes.data
        flat = np.argsort(-scores, axis=None, kind="stable")[:max_dets]
        out = []
        for f in flat:
            q, c = divmod(int(f), scores.shape[1])
            if scores[q, c] < score_threshold:
                break
            out.append((c, float(scores[q, c]), boxes[q].tolist()))
        return out

    return predict


def oracle_predictor(sample: VideoSample):
    """Echo the ground truth with score 1 (evaluation harness check)."""
    gt = sample.ground_truth
    return [(int(c), 1.0, b.tolist()) for c, b in zip(gt.classes, gt.boxes)]
