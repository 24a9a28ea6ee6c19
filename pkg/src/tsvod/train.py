"""Adam training loop with Hungarian matching and a step learning-rate drop."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig
from .errors import NumericError
from .evaluation import eval_samples, evaluate, model_predictor
from .matching import LossWeights, hungarian, matching_cost, total_loss
from . import tensor as T
from .decode import DetectionSet
from .model import VideoDetector, build_model, save_model
from .nn import AdamState, adam_step
from .synthvid import Sequence, VideoSample, sample_training_item
from .tensor import Tape

log = logging.getLogger(__name__)


@dataclass
class TrainResult:
    model: VideoDetector
    history: list[dict] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)

    def csv(self) -> str:
        buf = io.StringIO()
        if self.history:
            writer = csv.DictWriter(buf, fieldnames=list(self.history[0]), lineterminator="\n")
            writer.writeheader()
            for row in self.history:
                writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
        return buf.getvalue()


def loss_weights(cfg: RunConfig) -> LossWeights:
    return LossWeights(cls=cfg.lambda_cls, box=cfg.lambda_box, l1=cfg.lambda_l1, giou=cfg.lambda_giou)


def sample_loss(model: VideoDetector, sample: VideoSample, cfg: RunConfig):
    """Forward one sample and return ``(loss tensor, per-term floats)``."""
    context = sample.context if model.uses_context else []
    dets, _ = model(sample.target, context)
    return set_loss(dets, sample, cfg)


def set_loss(dets: DetectionSet, sample: VideoSample, cfg: RunConfig):
    """Hungarian-matched set loss of one sample's detections."""
    w = loss_weights(cfg)
    cost = matching_cost(dets, sample.ground_truth, w, cfg.class_cost, cfg.focal_alpha, cfg.focal_gamma)
    assignment = hungarian(cost)
    return total_loss(dets, sample.ground_truth, assignment, w, cfg.focal_alpha, cfg.focal_gamma)


def batch_loss(model: VideoDetector, batch: list[VideoSample], cfg: RunConfig):
    """Mean set loss over a batch, from one batched forward pass.

    Returns ``(loss tensor, mean terms, per-sample terms)``.
    """
    targets = np.stack([s.target for s in batch])
    contexts = []
    if model.uses_context:
        contexts = [np.stack([s.context[k][1] for s in batch]) for k in range(len(batch[0].context))]
    dets = model.forward_batch(targets, contexts)
    losses, per_sample = [], []
    for i, sample in enumerate(batch):
        one = DetectionSet(T.slice_(dets.logits, i), T.slice_(dets.boxes, i))
        loss, terms = set_loss(one, sample, cfg)
        losses.append(loss)
        per_sample.append(terms)
    total = losses[0]
    for loss in losses[1:]:
        total = T.add(total, loss)
    mean_terms = {k: sum(t[k] for t in per_sample) / len(batch) for k in per_sample[0]}
    return T.scale(total, 1.0 / len(batch)), mean_terms, per_sample


def clip_grad_norm(params, max_norm: float) -> float:
    total = math.sqrt(sum(float((p.grad * p.grad).sum()) for p in params if p.grad is not None))
    if max_norm > 0 and total > max_norm:
        s = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= s
    return total


def train_step(model: VideoDetector, batch: list[VideoSample], cfg: RunConfig,
               state: AdamState, lr: float, params: dict | None = None) -> dict:
    params = dict(model.named_parameters()) if params is None else params
    for p in params.values():
        p.grad = None
    with Tape() as tape:
        loss, terms, per_sample = batch_loss(model, batch, cfg)
    for sample, t in zip(batch, per_sample):
        if not np.isfinite(t["total"]):
            raise NumericError(json.dumps({"sequence_id": sample.sequence_id, "t": sample.t, "terms": t}))
    tape.backward(loss)
    tape.clear()
    clip_grad_norm(params.values(), cfg.grad_clip)
    adam_step(params, state, lr)
    return terms


def _draw_batch(sequences: list[Sequence], cfg: RunConfig, rng: np.random.Generator,
                size: int) -> list[VideoSample]:
    batch = []
    for _ in range(size):
        seq = sequences[int(rng.integers(len(sequences)))]
        t = int(rng.integers(len(seq)))
        batch.append(sample_training_item(seq, t, cfg.window_half, cfg.num_context, rng))
    return batch


def train(cfg: RunConfig, train_seqs: list[Sequence], val_seqs: list[Sequence] | None = None,
          out_dir: str | Path | None = None, fixed_samples: list[VideoSample] | None = None,
          progress: bool = False) -> TrainResult:
    """Train a fresh model.

    ``fixed_samples`` replaces random sampling with a cyclic pass over the
    given samples (used for overfit checks). An epoch is
    ``cfg.steps_per_epoch`` optimiser steps, defaulting to one pass over the
    training frames.
    """
    batch_size = cfg.batch_size
    model = build_model(cfg)
    rng = np.random.default_rng(cfg.seed)
    state = AdamState(lr=cfg.lr)
    params = dict(model.named_parameters())
    if fixed_samples is not None:
        steps = cfg.steps_per_epoch or len(fixed_samples)
    else:
        steps = cfg.steps_per_epoch or max(1, sum(len(s) for s in train_seqs) // batch_size)
    result = TrainResult(model)
    cursor = 0
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        totals: dict[str, float] = {}
        for _ in range(steps):
            if fixed_samples is not None:
                batch = [fixed_samples[(cursor + i) % len(fixed_samples)] for i in range(batch_size)]
                cursor += batch_size
            else:
                batch = _draw_batch(train_seqs, cfg, rng, batch_size)
            try:
                terms = train_step(model, batch, cfg, state, lr, params)
            except NumericError as exc:
                if out_dir is not None:
                    Path(out_dir).mkdir(parents=True, exist_ok=True)
                    Path(out_dir, "nan_dump.json").write_text(
                        json.dumps({"epoch": epoch, "step": state.step, "detail": str(exc)}, indent=2)
                    )
                raise
            result.step_losses.append(terms["total"])
            for k, v in terms.items():
                totals[k] = totals.get(k, 0.0) + v / steps
        row = {"epoch": epoch, "lr": lr, "loss": totals["total"], "loss_cls": totals["cls"],
               "loss_l1": totals["l1"], "loss_giou": totals["giou"], "val_mAP": float("nan")}
        if val_seqs and cfg.eval_frames_per_sequence:
            report, _ = evaluate(
                model_predictor(model, cfg.score_threshold),
                eval_samples(val_seqs, cfg.num_context, cfg.eval_frames_per_sequence),
                cfg.num_classes,
            )
            row["val_mAP"] = report.mAP
        result.history.append(row)
        if progress:
            log.info("epoch %d lr %.2e loss %.4f val_mAP %.4f", epoch, lr, row["loss"], row["val_mAP"])
    if out_dir is not None:
        out = Path(out_dir)
        save_model(model, out)
        (out / "train_log.csv").write_text(result.csv())
    return result
