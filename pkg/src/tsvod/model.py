"""End-to-end video detector assembled from the package's components."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import tensor as T
from .aggregation import AggregationTrace, Aggregator
from .config import RunConfig
from .decode import Decoder, DetectionHeads, DetectionSet, QueryAssembler
from .encoder import Encoder, MemoryMap
from .nn import Module, init_params, load_checkpoint, save_checkpoint


class VideoDetector(Module):
    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.encoder = Encoder(cfg.d, cfg.heads, cfg.encoder_layers, cfg.backbone_channels)
        self.aggregator = Aggregator(
            cfg.d, cfg.heads, cfg.corr_layers,
            enable_tfam=cfg.enable_tfam, enable_stam=cfg.enable_stam,
            gated=cfg.gated_vs_plain, residual_gated=cfg.residual_gated,
        )
        self.queries = QueryAssembler(cfg.d, cfg.num_queries, cfg.heads, cfg.sd_layers,
                                      enabled=cfg.enable_qam)
        self.decoder = Decoder(cfg.d, cfg.heads, cfg.decoder_layers)
        self.heads = DetectionHeads(cfg.d, cfg.num_classes)

    @property
    def uses_context(self) -> bool:
        return self.aggregator.active or self.queries.enabled

    @property
    def query_count(self) -> int:
        n = self.cfg.num_queries
        return n * (1 + self.cfg.num_context) if self.cfg.enable_qam else n

    def __call__(self, target, context=()) -> tuple[DetectionSet, AggregationTrace]:
        m_t = self.encoder.encode(target, 0)
        m_ctx = []
        if self.uses_context:
            m_ctx = [self.encoder.encode(img, off) for off, img in context]
        r_t, trace = self.aggregator(m_t, m_ctx)
        qs = self.queries.assemble_queries(m_ctx)
        decoded = self.decoder(qs.assembled, r_t)
        return self.heads(decoded), trace

    def forward_batch(self, targets: np.ndarray, contexts: list[np.ndarray] = ()) -> DetectionSet:
        """Batched forward: ``targets`` is ``[B, H, W, 3]``, ``contexts`` holds one
        ``[B, H, W, 3]`` stack per context slot.

        All frames go through the encoder in a single pass; the returned logits
        and boxes are ``[B, Q, C]`` and ``[B, Q, 4]``.
        """
        targets = np.asarray(targets, dtype=np.float64)
        b = targets.shape[0]
        frames = [targets, *contexts] if self.uses_context else [targets]
        enc = self.encoder.encode(np.concatenate(frames, axis=0))
        tokens = [T.slice_(enc.tokens, slice(i * b, (i + 1) * b)) for i in range(len(frames))]
        m_t = MemoryMap(tokens[0], enc.grid_h, enc.grid_w)
        m_ctx = [MemoryMap(tok, enc.grid_h, enc.grid_w, i + 1) for i, tok in enumerate(tokens[1:])]
        r_t, _ = self.aggregator(m_t, m_ctx)
        qs = self.queries.assemble_queries(m_ctx)
        if qs.assembled.ndim == 2:
            qs.assembled = T.broadcast_to(qs.assembled, (b, *qs.assembled.shape))
        return self.heads(self.decoder(qs.assembled, r_t))


def build_model(cfg: RunConfig, seed: int | None = None) -> VideoDetector:
    model = VideoDetector(cfg)
    init_params(model, cfg.seed if seed is None else seed)
    return model


def save_model(model: VideoDetector, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / "checkpoint.ptse"
    save_checkpoint(path, model)
    model.cfg.save(directory / "config.json")
    return path


def load_model(checkpoint: str | Path) -> VideoDetector:
    """Rebuild a model from a checkpoint and the ``config.json`` beside it."""
    checkpoint = Path(checkpoint)
    cfg = RunConfig.load(checkpoint.parent / "config.json", env={})
    model = VideoDetector(cfg)
    model.load_state_dict(load_checkpoint(checkpoint))
    return model
