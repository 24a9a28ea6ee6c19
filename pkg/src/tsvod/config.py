"""Run configuration shared by training, evaluation and the CLI."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .errors import ConfigError


@dataclass(frozen=True)
class RunConfig:
    # model
    d: int = 48
    heads: int = 6
    encoder_layers: int = 2
    decoder_layers: int = 2
    sd_layers: int = 2
    corr_layers: int = 2
    num_queries: int = 100
    num_context: int = 2
    window_half: int = 12
    num_classes: int = 3
    image_size: int = 64
    backbone_channels: tuple[int, int, int] = (16, 32, 64)
    # loss
    lambda_cls: float = 2.0
    lambda_box: float = 1.0
    lambda_l1: float = 5.0
    lambda_giou: float = 2.0
    class_cost: str = "prob"
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    # optimiser
    lr: float = 1e-4
    lr_drop_epoch: int | None = None
    lr_drop_factor: float = 0.1
    epochs: int = 50
    steps_per_epoch: int | None = None
    grad_clip: float = 0.1
    batch_size: int = 1
    # data
    train_data: str = ""
    val_data: str = ""
    seed: int = 0
    score_threshold: float = 0.05
    eval_frames_per_sequence: int = 4
    # ablation switches
    enable_tfam: bool = True
    enable_stam: bool = True
    enable_qam: bool = True
    gated_vs_plain: bool = True
    residual_gated: bool = True

    def __post_init__(self):
        problems = []
        if self.d % self.heads:
            problems.append(f"d={self.d} not divisible by heads={self.heads}")
        if self.d % 4:
            problems.append(f"d={self.d} not divisible by 4 (positional encoding)")
        if self.image_size % 8:
            problems.append(f"image_size={self.image_size} not divisible by backbone stride 8")
        for name in ("encoder_layers", "decoder_layers", "sd_layers", "corr_layers",
                     "num_queries", "num_context", "num_classes", "epochs", "batch_size"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        if 2 * self.window_half < self.num_context:
            problems.append(f"window 2*{self.window_half} holds fewer than {self.num_context} context frames")
        for name in ("lambda_cls", "lambda_box", "lambda_l1", "lambda_giou"):
            if getattr(self, name) < 0:
                problems.append(f"{name} must be >= 0")
        if self.class_cost not in ("prob", "focal"):
            problems.append(f"class_cost must be 'prob' or 'focal', got {self.class_cost!r}")
        if self.lr_drop_epoch is not None and not 0 <= self.lr_drop_epoch <= self.epochs:
            problems.append("lr_drop_epoch outside [0, epochs]")
        if problems:
            raise ConfigError("; ".join(problems))

    @property
    def drop_epoch(self) -> int:
        """Epoch (0-based) from which the dropped learning rate applies."""
        if self.lr_drop_epoch is not None:
            return self.lr_drop_epoch
        return int(round(0.8 * self.epochs))

    def lr_at(self, epoch: int) -> float:
        return self.lr * (self.lr_drop_factor if epoch >= self.drop_epoch else 1.0)

    @property
    def single_frame(self) -> bool:
        return not (self.enable_tfam or self.enable_stam or self.enable_qam)

    def replace(self, **kw) -> "RunConfig":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["backbone_channels"] = list(self.backbone_channels)
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        raw = dict(raw)
        if "backbone_channels" in raw:
            raw["backbone_channels"] = tuple(int(c) for c in raw["backbone_channels"])
        return cls(**raw)

    @classmethod
    def load(cls, path: str | Path, env: dict | None = None) -> "RunConfig":
        cfg = cls.from_dict(json.loads(Path(path).read_text()))
        return cfg.with_env_seed(env)

    def with_env_seed(self, env: dict | None = None) -> "RunConfig":
        env = os.environ if env is None else env
        raw = env.get("PTSE_SEED")
        if raw is None or raw == "":
            return self
        try:
            return self.replace(seed=int(raw))
        except ValueError:
            raise ConfigError(f"PTSE_SEED must be an integer, got {raw!r}") from None

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
