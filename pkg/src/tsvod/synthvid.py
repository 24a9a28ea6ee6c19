"""Deterministic synthetic videos of moving shapes with occluders and blur.

Shapes (ellipse, rectangle, right triangle) drift with constant velocity,
bounce off the borders, and breathe with a sinusoidal size deformation.
Opaque vertical bars sweep across the frame and show up on a random subset
of frames; some frames are box-blurred. Ground truth is amodal: a box is
reported even when its object is hidden.

Object geometry is snapped to integer pixel corners and rasterised by
pixel-centre coverage, so the annotation always describes what was drawn.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.ndimage import uniform_filter

from .errors import ConfigError, ContractError
from .matching import GroundTruth

CLASSES = ("circle", "square", "triangle")
OCCLUDED_VISIBILITY = 0.5


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    num_sequences: int = 1
    frame_count: int = 32
    image_size: int = 64
    min_objects: int = 1
    max_objects: int = 4
    min_size: int = 12
    max_size: int = 20
    max_speed: float = 1.5
    deform_amplitude: float = 0.15
    deform_period: float = 24.0
    num_bars: int = 1
    bar_width: int = 14
    bar_speed: float = 3.0
    occlusion_prob: float = 0.3
    blur_prob: float = 0.2
    blur_kernel: int = 5
    noise: float = 0.03

    def __post_init__(self):
        bad = []
        if self.num_sequences < 1:
            bad.append("num_sequences")
        if self.frame_count < 1:
            bad.append("frame_count")
        if self.image_size < 8 or self.image_size % 8:
            bad.append("image_size")
        if not 1 <= self.min_objects <= self.max_objects:
            bad.append("min_objects/max_objects")
        if not 2 <= self.min_size <= self.max_size or self.max_size * (1 + self.deform_amplitude) >= self.image_size:
            bad.append("min_size/max_size")
        if self.max_speed < 0 or self.max_speed > self.image_size / 4:
            bad.append("max_speed")
        if not 0 <= self.deform_amplitude < 0.5:
            bad.append("deform_amplitude")
        if self.deform_period <= 0:
            bad.append("deform_period")
        if self.num_bars < 0 or self.bar_width < 1 or self.bar_width > self.image_size:
            bad.append("num_bars/bar_width")
        if not 0 <= self.occlusion_prob <= 1:
            bad.append("occlusion_prob")
        if not 0 <= self.blur_prob <= 1:
            bad.append("blur_prob")
        if self.blur_kernel < 1 or self.blur_kernel % 2 == 0:
            bad.append("blur_kernel")
        if self.noise < 0:
            bad.append("noise")
        if bad:
            raise ConfigError(f"invalid scene spec field(s): {', '.join(bad)}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "SceneSpec":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"invalid scene spec field(s): {', '.join(unknown)}")
        return cls(**raw)


@dataclass
class Sequence:
    """Frames as ``uint8 [T, H, W, 3]`` with per-frame annotations."""

    frames: np.ndarray
    annotations: list[GroundTruth]
    visibility: list[np.ndarray]
    sequence_id: int = 0
    blurred: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    def __len__(self) -> int:
        return len(self.frames)

    def frame(self, t: int) -> np.ndarray:
        return self.frames[t].astype(np.float64) / 255.0

    def is_occluded(self, t: int) -> bool:
        vis = self.visibility[t]
        return bool(len(vis) and vis.min() < OCCLUDED_VISIBILITY)


@dataclass
class VideoSample:
    target: np.ndarray
    context: list[tuple[int, np.ndarray]]
    ground_truth: GroundTruth
    context_truth: list[GroundTruth]
    sequence_id: int
    t: int
    occluded: bool = False


def _object_mask(cls: int, x0: int, y0: int, x1: int, y1: int, size: int) -> np.ndarray:
    c = np.arange(size) + 0.5
    px, py = c[None, :], c[:, None]
    if cls == 1:
        return (px >= x0) & (px <= x1) & (py >= y0) & (py <= y1)
    if cls == 0:
        cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
        a, b = (x1 - x0) / 2, (y1 - y0) / 2
        return ((px - cx) / a) ** 2 + ((py - cy) / b) ** 2 <= 1.0
    # right angle at bottom-left
    w, h = x1 - x0, y1 - y0
    return (px >= x0) & (py <= y1) & ((px - x0) * h <= (py - y0) * w)


def _snap(cx: float, cy: float, w: float, h: float, size: int) -> tuple[int, int, int, int]:
    x0 = int(np.floor(cx - w / 2 + 0.5))
    y0 = int(np.floor(cy - h / 2 + 0.5))
    x1 = x0 + max(2, int(np.floor(w + 0.5)))
    y1 = y0 + max(2, int(np.floor(h + 0.5)))
    dx = max(0, -x0) - max(0, x1 - size)
    dy = max(0, -y0) - max(0, y1 - size)
    return x0 + dx, y0 + dy, x1 + dx, y1 + dy


def _bounce(p: float, v: float, lo: float, hi: float) -> tuple[float, float]:
    if hi <= lo:
        return (lo + hi) / 2, 0.0
    p = p + v
    while p < lo or p > hi:
        if p < lo:
            p, v = 2 * lo - p, -v
        if p > hi:
            p, v = 2 * hi - p, -v
    return p, v


def generate_sequence(spec: SceneSpec, sequence_id: int = 0) -> Sequence:
    rng = np.random.default_rng(spec.seed ^ sequence_id)
    s = spec.image_size
    n_obj = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    classes = rng.integers(0, len(CLASSES), size=n_obj)
    base = rng.uniform(spec.min_size, spec.max_size, size=n_obj)
    half_max = base * (1 + spec.deform_amplitude) / 2
    pos = np.stack([rng.uniform(half_max, s - half_max), rng.uniform(half_max, s - half_max)], axis=1)
    angle = rng.uniform(0, 2 * np.pi, size=n_obj)
    speed = rng.uniform(0, spec.max_speed, size=n_obj)
    vel = np.stack([np.cos(angle), np.sin(angle)], axis=1) * speed[:, None]
    phase = rng.uniform(0, 2 * np.pi, size=(n_obj, 2))
    hue_colors = _distinct_colors(rng, n_obj)
    bg_color = rng.uniform(0.05, 0.25, size=3)
    texture = rng.normal(0.0, spec.noise, size=(s, s, 1))
    bar_x = rng.uniform(0, s, size=spec.num_bars)
    bar_dir = rng.choice([-1.0, 1.0], size=spec.num_bars)
    occ_draw = rng.random(spec.frame_count) < spec.occlusion_prob
    blur_draw = rng.random(spec.frame_count) < spec.blur_prob

    frames = np.empty((spec.frame_count, s, s, 3), dtype=np.uint8)
    annotations, visibility = [], []
    omega = 2 * np.pi / spec.deform_period
    for t in range(spec.frame_count):
        img = np.broadcast_to(bg_color, (s, s, 3)) + texture
        boxes, vis_t, masks = [], [], []
        for k in range(n_obj):
            w = base[k] * (1 + spec.deform_amplitude * np.sin(omega * t + phase[k, 0]))
            h = base[k] * (1 + spec.deform_amplitude * np.sin(omega * t + phase[k, 1]))
            x0, y0, x1, y1 = _snap(pos[k, 0], pos[k, 1], w, h, s)
            mask = _object_mask(int(classes[k]), x0, y0, x1, y1, s)
            img = np.where(mask[..., None], hue_colors[k], img)
            masks.append(mask)
            boxes.append([(x0 + x1) / 2 / s, (y0 + y1) / 2 / s, (x1 - x0) / s, (y1 - y0) / s])
        bar_mask = np.zeros((s, s), dtype=bool)
        if occ_draw[t]:
            cols = np.arange(s) + 0.5
            for b in range(spec.num_bars):
                left = bar_x[b] % s
                d = (cols - left) % s
                bar_mask |= (d < spec.bar_width)[None, :]
            img = np.where(bar_mask[..., None], 0.55, img)
        for mask in masks:
            area = mask.sum()
            vis_t.append(float((mask & ~bar_mask).sum() / area) if area else 0.0)
        if blur_draw[t] and spec.blur_kernel > 1:
            img = uniform_filter(img, size=(spec.blur_kernel, spec.blur_kernel, 1), mode="nearest")
        frames[t] = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
        annotations.append(GroundTruth(np.array(boxes), classes.copy()))
        visibility.append(np.array(vis_t))
        for k in range(n_obj):
            hx = base[k] * (1 + spec.deform_amplitude) / 2
            pos[k, 0], vel[k, 0] = _bounce(pos[k, 0], vel[k, 0], hx, s - hx)
            pos[k, 1], vel[k, 1] = _bounce(pos[k, 1], vel[k, 1], hx, s - hx)
        bar_x = bar_x + bar_dir * spec.bar_speed
    return Sequence(frames, annotations, visibility, sequence_id, blur_draw.copy())


def _distinct_colors(rng: np.random.Generator, n: int) -> np.ndarray:
    hues = rng.uniform(0, 1, size=n)
    sat = rng.uniform(0.6, 1.0, size=n)
    val = rng.uniform(0.75, 1.0, size=n)
    i = np.floor(hues * 6).astype(int) % 6
    f = hues * 6 - np.floor(hues * 6)
    p, q, u = val * (1 - sat), val * (1 - f * sat), val * (1 - (1 - f) * sat)
    table = [(val, u, p), (q, val, p), (p, val, u), (p, q, val), (u, p, val), (val, p, q)]
    return np.array([[table[i[k]][c][k] for c in range(3)] for k in range(n)])


def generate_dataset(spec: SceneSpec) -> list[Sequence]:
    return [generate_sequence(spec, sid) for sid in range(spec.num_sequences)]


def context_window(n_frames: int, t: int, half: int) -> list[int]:
    """Frame indices in ``[t - half, t + half]`` clamped to the sequence, minus ``t``."""
    lo, hi = max(0, t - half), min(n_frames - 1, t + half)
    return [i for i in range(lo, hi + 1) if i != t]


def _make_sample(seq: Sequence, t: int, chosen: list[int]) -> VideoSample:
    return VideoSample(
        target=seq.frame(t),
        context=[(i - t, seq.frame(i)) for i in chosen],
        ground_truth=seq.annotations[t],
        context_truth=[seq.annotations[i] for i in chosen],
        sequence_id=seq.sequence_id,
        t=t,
        occluded=seq.is_occluded(t),
    )


def sample_training_item(seq: Sequence, t: int, half: int, n_context: int,
                         rng: np.random.Generator) -> VideoSample:
    """Target ``t`` plus ``n_context`` frames drawn uniformly without replacement."""
    if not 0 <= t < len(seq):
        raise ContractError(f"t={t} outside sequence of length {len(seq)}")
    window = context_window(len(seq), t, half)
    if len(window) < n_context:
        raise ContractError(
            f"window around t={t} holds {len(window)} frames, fewer than N_c={n_context}"
        )
    chosen = sorted(int(i) for i in rng.choice(window, size=n_context, replace=False))
    return _make_sample(seq, t, chosen)


def nearest_context(seq: Sequence, t: int, n_context: int, half: int | None = None) -> VideoSample:
    """Deterministic evaluation sample: the ``n_context`` temporally nearest frames."""
    half = len(seq) if half is None else half
    window = context_window(len(seq), t, half)
    if len(window) < n_context:
        raise ContractError(
            f"window around t={t} holds {len(window)} frames, fewer than N_c={n_context}"
        )
    chosen = sorted(sorted(window, key=lambda i: (abs(i - t), i))[:n_context])
    return _make_sample(seq, t, chosen)


# on-disk layout


def write_ppm(path: str | Path, img: np.ndarray) -> None:
    img = np.asarray(img, dtype=np.uint8)
    h, w, _ = img.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    from .aggregation import read_netpbm

    magic, (w, h), maxval, payload = read_netpbm(path)
    if magic != b"P6" or maxval != 255:
        raise ContractError(f"{path}: expected a P6 PPM with maxval 255")
    return np.frombuffer(payload[: w * h * 3], dtype=np.uint8).reshape(h, w, 3).copy()


def save_sequence(seq: Sequence, directory: str | Path, spec: SceneSpec) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for t, frame in enumerate(seq.frames):
        write_ppm(d / f"frame_{t:05d}.ppm", frame)
    with open(d / "ann.jsonl", "w") as fh:
        for t, (gt, vis) in enumerate(zip(seq.annotations, seq.visibility)):
            objs = [
                {"class": int(c), "box": [float(x) for x in b], "visibility": float(v)}
                for c, b, v in zip(gt.classes, gt.boxes, vis)
            ]
            rec = {"frame": t, "objects": objs, "blurred": bool(seq.blurred[t])}
            fh.write(json.dumps(rec) + "\n")
    manifest = {"sequence_id": seq.sequence_id, "spec": spec.to_dict()}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def save_dataset(sequences: list[Sequence], directory: str | Path, spec: SceneSpec) -> None:
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    names = []
    for seq in sequences:
        name = f"seq_{seq.sequence_id:05d}"
        save_sequence(seq, root / name, spec)
        names.append(name)
    (root / "manifest.json").write_text(
        json.dumps({"spec": spec.to_dict(), "sequences": names}, indent=2, sort_keys=True) + "\n"
    )


def load_sequence(directory: str | Path) -> Sequence:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    records = [json.loads(line) for line in (d / "ann.jsonl").read_text().splitlines() if line.strip()]
    records.sort(key=lambda r: r["frame"])
    frames = np.stack([read_ppm(d / f"frame_{r['frame']:05d}.ppm") for r in records])
    anns, vis, blurred = [], [], []
    for r in records:
        objs = r["objects"]
        anns.append(GroundTruth(np.array([o["box"] for o in objs]).reshape(-1, 4),
                                np.array([o["class"] for o in objs], dtype=np.int64)))
        vis.append(np.array([o.get("visibility", 1.0) for o in objs]))
        blurred.append(bool(r.get("blurred", False)))
    return Sequence(frames, anns, vis, int(manifest.get("sequence_id", 0)), np.array(blurred))


def load_dataset(directory: str | Path) -> list[Sequence]:
    root = Path(directory)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no dataset manifest at {manifest_path}")
    names = json.loads(manifest_path.read_text())["sequences"]
    return [load_sequence(root / n) for n in names]
