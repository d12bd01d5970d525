"""Unpaired frame loading and the synthetic marked/unmarked benchmark.

Frames are 8-bit PNGs with zero-padded numeric names; ascending name order is
temporal order. Images are held in memory as float tensors in [-1, 1].
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from .errors import DataError, FrameIOError, ParamError
from .renderer import RenderSettings, render, to_uint8
from .template import SemanticLine, Template, save_template


def list_frames(directory) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise FrameIOError(f"not a directory: {directory}")
    return sorted(p for p in directory.iterdir() if p.is_file() and not p.name.startswith("."))


def read_frame(path, resolution: tuple[int, int] | None = None) -> tuple[torch.Tensor, tuple[int, int]]:
    """Decode ``path`` to a (3, H, W) float32 tensor in [-1, 1].

    Returns the tensor (resized to ``resolution`` = (H, W) if given) and the
    original (H, W).
    """
    path = Path(path)
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            size = (im.height, im.width)
            if resolution is not None and size != tuple(resolution):
                im = im.resize((resolution[1], resolution[0]), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float32)
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise FrameIOError(f"cannot decode frame {path}: {exc}") from exc
    return torch.from_numpy(arr.transpose(2, 0, 1) / 127.5 - 1.0), size


def write_frame(image, path) -> None:
    try:
        Image.fromarray(to_uint8(image)).save(path, format="PNG")
    except OSError as exc:
        raise FrameIOError(f"cannot write {path}: {exc}") from exc


def frame_name(k: int) -> str:
    return f"{k:06d}.png"


@dataclass
class DataConfig:
    marked_dir: str
    unmarked_dir: str
    resolution: tuple[int, int] = (128, 128)
    hflip: bool = False  # landmark identity is chiral; off unless the template is symmetric
    jitter_px: int = 0


class UnpairedDataset:
    """Two independent in-memory frame collections. No pairing between them is assumed."""

    def __init__(self, marked: torch.Tensor, unmarked: torch.Tensor, cfg: DataConfig):
        self.marked = marked
        self.unmarked = unmarked
        self.cfg = cfg

    @property
    def sizes(self) -> tuple[int, int]:
        return len(self.marked), len(self.unmarked)

    def sample(self, batch_size: int, generator: torch.Generator) -> tuple[torch.Tensor, torch.Tensor]:
        """Draw an (unmarked, marked) pair of batches; each domain is indexed independently."""
        iu = torch.randint(len(self.unmarked), (batch_size,), generator=generator)
        im = torch.randint(len(self.marked), (batch_size,), generator=generator)
        return self._augment(self.unmarked[iu], generator), self._augment(self.marked[im], generator)

    def _augment(self, batch: torch.Tensor, generator: torch.Generator) -> torch.Tensor:
        if self.cfg.hflip:
            flip = torch.rand(len(batch), generator=generator) < 0.5
            batch = torch.where(flip[:, None, None, None], batch.flip(-1), batch)
        j = int(self.cfg.jitter_px)
        if j > 0:
            h, w = batch.shape[-2:]
            padded = torch.nn.functional.pad(batch, (j, j, j, j), mode="replicate")
            offs = torch.randint(2 * j + 1, (len(batch), 2), generator=generator)
            batch = torch.stack([padded[k, :, oy : oy + h, ox : ox + w] for k, (oy, ox) in enumerate(offs.tolist())])
        return batch


def _load_dir(directory, resolution) -> torch.Tensor:
    frames = list_frames(directory)
    if not frames:
        raise DataError(f"no frames in {directory}")
    return torch.stack([read_frame(p, resolution)[0] for p in frames])


def load_unpaired(cfg: DataConfig) -> UnpairedDataset:
    res = tuple(int(v) for v in cfg.resolution)
    return UnpairedDataset(_load_dir(cfg.marked_dir, res), _load_dir(cfg.unmarked_dir, res), cfg)


# ---------------------------------------------------------------------------
# synthetic benchmark

# Canonical face-like blob, offsets from the shape center in normalized units.
ELLIPSE_AXES = (0.22, 0.30)
EYES = ((-0.085, -0.05), (0.085, -0.05))
EYE_RADIUS = 0.035


def _canonical_landmarks() -> tuple[np.ndarray, list[SemanticLine]]:
    ax, ay = ELLIPSE_AXES
    jaw = [(0.85 * ax * math.cos(a), 0.85 * ay * math.sin(a)) for a in np.radians([15, 52.5, 90, 127.5, 165])]
    brow_l = [(-0.15, -0.13), (-0.09, -0.17), (-0.03, -0.14)]
    brow_r = [(0.03, -0.14), (0.09, -0.17), (0.15, -0.13)]
    nose = [(0.0, -0.05), (0.0, 0.01), (0.0, 0.07)]
    pts = np.array(jaw + brow_l + brow_r + nose, dtype=np.float64)
    lines = [
        SemanticLine("jaw", (0, 1, 2, 3, 4), (1.0, 1.0, 0.0)),
        SemanticLine("brow-left", (5, 6, 7), (1.0, 0.0, 0.0)),
        SemanticLine("brow-right", (8, 9, 10), (0.0, 0.3, 1.0)),
        SemanticLine("nose", (11, 12, 13), (0.0, 1.0, 0.0)),
    ]
    return pts, lines


def synthetic_template(spring_constant: float = 1.0) -> Template:
    """Template of the synthetic shape at its mean pose (centered, upright, unit scale)."""
    offsets, lines = _canonical_landmarks()
    return Template.build(offsets + 0.5, lines, None, spring_constant)


@dataclass
class Pose:
    cx: float  # shape center, normalized
    cy: float
    theta: float  # radians, positive = clockwise on screen (y down)
    scale: float

    def apply(self, offsets: np.ndarray) -> np.ndarray:
        c, s = math.cos(self.theta), math.sin(self.theta)
        rot = np.array([[c, -s], [s, c]])
        return offsets @ rot.T * self.scale + np.array([self.cx, self.cy])


@dataclass
class SynthConfig:
    n_frames: int = 500
    resolution: int = 64
    seed: int = 0
    max_rotation_deg: float = 20.0
    scale_range: tuple[float, float] = (0.85, 1.15)
    max_translation: float = 0.1
    noise_std: float = 0.03
    spring_constant: float = 1.0
    render: RenderSettings = field(default_factory=lambda: RenderSettings(sigma_px=1.5, alpha=0.9))
    # motion sequences only
    motion: str | None = None  # None (unpaired dataset) | static | linear | sinusoidal
    n_sequence_frames: int = 60
    velocity_px: tuple[float, float] = (1.0, 0.0)
    amplitude_px: float = 5.0
    period_frames: float = 30.0

    def __post_init__(self):
        if isinstance(self.render, dict):
            self.render = RenderSettings(**self.render)
        self.scale_range = tuple(self.scale_range)
        self.velocity_px = tuple(self.velocity_px)
        if self.n_frames < 0 or self.n_sequence_frames < 0:
            raise ParamError("frame counts must be >= 0")
        if self.motion not in (None, "static", "linear", "sinusoidal"):
            raise ParamError(f"unknown motion mode {self.motion!r}")

    @classmethod
    def from_dict(cls, doc: dict) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc or {}) - known
        if unknown:
            raise ParamError(f"unknown SynthConfig keys: {sorted(unknown)}")
        try:
            return cls(**(doc or {}))
        except TypeError as exc:
            raise ParamError(str(exc)) from exc

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scale_range"] = list(self.scale_range)
        d["velocity_px"] = list(self.velocity_px)
        return d


def sample_pose(rng: np.random.Generator, cfg: SynthConfig) -> Pose:
    t = cfg.max_translation
    return Pose(
        cx=0.5 + rng.uniform(-t, t),
        cy=0.5 + rng.uniform(-t, t),
        theta=math.radians(rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg)),
        scale=rng.uniform(*cfg.scale_range),
    )


@dataclass
class Appearance:
    skin: np.ndarray  # RGB in [-1, 1]
    background: np.ndarray
    bg_tilt: np.ndarray  # linear background gradient (dx, dy)


def sample_appearance(rng: np.random.Generator) -> Appearance:
    return Appearance(
        skin=np.array([0.45, 0.05, -0.2]) + rng.uniform(-0.12, 0.12, 3),
        background=np.array([-0.55, -0.5, -0.4]) + rng.uniform(-0.1, 0.1, 3),
        bg_tilt=rng.uniform(-0.15, 0.15, 2),
    )


def draw_shape(pose: Pose, look: Appearance, size: int, noise: np.ndarray | None) -> np.ndarray:
    """Rasterize the textured blob at ``pose``; returns (3, size, size) float64 in [-1, 1]."""
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64) / size
    c, s = math.cos(pose.theta), math.sin(pose.theta)
    dx, dy = xs - pose.cx, ys - pose.cy
    # inverse similarity: screen -> canonical offsets
    lx = (c * dx + s * dy) / pose.scale
    ly = (-s * dx + c * dy) / pose.scale
    ax, ay = ELLIPSE_AXES
    r = np.sqrt((lx / ax) ** 2 + (ly / ay) ** 2)
    edge_px = 1.0 / (size * pose.scale * min(ax, ay))
    inside = np.clip(0.5 - (r - 1.0) / (2 * edge_px), 0.0, 1.0)
    shade = 1.0 - 0.35 * (ly / ay + 1.0) / 2.0
    img = (look.background[:, None, None] + look.bg_tilt[0] * (xs - 0.5) + look.bg_tilt[1] * (ys - 0.5)) * (1 - inside)
    img = img + inside * (look.skin[:, None, None] * shade + 0.2 * (shade - 1.0))
    for ex, ey in EYES:
        d = np.sqrt((lx - ex) ** 2 + (ly - ey) ** 2) / EYE_RADIUS
        eye = np.clip(0.5 - (d - 1.0) * EYE_RADIUS * size * pose.scale / 2, 0.0, 1.0)
        img = img * (1 - eye) + eye * np.array([-0.8, -0.85, -0.8])[:, None, None]
    if noise is not None:
        img = img + noise
    return np.clip(img, -1.0, 1.0)


def _frame(rng, cfg: SynthConfig, template: Template, pose: Pose, look: Appearance, marked: bool):
    size = cfg.resolution
    noise = rng.normal(0.0, cfg.noise_std, (3, size, size)) if cfg.noise_std > 0 else None
    img = draw_shape(pose, look, size, noise)
    offsets, _ = _canonical_landmarks()
    gt = pose.apply(offsets)
    if marked:
        delta = torch.from_numpy(gt - template.points)
        img = render(delta, template, torch.from_numpy(img), cfg.render).numpy()
    return img, gt


def _write_jsonl(path: Path, records) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec) + "\n")


def _gt_record(k: int, gt_norm: np.ndarray, size: int) -> dict:
    return {"frame": k, "points_px": (gt_norm * size).tolist()}


def _pose_record(k: int, pose: Pose) -> dict:
    return {"frame": k, **asdict(pose)}


def synth_generate(cfg: SynthConfig, out_dir) -> dict:
    """Write an unpaired synthetic dataset (or a motion sequence when ``cfg.motion`` is set).

    Layout: ``marked/``, ``unmarked/``, ``gt/landmarks.jsonl`` (unmarked frames),
    ``gt/poses.jsonl``, ``gt/marked_landmarks.jsonl``, ``template.json`` and
    ``manifest.json``. Marked and unmarked frames come from disjoint random streams.
    """
    if cfg.motion is not None:
        return make_motion_sequence(cfg, out_dir)
    out = Path(out_dir)
    template = synthetic_template(cfg.spring_constant)
    try:
        for sub in ("marked", "unmarked", "gt"):
            (out / sub).mkdir(parents=True, exist_ok=True)
        save_template(template, out / "template.json")
    except OSError as exc:
        raise FrameIOError(f"cannot write to {out}: {exc}") from exc

    records = {}
    for domain, stream in (("unmarked", 0), ("marked", 1)):
        rng = np.random.default_rng([cfg.seed, stream])
        gts, poses = [], []
        for k in range(cfg.n_frames):
            pose = sample_pose(rng, cfg)
            look = sample_appearance(rng)
            img, gt = _frame(rng, cfg, template, pose, look, marked=domain == "marked")
            write_frame(img, out / domain / frame_name(k))
            gts.append(_gt_record(k, gt, cfg.resolution))
            poses.append(_pose_record(k, pose))
        records[domain] = (gts, poses)

    _write_jsonl(out / "gt" / "landmarks.jsonl", records["unmarked"][0])
    _write_jsonl(out / "gt" / "poses.jsonl", records["unmarked"][1])
    _write_jsonl(out / "gt" / "marked_landmarks.jsonl", records["marked"][0])
    manifest = {
        "kind": "unpaired",
        "counts": {"marked": cfg.n_frames, "unmarked": cfg.n_frames, "gt": cfg.n_frames},
        "seed": cfg.seed,
        "config": cfg.to_dict(),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest


def motion_offset_px(cfg: SynthConfig, k: int) -> tuple[float, float]:
    if cfg.motion == "linear":
        return cfg.velocity_px[0] * k, cfg.velocity_px[1] * k
    if cfg.motion == "sinusoidal":
        # circular path: x and y are sinusoids a quarter period apart
        phase = 2 * math.pi * k / cfg.period_frames
        return cfg.amplitude_px * math.sin(phase), cfg.amplitude_px * (1.0 - math.cos(phase))
    return 0.0, 0.0


def make_motion_sequence(cfg: SynthConfig, out_dir) -> dict:
    """Render one shape instance moving smoothly over ``n_sequence_frames`` unmarked frames.

    Writes ``unmarked/`` frames and the ground-truth track to ``gt/landmarks.jsonl``.
    Only the background noise changes between frames of a static sequence.
    """
    if cfg.motion is None:
        raise ParamError("motion mode must be set for a sequence")
    out = Path(out_dir)
    template = synthetic_template(cfg.spring_constant)
    try:
        (out / "unmarked").mkdir(parents=True, exist_ok=True)
        (out / "gt").mkdir(parents=True, exist_ok=True)
        save_template(template, out / "template.json")
    except OSError as exc:
        raise FrameIOError(f"cannot write to {out}: {exc}") from exc

    rng = np.random.default_rng([cfg.seed, 2])
    base = sample_pose(rng, cfg)
    look = sample_appearance(rng)
    # center the whole path on the image so it stays inside the training pose range
    if cfg.motion == "sinusoidal":
        base.cx, base.cy = 0.5, 0.5 - cfg.amplitude_px / cfg.resolution
    elif cfg.motion == "linear":
        travel = np.array(cfg.velocity_px) * max(cfg.n_sequence_frames - 1, 0) / cfg.resolution
        base.cx, base.cy = 0.5 - travel[0] / 2, 0.5 - travel[1] / 2

    gts, poses = [], []
    for k in range(cfg.n_sequence_frames):
        ox, oy = motion_offset_px(cfg, k)
        pose = Pose(base.cx + ox / cfg.resolution, base.cy + oy / cfg.resolution, base.theta, base.scale)
        img, gt = _frame(rng, cfg, template, pose, look, marked=False)
        write_frame(img, out / "unmarked" / frame_name(k))
        gts.append(_gt_record(k, gt, cfg.resolution))
        poses.append(_pose_record(k, pose))
    _write_jsonl(out / "gt" / "landmarks.jsonl", gts)
    _write_jsonl(out / "gt" / "poses.jsonl", poses)
    manifest = {
        "kind": "sequence",
        "motion": cfg.motion,
        "counts": {"unmarked": cfg.n_sequence_frames, "gt": cfg.n_sequence_frames},
        "seed": cfg.seed,
        "config": cfg.to_dict(),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest


def read_gt(path) -> tuple[np.ndarray, np.ndarray]:
    """Read a landmarks JSON Lines file into (frame ids, (T, N, 2) pixel positions)."""
    frames, points = [], []
    try:
        with open(path, encoding="utf-8") as f:
            for line in f:
                if line.strip():
                    rec = json.loads(line)
                    frames.append(int(rec["frame"]))
                    points.append(rec["points_px"])
    except (OSError, ValueError, KeyError) as exc:
        raise FrameIOError(f"cannot read landmarks {path}: {exc}") from exc
    return np.array(frames, dtype=np.int64), np.array(points, dtype=np.float64).reshape(len(frames), -1, 2)
