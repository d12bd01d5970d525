"""Adversarial training of the deformation network with cycle consistency and spring regularization.

One step translates unmarked images to fake marked ones (deformation net + renderer)
and marked images to fake unmarked ones (generator), closes both cycles, updates the
two translators together, then updates both discriminators against buffered fakes.
"""
from __future__ import annotations

import base64
import json
import logging
import math
import shutil
import time
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import numpy as np
import torch

from .data import DataConfig, list_frames, load_unpaired, read_frame
from .errors import DataError, FrameIOError, NonFiniteError, ParamError, ShapeError
from .losses import (
    GAN_MODES,
    LossWeights,
    SpringVariant,
    cycle_loss,
    gan_loss_discriminator,
    gan_loss_generator,
    spring_loss,
    total_objective,
)
from .networks import DeformationNet, DeformationNetSpec, GanNetSpec, PatchDiscriminator, ResnetGenerator
from .renderer import RenderSettings, render
from .template import Template, apply_deformation, load_template, save_template

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
REPORT_KEYS = ("gan_UtoM", "gan_MtoU", "d_M", "d_U", "cyc", "spring", "total")


@dataclass
class TrainConfig:
    # data: either ``data_dir`` (holding marked/, unmarked/, template.json) or explicit paths
    data_dir: str | None = None
    marked_dir: str | None = None
    unmarked_dir: str | None = None
    template: str | None = None
    resolution: tuple[int, int] = (128, 128)
    hflip: bool = False
    jitter_px: int = 0

    batch_size: int = 4
    steps: int = 40_000
    lr: float = 2e-4
    betas: tuple[float, float] = (0.5, 0.999)
    decay_start: float = 0.5  # fraction of ``steps`` after which the lr decays linearly to 0
    history_buffer_size: int = 50
    seed: int = 0

    loss: LossWeights = field(default_factory=LossWeights)
    gan_mode: str = "lsgan"
    spring_variant: SpringVariant = SpringVariant.LENGTH_CHANGE
    spring_constant: float | None = None  # overrides the template's K when set
    render: RenderSettings = field(default_factory=RenderSettings)
    deformation: DeformationNetSpec = field(default_factory=DeformationNetSpec)
    gan: GanNetSpec = field(default_factory=GanNetSpec)

    checkpoint_every: int = 1000
    log_every: int = 10

    def __post_init__(self):
        # YAML 1.1 reads "1e-3" as a string, so coerce numeric fields explicitly
        try:
            for name in ("lr", "decay_start"):
                setattr(self, name, float(getattr(self, name)))
            for name in ("jitter_px", "batch_size", "steps", "history_buffer_size", "seed", "checkpoint_every", "log_every"):
                setattr(self, name, int(getattr(self, name)))
            if self.spring_constant is not None:
                self.spring_constant = float(self.spring_constant)
            self.resolution = tuple(int(v) for v in self.resolution)
            self.betas = tuple(float(b) for b in self.betas)
        except (TypeError, ValueError) as exc:
            raise ParamError(f"bad numeric config value: {exc}") from exc
        if self.checkpoint_every < 1 or self.log_every < 1 or self.history_buffer_size < 0:
            raise ParamError("checkpoint_every and log_every must be >= 1, history_buffer_size >= 0")
        self.spring_variant = SpringVariant(self.spring_variant)
        if self.batch_size < 1 or self.steps < 1:
            raise ParamError("batch_size and steps must be >= 1")
        if self.gan_mode not in GAN_MODES:
            raise ParamError(f"gan_mode must be one of {GAN_MODES}")
        if self.deformation.input_resolution != self.resolution:
            self.deformation = DeformationNetSpec(
                self.deformation.conv_channels, self.deformation.fc_hidden, self.resolution
            )

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        return _from_dict(cls, doc or {})

    def to_dict(self) -> dict:
        return _to_jsonable(asdict(self))

    def paths(self) -> tuple[Path, Path, Path]:
        """(marked_dir, unmarked_dir, template file)."""
        root = Path(self.data_dir) if self.data_dir else None
        marked = Path(self.marked_dir) if self.marked_dir else (root / "marked" if root else None)
        unmarked = Path(self.unmarked_dir) if self.unmarked_dir else (root / "unmarked" if root else None)
        tmpl = Path(self.template) if self.template else (root / "template.json" if root else None)
        if marked is None or unmarked is None or tmpl is None:
            raise ParamError("config needs data_dir or marked_dir, unmarked_dir and template")
        return marked, unmarked, tmpl


_NESTED = {"loss": LossWeights, "render": RenderSettings, "deformation": DeformationNetSpec, "gan": GanNetSpec}


def _from_dict(cls, doc: dict):
    known = {f.name for f in fields(cls) if f.init}
    unknown = set(doc) - known
    if unknown:
        raise ParamError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for k, v in doc.items():
        sub = _NESTED.get(k) if cls is TrainConfig else None
        if sub is not None and isinstance(v, dict):
            v = _from_dict(sub, v)
        kwargs[k] = v
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ParamError(str(exc)) from exc


def _to_jsonable(obj):
    if isinstance(obj, dict):
        return {k: _to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(v) for v in obj]
    if isinstance(obj, SpringVariant):
        return obj.value
    if is_dataclass(obj):
        return _to_jsonable(asdict(obj))
    return obj


class HistoryBuffer:
    """Pool of past fakes for discriminator updates.

    Until full, every incoming image is stored and passed through. Afterwards each
    image is, with probability 1/2, swapped for a uniformly chosen stored one.
    """

    def __init__(self, capacity: int):
        self.capacity = int(capacity)
        self.images: list[torch.Tensor] = []

    def __len__(self):
        return len(self.images)

    def query(self, images: torch.Tensor, generator: torch.Generator) -> torch.Tensor:
        if self.capacity == 0:
            return images
        out = []
        for img in images.detach():
            if len(self.images) < self.capacity:
                self.images.append(img.clone())
                out.append(img)
            elif torch.rand(1, generator=generator).item() < 0.5:
                k = int(torch.randint(self.capacity, (1,), generator=generator).item())
                out.append(self.images[k])
                self.images[k] = img.clone()
            else:
                out.append(img)
        return torch.stack(out)


def lr_factor(step: int, cfg: TrainConfig) -> float:
    """Constant, then linear decay to zero over the steps after ``decay_start * steps``."""
    start = int(cfg.decay_start * cfg.steps)
    if step < start:
        return 1.0
    return max(0.0, (cfg.steps - step) / max(cfg.steps - start, 1))


class TrainState:
    """Networks, optimizers, step counter, fake histories and RNG streams of one run."""

    def __init__(self, cfg: TrainConfig, template: Template):
        self.cfg = cfg
        if cfg.spring_constant is not None:
            template = Template(template.points, template.lines, template.springs, float(cfg.spring_constant))
        self.template = template
        torch.manual_seed(cfg.seed)
        self.deform = DeformationNet(template.n_landmarks, cfg.deformation)
        self.gen = ResnetGenerator(cfg.gan.ngf, cfg.gan.n_res_blocks)
        self.disc_m = PatchDiscriminator(cfg.gan.ndf)
        self.disc_u = PatchDiscriminator(cfg.gan.ndf)
        trans = list(self.deform.parameters()) + list(self.gen.parameters())
        discs = list(self.disc_m.parameters()) + list(self.disc_u.parameters())
        self.opt_g = torch.optim.Adam(trans, lr=cfg.lr, betas=cfg.betas)
        self.opt_d = torch.optim.Adam(discs, lr=cfg.lr, betas=cfg.betas)
        self.step = 0
        self.buffer_m = HistoryBuffer(cfg.history_buffer_size)
        self.buffer_u = HistoryBuffer(cfg.history_buffer_size)
        self.data_rng = torch.Generator().manual_seed(cfg.seed)
        self.buffer_rng = torch.Generator().manual_seed(cfg.seed + 1)

    def networks(self) -> dict[str, torch.nn.Module]:
        return {"deform": self.deform, "gen": self.gen, "disc_m": self.disc_m, "disc_u": self.disc_u}

    def weights(self) -> dict:
        return {k: m.state_dict() for k, m in self.networks().items()}

    def state_blob(self) -> dict:
        return {
            "weights": self.weights(),
            "opt_g": self.opt_g.state_dict(),
            "opt_d": self.opt_d.state_dict(),
            "buffer_m": self.buffer_m.images,
            "buffer_u": self.buffer_u.images,
        }

    def rng_state(self) -> dict:
        enc = lambda g: base64.b64encode(g.get_state().numpy().tobytes()).decode("ascii")  # noqa: E731
        return {"data": enc(self.data_rng), "buffer": enc(self.buffer_rng)}

    def load_rng_state(self, doc: dict) -> None:
        dec = lambda s: torch.from_numpy(np.frombuffer(base64.b64decode(s), dtype=np.uint8).copy())  # noqa: E731
        self.data_rng.set_state(dec(doc["data"]))
        self.buffer_rng.set_state(dec(doc["buffer"]))

    def load_blob(self, blob: dict) -> None:
        for k, m in self.networks().items():
            m.load_state_dict(blob["weights"][k])
        self.opt_g.load_state_dict(blob["opt_g"])
        self.opt_d.load_state_dict(blob["opt_d"])
        self.buffer_m.images = list(blob["buffer_m"])
        self.buffer_u.images = list(blob["buffer_u"])


def _set_lr(opt: torch.optim.Optimizer, lr: float) -> None:
    for group in opt.param_groups:
        group["lr"] = lr


def _dump_nonfinite(state: TrainState, batch_u, batch_m, report: dict, dump_dir) -> Path | None:
    if dump_dir is None:
        return None
    path = Path(dump_dir)
    path.mkdir(parents=True, exist_ok=True)
    target = path / f"nonfinite_{state.step:08d}.pt"
    torch.save({"step": state.step, "batch_u": batch_u, "batch_m": batch_m, "report": report, "weights": state.weights()}, target)
    return target


def _check_finite(state, batch_u, batch_m, report: dict, dump_dir) -> None:
    bad = [k for k, v in report.items() if not math.isfinite(v)]
    if bad:
        where = _dump_nonfinite(state, batch_u, batch_m, report, dump_dir)
        raise NonFiniteError(f"step {state.step}: non-finite {bad} in {report}" + (f"; dumped to {where}" if where else ""))


def train_step(state: TrainState, batch_u: torch.Tensor, batch_m: torch.Tensor, dump_dir=None) -> tuple[TrainState, dict]:
    """One alternating update. Returns the (mutated) state and the itemized loss report."""
    cfg = state.cfg
    h, w = cfg.resolution
    for name, batch in (("unmarked", batch_u), ("marked", batch_m)):
        if batch.ndim != 4 or tuple(batch.shape[1:]) != (3, h, w):
            raise ShapeError(f"{name} batch must be (B, 3, {h}, {w}), got {tuple(batch.shape)}")
    t, rs = state.template, cfg.render
    factor = lr_factor(state.step, cfg)
    _set_lr(state.opt_g, cfg.lr * factor)
    _set_lr(state.opt_d, cfg.lr * factor)

    # translators
    for d in (state.disc_m, state.disc_u):
        d.requires_grad_(False)
    delta = state.deform(batch_u)
    fake_m = render(delta, t, batch_u, rs)
    fake_u = state.gen(batch_m)
    rec_u = state.gen(fake_m)
    rec_m = render(state.deform(fake_u), t, fake_u, rs)
    parts = {
        "gan_UtoM": gan_loss_generator(state.disc_m(fake_m), cfg.gan_mode),
        "gan_MtoU": gan_loss_generator(state.disc_u(fake_u), cfg.gan_mode),
        "cyc": cycle_loss([batch_u, batch_m], [rec_u, rec_m]),
        "spring": spring_loss(t, delta, cfg.spring_variant),
    }
    raw = {k: float(v.detach()) for k, v in parts.items()}
    _check_finite(state, batch_u, batch_m, raw, dump_dir)
    total, report = total_objective(parts, cfg.loss)
    state.opt_g.zero_grad(set_to_none=True)
    total.backward()
    state.opt_g.step()

    # discriminators
    for d in (state.disc_m, state.disc_u):
        d.requires_grad_(True)
    pool_m = state.buffer_m.query(fake_m.detach(), state.buffer_rng)
    pool_u = state.buffer_u.query(fake_u.detach(), state.buffer_rng)
    d_m = gan_loss_discriminator(state.disc_m(batch_m), state.disc_m(pool_m), cfg.gan_mode)
    d_u = gan_loss_discriminator(state.disc_u(batch_u), state.disc_u(pool_u), cfg.gan_mode)
    report["d_M"], report["d_U"] = float(d_m.detach()), float(d_u.detach())
    _check_finite(state, batch_u, batch_m, report, dump_dir)
    state.opt_d.zero_grad(set_to_none=True)
    (d_m + d_u).backward()
    state.opt_d.step()

    state.step += 1
    return state, {k: report[k] for k in REPORT_KEYS}


# ---------------------------------------------------------------------------
# checkpoints


def checkpoint_name(step: int) -> str:
    return f"{step:08d}"


def save_checkpoint(state: TrainState, root, template_src: Path | None = None) -> Path:
    root = Path(root)
    target = root / checkpoint_name(state.step)
    try:
        target.mkdir(parents=True, exist_ok=True)
        torch.save(state.state_blob(), target / "state.pt")
        manifest = {
            "version": CHECKPOINT_VERSION,
            "step": state.step,
            "config": state.cfg.to_dict(),
            "networks": {
                "n_landmarks": state.template.n_landmarks,
                "deformation": _to_jsonable(state.cfg.deformation),
                "gan": _to_jsonable(state.cfg.gan),
            },
            "rng": state.rng_state(),
        }
        (target / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
        if template_src is not None and Path(template_src).is_file():
            shutil.copyfile(template_src, target / "template.json")
        else:
            save_template(state.template, target / "template.json")
        (root / "latest").write_text(target.name + "\n")
    except OSError as exc:
        raise FrameIOError(f"cannot write checkpoint {target}: {exc}") from exc
    return target


def resolve_checkpoint(path) -> Path:
    """Accept a step directory or a checkpoint root holding a ``latest`` marker."""
    path = Path(path)
    if (path / "manifest.json").is_file():
        return path
    marker = path / "latest"
    if marker.is_file():
        step_dir = path / marker.read_text().strip()
        if (step_dir / "manifest.json").is_file():
            return step_dir
    raise FrameIOError(f"no checkpoint at {path}")


def load_checkpoint(path) -> TrainState:
    ckpt = resolve_checkpoint(path)
    try:
        manifest = json.loads((ckpt / "manifest.json").read_text())
        blob = torch.load(ckpt / "state.pt", weights_only=False)
    except (OSError, ValueError) as exc:
        raise FrameIOError(f"cannot read checkpoint {ckpt}: {exc}") from exc
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise FrameIOError(f"unsupported checkpoint version {manifest.get('version')}")
    cfg = TrainConfig.from_dict(manifest["config"])
    template = load_template(ckpt / "template.json")
    state = TrainState(cfg, template)
    state.load_blob(blob)
    state.load_rng_state(manifest["rng"])
    state.step = int(manifest["step"])
    return state


# ---------------------------------------------------------------------------
# training loop


def fit(cfg: TrainConfig, out_dir, resume=None, until: int | None = None) -> Path:
    """Train to ``cfg.steps`` (or stop early at step ``until``) and return the last checkpoint.

    ``resume`` continues from a checkpoint: weights, optimizer moments, fake
    histories, step counter and RNG streams all carry over, so a split run matches
    an uninterrupted one. The learning-rate schedule always spans ``cfg.steps``.
    """
    out = Path(out_dir)
    marked_dir, unmarked_dir, template_path = cfg.paths()
    for d in (marked_dir, unmarked_dir):
        if not Path(d).is_dir():
            raise DataError(f"training data directory {d} does not exist")
    if resume is not None:
        state = load_checkpoint(resume)
        saved = state.cfg
        state.cfg = cfg
        if saved.resolution != cfg.resolution or saved.deformation != cfg.deformation or saved.gan != cfg.gan:
            raise ParamError("resume config changes the network architecture")
    else:
        state = TrainState(cfg, load_template(template_path))
    dataset = load_unpaired(DataConfig(str(marked_dir), str(unmarked_dir), cfg.resolution, cfg.hflip, cfg.jitter_px))
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise FrameIOError(f"cannot create {out}: {exc}") from exc

    stop = cfg.steps if until is None else min(until, cfg.steps)
    last = None
    t0 = time.perf_counter()
    with open(out / "metrics.jsonl", "a", encoding="utf-8") as metrics:
        while state.step < stop:
            batch_u, batch_m = dataset.sample(cfg.batch_size, state.data_rng)
            state, report = train_step(state, batch_u, batch_m, dump_dir=out / "nonfinite")
            if state.step % cfg.log_every == 0 or state.step == stop:
                rec = {"step": state.step, **report, "wall_time": round(time.perf_counter() - t0, 3)}
                metrics.write(json.dumps(rec) + "\n")
                metrics.flush()
                log.info("step %d %s", state.step, " ".join(f"{k}={v:.4f}" for k, v in report.items()))
            if state.step % cfg.checkpoint_every == 0 or state.step == stop:
                last = save_checkpoint(state, out, template_path)
    return last if last is not None else save_checkpoint(state, out, template_path)


# ---------------------------------------------------------------------------
# inference


@dataclass
class Predictor:
    """Frozen deformation network plus template; maps frames to landmark positions."""

    deform: DeformationNet
    template: Template
    resolution: tuple[int, int]
    step: int = 0

    @classmethod
    def from_checkpoint(cls, path) -> "Predictor":
        state = load_checkpoint(path)
        state.deform.eval()
        return cls(state.deform, state.template, state.cfg.resolution, state.step)

    @torch.no_grad()
    def positions(self, images: torch.Tensor) -> np.ndarray:
        """Normalized (B, N, 2) landmark positions for a batch at the model resolution."""
        delta = self.deform(images)
        return apply_deformation(self.template, delta.double()).numpy()

    def predict_frames(self, paths, batch_size: int = 32) -> tuple[np.ndarray, list[tuple[int, int]]]:
        """Landmarks in pixels of each original frame, in input order, plus frame sizes."""
        out, sizes = [], []
        paths = list(paths)
        for k in range(0, len(paths), batch_size):
            chunk = [read_frame(p, self.resolution) for p in paths[k : k + batch_size]]
            pos = self.positions(torch.stack([c[0] for c in chunk]))
            for (_, (h, w)), p in zip(chunk, pos):
                out.append(p * np.array([w, h]))
                sizes.append((h, w))
        n = self.template.n_landmarks
        return np.array(out, dtype=np.float64).reshape(len(paths), n, 2), sizes


def infer(checkpoint, frames) -> np.ndarray:
    """Per-frame (T, N, 2) landmark pixel positions. ``frames`` is a directory or a list of files."""
    predictor = Predictor.from_checkpoint(checkpoint)
    paths = list_frames(frames) if isinstance(frames, (str, Path)) and Path(frames).is_dir() else list(frames)
    return predictor.predict_frames(paths)[0]
