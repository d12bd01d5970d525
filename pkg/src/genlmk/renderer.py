"""Differentiable soft-stroke renderer.

Deformed template strokes are splatted onto an image with an untruncated
Gaussian kernel. Coverage from overlapping strokes combines as
``1 - prod(1 - w_k)``, which does not depend on stroke order, and the stroke
color at a pixel is the coverage-weighted mean of the contributing line colors.

Pixel convention: pixel column ``i`` sits at ``x_px = i`` and normalized
coordinate ``x`` maps to ``x * W`` (same for rows with ``H``).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch
from PIL import Image, ImageDraw

from .errors import FrameIOError, ParamError, ShapeError
from .template import Template, apply_deformation

MODES = ("points", "polylines")
_DEFAULT_COLOR = (1.0, 1.0, 1.0)


@dataclass(frozen=True)
class RenderSettings:
    sigma_px: float = 1.5
    alpha: float = 0.9
    mode: str = "points"
    samples_per_segment: int = 8

    def __post_init__(self):
        if not self.sigma_px > 0:
            raise ParamError(f"sigma_px must be > 0, got {self.sigma_px}")
        if not 0 < self.alpha <= 1:
            raise ParamError(f"alpha must be in (0, 1], got {self.alpha}")
        if self.mode not in MODES:
            raise ParamError(f"mode must be one of {MODES}, got {self.mode!r}")
        if int(self.samples_per_segment) < 2:
            raise ParamError(f"samples_per_segment must be >= 2, got {self.samples_per_segment}")


def splat_weight(d, sigma_px: float):
    """Gaussian stroke coverage at distance ``d`` pixels: ``exp(-d^2 / (2 sigma^2))``."""
    if not sigma_px > 0:
        raise ParamError(f"sigma_px must be > 0, got {sigma_px}")
    if isinstance(d, torch.Tensor):
        return torch.exp(-(d * d) / (2.0 * sigma_px**2))
    if isinstance(d, np.ndarray):
        return np.exp(-(d * d) / (2.0 * sigma_px**2))
    return math.exp(-(d * d) / (2.0 * sigma_px**2))


def _isolated(t: Template) -> list[int]:
    on_line = {k for line in t.lines for k in line.indices}
    return [k for k in range(t.n_landmarks) if k not in on_line]


@lru_cache(maxsize=32)
def point_samples(t: Template, samples_per_segment: int) -> tuple[np.ndarray, np.ndarray]:
    """Interpolation matrix (K, N) mapping landmarks to stroke samples, plus (K, 3) colors.

    Every segment contributes ``samples_per_segment`` evenly spaced samples starting
    at its first endpoint; the last landmark of each line closes it. Landmarks on no
    line are drawn as single white samples.
    """
    n = t.n_landmarks
    rows, colors = [], []
    for line in t.lines:
        for a, b in zip(line.indices[:-1], line.indices[1:]):
            for k in range(samples_per_segment):
                s = k / samples_per_segment
                row = np.zeros(n)
                row[a] += 1.0 - s
                row[b] += s
                rows.append(row)
                colors.append(line.color)
        row = np.zeros(n)
        row[line.indices[-1]] = 1.0
        rows.append(row)
        colors.append(line.color)
    for k in _isolated(t):
        row = np.zeros(n)
        row[k] = 1.0
        rows.append(row)
        colors.append(_DEFAULT_COLOR)
    return np.array(rows).reshape(-1, n), np.array(colors, dtype=np.float64).reshape(-1, 3)


@lru_cache(maxsize=32)
def segments(t: Template) -> tuple[np.ndarray, np.ndarray]:
    """(S, 2) endpoint indices and (S, 3) colors; isolated landmarks become zero-length segments."""
    idx, colors = [], []
    for line in t.lines:
        for a, b in zip(line.indices[:-1], line.indices[1:]):
            idx.append((a, b))
            colors.append(line.color)
    for k in _isolated(t):
        idx.append((k, k))
        colors.append(_DEFAULT_COLOR)
    return np.array(idx, dtype=np.int64).reshape(-1, 2), np.array(colors, dtype=np.float64).reshape(-1, 3)


def check_image(image: torch.Tensor) -> None:
    if image.ndim != 4 or image.shape[1] != 3:
        raise ShapeError(f"expected image of shape (3, H, W) or (B, 3, H, W), got {tuple(image.shape)}")
    if image.shape[2] < 8 or image.shape[3] < 8:
        raise ShapeError(f"image must be at least 8x8, got {tuple(image.shape[2:])}")


class _SplatComposite(torch.autograd.Function):
    """Gaussian point splats composited over an image, with a hand-written backward.

    The kernel is separable, so per-sample row and column profiles are computed
    once and the full (B, K, H, W) coverage volume is a single outer product.
    """

    @staticmethod
    def forward(ctx, samples, image, colors, sigma, alpha):
        b, k, _ = samples.shape
        h, w = image.shape[-2:]
        xs = torch.arange(w, dtype=image.dtype, device=image.device)
        ys = torch.arange(h, dtype=image.dtype, device=image.device)
        dx = xs.view(1, 1, w) - samples[..., 0:1]  # (B, K, W)
        dy = ys.view(1, 1, h) - samples[..., 1:2]  # (B, K, H)
        inv = 1.0 / (2.0 * sigma * sigma)
        cover = torch.exp(-dy * dy * inv).unsqueeze(-1) * torch.exp(-dx * dx * inv).unsqueeze(-2)
        # a zero factor would make prod's gradient degenerate; the floor keeps
        # P / q_k equal to the product over the other samples
        tiny = torch.finfo(image.dtype).tiny
        q = (1.0 - cover).clamp_min(tiny)
        prod = q.prod(dim=1)  # (B, H, W)
        mass = cover.sum(dim=1).clamp_min(tiny)
        stroke = torch.einsum("bkhw,kc->bchw", cover, colors) / mass.unsqueeze(1)
        total = (1.0 - prod).unsqueeze(1)
        out = image + alpha * total * (stroke - image)
        ctx.save_for_backward(dx, dy, cover, q, prod, mass, stroke, total, image, colors)
        ctx.sigma, ctx.alpha = sigma, alpha
        return out

    @staticmethod
    def backward(ctx, grad):
        dx, dy, cover, q, prod, mass, stroke, total, image, colors = ctx.saved_tensors
        sigma, alpha = ctx.sigma, ctx.alpha
        g_image = grad * (1.0 - alpha * total)
        g_total = alpha * (grad * (stroke - image)).sum(1)  # (B, H, W)
        g_stroke = alpha * total * grad  # (B, 3, H, W)
        # d total / d cover_k = prod / q_k ; d stroke / d cover_k = (c_k - stroke) / mass
        unclamped = q > torch.finfo(q.dtype).tiny
        g_cover = torch.where(unclamped, (g_total * prod).unsqueeze(1) / q, torch.zeros_like(q))
        g_cover += (
            torch.einsum("bchw,kc->bkhw", g_stroke, colors) - (g_stroke * stroke).sum(1, keepdim=True)
        ) / mass.unsqueeze(1)
        r = g_cover * cover
        inv = 1.0 / (sigma * sigma)
        gx = (r.sum(2) * dx).sum(-1) * inv  # d cover / d sample_x = cover * dx / sigma^2
        gy = (r.sum(3) * dy).sum(-1) * inv
        return torch.stack([gx, gy], dim=-1), g_image, None, None, None


def stroke_samples(px: torch.Tensor, t: Template, s: RenderSettings) -> tuple[torch.Tensor, np.ndarray]:
    """Pixel positions (B, K, 2) of the point-mode stroke samples and their colors."""
    interp, colors = point_samples(t, int(s.samples_per_segment))
    interp = torch.as_tensor(interp, dtype=px.dtype, device=px.device)
    return torch.einsum("kn,bnc->bkc", interp, px), colors


def _log_coverage_polylines(px: torch.Tensor, t: Template, s: RenderSettings, h: int, w: int):
    idx, colors = segments(t)
    idx = torch.as_tensor(idx, device=px.device)
    a = px[:, idx[:, 0]][..., None, None]  # (B, S, 2, 1, 1)
    b = px[:, idx[:, 1]][..., None, None]
    xs = torch.arange(w, dtype=px.dtype, device=px.device).view(1, 1, 1, w)
    ys = torch.arange(h, dtype=px.dtype, device=px.device).view(1, 1, h, 1)
    abx, aby = b[:, :, 0] - a[:, :, 0], b[:, :, 1] - a[:, :, 1]
    apx, apy = xs - a[:, :, 0], ys - a[:, :, 1]
    len2 = abx * abx + aby * aby
    # zero-length segments degrade to point splats
    safe = torch.where(len2 > 0, len2, torch.ones_like(len2))
    u = torch.where(len2 > 0, (apx * abx + apy * aby) / safe, torch.zeros_like(apx))
    u = u.clamp(0.0, 1.0)
    dx = apx - u * abx
    dy = apy - u * aby
    return -(dx * dx + dy * dy) / (2.0 * s.sigma_px**2), colors


def render(delta, t: Template, image, s: RenderSettings = RenderSettings()) -> torch.Tensor:
    """Composite the deformed template onto ``image``.

    ``delta`` is (N, 2) or (B, N, 2) in normalized units and ``image`` is (3, H, W)
    or (B, 3, H, W) in [-1, 1]. Returns a tensor shaped like ``image``, differentiable
    with respect to ``delta`` (and the image).
    """
    delta = torch.as_tensor(delta)
    image = torch.as_tensor(image)
    unbatched = image.ndim == 3
    if unbatched:
        image = image.unsqueeze(0)
    check_image(image)
    if delta.ndim == 2:
        delta = delta.unsqueeze(0)
    if delta.ndim != 3 or delta.shape[0] not in (1, image.shape[0]):
        raise ShapeError(f"delta batch {tuple(delta.shape)} does not match image batch {image.shape[0]}")
    delta = delta.to(image.dtype)
    h, w = image.shape[-2:]

    pos = apply_deformation(t, delta)
    px = pos * torch.tensor([w, h], dtype=pos.dtype, device=pos.device)
    if px.shape[0] != image.shape[0]:
        px = px.expand(image.shape[0], -1, -1)
    if s.mode == "points":
        samples, colors = stroke_samples(px, t, s)
        if samples.shape[1] == 0:
            return image.squeeze(0) if unbatched else image
        colors = torch.as_tensor(colors * 2.0 - 1.0, dtype=image.dtype, device=image.device)
        out = _SplatComposite.apply(samples, image, colors, float(s.sigma_px), float(s.alpha))
        return out.squeeze(0) if unbatched else out

    logw, colors = _log_coverage_polylines(px, t, s, h, w)
    if logw.shape[1] == 0:
        return image.squeeze(0) if unbatched else image
    cover = torch.exp(logw)
    total = 1.0 - torch.prod(1.0 - cover, dim=1, keepdim=True)
    colors = torch.as_tensor(colors * 2.0 - 1.0, dtype=image.dtype, device=image.device)
    stroke = torch.einsum("bkhw,kc->bchw", torch.softmax(logw, dim=1), colors)
    out = image + s.alpha * total * (stroke - image)
    return out.squeeze(0) if unbatched else out


def to_uint8(image) -> np.ndarray:
    """(3, H, W) array in [-1, 1] -> (H, W, 3) uint8."""
    if isinstance(image, torch.Tensor):
        image = image.detach().cpu().numpy()
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ShapeError(f"expected (3, H, W) image, got {arr.shape}")
    return np.round((np.clip(arr, -1.0, 1.0) + 1.0) * 127.5).astype(np.uint8).transpose(1, 2, 0)


def overlay_export(positions, image, path, template: Template | None = None, radius: float = 1.5) -> Path:
    """Write a PNG of ``image`` with hard-drawn landmarks (normalized ``positions``).

    Lines from ``template`` are drawn in their colors; strokes leaving the image
    are clipped by the rasterizer.
    """
    pos = np.asarray(positions.detach().cpu() if isinstance(positions, torch.Tensor) else positions, dtype=np.float64)
    if pos.ndim != 2 or pos.shape[1] != 2:
        raise ShapeError(f"positions must be (N, 2), got {pos.shape}")
    if not np.all(np.isfinite(pos)):
        raise ShapeError("positions must be finite")
    rgb = to_uint8(image)
    h, w = rgb.shape[:2]
    pts = pos * np.array([w, h])
    canvas = Image.fromarray(rgb)
    draw = ImageDraw.Draw(canvas)
    if template is not None:
        for line in template.lines:
            color = tuple(int(round(c * 255)) for c in line.color)
            draw.line([tuple(pts[k]) for k in line.indices], fill=color, width=1)
    for x, y in pts:
        draw.ellipse([x - radius, y - radius, x + radius, y + radius], outline=(255, 255, 255))
    path = Path(path)
    try:
        canvas.save(path, format="PNG")
    except (OSError, ValueError) as exc:
        raise FrameIOError(f"cannot write {path}: {exc}") from exc
    return path
