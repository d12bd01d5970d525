"""Adversarial, cycle and spring terms plus the weighted full objective."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import NonFiniteError, ParamError, ShapeError
from .template import Template

GAN_MODES = ("lsgan", "bce")


class SpringVariant(str, enum.Enum):
    LENGTH_CHANGE = "length_change"
    VECTOR_DIFF = "vector_diff"


@dataclass(frozen=True)
class LossWeights:
    lambda_gan: float = 1.0
    lambda_cyc: float = 10.0

    def __post_init__(self):
        if not (self.lambda_gan >= 0 and self.lambda_cyc >= 0):
            raise ParamError(f"loss weights must be >= 0, got {self}")


def _same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {tuple(a.shape)} and {tuple(b.shape)} differ")


def gan_loss_discriminator(real_scores: torch.Tensor, fake_scores: torch.Tensor, mode: str = "lsgan") -> torch.Tensor:
    """0.5 * (mean (D(real) - 1)^2 + mean D(fake)^2) for ``lsgan``."""
    _same_shape(real_scores, fake_scores, "discriminator scores")
    if mode == "lsgan":
        return 0.5 * ((real_scores - 1.0).pow(2).mean() + fake_scores.pow(2).mean())
    if mode == "bce":
        return 0.5 * (
            F.binary_cross_entropy_with_logits(real_scores, torch.ones_like(real_scores))
            + F.binary_cross_entropy_with_logits(fake_scores, torch.zeros_like(fake_scores))
        )
    raise ParamError(f"unknown gan mode {mode!r}")


def gan_loss_generator(fake_scores: torch.Tensor, mode: str = "lsgan") -> torch.Tensor:
    if mode == "lsgan":
        return (fake_scores - 1.0).pow(2).mean()
    if mode == "bce":
        return F.binary_cross_entropy_with_logits(fake_scores, torch.ones_like(fake_scores))
    raise ParamError(f"unknown gan mode {mode!r}")


def cycle_loss(original, reconstructed) -> torch.Tensor:
    """Mean absolute reconstruction error.

    Pass lists of batches to sum the error over several cycle directions.
    """
    if isinstance(original, torch.Tensor):
        original, reconstructed = [original], [reconstructed]
    if len(original) != len(reconstructed):
        raise ShapeError(f"{len(original)} originals but {len(reconstructed)} reconstructions")
    total = 0.0
    for a, b in zip(original, reconstructed):
        _same_shape(a, b, "cycle pair")
        total = total + (a - b).abs().mean()
    return torch.as_tensor(total)


def spring_loss(t: Template, delta, variant: SpringVariant | str = SpringVariant.LENGTH_CHANGE) -> torch.Tensor:
    """K * sum over spring edges of the squared change in spring state.

    LENGTH_CHANGE penalizes ``(|p_i + d_i - p_j - d_j| - rest_ij)^2`` and
    VECTOR_DIFF penalizes ``|d_i - d_j|^2``. A batched ``delta`` of shape
    (B, N, 2) gives the batch mean.
    """
    variant = SpringVariant(variant)
    delta = torch.as_tensor(delta)
    n = t.n_landmarks
    if tuple(delta.shape[-2:]) != (n, 2):
        raise ShapeError(f"delta must end in ({n}, 2), got {tuple(delta.shape)}")
    if len(t.springs) == 0:
        return delta.sum() * 0.0
    edges = torch.tensor(t.edge_index, device=delta.device)
    i, j = edges[:, 0], edges[:, 1]
    if variant is SpringVariant.VECTOR_DIFF:
        diff = delta[..., i, :] - delta[..., j, :]
        per_edge = diff.pow(2).sum(-1)
    else:
        points = torch.tensor(t.points, dtype=delta.dtype, device=delta.device)
        vec = (points + delta)[..., i, :] - (points + delta)[..., j, :]
        # sqrt has an infinite slope at 0: route zero-length springs through a safe value
        sq = vec.pow(2).sum(-1)
        zero = sq == 0
        length = torch.where(zero, torch.zeros_like(sq), torch.sqrt(torch.where(zero, torch.ones_like(sq), sq)))
        rest = torch.tensor(t.rest_lengths, dtype=delta.dtype, device=delta.device)
        # L - R as (L^2 - R^2) / (L + R): exactly zero at rest (torch's sqrt is not always
        # correctly rounded) and free of cancellation. R^2 is taken from the template points
        # when they agree with the stored rest length.
        base = points[i] - points[j]
        base_sq = base.pow(2).sum(-1)
        rest_sq = torch.where(torch.isclose(torch.sqrt(base_sq), rest, rtol=1e-12, atol=0), base_sq, rest * rest)
        denom = length + rest
        pos_denom = denom > 0
        change = torch.where(pos_denom, (sq - rest_sq) / torch.where(pos_denom, denom, torch.ones_like(denom)), 0.0)
        per_edge = change.pow(2)
    energy = t.spring_constant * per_edge.sum(-1)
    return energy.mean() if energy.ndim else energy


TERMS = ("gan_UtoM", "gan_MtoU", "cyc", "spring")


def total_objective(parts: dict, w: LossWeights = LossWeights()):
    """Weighted sum ``lambda_gan * (gan_UtoM + gan_MtoU) + lambda_cyc * cyc + spring``.

    Returns ``(total, report)`` where ``report`` maps every term and ``total`` to a float.
    """
    missing = [k for k in TERMS if k not in parts]
    if missing:
        raise ParamError(f"missing objective terms {missing}")
    for k in TERMS:
        v = float(parts[k].detach()) if isinstance(parts[k], torch.Tensor) else float(parts[k])
        if not math.isfinite(v):
            raise NonFiniteError(f"term {k} is {v}")
    total = w.lambda_gan * (parts["gan_UtoM"] + parts["gan_MtoU"]) + w.lambda_cyc * parts["cyc"] + parts["spring"]
    report = {k: float(parts[k].detach()) if isinstance(parts[k], torch.Tensor) else float(parts[k]) for k in TERMS}
    report["total"] = float(total.detach()) if isinstance(total, torch.Tensor) else float(total)
    return total, report
