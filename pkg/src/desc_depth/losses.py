"""Depth, consistency, translation and smoothness losses and the weighted total."""
from __future__ import annotations

from collections import Counter
from dataclasses import asdict, dataclass, fields
from typing import Optional

import torch
import torch.nn.functional as F


@dataclass
class LossWeights:
    source: float = 50.0
    target: float = 1.0
    smooth: float = 0.01
    identity: float = 100.0
    gan: float = 1.0

    def validate(self) -> list[str]:
        return [f"weights.{f.name} must be nonnegative, got {getattr(self, f.name)}"
                for f in fields(self) if getattr(self, f.name) < 0]


@dataclass
class LossBreakdown:
    depth: float = 0.0
    con_source: float = 0.0
    con_target: float = 0.0
    ins_source: float = 0.0
    ins_target: float = 0.0
    smooth: float = 0.0
    identity: float = 0.0
    gan_gen: float = 0.0
    gan_disc: float = 0.0
    total: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


TERM_NAMES = ("depth", "con_source", "ins_source", "con_target", "ins_target", "smooth", "identity", "gan_gen")


def _squeeze(x: torch.Tensor) -> torch.Tensor:
    return x[:, 0] if x.dim() == 4 else x


def _masked_l1(pred: torch.Tensor, gt: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
    m = valid.to(pred.dtype)
    return ((pred - gt).abs() * m).sum() / m.sum()


def depth_supervision_loss(preds: list[torch.Tensor], depth_gt: torch.Tensor, valid: torch.Tensor,
                           counters: Optional[Counter] = None) -> torch.Tensor:
    """Multiscale L1 over valid pixels; coarse predictions are upsampled bilinearly first."""
    depth_gt = _squeeze(depth_gt)
    valid = _squeeze(valid).bool()
    if not valid.any():
        if counters is not None:
            counters["depth_loss_empty"] += 1
        return sum(p.sum() for p in preds) * 0.0
    size = depth_gt.shape[-2:]
    total = 0.0
    for p in preds:
        if p.dim() == 3:
            p = p[:, None]
        if p.shape[-2:] != size:
            p = F.interpolate(p, size=size, mode="bilinear", align_corners=False)
        total = total + _masked_l1(p[:, 0], depth_gt, valid)
    return total / len(preds)


def consistency_source(gs_pred: torch.Tensor, depth_gt: torch.Tensor, valid: torch.Tensor,
                       counters: Optional[Counter] = None) -> torch.Tensor:
    """Mean |G_S - gt| over valid source pixels."""
    gs_pred, depth_gt, valid = _squeeze(gs_pred), _squeeze(depth_gt), _squeeze(valid).bool()
    if not valid.any():
        if counters is not None:
            counters["con_source_empty"] += 1
        return gs_pred.sum() * 0.0
    return _masked_l1(gs_pred, depth_gt, valid)


def consistency_target(gd_pred: torch.Tensor, gs_pred: torch.Tensor) -> torch.Tensor:
    """Mean |G_D - G_S| over all target pixels; gradients reach both networks."""
    if gd_pred.shape != gs_pred.shape:
        raise ValueError(f"shape mismatch {tuple(gd_pred.shape)} vs {tuple(gs_pred.shape)}")
    return (gd_pred - gs_pred).abs().mean()


def identity_loss(translated_target: torch.Tensor, target_image: torch.Tensor) -> torch.Tensor:
    return (translated_target - target_image).abs().mean()


def generator_gan_loss(score_translated: torch.Tensor) -> torch.Tensor:
    return ((score_translated - 1.0) ** 2).mean()


def discriminator_gan_loss(score_translated: torch.Tensor, score_target: torch.Tensor) -> torch.Tensor:
    return 0.5 * ((score_target - 1.0) ** 2).mean() + 0.5 * (score_translated ** 2).mean()


def gan_losses(score_translated: torch.Tensor, score_target: torch.Tensor):
    """Least-squares (generator, discriminator) losses."""
    return generator_gan_loss(score_translated), discriminator_gan_loss(score_translated, score_target)


def smoothness_loss(depth: torch.Tensor, image: torch.Tensor) -> torch.Tensor:
    """Edge-aware first-order smoothness of mean-normalized depth.

    ``depth`` is (B, 1, H, W) or (B, H, W); ``image`` is (B, C, H, W).
    """
    d = _squeeze(depth)
    d = d / d.mean(dim=(-2, -1), keepdim=True)
    if image.shape[-2:] != d.shape[-2:]:
        raise ValueError("depth and image must share spatial size")
    loss = d.sum() * 0.0
    if d.shape[-1] > 1:
        dx = (d[..., :, 1:] - d[..., :, :-1]).abs()
        wx = torch.exp(-(image[..., :, 1:] - image[..., :, :-1]).abs().mean(dim=1))
        loss = loss + (dx * wx).mean()
    if d.shape[-2] > 1:
        dy = (d[..., 1:, :] - d[..., :-1, :]).abs()
        wy = torch.exp(-(image[..., 1:, :] - image[..., :-1, :]).abs().mean(dim=1))
        loss = loss + (dy * wy).mean()
    return loss


def weighted_terms(parts: dict, weights: LossWeights) -> dict:
    """Each term's weighted contribution to the total objective."""
    w = {
        "depth": weights.source, "con_source": weights.source, "ins_source": weights.source,
        "con_target": weights.target, "ins_target": weights.target,
        "smooth": weights.smooth, "identity": weights.identity, "gan_gen": weights.gan,
    }
    return {k: w[k] * parts[k] for k in TERM_NAMES if k in parts}


def total_loss(parts, weights: LossWeights):
    """Weighted sum of the generator-side terms; the discriminator loss is never included.

    ``parts`` is a mapping of term name to value (tensors or floats) or a
    ``LossBreakdown``.
    """
    if isinstance(parts, LossBreakdown):
        parts = parts.to_dict()
    terms = weighted_terms(parts, weights)
    total = 0.0
    for k in TERM_NAMES:
        if k in terms:
            total = total + terms[k]
    return total
