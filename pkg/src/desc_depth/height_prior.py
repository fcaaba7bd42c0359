"""Instance-height pseudo-labels.

Source instances get a ground-truth physical height from the median GT depth
under their mask; a small network learns to predict that height from the
box, the mask shape and the class. On target images the predicted height is
turned back into a depth with the pinhole relation and used as a per-instance
L1 target, up to a learnable global scale.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import CameraIntrinsics, DepthMap, InstanceAnnotation

MASK_PATCH = 16
MIN_INSTANCE_HEIGHT = 4
MIN_INSTANCE_AREA = 8
PSEUDO_DEPTH_RANGE = (0.1, 80.0)


class NoDepthEvidence(ValueError):
    """No valid GT depth under an instance mask."""


def instance_depth_from_gt(mask: np.ndarray, depth_gt: DepthMap) -> float:
    """Median GT depth over the valid pixels of ``mask``.

    Even counts average the two middle values.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise NoDepthEvidence("empty instance mask")
    values = depth_gt.values[mask & depth_gt.valid_mask]
    if values.size == 0:
        raise NoDepthEvidence("no valid depth under the instance mask")
    return float(np.median(values.astype(np.float64)))


def gt_height(instance: InstanceAnnotation, depth_gt: DepthMap, intrinsics: CameraIntrinsics) -> float:
    """Physical height ``H * D / fy`` of a source instance."""
    d = instance_depth_from_gt(instance.mask, depth_gt)
    return instance.pixel_height * d / intrinsics.fy


def is_usable(instance: InstanceAnnotation) -> bool:
    """Tiny instances are dominated by pixel quantization and are skipped."""
    return instance.pixel_height >= MIN_INSTANCE_HEIGHT and int(instance.mask.sum()) >= MIN_INSTANCE_AREA


@dataclass
class InstanceFeatures:
    bbox_w_norm: float
    bbox_h_norm: float
    mask_patch: np.ndarray  # MASK_PATCH**2 binary values
    class_onehot: np.ndarray

    def vector(self) -> np.ndarray:
        return np.concatenate([[self.bbox_w_norm, self.bbox_h_norm], self.mask_patch,
                               self.class_onehot]).astype(np.float32)


def feature_size(num_classes: int) -> int:
    return 2 + MASK_PATCH * MASK_PATCH + num_classes


def instance_features(instance: InstanceAnnotation, num_classes: int) -> InstanceFeatures:
    img_h, img_w = instance.mask.shape
    x, y, w, h = instance.bbox
    crop = instance.mask[y:y + h, x:x + w]
    # nearest sampling at the centers of a 16x16 grid laid over the bbox
    rows = np.minimum(((np.arange(MASK_PATCH) + 0.5) * h / MASK_PATCH).astype(int), h - 1)
    cols = np.minimum(((np.arange(MASK_PATCH) + 0.5) * w / MASK_PATCH).astype(int), w - 1)
    patch = crop[np.ix_(rows, cols)].astype(np.float32).ravel()
    onehot = np.zeros(num_classes, dtype=np.float32)
    onehot[instance.class_id] = 1.0
    return InstanceFeatures(w / img_w, h / img_h, patch, onehot)


class HeightPredictor(nn.Module):
    """MLP from instance features to a positive physical height (meters)."""

    def __init__(self, num_classes: int, hidden: tuple[int, int] = (128, 64)):
        super().__init__()
        self.num_classes = num_classes
        self.net = nn.Sequential(
            nn.Linear(feature_size(num_classes), hidden[0]), nn.ReLU(),
            nn.Linear(hidden[0], hidden[1]), nn.ReLU(),
            nn.Linear(hidden[1], 1),
        )

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return F.softplus(self.net(features)).squeeze(-1)


class PerClassHeight(nn.Module):
    """Ablation: one learnable height per class, shared by all its instances."""

    def __init__(self, num_classes: int, init_height: float = 1.5):
        super().__init__()
        self.num_classes = num_classes
        raw = float(np.log(np.expm1(init_height)))
        self.raw = nn.Parameter(torch.full((num_classes,), raw))

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        onehot = features[..., -self.num_classes:]
        return onehot @ F.softplus(self.raw).to(features.dtype)


class ScaleParameter(nn.Module):
    """Learnable positive scale ``phi = exp(rho)``, ``rho`` starting at 0."""

    def __init__(self, init: float = 1.0):
        super().__init__()
        self.rho = nn.Parameter(torch.tensor(float(np.log(init))))

    @property
    def phi(self) -> torch.Tensor:
        return torch.exp(self.rho)

    def forward(self) -> torch.Tensor:
        return self.phi


def predict_height(model: nn.Module, features) -> torch.Tensor:
    if isinstance(features, InstanceFeatures):
        features = features.vector()[None]
    features = torch.as_tensor(np.asarray(features) if not torch.is_tensor(features) else features)
    param = next(model.parameters())
    return model(features.to(param.dtype))


def height_loss_source(h_pred: torch.Tensor, h_gt: torch.Tensor,
                       counters: Optional[Counter] = None) -> torch.Tensor:
    """Mean absolute height error over the detected instances."""
    if h_pred.shape != h_gt.shape:
        raise ValueError(f"shape mismatch {tuple(h_pred.shape)} vs {tuple(h_gt.shape)}")
    if h_pred.numel() == 0:
        if counters is not None:
            counters["height_loss_source_empty"] += 1
        return h_pred.sum() * 0.0
    return (h_pred - h_gt).abs().mean()


def pseudo_depth(fy: float, h_hat, pixel_height, depth_range=PSEUDO_DEPTH_RANGE):
    """Distance ``fy * h / H`` of an object of predicted height ``h_hat``, clamped."""
    if torch.is_tensor(h_hat):
        d = fy * h_hat / torch.as_tensor(pixel_height, dtype=h_hat.dtype)
        return d.clamp(*depth_range)
    return float(np.clip(fy * h_hat / pixel_height, *depth_range))


def instance_loss_target(pseudo_depths: torch.Tensor, masks: torch.Tensor, pred: torch.Tensor,
                         phi: torch.Tensor, image_index: Optional[torch.Tensor] = None,
                         counters: Optional[Counter] = None) -> torch.Tensor:
    """``(phi / p) * sum_i sum_{M_i} |D_i / phi - pred|`` with ``p`` the total mask area.

    ``masks`` is (n, H, W); ``pred`` is (H, W) or (B, H, W) with
    ``image_index`` giving the batch row of every instance.
    """
    if pred.dim() == 4:
        pred = pred[:, 0]
    if pred.dim() == 2:
        pred = pred[None]
        image_index = torch.zeros(len(masks), dtype=torch.long)
    elif image_index is None:
        raise ValueError("image_index is required for batched predictions")
    m = masks.to(pred.dtype)
    p = m.sum()
    if len(masks) == 0 or p.item() == 0:
        if counters is not None:
            counters["instance_loss_target_empty"] += 1
        return pred.sum() * 0.0
    target = (pseudo_depths / phi)[:, None, None]
    residual = (target - pred[image_index]).abs() * m
    return phi * residual.sum() / p
