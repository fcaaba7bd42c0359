"""Two-channel input for the semantic depth network: class ids and Canny edges."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .data import VOID, SemanticMap

_LUMA = np.array([0.299, 0.587, 0.114])
_NEIGHBORS = {  # (dr, dc) of the neighbor along the gradient direction
    0: (0, 1),
    1: (1, 1),
    2: (1, 0),
    3: (1, -1),
}


def to_gray(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3:
        return image @ _LUMA
    return image


def gradient_direction_bin(gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """Quantize gradient orientation to 0: horizontal, 1: diagonal, 2: vertical, 3: anti-diagonal."""
    angle = np.rad2deg(np.arctan2(gy, gx)) % 180.0
    return (np.floor((angle + 22.5) / 45.0).astype(int)) % 4


def unit_step_response(sigma: float) -> float:
    """Peak Sobel magnitude of a blurred unit step (the normalizer)."""
    step = np.zeros(64)
    step[32:] = 1.0
    if sigma > 0:
        step = ndimage.gaussian_filter1d(step, sigma, mode="nearest")
    return float(np.abs(np.convolve(step, [1, 0, -1], mode="valid")).max() * 4.0)


def canny_edges(image: np.ndarray, low_threshold: float = 0.1, high_threshold: float = 0.2,
                sigma: float = 1.4) -> np.ndarray:
    """Binary Canny edge map of an RGB or gray image in [0, 1].

    The gradient magnitude is normalized so that an ideal 0 -> 1 step has
    peak magnitude 1; thresholds are therefore step contrasts in [0, 1].
    """
    if not low_threshold < high_threshold:
        raise ValueError(f"low threshold {low_threshold} must be below high threshold {high_threshold}")
    gray = to_gray(image)
    blurred = ndimage.gaussian_filter(gray, sigma, mode="nearest") if sigma > 0 else gray
    gx = ndimage.sobel(blurred, axis=1, mode="nearest")
    gy = ndimage.sobel(blurred, axis=0, mode="nearest")
    # rounding makes mirror-symmetric ridges tie exactly, so the tie rule below decides them
    mag = np.round(np.hypot(gx, gy) / unit_step_response(sigma), 9)

    bins = gradient_direction_bin(gx, gy)
    h, w = mag.shape
    padded = np.pad(mag, 1, mode="constant")
    keep = np.zeros_like(mag, dtype=bool)
    center = padded[1:-1, 1:-1]
    for b, (dr, dc) in _NEIGHBORS.items():
        ahead = padded[1 + dr:1 + dr + h, 1 + dc:1 + dc + w]
        behind = padded[1 - dr:1 - dr + h, 1 - dc:1 - dc + w]
        # ">=" behind and ">" ahead keeps exactly one pixel of a symmetric ridge
        keep |= (bins == b) & (center >= behind) & (center > ahead)
    keep &= mag > 0
    keep[0, :] = keep[-1, :] = False
    keep[:, 0] = keep[:, -1] = False
    nms = np.where(keep, mag, 0.0)

    weak = nms >= low_threshold
    strong = nms >= high_threshold
    labels, n = ndimage.label(weak, structure=np.ones((3, 3), dtype=bool))
    if n == 0:
        return np.zeros_like(weak)
    has_strong = np.zeros(n + 1, dtype=bool)
    has_strong[np.unique(labels[strong])] = True
    has_strong[0] = False
    return has_strong[labels]


@dataclass
class SemanticEdgeInput:
    channels: np.ndarray  # H x W x 2: normalized class ids, binary edges

    @property
    def semantic(self) -> np.ndarray:
        return self.channels[..., 0]

    @property
    def edges(self) -> np.ndarray:
        return self.channels[..., 1]


def encode_semantic_channels(semantic: SemanticMap, edges: np.ndarray, num_classes: int) -> SemanticEdgeInput:
    """Stack ``class_id / C`` (void as 1.0) with the binary edge map.

    Class ids stay a single integer-valued channel rather than a one-hot stack.
    """
    ids = np.asarray(semantic.class_ids if isinstance(semantic, SemanticMap) else semantic)
    edges = np.asarray(edges)
    if ids.shape != edges.shape:
        raise ValueError(f"semantic shape {ids.shape} != edge shape {edges.shape}")
    void = ids == VOID
    bad = ~void & ((ids < 0) | (ids >= num_classes))
    if bad.any():
        raise ValueError(f"class ids {sorted(set(ids[bad].tolist()))} outside [0, {num_classes})")
    sem = np.where(void, 1.0, ids / float(num_classes))
    return SemanticEdgeInput(np.stack([sem, (edges > 0).astype(np.float64)], axis=-1).astype(np.float32))
