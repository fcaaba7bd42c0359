"""Eigen-protocol depth metrics, median scaling, reports and depth colorization."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Optional

import numpy as np
import torch
import torch.nn.functional as F

from .data import write_json_atomic, write_text_atomic

METRIC_NAMES = ("abs_rel", "sq_rel", "rmse", "rmse_log", "delta1", "delta2", "delta3")
COLUMN_TITLES = ("Abs Rel", "Sq Rel", "RMSE", "RMSE log", "d<1.25", "d<1.25^2", "d<1.25^3")

# fractional (top, bottom, left, right) crops used for KITTI ground truth
CROPS = {
    "garg": (0.40810811, 0.99189189, 0.03594771, 0.96405229),
    "eigen": (0.3324324, 0.91351351, 0.0359477, 0.96405229),
}


class EvaluationError(Exception):
    pass


@dataclass
class EvalSettings:
    cap: str = "80"  # "80": min_depth < gt <= 80, "1-50": 1 <= gt <= 50
    median_scaling: bool = True
    min_depth: float = 1e-3
    crop: Optional[str] = None

    def depth_range(self) -> tuple[float, float]:
        if self.cap == "80":
            return self.min_depth, 80.0
        if self.cap == "1-50":
            return 1.0, 50.0
        raise EvaluationError(f"unknown cap {self.cap!r}")

    def validate(self) -> list[str]:
        errors = []
        if self.cap not in ("80", "1-50"):
            errors.append(f"eval.cap must be '80' or '1-50', got {self.cap!r}")
        if self.crop is not None and self.crop not in CROPS:
            errors.append(f"eval.crop must be one of {sorted(CROPS)} or null")
        if self.min_depth <= 0:
            errors.append("eval.min_depth must be positive")
        return errors


class Metrics(NamedTuple):
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    delta1: float
    delta2: float
    delta3: float


def median_scale(pred: np.ndarray, gt: np.ndarray, valid: Optional[np.ndarray] = None):
    """Scale ``pred`` by ``median(gt) / median(pred)`` over valid pixels."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    valid = gt > 0 if valid is None else np.asarray(valid, dtype=bool)
    if not valid.any():
        raise EvaluationError("no valid ground-truth pixels")
    ratio = float(np.median(gt[valid]) / np.median(pred[valid]))
    return pred * ratio, ratio


def upsample_to(pred: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of a prediction to the ground-truth size."""
    pred = np.asarray(pred, dtype=np.float64)
    if pred.shape == tuple(shape):
        return pred
    t = torch.from_numpy(pred)[None, None]
    return F.interpolate(t, size=tuple(shape), mode="bilinear", align_corners=False)[0, 0].numpy()


def evaluation_mask(gt: np.ndarray, settings: EvalSettings, valid: Optional[np.ndarray] = None) -> np.ndarray:
    gt = np.asarray(gt, dtype=np.float64)
    valid = gt > 0 if valid is None else np.asarray(valid, dtype=bool)
    if settings.cap == "80":
        mask = valid & (gt > settings.min_depth) & (gt <= 80.0)
    else:
        mask = valid & (gt >= 1.0) & (gt <= 50.0)
    if settings.crop is not None:
        h, w = gt.shape
        t, b, l, r = CROPS[settings.crop]
        crop = np.zeros_like(mask)
        crop[int(t * h):int(b * h), int(l * w):int(r * w)] = True
        mask &= crop
    return mask


def error_metrics(pred: np.ndarray, gt: np.ndarray) -> Metrics:
    """The seven standard metrics over already-masked 1-D arrays."""
    thresh = np.maximum(gt / pred, pred / gt)
    diff = pred - gt
    return Metrics(
        abs_rel=float(np.mean(np.abs(diff) / gt)),
        sq_rel=float(np.mean(diff ** 2 / gt)),
        rmse=float(np.sqrt(np.mean(diff ** 2))),
        rmse_log=float(np.sqrt(np.mean((np.log(pred) - np.log(gt)) ** 2))),
        delta1=float(np.mean(thresh < 1.25)),
        delta2=float(np.mean(thresh < 1.25 ** 2)),
        delta3=float(np.mean(thresh < 1.25 ** 3)),
    )


def compute_metrics(pred: np.ndarray, gt: np.ndarray, settings: EvalSettings = EvalSettings(),
                    valid: Optional[np.ndarray] = None) -> Optional[tuple[Metrics, int]]:
    """Metrics for one image, or ``None`` if no pixel survives the mask.

    Returns ``(metrics, n_pixels)``. The prediction is resized to the GT
    grid, median-scaled over the evaluated pixels (if enabled) and clamped
    to the cap range.
    """
    gt = np.asarray(gt, dtype=np.float64)
    pred = upsample_to(pred, gt.shape)
    mask = evaluation_mask(gt, settings, valid)
    if not mask.any():
        return None
    p, g = pred[mask], gt[mask]
    if settings.median_scaling:
        p = p * (np.median(g) / np.median(p))
    lo, hi = settings.depth_range()
    p = np.clip(p, lo, hi)
    return error_metrics(p, g), int(mask.sum())


@dataclass
class MetricsReport:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    delta1: float
    delta2: float
    delta3: float
    settings: dict = field(default_factory=dict)
    n_images: int = 0
    n_pixels: int = 0
    n_skipped: int = 0
    per_image: list = field(default_factory=list)

    @property
    def metrics(self) -> Metrics:
        return Metrics(*(getattr(self, k) for k in METRIC_NAMES))

    def to_dict(self, per_image: bool = False) -> dict:
        d = asdict(self)
        if not per_image:
            d.pop("per_image")
        return d

    def table(self) -> str:
        widths = [max(len(t), 8) for t in COLUMN_TITLES]
        head = " | ".join(t.rjust(w) for t, w in zip(COLUMN_TITLES, widths))
        row = " | ".join(f"{getattr(self, k):.4f}".rjust(w) for k, w in zip(METRIC_NAMES, widths))
        return f"{head}\n{row}\n"

    def per_image_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["id", *METRIC_NAMES, "n_pixels"])
        for rec in self.per_image:
            writer.writerow([rec["id"], *(f"{rec[k]:.10g}" for k in METRIC_NAMES), rec["n_pixels"]])
        return buf.getvalue()

    def write(self, out_dir) -> Path:
        out_dir = Path(out_dir)
        write_json_atomic(self.to_dict(), out_dir / "report.json")
        write_text_atomic(self.table(), out_dir / "report.txt")
        write_text_atomic(self.per_image_csv(), out_dir / "per_image.csv")
        return out_dir


def aggregate(results: Iterable[tuple[str, Optional[tuple[Metrics, int]]]],
              settings: EvalSettings) -> MetricsReport:
    """Unweighted mean of per-image metrics; images with empty masks are counted and skipped."""
    rows, skipped = [], 0
    for image_id, res in results:
        if res is None:
            skipped += 1
            continue
        m, n = res
        rows.append({"id": image_id, **m._asdict(), "n_pixels": n})
    if not rows:
        raise EvaluationError(f"no evaluable images ({skipped} skipped)")
    means = {k: float(np.mean([r[k] for r in rows])) for k in METRIC_NAMES}
    return MetricsReport(**means, settings=asdict(settings), n_images=len(rows),
                         n_pixels=int(sum(r["n_pixels"] for r in rows)), n_skipped=skipped, per_image=rows)


def evaluate_predictions(preds: dict, gts: dict, settings: EvalSettings = EvalSettings()) -> MetricsReport:
    """``preds`` and ``gts`` map image id to depth arrays (or ``DepthMap`` for GT)."""
    results = []
    for image_id in sorted(gts):
        gt = gts[image_id]
        valid = getattr(gt, "valid_mask", None)
        gt = getattr(gt, "values", gt)
        results.append((image_id, compute_metrics(preds[image_id], gt, settings, valid)))
    return aggregate(results, settings)


@torch.no_grad()
def predict_depth(net, images: np.ndarray, batch_size: int = 8) -> np.ndarray:
    """Full-resolution metric depth for an (N, H, W, 3) image stack."""
    from .networks import forward_depth

    was_training = net.training
    net.eval()
    out = []
    param = next(net.parameters())
    for i in range(0, len(images), batch_size):
        x = torch.from_numpy(np.ascontiguousarray(images[i:i + batch_size].transpose(0, 3, 1, 2)))
        out.append(forward_depth(net, x.to(param.dtype))[0][:, 0].double().numpy())
    net.train(was_training)
    return np.concatenate(out, axis=0)


def evaluate_model(net, samples, gts: dict, settings: EvalSettings = EvalSettings()) -> MetricsReport:
    images = np.stack([s.image for s in samples])
    preds = predict_depth(net, images)
    return evaluate_predictions({s.id: p for s, p in zip(samples, preds)}, gts, settings)


def evaluate_dataset(checkpoint, root, split: str = "test", domain: str = "target",
                     settings: EvalSettings = EvalSettings(), out_dir=None) -> MetricsReport:
    """Evaluate the depth network of ``checkpoint`` on ``split`` of ``domain`` under ``root``.

    Target ground truth comes from the sealed evaluation sidecar.
    """
    from .data import Domain, load_dataset, load_eval_depth
    from .trainer import depth_net_from_checkpoint

    net = depth_net_from_checkpoint(checkpoint)
    ds = load_dataset(root, domain, split)
    if Domain(domain) is Domain.TARGET:
        gts = {s.id: load_eval_depth(root, s.id) for s in ds}
    else:
        gts = {s.id: s.depth for s in ds}
    report = evaluate_model(net, ds.samples, gts, settings)
    if out_dir is not None:
        report.write(out_dir)
    return report


def colorize_depth(depth: np.ndarray, depth_range: Optional[tuple[float, float]] = None,
                   cmap: str = "viridis") -> np.ndarray:
    """8-bit RGB rendering of clamped inverse depth; invalid (<= 0) pixels are black.

    Near depths map to the top of the colormap, far depths to the bottom.
    """
    from matplotlib import colormaps

    depth = np.asarray(depth, dtype=np.float64)
    valid = depth > 0
    if depth_range is None:
        if valid.any():
            depth_range = (float(depth[valid].min()), float(depth[valid].max()))
        else:
            depth_range = (1.0, 1.0)
    lo, hi = depth_range
    inv = np.zeros_like(depth)
    inv[valid] = 1.0 / np.clip(depth[valid], lo, hi)
    inv_lo, inv_hi = 1.0 / hi, 1.0 / lo
    t = np.zeros_like(depth) if inv_hi == inv_lo else (inv - inv_lo) / (inv_hi - inv_lo)
    rgb = colormaps[cmap](np.clip(t, 0, 1))[..., :3]
    out = np.round(rgb * 255).astype(np.uint8)
    out[~valid] = 0
    return out
