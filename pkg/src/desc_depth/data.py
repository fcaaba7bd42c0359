"""Data model, on-disk dataset layout and photometric augmentation.

Dataset layout::

    root/{source,target}/images/<id>.png        8-bit RGB
    root/{source,target}/depth/<id>.png         16-bit, meters * 256, 0 = invalid
    root/{source,target}/semantic/<id>.png      8-bit class ids, 255 = void
    root/{source,target}/instances/<id>.json    list of instance records
    root/{source,target}/masks/<id>_<k>.png     8-bit binary instance masks
    root/{source,target}/intrinsics.json        {fx, fy, cx, cy}
    root/target/_eval_depth/<id>.png            sealed target GT (evaluator only)
    root/splits/{train,val,test}.txt            ids, one per line
"""
from __future__ import annotations

import json
import logging
import os
import tempfile
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

DEPTH_SCALE = 256.0
VOID = 255
EVAL_DEPTH_DIR = "_eval_depth"
SPLITS = ("train", "val", "test")


class DataError(Exception):
    """Raised for malformed or inconsistent dataset content."""


class Domain(str, Enum):
    SOURCE = "source"
    TARGET = "target"


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self) -> None:
        if not (self.fx > 0 and self.fy > 0):
            raise DataError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    def check_bounds(self, height: int, width: int) -> None:
        if not (0 <= self.cx <= width and 0 <= self.cy <= height):
            raise DataError(f"principal point ({self.cx}, {self.cy}) outside a {width}x{height} image")

    def scaled(self, factor: float) -> "CameraIntrinsics":
        """Same principal point, focal lengths multiplied by ``factor``."""
        return CameraIntrinsics(self.fx * factor, self.fy * factor, self.cx, self.cy)

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy}


@dataclass
class DepthMap:
    """Metric depth grid. Invalid pixels hold 0 and are False in ``valid_mask``."""

    values: np.ndarray
    valid_mask: np.ndarray

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float32)
        self.valid_mask = np.asarray(self.valid_mask, dtype=bool)
        if self.values.shape != self.valid_mask.shape or self.values.ndim != 2:
            raise DataError("depth values and valid mask must be 2-D grids of equal shape")
        if np.any(self.values[self.valid_mask] <= 0):
            raise DataError("valid depth values must be positive")
        self.values = np.where(self.valid_mask, self.values, 0).astype(np.float32)

    @classmethod
    def from_values(cls, values: np.ndarray) -> "DepthMap":
        values = np.asarray(values, dtype=np.float32)
        return cls(values, values > 0)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass
class InstanceAnnotation:
    """One detected object. ``bbox`` is (x, y, w, h) in pixels."""

    instance_id: int
    class_id: int
    bbox: tuple[int, int, int, int]
    mask: np.ndarray
    score: float = 1.0
    class_name: str = ""

    def __post_init__(self) -> None:
        self.mask = np.asarray(self.mask, dtype=bool)
        self.bbox = tuple(int(v) for v in self.bbox)

    @property
    def pixel_height(self) -> int:
        return self.bbox[3]

    @classmethod
    def from_mask(cls, instance_id: int, class_id: int, mask: np.ndarray, score: float = 1.0,
                  class_name: str = "") -> "InstanceAnnotation":
        """Build an annotation whose bbox is the tight box around ``mask``."""
        mask = np.asarray(mask, dtype=bool)
        rows = np.flatnonzero(mask.any(axis=1))
        cols = np.flatnonzero(mask.any(axis=0))
        if rows.size == 0:
            raise DataError(f"instance {instance_id} has an empty mask")
        bbox = (int(cols[0]), int(rows[0]), int(cols[-1] - cols[0] + 1), int(rows[-1] - rows[0] + 1))
        return cls(instance_id, class_id, bbox, mask, score, class_name)

    def validate(self, num_classes: Optional[int] = None) -> None:
        x, y, w, h = self.bbox
        if w < 1 or h < 1:
            raise DataError(f"instance {self.instance_id}: degenerate bbox {self.bbox}")
        if not self.mask.any():
            raise DataError(f"instance {self.instance_id}: empty mask")
        rows = np.flatnonzero(self.mask.any(axis=1))
        cols = np.flatnonzero(self.mask.any(axis=0))
        if rows[0] < y or rows[-1] >= y + h or cols[0] < x or cols[-1] >= x + w:
            raise DataError(f"instance {self.instance_id}: mask pixels outside bbox {self.bbox}")
        if rows[-1] - rows[0] + 1 != h:
            raise DataError(f"instance {self.instance_id}: bbox height {h} != mask extent "
                            f"{rows[-1] - rows[0] + 1}")
        if num_classes is not None and not 0 <= self.class_id < num_classes:
            raise DataError(f"instance {self.instance_id}: class id {self.class_id} out of range")
        if not 0.0 <= self.score <= 1.0:
            raise DataError(f"instance {self.instance_id}: score {self.score} outside [0, 1]")


@dataclass
class SemanticMap:
    class_ids: np.ndarray  # int grid, VOID for uncovered pixels

    def __post_init__(self) -> None:
        self.class_ids = np.asarray(self.class_ids, dtype=np.int64)

    @classmethod
    def void(cls, height: int, width: int) -> "SemanticMap":
        return cls(np.full((height, width), VOID, dtype=np.int64))

    @property
    def shape(self) -> tuple[int, int]:
        return self.class_ids.shape


@dataclass
class DomainSample:
    image: np.ndarray  # H x W x 3 float32 in [0, 1]
    semantic: SemanticMap
    intrinsics: CameraIntrinsics
    domain: Domain
    id: str
    depth: Optional[DepthMap] = None
    instances: list[InstanceAnnotation] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.domain = Domain(self.domain)

    @property
    def shape(self) -> tuple[int, int]:
        return self.image.shape[:2]

    def validate(self, num_classes: Optional[int] = None) -> None:
        try:
            hw = self.shape
            if self.image.ndim != 3 or self.image.shape[2] != 3:
                raise DataError("image must be H x W x 3")
            if self.image.min() < 0 or self.image.max() > 1:
                raise DataError("image values must lie in [0, 1]")
            if self.domain is Domain.SOURCE and self.depth is None:
                raise DataError("source sample without depth")
            if self.depth is not None and self.depth.shape != hw:
                raise DataError(f"depth shape {self.depth.shape} != image shape {hw}")
            if self.semantic.shape != hw:
                raise DataError(f"semantic shape {self.semantic.shape} != image shape {hw}")
            self.intrinsics.check_bounds(*hw)
            for inst in self.instances:
                if inst.mask.shape != hw:
                    raise DataError(f"instance {inst.instance_id}: mask shape != image shape")
                inst.validate(num_classes)
        except DataError as exc:
            raise DataError(f"sample {self.id!r}: {exc}") from None


@dataclass
class DomainDataset(Sequence[DomainSample]):
    """Ordered samples of one domain plus loader warning counters."""

    samples: list[DomainSample]
    domain: Domain
    intrinsics: CameraIntrinsics
    class_names: list[str] = field(default_factory=list)
    warnings: Counter = field(default_factory=Counter)

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, idx):
        return self.samples[idx]

    def __iter__(self) -> Iterator[DomainSample]:
        return iter(self.samples)

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.samples]


# -- PNG encodings -----------------------------------------------------------

def encode_depth(depth: np.ndarray) -> np.ndarray:
    """Meters to the uint16 on-disk convention (meters * 256, 0 = invalid)."""
    depth = np.asarray(depth, dtype=np.float64)
    encoded = np.round(depth * DEPTH_SCALE)
    if encoded.max(initial=0) > np.iinfo(np.uint16).max:
        raise DataError("depth exceeds the 16-bit encoding range (255.99 m)")
    return np.where(depth > 0, encoded, 0).astype(np.uint16)


def decode_depth(encoded: np.ndarray) -> DepthMap:
    encoded = np.asarray(encoded)
    return DepthMap(encoded.astype(np.float32) / DEPTH_SCALE, encoded > 0)


def _atomic_save(img: Image.Image, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".png.tmp")
    os.close(fd)
    try:
        img.save(tmp, format="PNG")
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def write_json_atomic(obj, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".json.tmp")
    with os.fdopen(fd, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def write_text_atomic(text: str, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def save_depth_png(depth: np.ndarray, path: Path) -> None:
    _atomic_save(Image.fromarray(encode_depth(depth)), Path(path))


def load_depth_png(path: Path) -> DepthMap:
    with Image.open(path) as img:
        arr = np.array(img)
    if arr.dtype != np.uint16 and arr.dtype != np.int32:
        raise DataError(f"{path}: depth PNG must be 16-bit")
    return decode_depth(arr)


def save_image_png(image: np.ndarray, path: Path) -> None:
    arr = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)
    _atomic_save(Image.fromarray(arr, mode="RGB"), Path(path))


def load_image_png(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0


def save_label_png(labels: np.ndarray, path: Path) -> None:
    _atomic_save(Image.fromarray(np.asarray(labels, dtype=np.uint8), mode="L"), Path(path))


def load_label_png(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        return np.array(img.convert("L"))


# -- dataset IO --------------------------------------------------------------

def write_sample(root: Path, sample: DomainSample, sealed_depth: Optional[np.ndarray] = None) -> None:
    """Write one sample into ``root/<domain>/``.

    Target samples never get a ``depth/`` file; pass ``sealed_depth`` to write
    the evaluator-only sidecar instead.
    """
    ddir = Path(root) / sample.domain.value
    save_image_png(sample.image, ddir / "images" / f"{sample.id}.png")
    save_label_png(sample.semantic.class_ids, ddir / "semantic" / f"{sample.id}.png")
    if sample.domain is Domain.SOURCE:
        if sample.depth is None:
            raise DataError(f"sample {sample.id!r}: source sample without depth")
        save_depth_png(sample.depth.values, ddir / "depth" / f"{sample.id}.png")
    if sealed_depth is not None:
        save_depth_png(sealed_depth, ddir / EVAL_DEPTH_DIR / f"{sample.id}.png")
    records = []
    for inst in sample.instances:
        mask_file = f"masks/{sample.id}_{inst.instance_id}.png"
        save_label_png(inst.mask.astype(np.uint8) * 255, ddir / mask_file)
        records.append({
            "instance_id": inst.instance_id,
            "class_id": inst.class_id,
            "class_name": inst.class_name,
            "bbox": list(inst.bbox),
            "mask_file": mask_file,
            "score": float(inst.score),
        })
    write_json_atomic(records, ddir / "instances" / f"{sample.id}.json")


def write_intrinsics(root: Path, domain: Domain, intrinsics: CameraIntrinsics) -> None:
    write_json_atomic(intrinsics.to_dict(), Path(root) / Domain(domain).value / "intrinsics.json")


def write_splits(root: Path, splits: dict[str, Sequence[str]]) -> None:
    for name, ids in splits.items():
        write_text_atomic("".join(f"{i}\n" for i in ids), Path(root) / "splits" / f"{name}.txt")


def read_split(root: Path, split: str) -> list[str]:
    path = Path(root) / "splits" / f"{split}.txt"
    if not path.exists():
        raise DataError(f"split file {path} not found")
    return [line.strip() for line in path.read_text().splitlines() if line.strip()]


def _load_instances(ddir: Path, sample_id: str, shape: tuple[int, int],
                    score_threshold: float) -> Optional[list[InstanceAnnotation]]:
    path = ddir / "instances" / f"{sample_id}.json"
    if not path.exists():
        return None
    records = json.loads(path.read_text())
    instances = []
    for rec in records:
        if float(rec.get("score", 1.0)) < score_threshold:
            continue
        mask_path = ddir / rec["mask_file"]
        if not mask_path.exists():
            raise DataError(f"sample {sample_id!r}: mask file {rec['mask_file']} missing")
        mask = load_label_png(mask_path) > 0
        if mask.shape != shape:
            raise DataError(f"sample {sample_id!r}: mask {rec['mask_file']} has shape {mask.shape}")
        instances.append(InstanceAnnotation(
            instance_id=int(rec["instance_id"]), class_id=int(rec["class_id"]),
            bbox=tuple(rec["bbox"]), mask=mask, score=float(rec.get("score", 1.0)),
            class_name=rec.get("class_name", "")))
    return instances


def load_intrinsics(root: Path, domain: Domain) -> CameraIntrinsics:
    path = Path(root) / Domain(domain).value / "intrinsics.json"
    if not path.exists():
        raise DataError(f"{path} not found")
    d = json.loads(path.read_text())
    return CameraIntrinsics(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]))


def load_dataset(root, domain, split: Optional[str] = None, *, score_threshold: float = 0.5,
                 num_classes: Optional[int] = None) -> DomainDataset:
    """Load every sample of ``domain`` under ``root`` (or only ``split`` ids).

    Samples come back in lexicographic id order. A missing semantic or
    instance file yields empty annotations and bumps ``warnings``; a source
    sample without depth or an inconsistent mask/bbox raises ``DataError``.
    """
    root = Path(root)
    domain = Domain(domain)
    ddir = root / domain.value
    if not (ddir / "images").is_dir():
        raise DataError(f"{ddir / 'images'} is not a directory")
    intrinsics = load_intrinsics(root, domain)
    meta_path = root / "meta.json"
    class_names = json.loads(meta_path.read_text()).get("class_names", []) if meta_path.exists() else []
    if num_classes is None and class_names:
        num_classes = len(class_names)

    ids = sorted(p.stem for p in (ddir / "images").glob("*.png"))
    if split is not None:
        wanted = set(read_split(root, split))
        ids = [i for i in ids if i in wanted]

    warnings: Counter = Counter()
    samples = []
    for sid in ids:
        image = load_image_png(ddir / "images" / f"{sid}.png")
        shape = image.shape[:2]
        depth = None
        depth_path = ddir / "depth" / f"{sid}.png"
        if depth_path.exists():
            depth = load_depth_png(depth_path)
        elif domain is Domain.SOURCE:
            raise DataError(f"sample {sid!r}: source sample has no depth file")
        sem_path = ddir / "semantic" / f"{sid}.png"
        if sem_path.exists():
            semantic = SemanticMap(load_label_png(sem_path))
        else:
            warnings["missing_semantic"] += 1
            semantic = SemanticMap.void(*shape)
        instances = _load_instances(ddir, sid, shape, score_threshold)
        if instances is None:
            warnings["missing_instances"] += 1
            instances = []
        sample = DomainSample(image=image, semantic=semantic, intrinsics=intrinsics, domain=domain,
                              id=sid, depth=depth, instances=instances)
        sample.validate(num_classes)
        samples.append(sample)
    for key, count in warnings.items():
        logger.warning("%s: %d samples with %s", ddir, count, key.replace("_", " "))
    return DomainDataset(samples, domain, intrinsics, class_names, warnings)


def load_eval_depth(root, sample_id: str) -> DepthMap:
    """Sealed target ground truth. Only the evaluator calls this."""
    path = Path(root) / Domain.TARGET.value / EVAL_DEPTH_DIR / f"{sample_id}.png"
    if not path.exists():
        raise DataError(f"sample {sample_id!r}: no sealed evaluation depth at {path}")
    return load_depth_png(path)


# -- augmentation ------------------------------------------------------------

_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32)


def augment_photometric(image: np.ndarray, rng: np.random.Generator, delta: float = 0.2) -> np.ndarray:
    """Random brightness, contrast and saturation jitter, clamped to [0, 1].

    Each factor is drawn from U[1 - delta, 1 + delta]; the three draws always
    happen so the RNG stream does not depend on ``delta``.
    """
    b, c, s = rng.uniform(1.0 - delta, 1.0 + delta, size=3)
    if delta == 0:
        return image.copy()
    return apply_photometric(image, b, c, s)


def apply_photometric(image: np.ndarray, brightness: float, contrast: float, saturation: float) -> np.ndarray:
    """Scale brightness, then contrast about the mean gray, then saturation about per-pixel gray."""
    out = np.clip(np.asarray(image, dtype=np.float32) * np.float32(brightness), 0, 1)
    gray_mean = np.float32((out @ _LUMA).mean())
    out = np.clip(gray_mean + np.float32(contrast) * (out - gray_mean), 0, 1)
    gray = (out @ _LUMA)[..., None]
    out = np.clip(gray + np.float32(saturation) * (out - gray), 0, 1)
    return out.astype(np.float32)
