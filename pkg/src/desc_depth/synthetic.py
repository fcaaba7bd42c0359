"""Deterministic paired-domain scene generator.

Scenes are a ground plane, a far wall, optional background panels and a few
fronto-parallel objects standing on the ground. Because every object sits at
a single depth, the pinhole relation ``H = fy * h / D`` holds up to pixel
rounding, which makes the instance-height chain exactly checkable.
"""
from __future__ import annotations

import json
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

from .data import (DEPTH_SCALE, VOID, CameraIntrinsics, DepthMap, Domain, DomainSample,
                   InstanceAnnotation, SemanticMap, write_intrinsics, write_json_atomic,
                   write_sample, write_splits)

CLASS_NAMES = ["road", "building", "vegetation", "car", "person", "pole"]
ROAD, BUILDING, VEGETATION, CAR, PERSON, POLE = range(6)


class GenerationError(Exception):
    pass


@dataclass(frozen=True)
class ObjectType:
    name: str
    class_id: int
    height: tuple[float, float]  # mean, half-range (meters)
    width: tuple[float, float]
    shape: str


OBJECT_TYPES = {
    "car": [
        ObjectType("sedan", CAR, (1.45, 0.06), (1.8, 0.1), "sedan"),
        ObjectType("suv", CAR, (1.8, 0.06), (1.9, 0.1), "suv"),
        ObjectType("van", CAR, (2.3, 0.1), (2.0, 0.1), "van"),
    ],
    "person": [
        ObjectType("adult", PERSON, (1.75, 0.1), (0.6, 0.05), "person"),
        ObjectType("child", PERSON, (1.2, 0.08), (0.45, 0.04), "person"),
    ],
    "pole": [
        ObjectType("pole", POLE, (4.5, 1.5), (0.3, 0.04), "pole"),
    ],
}


@dataclass
class DomainAppearance:
    """Per-domain rendering statistics."""

    palette: dict[int, tuple[float, float, float]]
    fog_color: tuple[float, float, float] = (0.75, 0.78, 0.82)
    fog_distance: float = 120.0
    noise_std: float = 0.01
    texture_noise: float = 0.0
    color_matrix: tuple = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))
    color_offset: tuple[float, float, float] = (0.0, 0.0, 0.0)


SOURCE_PALETTE = {
    ROAD: (0.36, 0.36, 0.38),
    BUILDING: (0.70, 0.58, 0.46),
    VEGETATION: (0.28, 0.56, 0.22),
    CAR: (0.75, 0.18, 0.15),
    PERSON: (0.85, 0.70, 0.30),
    POLE: (0.55, 0.55, 0.60),
}


def default_appearance(domain: Domain) -> DomainAppearance:
    if Domain(domain) is Domain.SOURCE:
        return DomainAppearance(palette=dict(SOURCE_PALETTE))
    # target: global color transfer, stronger sensor noise, blotchy texture
    return DomainAppearance(
        palette=dict(SOURCE_PALETTE),
        fog_color=(0.55, 0.50, 0.62),
        noise_std=0.03,
        texture_noise=0.05,
        color_matrix=((0.55, 0.30, 0.10), (0.10, 0.60, 0.25), (0.20, 0.15, 0.75)),
        color_offset=(0.10, 0.02, 0.12),
    )


@dataclass
class SyntheticConfig:
    height: int = 64
    width: int = 192
    n_source: int = 300
    n_target: int = 300
    source_focal: float = 160.0
    target_focal_scale: float = 0.5
    horizon_row: float = 24.0
    camera_height: float = 1.65
    object_depth: tuple[float, float] = (5.0, 25.0)
    far_depth: tuple[float, float] = (30.0, 45.0)
    panel_depth_min: float = 26.0
    objects_per_image: tuple[int, int] = (2, 5)
    panels_per_image: tuple[int, int] = (0, 3)
    source_object_classes: tuple[str, ...] = ("car", "pole")
    target_object_classes: tuple[str, ...] = ("car", "person", "pole")
    split_fractions: tuple[float, float, float] = (0.7, 0.1, 0.2)
    min_pixel_height: float = 2.0
    max_retries: int = 200
    allow_occlusion: bool = False

    def intrinsics(self, domain: Domain) -> CameraIntrinsics:
        f = self.source_focal
        if Domain(domain) is Domain.TARGET:
            f *= self.target_focal_scale
        return CameraIntrinsics(f, f, self.width / 2.0, self.horizon_row)

    def validate(self) -> None:
        lo, hi = self.object_depth
        if not 0 < lo < hi:
            raise GenerationError(f"bad object depth range {self.object_depth}")
        if self.height % 16 or self.width % 16:
            raise GenerationError("image size must be divisible by 16")
        if hi >= self.panel_depth_min or self.panel_depth_min >= self.far_depth[0]:
            raise GenerationError("need object_depth max < panel_depth_min < far_depth min")
        for name in self.source_object_classes + self.target_object_classes:
            if name not in OBJECT_TYPES:
                raise GenerationError(f"unknown object class {name!r}")


@dataclass
class SceneObject:
    instance_id: int
    class_id: int
    subtype: str
    height: float  # physical, meters
    width: float
    depth: float
    offset: float  # lateral X, meters
    bbox: tuple[int, int, int, int] = (0, 0, 0, 0)


@dataclass
class Panel:
    class_id: int
    depth: float
    height: float
    u0: int
    u1: int


@dataclass
class SyntheticSceneSpec:
    id: str
    domain: str
    seed: tuple[int, ...]
    image_size: tuple[int, int]
    intrinsics: dict
    camera_height: float
    far_depth: float
    objects: list[SceneObject] = field(default_factory=list)
    panels: list[Panel] = field(default_factory=list)
    illumination: float = 1.0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSceneSpec":
        d = dict(d)
        d["objects"] = [SceneObject(**{**o, "bbox": tuple(o["bbox"])}) for o in d["objects"]]
        d["panels"] = [Panel(**p) for p in d["panels"]]
        d["seed"] = tuple(d["seed"])
        d["image_size"] = tuple(d["image_size"])
        return cls(**d)


def quantize_depth(d):
    return np.round(np.asarray(d, dtype=np.float64) * DEPTH_SCALE) / DEPTH_SCALE


def projected_pixel_height(fy: float, height: float, depth: float) -> float:
    return fy * height / depth


def _silhouette(shape: str, r: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Membership of normalized bbox coords (r down, c right, both in [0,1])."""
    if shape == "sedan":
        return (r >= 0.45) | ((c >= 0.2) & (c <= 0.8))
    if shape == "suv":
        return (r >= 0.35) | ((c >= 0.1) & (c <= 0.85))
    if shape == "van":
        return (r >= 0.12) | ((c >= 0.04) & (c <= 0.96))
    if shape == "person":
        head = (r < 0.16) & (c >= 0.33) & (c <= 0.67)
        torso = (r >= 0.16) & (r < 0.55)
        legs = (r >= 0.55) & (((c >= 0.1) & (c <= 0.45)) | ((c >= 0.55) & (c <= 0.9)))
        return head | torso | legs
    if shape == "pole":
        return np.ones_like(r, dtype=bool)
    raise ValueError(shape)


def _rasterize_object(obj_type: ObjectType, height: float, width: float, depth: float, u_center: float,
                      intr: CameraIntrinsics, cam_h: float, img_h: int, img_w: int):
    """Pixel mask of an object, or None if it does not fit cleanly."""
    v_bottom = intr.cy + intr.fy * cam_h / depth
    h_px = projected_pixel_height(intr.fy, height, depth)
    w_px = intr.fx * width / depth
    top, bottom = int(np.round(v_bottom - h_px)), int(np.round(v_bottom))
    left, right = int(np.round(u_center - w_px / 2)), int(np.round(u_center + w_px / 2))
    if right <= left:
        right = left + 1
    if top < 0 or bottom > img_h or left < 0 or right > img_w or bottom - top < 2:
        return None
    rows = np.arange(top, bottom)
    cols = np.arange(left, right)
    r = ((rows + 0.5 - (v_bottom - h_px)) / h_px)[:, None]
    c = ((cols + 0.5 - (u_center - w_px / 2)) / w_px)[None, :]
    r = np.clip(r, 0.0, 1.0)
    c = np.clip(c, 0.0, 1.0)
    local = _silhouette(obj_type.shape, np.broadcast_to(r, (rows.size, cols.size)),
                        np.broadcast_to(c, (rows.size, cols.size)))
    mask = np.zeros((img_h, img_w), dtype=bool)
    mask[top:bottom, left:right] = local
    occupied = np.flatnonzero(mask.any(axis=1))
    # every bbox row must be covered so the bbox height equals the rasterized extent
    if occupied.size != bottom - top:
        return None
    return mask


def sample_scene(config: SyntheticConfig, domain: Domain, index: int, seed: int) -> SyntheticSceneSpec:
    domain = Domain(domain)
    dom_idx = 0 if domain is Domain.SOURCE else 1
    seed_tuple = (int(seed), dom_idx, int(index))
    rng = np.random.default_rng(list(seed_tuple))
    intr = config.intrinsics(domain)
    img_h, img_w = config.height, config.width
    prefix = "src" if domain is Domain.SOURCE else "tgt"
    far = float(quantize_depth(rng.uniform(*config.far_depth)))
    spec = SyntheticSceneSpec(
        id=f"{prefix}_{index:05d}", domain=domain.value, seed=seed_tuple, image_size=(img_h, img_w),
        intrinsics=intr.to_dict(), camera_height=config.camera_height, far_depth=far,
        illumination=float(rng.uniform(0.85, 1.1)))

    for _ in range(rng.integers(config.panels_per_image[0], config.panels_per_image[1] + 1)):
        pd = float(quantize_depth(rng.uniform(config.panel_depth_min, far)))
        u0 = int(rng.integers(0, img_w - 16))
        spec.panels.append(Panel(int(rng.choice([BUILDING, VEGETATION])), pd,
                                 float(rng.uniform(3.0, 12.0)), u0, int(min(img_w, u0 + rng.integers(16, 64)))))

    classes = config.source_object_classes if domain is Domain.SOURCE else config.target_object_classes
    n_obj = int(rng.integers(config.objects_per_image[0], config.objects_per_image[1] + 1))
    taken = np.zeros((img_h, img_w), dtype=bool)
    for k in range(n_obj):
        for _attempt in range(config.max_retries):
            cls_name = classes[int(rng.integers(len(classes)))]
            types = OBJECT_TYPES[cls_name]
            otype = types[int(rng.integers(len(types)))]
            height = float(otype.height[0] + rng.uniform(-1, 1) * otype.height[1])
            width = float(otype.width[0] + rng.uniform(-1, 1) * otype.width[1])
            depth = float(quantize_depth(rng.uniform(*config.object_depth)))
            u_center = float(rng.uniform(0, img_w))
            if projected_pixel_height(intr.fy, height, depth) <= config.min_pixel_height:
                continue
            mask = _rasterize_object(otype, height, width, depth, u_center, intr,
                                     config.camera_height, img_h, img_w)
            if mask is None:
                continue
            if not config.allow_occlusion and (ndimage.binary_dilation(mask) & taken).any():
                continue
            inst = InstanceAnnotation.from_mask(k + 1, otype.class_id, mask)
            taken |= mask
            spec.objects.append(SceneObject(k + 1, otype.class_id, otype.name, height, width, depth,
                                            (u_center - intr.cx) * depth / intr.fx, inst.bbox))
            break
        else:
            raise GenerationError(f"{spec.id}: could not place object {k + 1} after "
                                  f"{config.max_retries} attempts")
    return spec


def _object_type(name: str) -> ObjectType:
    for types in OBJECT_TYPES.values():
        for t in types:
            if t.name == name:
                return t
    raise KeyError(name)


def check_object_placement(fy: float, height: float, depth: float, image_height: int,
                           min_pixel_height: float = 2.0) -> bool:
    """Whether an object of ``height`` at ``depth`` is tall enough to keep.

    Objects at or under ``min_pixel_height`` pixels, or taller than the
    image, are rejected and resampled by the generator.
    """
    h_px = projected_pixel_height(fy, height, depth)
    return min_pixel_height < h_px <= image_height


def render_scene(spec: SyntheticSceneSpec, appearance: DomainAppearance):
    """Render a scene spec.

    Returns ``(image, depth, semantic, instances)``; depth is quantized to the
    on-disk 1/256 m grid so in-memory and loaded samples agree bit for bit.
    """
    img_h, img_w = spec.image_size
    intr = CameraIntrinsics(**spec.intrinsics)
    rng = np.random.default_rng(list(spec.seed) + [7])
    v = np.arange(img_h)[:, None] + 0.5
    u = np.arange(img_w)[None, :] + 0.5

    below = v - intr.cy
    with np.errstate(divide="ignore"):
        ground = np.where(below > 0, intr.fy * spec.camera_height / np.maximum(below, 1e-9), np.inf)
    ground = np.broadcast_to(ground, (img_h, img_w))
    is_road = ground < spec.far_depth
    depth = np.where(is_road, ground, spec.far_depth)
    semantic = np.where(is_road, ROAD, BUILDING).astype(np.int64)

    for p in spec.panels:
        contact = intr.cy + intr.fy * spec.camera_height / p.depth
        top = int(np.round(contact - intr.fy * p.height / p.depth))
        bottom = int(np.round(contact))
        region = np.zeros((img_h, img_w), dtype=bool)
        region[max(top, 0):max(bottom, 0), p.u0:p.u1] = True
        region &= depth > p.depth
        depth = np.where(region, p.depth, depth)
        semantic = np.where(region, p.class_id, semantic)

    instances = []
    obj_colors = []
    for obj in spec.objects:
        otype = _object_type(obj.subtype)
        u_center = intr.cx + obj.offset * intr.fx / obj.depth
        mask = _rasterize_object(otype, obj.height, obj.width, obj.depth, u_center, intr,
                                 spec.camera_height, img_h, img_w)
        depth = np.where(mask, obj.depth, depth)
        semantic = np.where(mask, obj.class_id, semantic)
        inst = InstanceAnnotation.from_mask(obj.instance_id, obj.class_id, mask,
                                            class_name=CLASS_NAMES[obj.class_id])
        instances.append(inst)
        obj_colors.append(np.clip(np.array(appearance.palette[obj.class_id])
                                  * rng.uniform(0.7, 1.3, size=3), 0, 1))
    depth = quantize_depth(depth)

    # world coordinates of each pixel on its surface
    x_world = (u - intr.cx) * depth / intr.fx
    y_world = spec.camera_height - (v - intr.cy) * depth / intr.fy

    pal = appearance.palette
    color = np.zeros((img_h, img_w, 3))
    for cid, rgb in pal.items():
        color[semantic == cid] = rgb
    shade = np.ones((img_h, img_w))
    road = semantic == ROAD
    shade[road] *= 1.0 + 0.15 * np.sin(2 * np.pi * depth[road] / 3.0)
    lane = road & ((np.abs(np.abs(x_world) - 1.8) < 0.08) | (np.abs(x_world) < 0.06))
    color[lane] = (0.92, 0.92, 0.86)
    bld = semantic == BUILDING
    win = (np.mod(x_world / 3.0, 1.0) > 0.3) & (np.mod(x_world / 3.0, 1.0) < 0.7) & \
          (np.mod(y_world / 3.0, 1.0) > 0.35) & (np.mod(y_world / 3.0, 1.0) < 0.75)
    shade[bld & win] *= 0.55
    veg = semantic == VEGETATION
    shade[veg] *= 1.0 + 0.25 * np.sin(2.3 * x_world[veg]) * np.sin(1.9 * y_world[veg])
    for inst, obj, rgb in zip(instances, spec.objects, obj_colors):
        m = inst.mask
        color[m] = rgb
        x, y, w, h = inst.bbox
        rel = (v[:, 0] - y) / h  # 0 at top
        if obj.class_id == CAR:
            cabin = m & (rel[:, None] < 0.4)
            color[cabin] = color[cabin] * 0.35 + np.array([0.2, 0.25, 0.35])
            wheels = m & (rel[:, None] > 0.85)
            color[wheels] = (0.08, 0.08, 0.08)
        shade[m] *= 1.1 - 0.25 * np.broadcast_to(rel[:, None], m.shape)[m]
    color *= shade[..., None] * spec.illumination

    fog = np.exp(-depth / appearance.fog_distance)[..., None]
    color = color * fog + np.asarray(appearance.fog_color) * (1 - fog)
    color = color @ np.asarray(appearance.color_matrix).T + np.asarray(appearance.color_offset)
    if appearance.texture_noise > 0:
        blotch = ndimage.gaussian_filter(rng.standard_normal((img_h, img_w)), 1.5)
        blotch /= blotch.std() + 1e-12
        color += appearance.texture_noise * blotch[..., None]
    color += appearance.noise_std * rng.standard_normal(color.shape)
    image = np.clip(color, 0, 1).astype(np.float32)
    # match the 8-bit on-disk representation
    image = (np.round(image * 255) / 255).astype(np.float32)
    return image, depth, semantic, instances


def build_sample(spec: SyntheticSceneSpec, appearance: DomainAppearance) -> tuple[DomainSample, np.ndarray]:
    image, depth, semantic, instances = render_scene(spec, appearance)
    domain = Domain(spec.domain)
    sample = DomainSample(
        image=image, semantic=SemanticMap(semantic), intrinsics=CameraIntrinsics(**spec.intrinsics),
        domain=domain, id=spec.id, instances=instances,
        depth=DepthMap.from_values(depth) if domain is Domain.SOURCE else None)
    return sample, depth


def _split_ids(ids: list[str], fractions, rng: np.random.Generator) -> dict[str, list[str]]:
    order = rng.permutation(len(ids))
    n_train = int(round(fractions[0] * len(ids)))
    n_val = int(round(fractions[1] * len(ids)))
    picked = [ids[i] for i in order]
    return {"train": sorted(picked[:n_train]), "val": sorted(picked[n_train:n_train + n_val]),
            "test": sorted(picked[n_train + n_val:])}


@dataclass
class GeneratedDatasets:
    root: Path
    source_specs: list[SyntheticSceneSpec]
    target_specs: list[SyntheticSceneSpec]


def generate_synthetic_datasets(config: SyntheticConfig, root, seed: int,
                                appearances: Optional[dict] = None) -> GeneratedDatasets:
    """Render and write a source and a target dataset under ``root``.

    ``root`` is replaced if it exists. Output is a pure function of
    ``(config, seed)``.
    """
    config.validate()
    root = Path(root)
    if root.exists():
        shutil.rmtree(root)
    appearances = appearances or {d: default_appearance(d) for d in Domain}
    specs: dict[Domain, list[SyntheticSceneSpec]] = {}
    splits: dict[str, list[str]] = {"train": [], "val": [], "test": []}
    for domain, n in ((Domain.SOURCE, config.n_source), (Domain.TARGET, config.n_target)):
        write_intrinsics(root, domain, config.intrinsics(domain))
        specs[domain] = []
        for i in range(n):
            spec = sample_scene(config, domain, i, seed)
            sample, depth = build_sample(spec, appearances[domain])
            write_sample(root, sample, sealed_depth=depth if domain is Domain.TARGET else None)
            write_json_atomic(spec.to_dict(), root / domain.value / "_scene" / f"{spec.id}.json")
            specs[domain].append(spec)
        split_rng = np.random.default_rng([int(seed), 99, 0 if domain is Domain.SOURCE else 1])
        for name, ids in _split_ids([s.id for s in specs[domain]], config.split_fractions, split_rng).items():
            splits[name].extend(ids)
    write_splits(root, splits)
    cfg = asdict(config)
    write_json_atomic({"class_names": CLASS_NAMES, "seed": int(seed), "generator": cfg,
                       "source_classes": sorted({t.class_id for c in config.source_object_classes
                                                 for t in OBJECT_TYPES[c]})},
                      root / "meta.json")
    return GeneratedDatasets(root, specs[Domain.SOURCE], specs[Domain.TARGET])


def load_scene_specs(root, domain) -> dict[str, SyntheticSceneSpec]:
    ddir = Path(root) / Domain(domain).value / "_scene"
    return {p.stem: SyntheticSceneSpec.from_dict(json.loads(p.read_text()))
            for p in sorted(ddir.glob("*.json"))}


def source_class_ids(root) -> list[int]:
    """Object classes annotated in the source domain (from meta.json)."""
    meta = json.loads((Path(root) / "meta.json").read_text())
    return list(meta.get("source_classes", []))
