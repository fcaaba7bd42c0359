"""
Synthetic source and target domains
===================================

The generator renders a road scene with a few upright objects. Every object
stands at a single depth, so its pixel height follows ``H = fy * h / D`` up
to rounding. The target domain has a different color response, more noise
and half the focal length.
"""
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from desc_depth.data import load_dataset, load_eval_depth
from desc_depth.evaluation import colorize_depth
from desc_depth.synthetic import CLASS_NAMES, SyntheticConfig, generate_synthetic_datasets, load_scene_specs

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_output") / "01"
out.mkdir(parents=True, exist_ok=True)

cfg = SyntheticConfig(n_source=12, n_target=12)
generate_synthetic_datasets(cfg, out / "data", seed=0)
src = load_dataset(out / "data", "source")
tgt = load_dataset(out / "data", "target")
print(f"source fy={src.intrinsics.fy}, target fy={tgt.intrinsics.fy}")

# Pinhole check over every source instance
specs = load_scene_specs(out / "data", "source")
worst = 0
for s in src:
    objects = {o.instance_id: o for o in specs[s.id].objects}
    for inst in s.instances:
        o = objects[inst.instance_id]
        worst = max(worst, abs(inst.pixel_height - src.intrinsics.fy * o.height / o.depth))
print(f"largest |H - fy*h/D| over source instances: {worst:.3f} px")

counts = {}
for ds in (src, tgt):
    for s in ds:
        for inst in s.instances:
            key = (ds.domain.value, CLASS_NAMES[inst.class_id])
            counts[key] = counts.get(key, 0) + 1
for (domain, name), n in sorted(counts.items()):
    print(f"{domain:6s} {name:7s} {n}")

# Image / depth montage: source on top, target below
rows = []
for s, depth in ((src[0], src[0].depth.values), (tgt[0], load_eval_depth(out / "data", tgt[0].id).values)):
    img = np.round(s.image * 255).astype(np.uint8)
    rows.append(np.concatenate([img, colorize_depth(depth, (1.0, 45.0))], axis=1))
Image.fromarray(np.concatenate(rows, axis=0)).resize((768, 256), Image.NEAREST).save(out / "montage.png")
print(f"wrote {out / 'montage.png'}")
