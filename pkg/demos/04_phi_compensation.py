"""
Recovering a wrong focal length with the learnable scale
========================================================

With a perfect depth predictor and a misdeclared target focal length, all
pseudo-depths are off by the same factor. The scale ``phi`` in the instance
loss absorbs it: its optimum is declared_fy / actual_fy.
"""
import sys
from pathlib import Path

import numpy as np
import torch

from desc_depth.data import load_dataset, load_eval_depth
from desc_depth.height_prior import ScaleParameter, instance_loss_target, is_usable, pseudo_depth
from desc_depth.synthetic import SyntheticConfig, generate_synthetic_datasets, load_scene_specs

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_output") / "04"
generate_synthetic_datasets(SyntheticConfig(n_source=2, n_target=30), out / "data", seed=2)
tgt = load_dataset(out / "data", "target")
specs = load_scene_specs(out / "data", "target")
actual_fy = tgt.intrinsics.fy

masks, heights, pixel_heights, index, preds = [], [], [], [], []
for b, s in enumerate(tgt):
    preds.append(load_eval_depth(out / "data", s.id).values)  # oracle depth network
    objects = {o.instance_id: o for o in specs[s.id].objects}
    for inst in s.instances:
        if is_usable(inst):
            masks.append(inst.mask)
            heights.append(objects[inst.instance_id].height)  # oracle height prior
            pixel_heights.append(inst.pixel_height)
            index.append(b)
masks = torch.from_numpy(np.stack(masks))
pred = torch.from_numpy(np.stack(preds)).double()
index = torch.tensor(index)
heights = torch.tensor(heights, dtype=torch.float64)
H = torch.tensor(pixel_heights, dtype=torch.float64)

for declared in (2 * actual_fy, 0.5 * actual_fy, actual_fy):
    d_hat = pseudo_depth(declared, heights, H)
    scale = ScaleParameter().double()
    opt = torch.optim.Adam(scale.parameters(), lr=0.01)
    for _ in range(500):
        opt.zero_grad()
        instance_loss_target(d_hat, masks, pred, scale.phi, index).backward()
        opt.step()
    print(f"declared fy = {declared / actual_fy:.1f} x actual -> phi = {scale.phi.item():.4f}")
