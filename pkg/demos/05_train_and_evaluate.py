"""
Pretraining, adaptation and evaluation at toy scale
===================================================

A short end-to-end run with tiny networks. It shows the pipeline and the
logs, not the accuracy. The acceptance experiment uses the desk-scale
setting.
"""
import json
import sys
from pathlib import Path

from desc_depth.evaluation import evaluate_dataset
from desc_depth.synthetic import SyntheticConfig, generate_synthetic_datasets
from desc_depth.trainer import AblationFlags, NetworkConfig, TrainConfig, adapt, load_training_data, pretrain

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_output") / "05"
root = out / "data"
generate_synthetic_datasets(SyntheticConfig(n_source=40, n_target=40), root, seed=3)

nets = NetworkConfig(depth_width=8, translator_width=8, translator_blocks=2, disc_width=8)
pre_cfg = TrainConfig.for_phase("pretrain", iterations=60, networks=nets, log_every=20)
data = load_training_data(root, pre_cfg)
ckpt = pretrain(root, pre_cfg, out / "pretrain", data=data)
for line in (out / "pretrain" / "pretrain_log.jsonl").read_text().splitlines():
    rec = json.loads(line)
    print(f"pretrain {rec['iter']:4d}  L_D {rec['depth']:.3f}  L_GAN {rec['gan_gen']:.3f}  total {rec['total']:.1f}")

results = {"pretrain": evaluate_dataset(ckpt, root).abs_rel}
for name, flags in (("full", AblationFlags()), ("img", AblationFlags(consistency=False, instances=False))):
    cfg = TrainConfig.for_phase("adapt", iterations=40, networks=nets, log_every=20, ablation=flags)
    adapted = adapt(root, ckpt, cfg, out / name, data=data)
    results[name] = evaluate_dataset(adapted, root, out_dir=out / name / "eval").abs_rel
for name, value in results.items():
    print(f"{name:8s} target Abs Rel {value:.3f}")
