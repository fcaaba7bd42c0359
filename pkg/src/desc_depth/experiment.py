"""Desk-scale adaptation experiment: pretrain once per seed, adapt under each ablation, evaluate on target.

Results are cached on disk under a key built from the experiment config and
the package source, so an unchanged code base and config reuse earlier runs.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .data import load_dataset, write_json_atomic
from .evaluation import EvalSettings, evaluate_dataset
from .losses import LossWeights
from .networks import config_hash
from .synthetic import SyntheticConfig, generate_synthetic_datasets
from .trainer import (AblationFlags, NetworkConfig, TrainConfig, adapt, load_training_data, pretrain,
                      translator_from_checkpoint)

logger = logging.getLogger(__name__)

RERUN_ENV = "DESC_ACCEPTANCE_RERUN"

VARIANTS = {
    "full": AblationFlags(),
    "img": AblationFlags(consistency=False, instances=False),
    "con": AblationFlags(instances=False),
    "ins": AblationFlags(consistency=False),
}


@dataclass
class ExperimentConfig:
    seeds: tuple[int, ...] = (0, 1, 2)
    data_seed: int = 0
    generator: SyntheticConfig = field(default_factory=SyntheticConfig)
    networks: NetworkConfig = field(default_factory=lambda: NetworkConfig(depth_width=16))
    pretrain_iterations: int = 2000
    adapt_iterations: int = 2000
    target_weight: float = 1.0
    phi_lr: float = 5e-3
    variants: tuple[str, ...] = ("full", "img", "con", "ins")
    eval: EvalSettings = field(default_factory=EvalSettings)

    def train_config(self, phase: str, seed: int, variant: str = "full") -> TrainConfig:
        weights = LossWeights(target=0.0 if phase == "pretrain" else self.target_weight)
        return TrainConfig(phase=phase, seed=seed, weights=weights, networks=self.networks, phi_lr=self.phi_lr,
                           iterations=self.pretrain_iterations if phase == "pretrain" else self.adapt_iterations,
                           ablation=VARIANTS[variant] if phase == "adapt" else AblationFlags())


def source_digest() -> str:
    """Hash of the package's Python sources; part of the cache key."""
    h = hashlib.sha256()
    for p in sorted(Path(__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


def experiment_key(cfg: ExperimentConfig) -> str:
    return config_hash({"config": asdict(cfg), "source": source_digest()})


def _file_digest(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def channel_stats(images: np.ndarray) -> np.ndarray:
    """Per-channel mean and std of an N x H x W x 3 batch, as a length-6 vector."""
    flat = images.reshape(-1, images.shape[-1])
    return np.concatenate([flat.mean(0), flat.std(0)])


def translation_gap(checkpoint, root, split: str = "test") -> dict:
    """Distance of source channel statistics to target, before and after translation."""
    net = translator_from_checkpoint(checkpoint)
    src = np.stack([s.image for s in load_dataset(root, "source", split)]).astype(np.float32)
    tgt = np.stack([s.image for s in load_dataset(root, "target", split)]).astype(np.float32)
    with torch.no_grad():
        out = net(torch.from_numpy(src).permute(0, 3, 1, 2)).permute(0, 2, 3, 1).numpy()
    ref = channel_stats(tgt)
    return {"before": float(np.linalg.norm(channel_stats(src) - ref)),
            "after": float(np.linalg.norm(channel_stats(out) - ref))}


def run_seed(cfg: ExperimentConfig, root: Path, seed: int, out_dir: Path, data=None,
             variants: Optional[tuple[str, ...]] = None) -> dict:
    """Pretrain and adapt every variant for one seed; returns target metrics and log digests."""
    out_dir = Path(out_dir)
    variants = variants or cfg.variants
    data = data or load_training_data(root, cfg.train_config("pretrain", seed))
    record = {"seed": seed, "abs_rel": {}, "reports": {}, "log_digests": {}, "seconds": {}}

    t0 = time.time()
    pre_dir = out_dir / "pretrain"
    ckpt = pretrain(root, cfg.train_config("pretrain", seed), pre_dir, data=data)
    record["seconds"]["pretrain"] = time.time() - t0
    record["translation_gap"] = translation_gap(ckpt, root)
    with open(pre_dir / "pretrain_log.jsonl") as f:
        record["depth_trace"] = [[r["iter"], r["depth"]] for r in map(json.loads, f)]
    runs = [("pretrain", ckpt, pre_dir / "pretrain_log.jsonl")]
    for name in variants:
        t0 = time.time()
        vdir = out_dir / name
        vck = adapt(root, ckpt, cfg.train_config("adapt", seed, name), vdir, data=data)
        record["seconds"][name] = time.time() - t0
        runs.append((name, vck, vdir / "adapt_log.jsonl"))
    for name, path, log in runs:
        rep = evaluate_dataset(path, root, "test", "target", cfg.eval, out_dir / name / "eval")
        record["abs_rel"][name] = rep.abs_rel
        record["reports"][name] = rep.to_dict()
        record["log_digests"][name] = _file_digest(log)
        record["log_digests"][name + ".report"] = _file_digest(out_dir / name / "eval" / "report.json")
    logger.info("seed %d: %s", seed, record["abs_rel"])
    return record


def summarize(records: list[dict]) -> dict:
    names = records[0]["abs_rel"].keys()
    return {name: float(np.median([r["abs_rel"][name] for r in records])) for name in names}


def run_experiment(cfg: ExperimentConfig, work_dir, tag: str = "main", use_cache: bool = True,
                   seeds: Optional[tuple[int, ...]] = None, variants: Optional[tuple[str, ...]] = None) -> dict:
    """Run (or load from cache) the experiment. ``tag`` separates independent repeats."""
    work_dir = Path(work_dir)
    seeds = tuple(seeds or cfg.seeds)
    variants = tuple(variants or cfg.variants)
    key = experiment_key(cfg)
    run_dir = work_dir / key / tag
    result_path = run_dir / f"results_{'-'.join(map(str, seeds))}_{'-'.join(variants)}.json"
    if use_cache and not os.environ.get(RERUN_ENV) and result_path.exists():
        return json.loads(result_path.read_text())

    root = work_dir / key / "data"
    if not (root / "meta.json").exists():
        generate_synthetic_datasets(cfg.generator, root, cfg.data_seed)
    data = None
    records = []
    for seed in seeds:
        data = data or load_training_data(root, cfg.train_config("pretrain", seed))
        records.append(run_seed(cfg, root, seed, run_dir / f"seed{seed}", data=data, variants=variants))
    result = {"key": key, "tag": tag, "config": asdict(cfg), "records": records, "median_abs_rel": summarize(records)}
    write_json_atomic(result, result_path)
    return result
