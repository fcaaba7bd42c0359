"""Two-phase training: source pretraining, then adaptation with the target terms.

Pretraining optimizes every network with the target weight at zero and
alternates generator and discriminator updates. Adaptation freezes the
translator and discriminator and switches on the consistency and
instance-height terms.
"""
from __future__ import annotations

import json
import logging
import math
import os
from collections import Counter
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from .data import Domain, DomainDataset, augment_photometric, load_dataset
from .height_prior import (HeightPredictor, NoDepthEvidence, PerClassHeight, ScaleParameter,
                           gt_height, height_loss_source, instance_features, instance_loss_target,
                           is_usable, pseudo_depth)
from .losses import (LossBreakdown, LossWeights, consistency_source, consistency_target,
                     depth_supervision_loss, discriminator_gan_loss, generator_gan_loss, identity_loss,
                     smoothness_loss, total_loss)
from .networks import (DepthNet, DiscriminatorNet, SemanticDepthNet, TranslatorNet, forward_depth, freeze,
                       load_checkpoint, save_checkpoint)
from .semantic_inputs import canny_edges, encode_semantic_channels

logger = logging.getLogger(__name__)

PHASES = ("pretrain", "adapt")


class ConfigError(Exception):
    def __init__(self, errors):
        self.errors = [errors] if isinstance(errors, str) else list(errors)
        super().__init__("; ".join(self.errors))


class DivergenceError(Exception):
    def __init__(self, term: str, value: float, iteration: int):
        self.term = term
        super().__init__(f"non-finite loss term {term!r} ({value}) at iteration {iteration}")


@dataclass
class AblationFlags:
    consistency: bool = True
    instances: bool = True
    per_class_height: bool = False
    edges_only: bool = False
    learn_phi: bool = True
    target_fy_override: Optional[float] = None


@dataclass
class NetworkConfig:
    depth_width: int = 32
    depth_down: int = 4
    translator_width: int = 16
    translator_blocks: int = 3
    disc_width: int = 32
    height_hidden: tuple[int, int] = (128, 64)


@dataclass
class TrainConfig:
    phase: str = "pretrain"
    iterations: int = 2000
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    phi_lr: float = 5e-3
    batch_source: int = 2
    batch_target: int = 2
    seed: int = 0
    augment_delta: float = 0.2
    log_every: int = 10
    checkpoint_every: int = 0
    canny_low: float = 0.1
    canny_high: float = 0.2
    canny_sigma: float = 1.4
    score_threshold: float = 0.5
    weights: LossWeights = field(default_factory=LossWeights)
    ablation: AblationFlags = field(default_factory=AblationFlags)
    networks: NetworkConfig = field(default_factory=NetworkConfig)

    @classmethod
    def for_phase(cls, phase: str, **kwargs) -> "TrainConfig":
        """Config with the phase's default target weight (0 for pretraining, 1 for adaptation)."""
        weights = kwargs.pop("weights", None) or LossWeights(target=0.0 if phase == "pretrain" else 1.0)
        return cls(phase=phase, weights=weights, **kwargs)

    def validate(self) -> list[str]:
        errors = []
        if self.phase not in PHASES:
            errors.append(f"train.phase must be one of {PHASES}, got {self.phase!r}")
        if self.phase == "pretrain" and self.weights.target != 0:
            errors.append(f"train.weights.target must be 0 during pretraining, got {self.weights.target}")
        if self.iterations < 0:
            errors.append("train.iterations must be >= 0")
        if self.lr <= 0 or self.phi_lr <= 0:
            errors.append("learning rates must be positive")
        if self.batch_source < 1 or self.batch_target < 1:
            errors.append("batch sizes must be >= 1")
        if not 0 <= self.augment_delta < 1:
            errors.append("train.augment_delta must lie in [0, 1)")
        if not self.canny_low < self.canny_high:
            errors.append("train.canny_low must be below train.canny_high")
        if self.log_every < 1:
            errors.append("train.log_every must be >= 1")
        fy = self.ablation.target_fy_override
        if fy is not None and fy <= 0:
            errors.append("train.ablation.target_fy_override must be positive")
        errors += [e.replace("weights.", "train.weights.") for e in self.weights.validate()]
        return errors

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["weights"] = LossWeights(**d.get("weights", {}))
        d["ablation"] = AblationFlags(**d.get("ablation", {}))
        nets = dict(d.get("networks", {}))
        if "height_hidden" in nets:
            nets["height_hidden"] = tuple(nets["height_hidden"])
        d["networks"] = NetworkConfig(**nets)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# -- data preparation --------------------------------------------------------

@dataclass
class PreparedDomain:
    """Tensors and instance records of one domain, ready for batching."""

    ids: list[str]
    images: np.ndarray  # N x H x W x 3
    sem_inputs: np.ndarray  # N x 2 x H x W
    fy: float
    depth: Optional[np.ndarray] = None  # N x H x W
    valid: Optional[np.ndarray] = None
    instances: list = field(default_factory=list)  # per sample: list of dicts

    def __len__(self) -> int:
        return len(self.ids)


def prepare_domain(dataset: DomainDataset, num_classes: int, config: TrainConfig,
                   counters: Optional[Counter] = None) -> PreparedDomain:
    """Precompute edge maps, semantic inputs, instance features and source GT heights.

    Edges come from the original, unaugmented image.
    """
    counters = counters if counters is not None else Counter()
    images, sems, depths, valids, instances = [], [], [], [], []
    for s in dataset:
        edges = canny_edges(s.image, config.canny_low, config.canny_high, config.canny_sigma)
        sem = encode_semantic_channels(s.semantic, edges, num_classes).channels
        if config.ablation.edges_only:
            sem = sem.copy()
            sem[..., 0] = 0.0
        images.append(s.image)
        sems.append(sem.transpose(2, 0, 1))
        if s.depth is not None:
            depths.append(s.depth.values)
            valids.append(s.depth.valid_mask)
        recs = []
        for inst in s.instances:
            if inst.score < config.score_threshold:
                continue
            if not is_usable(inst):
                counters["instances_too_small"] += 1
                continue
            rec = {"features": instance_features(inst, num_classes).vector(), "pixel_height": inst.pixel_height,
                   "class_id": inst.class_id, "mask": inst.mask, "h_gt": None}
            if s.depth is not None:
                try:
                    rec["h_gt"] = gt_height(inst, s.depth, s.intrinsics)
                except NoDepthEvidence:
                    counters["instances_without_depth"] += 1
                    continue
            recs.append(rec)
        instances.append(recs)
    has_depth = dataset.domain is Domain.SOURCE
    return PreparedDomain(
        ids=dataset.ids, images=np.stack(images).astype(np.float32),
        sem_inputs=np.stack(sems).astype(np.float32), fy=dataset.intrinsics.fy,
        depth=np.stack(depths).astype(np.float32) if has_depth else None,
        valid=np.stack(valids) if has_depth else None, instances=instances)


@dataclass
class InstanceBatch:
    features: torch.Tensor
    masks: torch.Tensor
    image_index: torch.Tensor
    pixel_heights: torch.Tensor
    class_ids: torch.Tensor
    h_gt: Optional[torch.Tensor]

    def __len__(self) -> int:
        return len(self.class_ids)


def collate_instances(per_image: list, num_features: int, shape: tuple[int, int]) -> InstanceBatch:
    recs = [(b, r) for b, recs in enumerate(per_image) for r in recs]
    if not recs:
        return InstanceBatch(torch.zeros(0, num_features), torch.zeros(0, *shape, dtype=torch.bool),
                             torch.zeros(0, dtype=torch.long), torch.zeros(0), torch.zeros(0, dtype=torch.long),
                             torch.zeros(0))
    h_gt = [r["h_gt"] for _, r in recs]
    return InstanceBatch(
        features=torch.from_numpy(np.stack([r["features"] for _, r in recs])),
        masks=torch.from_numpy(np.stack([r["mask"] for _, r in recs])),
        image_index=torch.tensor([b for b, _ in recs], dtype=torch.long),
        pixel_heights=torch.tensor([float(r["pixel_height"]) for _, r in recs]),
        class_ids=torch.tensor([r["class_id"] for _, r in recs], dtype=torch.long),
        h_gt=None if any(h is None for h in h_gt) else torch.tensor(h_gt, dtype=torch.float32),
    )


@dataclass
class Batch:
    source_images: torch.Tensor
    source_depth: torch.Tensor
    source_valid: torch.Tensor
    source_sem: torch.Tensor
    source_instances: InstanceBatch
    target_images: torch.Tensor
    target_sem: torch.Tensor
    target_instances: InstanceBatch
    source_index: list[int] = field(default_factory=list)
    target_index: list[int] = field(default_factory=list)


# -- trainer -------------------------------------------------------------------

def _rng_state(rng: np.random.Generator) -> dict:
    return {"numpy": rng.bit_generator.state, "torch": torch.get_rng_state()}


class Trainer:
    """Owns the networks, optimizers and batch RNG for one training phase."""

    def __init__(self, config: TrainConfig, source: PreparedDomain, target: PreparedDomain,
                 num_classes: int, source_classes, checkpoint=None):
        errors = config.validate()
        if errors:
            raise ConfigError(errors)
        if config.phase == "adapt" and checkpoint is None:
            raise ConfigError("train.phase=adapt requires a pretrain checkpoint")
        self.config = config
        self.phase = config.phase
        self.source, self.target = source, target
        self.num_classes = num_classes
        self.source_classes = torch.tensor(sorted(int(c) for c in source_classes), dtype=torch.long)
        self.counters: Counter = Counter()
        self.iteration = 0
        self.history: list[dict] = []

        torch.manual_seed(config.seed)
        nc = config.networks
        self.depth_net = DepthNet(nc.depth_width, nc.depth_down)
        self.sem_net = SemanticDepthNet(nc.depth_width, nc.depth_down)
        if config.ablation.per_class_height:
            self.height_net = PerClassHeight(num_classes)
        else:
            self.height_net = HeightPredictor(num_classes, tuple(nc.height_hidden))
        self.translator = TranslatorNet(nc.translator_width, nc.translator_blocks)
        self.disc = DiscriminatorNet(nc.disc_width)
        self.scale = ScaleParameter()
        self.rng = np.random.default_rng([config.seed, PHASES.index(config.phase)])

        self.optimizers = self._build_optimizers()
        if checkpoint is not None:
            self._restore(load_checkpoint(checkpoint) if not isinstance(checkpoint, dict) else checkpoint)
        if self.phase == "adapt":
            freeze(self.translator)
            freeze(self.disc)

    @property
    def networks(self) -> dict:
        return {"depth": self.depth_net, "semantic": self.sem_net, "height": self.height_net,
                "translator": self.translator, "discriminator": self.disc, "scale": self.scale}

    def _trainable(self) -> dict:
        ab = self.config.ablation
        nets = {"depth": self.depth_net}
        if ab.consistency:
            nets["semantic"] = self.sem_net
        if ab.instances:
            nets["height"] = self.height_net
            if self.config.weights.target > 0 and ab.learn_phi:
                nets["scale"] = self.scale
        if self.phase == "pretrain":
            nets["translator"] = self.translator
            nets["discriminator"] = self.disc
        return nets

    def _build_optimizers(self) -> dict:
        c = self.config
        opts = {}
        for name, net in self._trainable().items():
            lr = c.phi_lr if name == "scale" else c.lr
            opts[name] = torch.optim.Adam(net.parameters(), lr=lr, betas=tuple(c.betas))
        return opts

    def _restore(self, ckpt: dict) -> None:
        same_phase = ckpt["extra"].get("phase") == self.phase
        for name, net in self.networks.items():
            state = ckpt["networks"].get(name)
            if state is None:
                continue
            own = net.state_dict()
            if set(state) != set(own) or any(state[k].shape != own[k].shape for k in own):
                if name != "height":
                    raise ConfigError(f"checkpoint {name} network does not match train.networks")
                # switching between the MLP and per-class height modes starts the new model fresh
                logger.warning("checkpoint height model does not fit the configured one; kept fresh init")
                continue
            net.load_state_dict(state)
        # frozen nets lose their optimizer state at the phase switch
        for name, opt in self.optimizers.items():
            if name in ckpt["optimizers"]:
                try:
                    opt.load_state_dict(ckpt["optimizers"][name])
                except (ValueError, KeyError):
                    logger.warning("optimizer state for %s does not match; starting fresh", name)
        if same_phase:
            self.iteration = int(ckpt["iteration"])
            self.rng.bit_generator.state = ckpt["rng_state"]["numpy"]
            torch.set_rng_state(ckpt["rng_state"]["torch"])

    def save(self, path) -> Path:
        return save_checkpoint(
            path, networks=self.networks, optimizers=self.optimizers, phi=float(self.scale.phi.detach()),
            iteration=self.iteration, config=self.config.to_dict(), rng_state=_rng_state(self.rng),
            extra={"phase": self.phase, "num_classes": self.num_classes,
                   "source_classes": self.source_classes.tolist()})

    # -- batches --

    def sample_batch(self) -> Batch:
        c = self.config
        si = self.rng.choice(len(self.source), size=c.batch_source, replace=False)
        ti = self.rng.choice(len(self.target), size=c.batch_target, replace=False)
        aug = lambda img: augment_photometric(img, self.rng, c.augment_delta)  # noqa: E731
        src_imgs = np.stack([aug(self.source.images[i]) for i in si])
        tgt_imgs = np.stack([aug(self.target.images[i]) for i in ti])
        nf = self.source.instances and len(next((r for recs in self.source.instances for r in recs),
                                                  {"features": np.zeros(0)})["features"])
        nf = nf or (2 + 256 + self.num_classes)
        shape = self.source.images.shape[1:3]
        to_t = lambda a: torch.from_numpy(np.ascontiguousarray(a))  # noqa: E731
        return Batch(
            source_images=to_t(src_imgs.transpose(0, 3, 1, 2)),
            source_depth=to_t(self.source.depth[si]),
            source_valid=to_t(self.source.valid[si]),
            source_sem=to_t(self.source.sem_inputs[si]),
            source_instances=collate_instances([self.source.instances[i] for i in si], nf, shape),
            target_images=to_t(tgt_imgs.transpose(0, 3, 1, 2)),
            target_sem=to_t(self.target.sem_inputs[ti]),
            target_instances=collate_instances([self.target.instances[i] for i in ti], nf,
                                               self.target.images.shape[1:3]),
            source_index=si.tolist(), target_index=ti.tolist())

    @property
    def target_fy(self) -> float:
        fy = self.config.ablation.target_fy_override
        return float(fy) if fy is not None else float(self.target.fy)

    # -- one iteration --

    def compute_losses(self, batch: Batch) -> tuple[dict, torch.Tensor]:
        """Generator-side loss terms and the translated source images."""
        c, w, ab = self.config, self.config.weights, self.config.ablation
        pretrain = self.phase == "pretrain"
        use_target = w.target > 0
        x_s, x_t = batch.source_images, batch.target_images
        ns = len(x_s)
        if pretrain:
            x_st = self.translator(x_s)
        else:
            with torch.no_grad():
                x_st = self.translator(x_s)

        parts = {}
        need_target_pred = w.smooth > 0 or (use_target and (ab.consistency or ab.instances))
        preds = forward_depth(self.depth_net, torch.cat([x_st, x_t]) if need_target_pred else x_st)
        parts["depth"] = depth_supervision_loss([p[:ns] for p in preds], batch.source_depth,
                                                batch.source_valid, self.counters)
        pred_t = preds[0][ns:, 0] if need_target_pred else None
        if w.smooth > 0:
            parts["smooth"] = smoothness_loss(pred_t, x_t)

        if ab.consistency:
            sem_in = torch.cat([batch.source_sem, batch.target_sem]) if use_target else batch.source_sem
            gs = forward_depth(self.sem_net, sem_in)[0][:, 0]
            parts["con_source"] = consistency_source(gs[:ns], batch.source_depth, batch.source_valid,
                                                     self.counters)
            if use_target:
                parts["con_target"] = consistency_target(pred_t, gs[ns:])

        if ab.instances:
            src = batch.source_instances
            h_s = self.height_net(src.features)
            parts["ins_source"] = height_loss_source(h_s, src.h_gt if src.h_gt is not None else h_s.detach(),
                                                     self.counters)
            if use_target:
                tgt = batch.target_instances
                h_t = self.height_net(tgt.features)
                # source-supervised classes keep a fixed prior; unseen classes learn through G_D
                supervised = torch.isin(tgt.class_ids, self.source_classes)
                h_t = torch.where(supervised, h_t.detach(), h_t)
                d_hat = pseudo_depth(self.target_fy, h_t, tgt.pixel_heights)
                phi = self.scale.phi if ab.learn_phi else self.scale.phi.detach()
                parts["ins_target"] = instance_loss_target(d_hat, tgt.masks, pred_t, phi, tgt.image_index,
                                                           self.counters)

        if pretrain:
            parts["gan_gen"] = generator_gan_loss(self.disc(x_st))
            parts["identity"] = identity_loss(self.translator(x_t), x_t)
        return parts, x_st

    def training_step(self, batch: Optional[Batch] = None) -> LossBreakdown:
        batch = batch if batch is not None else self.sample_batch()
        self.iteration += 1
        parts, x_st = self.compute_losses(batch)
        total = total_loss(parts, self.config.weights)
        for name, value in list(parts.items()) + [("total", total)]:
            if not torch.isfinite(value):
                raise DivergenceError(name, float(value.detach()), self.iteration)

        for opt in self.optimizers.values():
            opt.zero_grad(set_to_none=True)
        total.backward()
        for name, opt in self.optimizers.items():
            if name != "discriminator":
                opt.step()

        out = {k: float(v.detach()) for k, v in parts.items()}
        if self.phase == "pretrain":
            opt = self.optimizers["discriminator"]
            opt.zero_grad(set_to_none=True)
            disc_loss = discriminator_gan_loss(self.disc(x_st.detach()), self.disc(batch.target_images))
            if not torch.isfinite(disc_loss):
                raise DivergenceError("gan_disc", float(disc_loss), self.iteration)
            disc_loss.backward()
            opt.step()
            out["gan_disc"] = float(disc_loss.detach())
        return LossBreakdown(**out, total=float(total.detach()))

    def run(self, iterations: Optional[int] = None, log_path=None, checkpoint_path=None,
            callback: Optional[Callable[[int, LossBreakdown], None]] = None) -> list[dict]:
        """Train for ``iterations`` steps (default: the configured count).

        Every ``log_every`` iterations, and at the last one, a JSON line
        ``{iter, phase, <losses>, phi}`` is appended to ``log_path``.
        """
        c = self.config
        n = c.iterations if iterations is None else iterations
        log_fh = open(log_path, "a") if log_path is not None else None
        end = self.iteration + n
        try:
            for _ in range(n):
                br = self.training_step()
                if self.iteration % c.log_every == 0 or self.iteration == end:
                    rec = {"iter": self.iteration, "phase": self.phase, **br.to_dict(),
                           "phi": float(self.scale.phi.detach())}
                    self.history.append(rec)
                    if log_fh is not None:
                        log_fh.write(json.dumps(rec) + "\n")
                        log_fh.flush()
                if callback is not None:
                    callback(self.iteration, br)
                if checkpoint_path is not None and c.checkpoint_every and self.iteration % c.checkpoint_every == 0:
                    self.save(checkpoint_path)
        finally:
            if log_fh is not None:
                log_fh.close()
        if checkpoint_path is not None:
            self.save(checkpoint_path)
        return self.history


# -- phase entry points ----------------------------------------------------------

def source_class_set(dataset: DomainDataset) -> list[int]:
    return sorted({inst.class_id for s in dataset for inst in s.instances})


def load_training_data(root, config: TrainConfig, split: str = "train"):
    """Load and prepare source and target training splits under ``root``."""
    src = load_dataset(root, Domain.SOURCE, split, score_threshold=config.score_threshold)
    tgt = load_dataset(root, Domain.TARGET, split, score_threshold=config.score_threshold)
    num_classes = len(src.class_names) or (max((i.class_id for s in src for i in s.instances), default=0) + 1)
    counters: Counter = Counter()
    prepared = (prepare_domain(src, num_classes, config, counters),
                prepare_domain(tgt, num_classes, config, counters))
    return prepared, num_classes, source_class_set(src), counters


def _run_phase(root, config: TrainConfig, out_dir, checkpoint=None, data=None) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (source, target), num_classes, source_classes, _ = data or load_training_data(root, config)
    trainer = Trainer(config, source, target, num_classes, source_classes, checkpoint=checkpoint)
    log_path = out_dir / f"{config.phase}_log.jsonl"
    if log_path.exists() and trainer.iteration == 0:
        log_path.unlink()
    ckpt = out_dir / f"{config.phase}.ckpt"
    trainer.run(log_path=log_path, checkpoint_path=ckpt)
    return ckpt


def pretrain(root, config: TrainConfig, out_dir, data=None, resume=None) -> Path:
    """Source pretraining with the target weight at zero; returns the checkpoint path.

    ``resume`` continues an interrupted pretraining run from its checkpoint.
    """
    if config.phase != "pretrain":
        raise ConfigError(f"pretrain() called with phase={config.phase!r}")
    return _run_phase(root, config, out_dir, checkpoint=resume, data=data)


def adapt(root, pretrain_checkpoint, config: TrainConfig, out_dir, data=None) -> Path:
    """Adaptation from a pretrain checkpoint with the translator and discriminator frozen."""
    if config.phase != "adapt":
        raise ConfigError(f"adapt() called with phase={config.phase!r}")
    if pretrain_checkpoint is None or not Path(pretrain_checkpoint).exists():
        raise ConfigError(f"adapt requires an existing pretrain checkpoint, got {pretrain_checkpoint}")
    return _run_phase(root, config, out_dir, checkpoint=pretrain_checkpoint, data=data)


def depth_net_from_checkpoint(checkpoint) -> DepthNet:
    ckpt = load_checkpoint(checkpoint) if not isinstance(checkpoint, dict) else checkpoint
    nc = TrainConfig.from_dict(ckpt["config"]).networks
    net = DepthNet(nc.depth_width, nc.depth_down)
    net.load_state_dict(ckpt["networks"]["depth"])
    net.eval()
    return net


def translator_from_checkpoint(checkpoint) -> TranslatorNet:
    ckpt = load_checkpoint(checkpoint) if not isinstance(checkpoint, dict) else checkpoint
    nc = TrainConfig.from_dict(ckpt["config"]).networks
    net = TranslatorNet(nc.translator_width, nc.translator_blocks)
    net.load_state_dict(ckpt["networks"]["translator"])
    net.eval()
    return net
