import json

import numpy as np
import pytest
import torch

from desc_depth.losses import LossWeights
from desc_depth.trainer import (AblationFlags, ConfigError, DivergenceError, NetworkConfig, TrainConfig, Trainer,
                                adapt, depth_net_from_checkpoint, load_training_data, pretrain)

TINY = NetworkConfig(depth_width=4, translator_width=4, translator_blocks=1, disc_width=4, height_hidden=(16, 8))


def _cfg(phase, **kw):
    kw.setdefault("networks", TINY)
    kw.setdefault("log_every", 1)
    return TrainConfig.for_phase(phase, **kw)


@pytest.fixture(scope="module")
def data(small_dataset):
    return load_training_data(small_dataset.root, _cfg("pretrain"))


@pytest.fixture(scope="module")
def pretrained(data, small_dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("pre")
    return pretrain(small_dataset.root, _cfg("pretrain", iterations=4), out, data=data)


def _trainer(data, config, checkpoint=None):
    (src, tgt), nc, sc, _ = data
    return Trainer(config, src, tgt, nc, sc, checkpoint=checkpoint)


def test_prepared_data(data):
    (src, tgt), num_classes, source_classes, counters = data
    assert num_classes == 6 and source_classes == [3, 5]
    assert src.depth is not None and tgt.depth is None
    assert src.sem_inputs.shape[1] == 2 and set(np.unique(src.sem_inputs[:, 1])) <= {0.0, 1.0}
    assert all(r["h_gt"] > 0 for recs in src.instances for r in recs)
    assert all(r["h_gt"] is None for recs in tgt.instances for r in recs)
    assert any(r["class_id"] == 4 for recs in tgt.instances for r in recs)


def test_batch_composition(data):
    tr = _trainer(data, _cfg("pretrain"))
    b = tr.sample_batch()
    assert b.source_images.shape[0] == 2 and b.target_images.shape[0] == 2
    assert len(set(b.source_index)) == 2 and len(set(b.target_index)) == 2


def test_pretrain_rejects_nonzero_target_weight():
    errors = TrainConfig(phase="pretrain", weights=LossWeights(target=1.0)).validate()
    assert any("target" in e for e in errors)
    with pytest.raises(ConfigError):
        Trainer(TrainConfig(phase="pretrain", weights=LossWeights(target=1.0)), None, None, 6, [3])


def test_adapt_requires_checkpoint(data, small_dataset, tmp_path):
    with pytest.raises(ConfigError):
        _trainer(data, _cfg("adapt"))
    with pytest.raises(ConfigError):
        adapt(small_dataset.root, tmp_path / "nope.ckpt", _cfg("adapt"), tmp_path, data=data)


def test_pretrain_loss_trace_is_deterministic(data):
    runs = []
    for _ in range(2):
        tr = _trainer(data, _cfg("pretrain", seed=3))
        runs.append(json.dumps(tr.run(10)))
    assert runs[0] == runs[1]
    other = _trainer(data, _cfg("pretrain", seed=4)).run(1)
    assert other[0] != json.loads(runs[0])[0]


def test_pretrain_has_no_target_terms(data):
    tr = _trainer(data, _cfg("pretrain"))
    br = tr.training_step()
    assert br.con_target == 0 and br.ins_target == 0
    assert br.gan_gen > 0 and br.gan_disc > 0 and br.identity > 0


def test_adapt_freezes_translator_and_discriminator(data, pretrained):
    tr = _trainer(data, _cfg("adapt"), checkpoint=pretrained)
    before = {k: v.clone() for k, v in list(tr.translator.state_dict().items()) + [
        ("d." + k, v) for k, v in tr.disc.state_dict().items()]}
    depth_before = [p.clone() for p in tr.depth_net.parameters()]
    tr.run(3)
    after = {**tr.translator.state_dict(), **{"d." + k: v for k, v in tr.disc.state_dict().items()}}
    assert all(torch.equal(before[k], after[k]) for k in before)
    assert any(not torch.equal(a, b) for a, b in zip(depth_before, tr.depth_net.parameters()))
    assert all(p.grad is None for p in tr.translator.parameters())
    assert "translator" not in tr.optimizers and "discriminator" not in tr.optimizers


def test_adapt_starts_from_pretrained_weights(data, pretrained):
    from desc_depth.networks import load_checkpoint
    ck = load_checkpoint(pretrained)
    tr = _trainer(data, _cfg("adapt"), checkpoint=pretrained)
    assert all(torch.equal(v, ck["networks"]["depth"][k]) for k, v in tr.depth_net.state_dict().items())
    assert tr.iteration == 0


def test_adapt_terms_and_ablation_flags(data, pretrained):
    full = _trainer(data, _cfg("adapt"), checkpoint=pretrained)
    parts, _ = full.compute_losses(full.sample_batch())
    assert set(parts) == {"depth", "smooth", "con_source", "con_target", "ins_source", "ins_target"}
    img = _trainer(data, _cfg("adapt", ablation=AblationFlags(consistency=False, instances=False)),
                   checkpoint=pretrained)
    parts, _ = img.compute_losses(img.sample_batch())
    assert set(parts) == {"depth", "smooth"}
    assert set(img.optimizers) == {"depth"}
    con = _trainer(data, _cfg("adapt", ablation=AblationFlags(instances=False)), checkpoint=pretrained)
    assert set(con.compute_losses(con.sample_batch())[0]) == {"depth", "smooth", "con_source", "con_target"}


def test_edges_only_zeroes_semantic_channel(small_dataset):
    (src, _), *_ = load_training_data(small_dataset.root, _cfg("pretrain", ablation=AblationFlags(edges_only=True)))
    assert (src.sem_inputs[:, 0] == 0).all() and src.sem_inputs[:, 1].any()


def test_per_class_height_mode(data, pretrained):
    tr = _trainer(data, _cfg("adapt", ablation=AblationFlags(per_class_height=True)), checkpoint=pretrained)
    br = tr.training_step()
    assert np.isfinite(br.total)


def test_target_gradient_routing(data, pretrained):
    """Source-supervised classes give G_h no gradient through the target term; unseen classes do."""
    tr = _trainer(data, _cfg("adapt"), checkpoint=pretrained)
    batch = tr.sample_batch()
    inst = batch.target_instances
    assert len(inst) > 0

    def height_grad(class_ids):
        inst.class_ids = torch.full_like(inst.class_ids, class_ids)
        for p in tr.height_net.parameters():
            p.grad = None
        parts, _ = tr.compute_losses(batch)
        parts["ins_target"].backward()
        return sum(0.0 if p.grad is None else p.grad.abs().sum().item() for p in tr.height_net.parameters())

    assert height_grad(3) == 0.0
    assert height_grad(4) > 0.0


def test_phi_moves_only_in_adapt(data, pretrained):
    pre = _trainer(data, _cfg("pretrain"))
    pre.run(2)
    assert pre.scale.phi.item() == 1.0
    ad = _trainer(data, _cfg("adapt"), checkpoint=pretrained)
    ad.run(2)
    assert ad.scale.phi.item() != 1.0
    fixed = _trainer(data, _cfg("adapt", ablation=AblationFlags(learn_phi=False)), checkpoint=pretrained)
    fixed.run(2)
    assert fixed.scale.phi.item() == 1.0


@pytest.mark.parametrize("phase", ["pretrain", "adapt"])
def test_checkpoint_resume_matches_uninterrupted_run(data, pretrained, tmp_path, phase):
    ck = pretrained if phase == "adapt" else None
    full = _trainer(data, _cfg(phase, seed=5), checkpoint=ck)
    full.run(3)
    expected = full.training_step()

    first = _trainer(data, _cfg(phase, seed=5), checkpoint=ck)
    first.run(3)
    path = first.save(tmp_path / "mid.ckpt")
    resumed = _trainer(data, _cfg(phase, seed=5), checkpoint=path)
    assert resumed.iteration == 3
    assert resumed.training_step() == expected


def test_divergence_guard_names_term(data):
    tr = _trainer(data, _cfg("pretrain"))
    with torch.no_grad():
        next(tr.sem_net.parameters()).fill_(float("nan"))
    with pytest.raises(DivergenceError) as exc:
        tr.training_step()
    assert exc.value.term == "con_source"


def test_phase_runs_write_logs_and_checkpoints(data, small_dataset, pretrained, tmp_path):
    ck = adapt(small_dataset.root, pretrained, _cfg("adapt", iterations=2), tmp_path, data=data)
    lines = (tmp_path / "adapt_log.jsonl").read_text().splitlines()
    assert [json.loads(line)["iter"] for line in lines] == [1, 2]
    assert json.loads(lines[0])["phase"] == "adapt"
    net = depth_net_from_checkpoint(ck)
    assert not net.training


def test_mismatched_network_config_rejected(data, pretrained):
    with pytest.raises(ConfigError):
        _trainer(data, _cfg("adapt", networks=NetworkConfig(depth_width=8, translator_width=4,
                                                            translator_blocks=1, disc_width=4)),
                 checkpoint=pretrained)
