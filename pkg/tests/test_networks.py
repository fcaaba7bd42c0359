import pytest
import torch

from desc_depth.networks import (CheckpointError, DepthNet, DiscriminatorNet, SemanticDepthNet, TranslatorNet,
                                 UNet, discriminate, forward_depth, load_checkpoint, parameter_report,
                                 save_checkpoint, sigmoid_to_depth, translate)


def test_depth_mapping_endpoints():
    assert sigmoid_to_depth(torch.zeros(1)).item() == pytest.approx(0.1)
    assert sigmoid_to_depth(torch.ones(1)).item() == pytest.approx(80.0)


@pytest.mark.parametrize("net_cls,ch", [(DepthNet, 3), (SemanticDepthNet, 2)])
def test_multiscale_output_shapes(net_cls, ch):
    torch.manual_seed(0)
    net = net_cls(base_width=4)
    outs = forward_depth(net, torch.rand(2, ch, 64, 192))
    assert [tuple(o.shape) for o in outs] == [(2, 1, 64, 192), (2, 1, 32, 96), (2, 1, 16, 48), (2, 1, 8, 24)]
    for o in outs:
        assert (o >= 0.1).all() and (o <= 80).all()
    for s in net(torch.rand(1, ch, 32, 32)):
        assert (s > 0).all() and (s < 1).all()


def test_bad_input_size_rejected_before_compute():
    net = DepthNet(base_width=4)
    with pytest.raises(ValueError, match="divisible"):
        net(torch.rand(1, 3, 40, 64))
    with pytest.raises(ValueError):
        net(torch.rand(1, 2, 64, 64))


def test_inference_is_deterministic():
    torch.manual_seed(1)
    net = DepthNet(base_width=4).eval()
    x = torch.rand(1, 3, 32, 64)
    assert all(torch.equal(a, b) for a, b in zip(net(x), net(x)))


def test_translator_shape_range_and_seed_determinism():
    x = torch.rand(2, 3, 32, 48)
    torch.manual_seed(3)
    a = translate(TranslatorNet(8, 2), x)
    torch.manual_seed(3)
    b = translate(TranslatorNet(8, 2), x)
    assert a.shape == x.shape and torch.equal(a, b)
    assert (a >= 0).all() and (a <= 1).all()


def test_discriminator_patch_size():
    torch.manual_seed(0)
    d = DiscriminatorNet(8)
    for h, w in ((64, 192), (32, 32)):
        assert tuple(discriminate(d, torch.rand(1, 3, h, w)).shape) == (1, 1, h // 8, w // 8)


def test_parameter_report_is_stable():
    def report():
        return parameter_report({"d": DepthNet(8), "s": SemanticDepthNet(8), "t": TranslatorNet(8, 2),
                                 "disc": DiscriminatorNet(8)})
    assert report() == report()
    assert report()["d"] > report()["s"]  # one extra input channel in the first conv


@pytest.mark.parametrize("make,ch", [(lambda: DepthNet(4), 3), (lambda: SemanticDepthNet(4), 2),
                                     (lambda: TranslatorNet(4, 2), 3), (lambda: DiscriminatorNet(4), 3)])
def test_all_parameters_receive_finite_gradients(make, ch):
    torch.manual_seed(0)
    net = make()
    out = net(torch.rand(2, ch, 32, 32))
    loss = sum(o.mean() for o in out) if isinstance(out, list) else out.mean()
    loss.backward()
    for name, p in net.named_parameters():
        assert p.grad is not None, name
        assert torch.isfinite(p.grad).all(), name
        assert p.grad.abs().sum() > 0, name


def test_unet_requires_enough_downsamplings():
    with pytest.raises(ValueError):
        UNet(3, 4, n_down=2)


def test_checkpoint_roundtrip(tmp_path):
    torch.manual_seed(0)
    net = DepthNet(4)
    opt = torch.optim.Adam(net.parameters())
    path = save_checkpoint(tmp_path / "c.ckpt", networks={"depth": net}, optimizers={"depth": opt}, phi=1.5,
                           iteration=7, config={"a": 1}, rng_state={"x": 1})
    ck = load_checkpoint(path)
    assert ck["iteration"] == 7 and ck["phi"] == 1.5 and len(ck["config_hash"]) == 16
    fresh = DepthNet(4)
    fresh.load_state_dict(ck["networks"]["depth"])
    assert all(torch.equal(a, b) for a, b in zip(fresh.state_dict().values(), net.state_dict().values()))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.ckpt")
    torch.save({"format": "other"}, tmp_path / "bad.ckpt")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad.ckpt")
