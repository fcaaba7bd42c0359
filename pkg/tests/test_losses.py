from collections import Counter

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from desc_depth.losses import (TERM_NAMES, LossBreakdown, LossWeights, consistency_source, consistency_target,
                               depth_supervision_loss, discriminator_gan_loss, gan_losses, generator_gan_loss,
                               identity_loss, smoothness_loss, total_loss, weighted_terms)

D = torch.float64


def t(*v):
    return torch.tensor(v, dtype=D)


def test_depth_loss_examples():
    gt = torch.rand(2, 8, 8, dtype=D) + 1
    valid = torch.ones(2, 8, 8, dtype=torch.bool)
    preds = [gt[:, None].clone(), gt[:, None, ::2, ::2].clone()]
    preds[1] = torch.nn.functional.interpolate(gt[:, None], size=(4, 4), mode="bilinear", align_corners=False)
    assert depth_supervision_loss([gt[:, None]] * 4, gt, valid).item() == 0.0
    assert depth_supervision_loss([gt[:, None] + 1], gt, valid).item() == pytest.approx(1.0)
    gt2 = t(5.0, 5.0, 7.0).view(1, 1, 3)
    pred2 = t(6.0, 2.0, 0.0).view(1, 1, 1, 3)
    valid2 = torch.tensor([[[True, True, False]]])
    assert depth_supervision_loss([pred2], gt2, valid2).item() == 2.0


def test_depth_loss_upsamples_coarse_scales():
    gt = torch.full((1, 8, 8), 3.0, dtype=D)
    valid = torch.ones(1, 8, 8, dtype=torch.bool)
    coarse = torch.full((1, 1, 2, 2), 5.0, dtype=D)
    assert depth_supervision_loss([gt[:, None], coarse], gt, valid).item() == pytest.approx(1.0)


def test_depth_loss_empty_mask_counts():
    c = Counter()
    out = depth_supervision_loss([torch.ones(1, 1, 2, 2)], torch.ones(1, 2, 2), torch.zeros(1, 2, 2, dtype=bool), c)
    assert out.item() == 0.0 and c["depth_loss_empty"] == 1


def test_consistency_examples():
    gt = torch.rand(1, 4, 4, dtype=D) + 1
    valid = torch.ones_like(gt, dtype=torch.bool)
    assert consistency_source(gt, gt, valid).item() == 0.0
    assert consistency_source(gt + 0.7, gt, valid).item() == pytest.approx(0.7)
    assert consistency_source(t(2.0, 9.0, 6.0).view(1, 1, 3), t(1.0, 0.0, 3.0).view(1, 1, 3),
                              torch.tensor([[[True, False, True]]])).item() == 2.0
    a, b = torch.rand(2, 5, 5, dtype=D), torch.rand(2, 5, 5, dtype=D)
    assert consistency_target(a, a).item() == 0.0
    assert consistency_target(a, a + 0.5).item() == pytest.approx(0.5)
    assert consistency_target(a, b).item() == consistency_target(b, a).item()
    with pytest.raises(ValueError):
        consistency_target(a, b[:, :4])


def test_consistency_target_trains_both_networks():
    a = torch.rand(1, 3, 3, dtype=D, requires_grad=True)
    b = torch.rand(1, 3, 3, dtype=D, requires_grad=True)
    consistency_target(a, b).backward()
    assert a.grad.abs().sum() > 0 and b.grad.abs().sum() > 0


def test_identity_examples():
    x = torch.rand(1, 3, 4, 4, dtype=D)
    assert identity_loss(x, x).item() == 0.0
    assert identity_loss(x + 0.1, x).item() == pytest.approx(0.1)
    y = torch.rand(1, 3, 4, 4, dtype=D)
    assert identity_loss(x, y).item() == identity_loss(y, x).item()


def test_gan_examples():
    assert generator_gan_loss(torch.ones(1, 1, 2, 2)).item() == 0.0
    assert discriminator_gan_loss(torch.zeros(1, 1, 2, 2), torch.ones(1, 1, 2, 2)).item() == 0.0
    assert generator_gan_loss(torch.full((1, 1, 2, 2), 0.5)).item() == 0.25
    g, d = gan_losses(torch.full((1, 1, 2, 2), 0.5), torch.zeros(1, 1, 2, 2))
    assert g.item() == 0.25 and d.item() == pytest.approx(0.5 * 1 + 0.5 * 0.25)


def test_smoothness_examples():
    img = torch.rand(1, 3, 6, 6, dtype=D)
    assert smoothness_loss(torch.full((1, 6, 6), 4.0, dtype=D), img).item() == 0.0
    depth = t(2.0, 4.0).view(1, 1, 2)
    flat = torch.zeros(1, 3, 1, 2, dtype=D)
    assert smoothness_loss(depth, flat).item() == pytest.approx(2 / 3, rel=1e-14)


def test_smoothness_edge_suppression_limit():
    depth = torch.ones(1, 4, 4, dtype=D)
    depth[..., 2:] = 3.0
    values = []
    for contrast in (0.0, 1.0, 5.0, 20.0):
        img = torch.zeros(1, 3, 4, 4, dtype=D)
        img[..., 2:] = contrast
        values.append(smoothness_loss(depth, img).item())
    assert values == sorted(values, reverse=True)
    assert values[-1] < 1e-8 * values[0]


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), scale=st.floats(0.01, 100.0))
def test_smoothness_scale_invariance(seed, scale):
    g = torch.Generator().manual_seed(seed)
    depth = torch.rand(2, 6, 7, generator=g, dtype=D) + 0.5
    img = torch.rand(2, 3, 6, 7, generator=g, dtype=D)
    a, b = smoothness_loss(depth, img), smoothness_loss(scale * depth, img)
    assert b.item() == pytest.approx(a.item(), rel=1e-12)


def test_total_loss_examples():
    w = LossWeights()
    assert (w.source, w.target, w.smooth, w.identity, w.gan) == (50, 1, 0.01, 100, 1)
    assert total_loss({k: 0.0 for k in TERM_NAMES}, w) == 0.0
    ones = {k: 1.0 for k in TERM_NAMES}
    assert total_loss(ones, w) == pytest.approx(253.01, abs=1e-12)
    pre = LossWeights(target=0.0)
    parts = dict(ones, con_target=123.0, ins_target=456.0)
    assert total_loss(parts, pre) == total_loss(dict(ones, con_target=0, ins_target=0), pre)


def test_total_excludes_discriminator_loss():
    br = LossBreakdown(depth=1.0, gan_disc=1e6)
    assert total_loss(br, LossWeights()) == 50.0


WEIGHT_OF = {"depth": "source", "con_source": "source", "ins_source": "source", "con_target": "target",
             "ins_target": "target", "smooth": "smooth", "identity": "identity", "gan_gen": "gan"}


@pytest.mark.parametrize("name", ["source", "target", "smooth", "identity", "gan"])
def test_total_linear_in_each_weight(name):
    g = torch.Generator().manual_seed(1)
    parts = {k: float(torch.rand(1, generator=g)) for k in TERM_NAMES}
    w = LossWeights()
    w2 = LossWeights(**{**w.__dict__, name: 2 * getattr(w, name)})
    base, doubled = weighted_terms(parts, w), weighted_terms(parts, w2)
    for k in TERM_NAMES:
        assert doubled[k] == (2 * base[k] if WEIGHT_OF[k] == name else base[k])
    touched = sum(base[k] for k in TERM_NAMES if WEIGHT_OF[k] == name)
    assert total_loss(parts, w2) - total_loss(parts, w) == pytest.approx(touched, rel=1e-12)


def test_weights_validate():
    assert LossWeights().validate() == []
    assert len(LossWeights(source=-1, gan=-2).validate()) == 2


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_losses_nonnegative(seed):
    g = torch.Generator().manual_seed(seed)
    a, b = torch.rand(1, 5, 5, generator=g, dtype=D) + 0.1, torch.rand(1, 5, 5, generator=g, dtype=D) + 0.1
    valid = torch.rand(1, 5, 5, generator=g) > 0.3
    valid[0, 0, 0] = True
    img = torch.rand(1, 3, 5, 5, generator=g, dtype=D)
    s = torch.randn(1, 1, 2, 2, generator=g, dtype=D)
    for v in (depth_supervision_loss([a[:, None]], b, valid), consistency_source(a, b, valid),
              consistency_target(a, b), identity_loss(img, img.flip(-1)), smoothness_loss(a, img),
              *gan_losses(s, s.flip(-1))):
        assert v.item() >= 0
