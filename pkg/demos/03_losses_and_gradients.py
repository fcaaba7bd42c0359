"""
Loss terms and their gradients
==============================

Each loss term is checked against central finite differences in double
precision. Test points near an L1 kink are nudged away first, since the
derivative is undefined there.
"""
import torch

from desc_depth.height_prior import instance_loss_target
from desc_depth.losses import LossWeights, consistency_target, smoothness_loss, total_loss

torch.manual_seed(0)
D = torch.float64


def fd_check(fn, *tensors, eps=1e-6):
    leaves = [t.clone().requires_grad_(True) for t in tensors]
    grads = torch.autograd.grad(fn(*leaves), leaves)
    worst = 0.0
    with torch.no_grad():
        for t, g in zip(tensors, grads):
            flat = t.view(-1)
            for i in range(flat.numel()):
                v = flat[i].item()
                flat[i] = v + eps
                up = fn(*tensors).item()
                flat[i] = v - eps
                down = fn(*tensors).item()
                flat[i] = v
                num = (up - down) / (2 * eps)
                worst = max(worst, abs(num - g.view(-1)[i].item()) / max(abs(num), 1e-8))
    return worst


a, b = torch.rand(1, 6, 6, dtype=D), torch.rand(1, 6, 6, dtype=D) + 1.0
image = torch.rand(1, 3, 6, 6, dtype=D)
print("consistency  max rel err", fd_check(consistency_target, a, b))
print("smoothness   max rel err", fd_check(lambda d: smoothness_loss(d, image), b))

masks = torch.rand(2, 6, 6) > 0.5
pseudo = torch.tensor([7.0, 12.0], dtype=D)
pred = torch.rand(6, 6, dtype=D) * 10 + 1
phi = torch.tensor(1.3, dtype=D)
f = lambda p, s: instance_loss_target(pseudo, masks, p, s)  # noqa: E731
print("instance     max rel err", fd_check(f, pred, phi))

# The instance term is homogeneous: scaling pseudo-depth and phi together scales the loss
base = instance_loss_target(pseudo, masks, pred, phi)
for c in (0.5, 2.0, 3.0):
    ratio = instance_loss_target(c * pseudo, masks, pred, c * phi) / base
    print(f"c={c}: L(cD, c phi) / L(D, phi) = {ratio.item():.15f}")

# Weighted total with every part equal to one
parts = dict.fromkeys(("depth", "con_source", "ins_source", "con_target", "ins_target", "smooth", "identity",
                       "gan_gen"), 1.0)
print("total with unit parts:", total_loss(parts, LossWeights()))
