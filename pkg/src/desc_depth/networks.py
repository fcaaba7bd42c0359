"""Depth U-Nets, the source-to-target translator and the patch discriminator."""
from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

DEPTH_MIN = 0.1
DEPTH_MAX = 80.0
CHECKPOINT_FORMAT = "desc-depth-checkpoint/1"


class CheckpointError(Exception):
    pass


def _conv_block(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1), nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1), nn.ReLU(inplace=True),
    )


class UNet(nn.Module):
    """Encoder-decoder with skips and sigmoid heads at 1, 1/2, 1/4 and 1/8 scale."""

    n_scales = 4

    def __init__(self, in_channels: int = 3, base_width: int = 32, n_down: int = 4):
        super().__init__()
        if n_down < self.n_scales - 1:
            raise ValueError("need at least 3 downsamplings for 4 output scales")
        widths = [base_width * 2 ** k for k in range(n_down + 1)]
        self.in_channels = in_channels
        self.n_down = n_down
        self.encoders = nn.ModuleList(
            [_conv_block(in_channels, widths[0])]
            + [_conv_block(widths[k], widths[k + 1]) for k in range(n_down)])
        self.decoders = nn.ModuleList(
            [_conv_block(widths[k + 1] + widths[k], widths[k]) for k in reversed(range(n_down))])
        self.heads = nn.ModuleList(
            [nn.Conv2d(widths[k], 1, 3, padding=1) for k in reversed(range(self.n_scales))])

    @property
    def divisor(self) -> int:
        return 2 ** self.n_down

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        """Sigmoid maps ordered full resolution first."""
        check_input_size(x, self.divisor, self.in_channels)
        feats = []
        h = x - 0.5
        for k, enc in enumerate(self.encoders):
            h = enc(h if k == 0 else F.max_pool2d(h, 2))
            feats.append(h)
        outputs = []
        n_dec = len(self.decoders)
        for j, (dec, skip) in enumerate(zip(self.decoders, reversed(feats[:-1]))):
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = dec(torch.cat([h, skip], dim=1))
            level = n_dec - 1 - j  # 0 = full resolution
            if level < self.n_scales:
                outputs.append(torch.sigmoid(self.heads[self.n_scales - 1 - level](h)))
        return outputs[::-1]


class DepthNet(UNet):
    def __init__(self, base_width: int = 32, n_down: int = 4):
        super().__init__(3, base_width, n_down)


class SemanticDepthNet(UNet):
    def __init__(self, base_width: int = 32, n_down: int = 4):
        super().__init__(2, base_width, n_down)


def check_input_size(x: torch.Tensor, divisor: int, channels: int) -> None:
    if x.dim() != 4 or x.shape[1] != channels:
        raise ValueError(f"expected input (B, {channels}, H, W), got {tuple(x.shape)}")
    h, w = x.shape[-2:]
    if h % divisor or w % divisor:
        raise ValueError(f"input size {h}x{w} is not divisible by {divisor}")


def sigmoid_to_depth(s: torch.Tensor) -> torch.Tensor:
    return DEPTH_MIN + s * (DEPTH_MAX - DEPTH_MIN)


def forward_depth(net: UNet, x: torch.Tensor) -> list[torch.Tensor]:
    """Multiscale metric depth in meters, shape (B, 1, h, w) each, full resolution first."""
    return [sigmoid_to_depth(s) for s in net(x)]


class _ResBlock(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.ReflectionPad2d(1), nn.Conv2d(ch, ch, 3), nn.InstanceNorm2d(ch), nn.ReLU(inplace=True),
            nn.ReflectionPad2d(1), nn.Conv2d(ch, ch, 3), nn.InstanceNorm2d(ch))

    def forward(self, x):
        return x + self.body(x)


class TranslatorNet(nn.Module):
    """ResNet-style image-to-image generator, [0,1] RGB in and out."""

    def __init__(self, base_width: int = 16, n_blocks: int = 3):
        super().__init__()
        b = base_width
        layers = [nn.ReflectionPad2d(3), nn.Conv2d(3, b, 7), nn.InstanceNorm2d(b), nn.ReLU(inplace=True),
                  nn.Conv2d(b, 2 * b, 3, stride=2, padding=1), nn.InstanceNorm2d(2 * b), nn.ReLU(inplace=True),
                  nn.Conv2d(2 * b, 4 * b, 3, stride=2, padding=1), nn.InstanceNorm2d(4 * b),
                  nn.ReLU(inplace=True)]
        layers += [_ResBlock(4 * b) for _ in range(n_blocks)]
        layers += [nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(4 * b, 2 * b, 3, padding=1),
                   nn.InstanceNorm2d(2 * b), nn.ReLU(inplace=True),
                   nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(2 * b, b, 3, padding=1),
                   nn.InstanceNorm2d(b), nn.ReLU(inplace=True),
                   nn.ReflectionPad2d(3), nn.Conv2d(b, 3, 7)]
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        check_input_size(x, 4, 3)
        return 0.5 * (torch.tanh(self.net(x - 0.5)) + 1.0)


def translate(net: TranslatorNet, image: torch.Tensor) -> torch.Tensor:
    return net(image)


class DiscriminatorNet(nn.Module):
    """Patch discriminator; the score map is 1/8 of the input size, no output activation."""

    def __init__(self, base_width: int = 32):
        super().__init__()
        b = base_width
        self.net = nn.Sequential(
            nn.Conv2d(3, b, 4, stride=2, padding=1), nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(b, 2 * b, 4, stride=2, padding=1), nn.InstanceNorm2d(2 * b), nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(2 * b, 4 * b, 4, stride=2, padding=1), nn.InstanceNorm2d(4 * b),
            nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(4 * b, 1, 3, padding=1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        check_input_size(x, 8, 3)
        return self.net(x - 0.5)


def discriminate(net: DiscriminatorNet, image: torch.Tensor) -> torch.Tensor:
    return net(image)


def parameter_count(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


def parameter_report(nets: dict[str, nn.Module]) -> dict[str, int]:
    return {name: parameter_count(net) for name, net in nets.items()}


def freeze(net: nn.Module) -> None:
    for p in net.parameters():
        p.requires_grad_(False)
    net.eval()


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(path, *, networks: dict, optimizers: dict, phi: float, iteration: int,
                    config: dict, rng_state: dict, extra: dict | None = None) -> Path:
    """Write every parameter, optimizer state and RNG state to one archive, atomically."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "networks": {k: v.state_dict() for k, v in networks.items()},
        "optimizers": {k: v.state_dict() for k, v in optimizers.items()},
        "phi": float(phi),
        "iteration": int(iteration),
        "config": config,
        "config_hash": config_hash(config),
        "rng_state": rng_state,
        "extra": extra or {},
    }
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".ckpt.tmp")
    os.close(fd)
    try:
        torch.save(payload, tmp)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise
    return path


def load_checkpoint(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} not found")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a {CHECKPOINT_FORMAT} checkpoint")
    return payload
