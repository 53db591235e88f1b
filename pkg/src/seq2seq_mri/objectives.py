"""Training objectives and per-sequence patch discriminators.

* supervised reconstruction: ``lambda_r * L1 + lambda_p * perceptual``
* least-squares adversarial terms against one discriminator per sequence
* cycle consistency ``|G(E(G(E(x_i)|s_j))|s_i) - x_i|_1``
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError

VGG19_URL = "https://download.pytorch.org/models/vgg19-dcbb9e9d.pth"
VGG19_FILE = "vgg19-dcbb9e9d.pth"
# conv widths of the first eight VGG19 conv layers, with pooling after conv 2 and 4
_VGG_PLAN = (64, 64, "M", 128, 128, "M", 256, 256, 256, 256)
_TAPS = (2, 4, 8)  # features after these conv layers (1-based, post-ReLU)


@dataclass
class LossWeights:
    lambda_r: float = 10.0
    lambda_p: float = 0.01
    lambda_adv: float = 1.0
    lambda_cyc: float = 10.0
    adversarial: bool = False
    cycle: bool = False

    def __post_init__(self):
        for k in ("lambda_r", "lambda_p", "lambda_adv", "lambda_cyc"):
            if getattr(self, k) < 0:
                raise ConfigError(f"{k} must be non-negative")

    def to_dict(self):
        return asdict(self)


def _check_same(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


# ---------------------------------------------------------------- features

class FeatureExtractor(nn.Module):
    """Frozen VGG-style trunk returning activations after conv 2, 4 and 8.

    ``backend="vgg19"`` loads ImageNet VGG19 weights from ``weights`` or
    the torch hub cache. ``backend="random"`` builds the same topology with
    widths scaled by ``width`` and a fixed seeded He initialisation, for
    machines without the pretrained file.
    """

    def __init__(self, backend: str = "vgg19", weights=None, width: float = 0.25, seed: int = 0):
        super().__init__()
        self.backend = backend
        if backend == "vgg19":
            layers = _make_trunk(1.0)
            self._load_vgg19(layers, weights)
        elif backend == "random":
            layers = _make_trunk(width)
            gen = torch.Generator().manual_seed(seed)
            for m in layers:
                if isinstance(m, nn.Conv2d):
                    fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
                    with torch.no_grad():
                        m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * math.sqrt(2 / fan_in))
                        m.bias.zero_()
        else:
            raise ConfigError(f"unknown feature backend {backend!r}; use 'vgg19' or 'random'")
        self.layers = layers
        self.register_buffer("mean", torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1))
        self.requires_grad_(False)
        self.eval()

    @staticmethod
    def _load_vgg19(layers, weights):
        path = Path(weights) if weights else Path(torch.hub.get_dir()) / "checkpoints" / VGG19_FILE
        if not path.is_file():
            raise ConfigError(
                f"VGG19 weights not found at {path}. Download {VGG19_URL} to that path, "
                "pass loss.perceptual_weights, or set loss.perceptual_backend = 'random'."
            )
        state = torch.load(path, map_location="cpu", weights_only=True)
        convs = [m for m in layers if isinstance(m, nn.Conv2d)]
        keys = sorted({k.rsplit(".", 1)[0] for k in state if k.startswith("features.")},
                      key=lambda k: int(k.split(".")[1]))
        for conv, key in zip(convs, keys):
            conv.weight.data.copy_(state[key + ".weight"])
            conv.bias.data.copy_(state[key + ".bias"])

    def train(self, mode: bool = True):
        return super().train(False)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        if x.shape[1] == 1:
            x = x.expand(-1, 3, -1, -1)
        elif x.shape[1] != 3:
            raise ShapeError(f"feature extractor takes 1 or 3 channels, got {x.shape[1]}")
        x = (x - self.mean) / self.std
        feats, n_conv = [], 0
        for m in self.layers:
            x = m(x)
            if isinstance(m, nn.ReLU):
                n_conv += 1
                if n_conv in _TAPS:
                    feats.append(x)
        return feats


def _make_trunk(width: float) -> nn.Sequential:
    layers, c_in = [], 3
    for v in _VGG_PLAN:
        if v == "M":
            layers.append(nn.MaxPool2d(2))
            continue
        c = max(1, int(round(v * width)))
        layers += [nn.Conv2d(c_in, c, 3, padding=1), nn.ReLU()]
        c_in = c
    return nn.Sequential(*layers)


def perceptual_loss(pred: torch.Tensor, target: torch.Tensor, extractor: FeatureExtractor) -> torch.Tensor:
    """Mean absolute feature difference, equally weighted over the taps."""
    _check_same(pred, target)
    pred, target = _as_images(pred), _as_images(target)
    fp = extractor(pred)
    with torch.no_grad():
        ft = extractor(target)
    return sum((a - b).abs().mean() for a, b in zip(fp, ft)) / len(fp)


def _as_images(x: torch.Tensor) -> torch.Tensor:
    # (B, T, C, H, W) -> (B*T, C, H, W)
    return x.flatten(0, 1) if x.dim() == 5 else x


# ---------------------------------------------------------------- losses

def reconstruction_loss(pred, target, w: LossWeights = LossWeights(), extractor=None) -> torch.Tensor:
    _check_same(pred, target)
    loss = w.lambda_r * (pred - target).abs().mean()
    if w.lambda_p > 0:
        if extractor is None:
            raise ConfigError("lambda_p > 0 needs a perceptual feature extractor")
        loss = loss + w.lambda_p * perceptual_loss(pred, target, extractor)
    return loss


def cycle_loss(x, x_cycled) -> torch.Tensor:
    _check_same(x, x_cycled)
    return (x_cycled - x).abs().mean()


def discriminator_loss(D, real, fake) -> torch.Tensor:
    """LSGAN critic loss; ``fake`` is detached from the generator graph."""
    return ((D(_as_images(real)) - 1) ** 2).mean() + (D(_as_images(fake).detach()) ** 2).mean()


def generator_adv_loss(D, fake) -> torch.Tensor:
    return ((D(_as_images(fake)) - 1) ** 2).mean()


def adversarial_losses(real, fake, D) -> tuple[torch.Tensor, torch.Tensor]:
    """Return ``(d_loss, g_loss)`` for one discriminator."""
    return discriminator_loss(D, real, fake), generator_adv_loss(D, fake)


# ---------------------------------------------------------------- discriminators

class PatchDiscriminator(nn.Module):
    """70x70 PatchGAN: three stride-2 and one stride-1 4x4 convs, then a
    one-channel score map."""

    def __init__(self, in_channels: int = 3, base_channels: int = 64):
        super().__init__()
        c = base_channels
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, c, 4, 2, 1), nn.LeakyReLU(0.2),
            nn.Conv2d(c, 2 * c, 4, 2, 1), nn.InstanceNorm2d(2 * c), nn.LeakyReLU(0.2),
            nn.Conv2d(2 * c, 4 * c, 4, 2, 1), nn.InstanceNorm2d(4 * c), nn.LeakyReLU(0.2),
            nn.Conv2d(4 * c, 8 * c, 4, 1, 1), nn.InstanceNorm2d(8 * c), nn.LeakyReLU(0.2),
            nn.Conv2d(8 * c, 1, 4, 1, 1),
        )

    def forward(self, x):
        return self.net(x)


class DiscriminatorBank(nn.ModuleList):
    def __init__(self, n_sequences: int, in_channels: int = 3, base_channels: int = 64):
        super().__init__(PatchDiscriminator(in_channels, base_channels) for _ in range(n_sequences))


def set_requires_grad(module: nn.Module, flag: bool):
    for p in module.parameters():
        p.requires_grad_(flag)
