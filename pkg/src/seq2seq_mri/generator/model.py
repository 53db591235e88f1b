"""Seq2Seq generator: shared Encoder, ConvLSTM 4D fusion/expansion and a
code-conditioned HyperDecoder.

Tensors entering :meth:`Seq2SeqGenerator.forward` are laid out as
``(batch, frames, channels, H, W)``; a 3D sequence is the one-frame case.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import ConfigError, ShapeError
from .convlstm import ConvLSTM
from .hyperconv import HyperConv, one_hot, pad2d


@dataclass
class GeneratorConfig:
    n_sequences: int = 4
    in_channels: int = 3  # 2.5D slab
    out_channels: int = 3
    base_channels: int = 32
    latent_channels: int = 64
    n_residual_blocks: int = 6
    n_hyper_residual_blocks: int = 6
    n_hyperconv_tail: int = 3
    convlstm_hidden_channels: int | None = None  # None -> latent_channels
    bank_dim: int = 64
    downsample_factor: int = 4

    def __post_init__(self):
        if self.downsample_factor != 4:
            raise ConfigError("the encoder downsamples by exactly 4")
        if self.n_hyperconv_tail != 3:
            raise ConfigError("the decoder tail has exactly three HyperConv layers")
        for name in ("n_sequences", "in_channels", "out_channels", "base_channels",
                     "latent_channels", "bank_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.n_residual_blocks < 0 or self.n_hyper_residual_blocks < 0:
            raise ConfigError("block counts must be non-negative")

    @property
    def hidden_channels(self) -> int:
        return self.convlstm_hidden_channels or self.latent_channels

    def to_dict(self) -> dict:
        return asdict(self)


def instance_norm(x: torch.Tensor) -> torch.Tensor:
    if x.shape[-1] * x.shape[-2] == 1:
        # a single pixel normalizes to zero; torch refuses this case
        return x - x
    return F.instance_norm(x)


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3)
        self.conv2 = nn.Conv2d(channels, channels, 3)

    def forward(self, x):
        y = F.relu(instance_norm(self.conv1(pad2d(x, 1, "reflect"))))
        return x + instance_norm(self.conv2(pad2d(y, 1, "reflect")))


class HyperResidualBlock(nn.Module):
    def __init__(self, channels: int, code_dim: int, bank_dim: int):
        super().__init__()
        self.conv1 = HyperConv(code_dim, channels, channels, 3, bank_dim=bank_dim,
                               padding_mode="reflect")
        self.conv2 = HyperConv(code_dim, channels, channels, 3, bank_dim=bank_dim,
                               padding_mode="reflect")

    def forward(self, x, s):
        y = F.relu(instance_norm(self.conv1(x, s)))
        return x + instance_norm(self.conv2(y, s))


class Encoder(nn.Module):
    """Two stride-2 convolutions (x4 downsampling) then residual blocks."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.down1 = nn.Conv2d(cfg.in_channels, cfg.base_channels, 3, stride=2, padding=1)
        self.down2 = nn.Conv2d(cfg.base_channels, cfg.latent_channels, 3, stride=2, padding=1)
        self.blocks = nn.ModuleList(ResidualBlock(cfg.latent_channels)
                                    for _ in range(cfg.n_residual_blocks))

    def forward(self, x):
        x = F.relu(instance_norm(self.down1(x)))
        x = F.relu(instance_norm(self.down2(x)))
        for block in self.blocks:
            x = block(x)
        return x


class HyperDecoder(nn.Module):
    """Hyper-residual blocks then three HyperConv layers, the last two each
    preceded by a nearest-neighbour x2 upsample. Every convolution is
    conditioned on the target sequence code."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        c, s, w = cfg.hidden_channels, cfg.n_sequences, cfg.bank_dim
        self.blocks = nn.ModuleList(HyperResidualBlock(c, s, w)
                                    for _ in range(cfg.n_hyper_residual_blocks))
        self.tail1 = HyperConv(s, c, c, 3, bank_dim=w)
        self.tail2 = HyperConv(s, c, cfg.base_channels, 3, bank_dim=w)
        self.tail3 = HyperConv(s, cfg.base_channels, cfg.out_channels, 3, bank_dim=w)

    def forward(self, z, s):
        for block in self.blocks:
            z = block(z, s)
        z = F.relu(instance_norm(self.tail1(z, s)))
        z = F.interpolate(z, scale_factor=2, mode="nearest")
        z = F.relu(instance_norm(self.tail2(z, s)))
        z = F.interpolate(z, scale_factor=2, mode="nearest")
        return torch.sigmoid(self.tail3(z, s))


class Seq2SeqGenerator(nn.Module):
    def __init__(self, cfg: GeneratorConfig | None = None):
        super().__init__()
        self.cfg = cfg or GeneratorConfig()
        self.encoder = Encoder(self.cfg)
        self.fuse_lstm = ConvLSTM(self.cfg.latent_channels, self.cfg.hidden_channels)
        self.expand_lstm = ConvLSTM(self.cfg.hidden_channels, self.cfg.hidden_channels)
        self.decoder = HyperDecoder(self.cfg)

    @property
    def n_sequences(self) -> int:
        return self.cfg.n_sequences

    def code(self, index: int) -> torch.Tensor:
        p = next(self.parameters())
        return one_hot(index, self.cfg.n_sequences, dtype=p.dtype, device=p.device)

    def _as_code(self, target) -> torch.Tensor:
        if isinstance(target, int):
            return self.code(target)
        code = target.to(next(self.parameters()).dtype)
        if code.shape[-1] != self.cfg.n_sequences:
            raise ValueError(f"code length {code.shape[-1]} != {self.cfg.n_sequences} sequences")
        return code

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        """(B, C, H, W) -> latent (B, C', H/4, W/4)."""
        if x.dim() != 4 or x.shape[1] != self.cfg.in_channels:
            raise ShapeError(f"expected (B, {self.cfg.in_channels}, H, W), got {tuple(x.shape)}")
        if x.shape[-1] % 4 or x.shape[-2] % 4:
            raise ShapeError(f"spatial dims {tuple(x.shape[-2:])} must be divisible by 4")
        return self.encoder(x)

    def fuse_4d(self, features) -> torch.Tensor:
        """ConvLSTM over the frame order, then the mean of its hidden outputs."""
        frames = list(features.unbind(1)) if torch.is_tensor(features) else list(features)
        if not frames:
            raise ShapeError("fuse_4d needs at least one frame")
        if any(f.shape != frames[0].shape for f in frames):
            raise ShapeError("all frames must share one feature shape")
        return torch.stack(self.fuse_lstm(frames), 0).mean(0)

    def expand_4d(self, fused: torch.Tensor, t: int) -> list[torch.Tensor]:
        """Copy ``fused`` ``t`` times and let the ConvLSTM disentangle frames."""
        if t < 1:
            raise ValueError(f"frame count must be >= 1, got {t}")
        return self.expand_lstm([fused] * t)

    def decode(self, features: torch.Tensor, target) -> torch.Tensor:
        return self.decoder(features, self._as_code(target))

    def encode_sequence(self, x: torch.Tensor) -> torch.Tensor:
        """(B, T, C, H, W) -> fused latent; frames share encoder weights."""
        if x.dim() != 5:
            raise ShapeError(f"expected (B, T, C, H, W), got {tuple(x.shape)}")
        b, t = x.shape[:2]
        z = self.encode(x.flatten(0, 1))
        return self.fuse_4d(z.unflatten(0, (b, t)))

    def decode_sequence(self, fused: torch.Tensor, target, t_out: int = 1) -> torch.Tensor:
        """Fused latent -> (B, t_out, C_out, H, W); frames share decoder weights."""
        frames = self.expand_4d(fused, t_out)
        b = fused.shape[0]
        y = self.decode(torch.cat(frames, 0), target if not _batched(target) else
                        target.repeat(t_out, 1))
        return y.unflatten(0, (t_out, b)).transpose(0, 1)

    def forward(self, x: torch.Tensor, target, t_out: int = 1) -> torch.Tensor:
        return self.decode_sequence(self.encode_sequence(x), target, t_out)


def _batched(target) -> bool:
    return torch.is_tensor(target) and target.dim() == 2


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
