"""Code-conditioned convolution.

The kernel of a :class:`HyperConv` layer is not a free parameter. It is
produced on the fly by contracting a trainable weight bank of shape
``(*kshape, c_w)`` with an embedding ``f = mlp(s)`` of the one-hot target
sequence code ``s``. Shared structure between target sequences lives in
the bank; the code only chooses a mixture.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import ShapeError


@dataclass(frozen=True)
class HyperConvSpec:
    kshape: tuple[int, int, int, int]  # (out, in, kh, kw)
    code_dim: int
    bank_dim: int
    bias: bool = False

    def __post_init__(self):
        if len(self.kshape) != 4 or min(self.kshape) < 1:
            raise ShapeError(f"kshape must be 4 positive ints, got {self.kshape}")
        if self.code_dim < 1 or self.bank_dim < 1:
            raise ShapeError("code_dim and bank_dim must be >= 1")


def hyperconv_param_count(spec: HyperConvSpec) -> tuple[int, int, int]:
    """Return ``(bank_params, mlp_params, total)`` for one layer."""
    bank = math.prod(spec.kshape) * spec.bank_dim
    mlp = (spec.code_dim + 1) * spec.bank_dim
    total = bank + mlp + (spec.kshape[0] if spec.bias else 0)
    return bank, mlp, total


def pad2d(x: torch.Tensor, p: int, mode: str) -> torch.Tensor:
    """Pad H and W by ``p``; reflection falls back to edge replication on
    maps too small to reflect (a 1-pixel-wide latent)."""
    if mode == "reflect" and min(x.shape[-2:]) <= p:
        mode = "replicate"
    return F.pad(x, (p, p, p, p), mode=mode)


def one_hot(index: int, n: int, dtype=torch.float32, device=None) -> torch.Tensor:
    if not 0 <= index < n:
        raise ValueError(f"sequence index {index} outside [0, {n})")
    code = torch.zeros(n, dtype=dtype, device=device)
    code[index] = 1.0
    return code


class HyperConv(nn.Module):
    def __init__(
        self,
        code_dim: int,
        in_channels: int,
        out_channels: int,
        kernel_size: int = 3,
        stride: int = 1,
        padding: int | None = None,
        bias: bool = True,
        bank_dim: int = 64,
        padding_mode: str = "zeros",
    ):
        super().__init__()
        self.spec = HyperConvSpec(
            (out_channels, in_channels, kernel_size, kernel_size), code_dim, bank_dim, bias
        )
        self.stride = stride
        self.padding = (kernel_size - 1) // 2 if padding is None else padding
        self.padding_mode = padding_mode
        self.mlp = nn.Linear(code_dim, bank_dim)
        self.bank = nn.Parameter(torch.empty(*self.spec.kshape, bank_dim))
        # E|f|^2 = 1 for a one-hot code, so the contracted kernel is He-scaled
        nn.init.normal_(self.mlp.weight, std=math.sqrt(0.5 / bank_dim))
        nn.init.normal_(self.mlp.bias, std=math.sqrt(0.5 / bank_dim))
        fan_in = in_channels * kernel_size * kernel_size
        nn.init.normal_(self.bank, std=math.sqrt(2.0 / fan_in))
        if bias:
            self.bias = nn.Parameter(torch.zeros(out_channels))
        else:
            self.register_parameter("bias", None)

    @property
    def kshape(self):
        return self.spec.kshape

    def embed(self, s: torch.Tensor) -> torch.Tensor:
        if s.shape[-1] != self.spec.code_dim:
            raise ShapeError(f"code length {s.shape[-1]} != code_dim {self.spec.code_dim}")
        return self.mlp(s)

    def kernel_from_embedding(self, f: torch.Tensor) -> torch.Tensor:
        """Contract the bank with ``f`` over its last axis.

        ``f`` of shape ``(c_w,)`` gives one kernel of shape ``kshape``;
        ``(B, c_w)`` gives ``B`` kernels stacked on a leading axis.
        """
        if f.dim() == 1:
            return torch.matmul(self.bank, f)
        return torch.einsum("oihwc,bc->boihw", self.bank, f)

    def kernel(self, s: torch.Tensor) -> torch.Tensor:
        return self.kernel_from_embedding(self.embed(s))

    def _pad(self, x):
        if self.padding and self.padding_mode != "zeros":
            return pad2d(x, self.padding, self.padding_mode), 0
        return x, self.padding

    def forward(self, x: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
        """Convolve ``x`` (B, C, H, W) with the kernel selected by code ``s``.

        ``s`` is either a single code ``(c_s,)`` shared by the batch or one
        code per sample ``(B, c_s)``.
        """
        if x.dim() != 4 or x.shape[1] != self.kshape[1]:
            raise ShapeError(f"expected (B, {self.kshape[1]}, H, W) input, got {tuple(x.shape)}")
        x, pad = self._pad(x)
        if s.dim() == 1:
            return F.conv2d(x, self.kernel(s), self.bias, self.stride, pad)
        b = x.shape[0]
        if s.shape[0] != b:
            raise ShapeError(f"{s.shape[0]} codes for a batch of {b}")
        # one kernel per sample through a grouped convolution
        k = self.kernel(s).reshape(b * self.kshape[0], *self.kshape[1:])
        y = F.conv2d(x.reshape(1, -1, *x.shape[2:]), k, None, self.stride, pad, groups=b)
        y = y.reshape(b, self.kshape[0], *y.shape[2:])
        if self.bias is not None:
            y = y + self.bias.view(1, -1, 1, 1)
        return y
