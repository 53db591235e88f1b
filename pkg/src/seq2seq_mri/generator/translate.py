"""Whole-image inference: any available sequence to any requested target."""
from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from ..errors import ShapeError
from ..volume_io import Series4D, Volume, extract_25d_slab, frames_of
from .model import Seq2SeqGenerator


def _check_index(generator: Seq2SeqGenerator, index: int, what: str):
    if not isinstance(index, (int, np.integer)) or not 0 <= index < generator.n_sequences:
        raise ValueError(f"unknown {what} sequence {index!r}; model knows 0..{generator.n_sequences - 1}")


def image_to_tensor(x, in_channels: int) -> torch.Tensor:
    """Volume/Series4D -> (K, T, C, H, W) with one row per axial position.

    3D data is cut into 2.5D slabs when the model takes 3 channels and into
    single slices otherwise. 2D data gives ``K = 1``.
    """
    frames = frames_of(x)
    rows = []
    for f in frames:
        d = np.asarray(f.data, dtype=np.float32)
        if d.ndim == 2:
            rows.append(np.repeat(d[None, None], in_channels, axis=1))
        elif in_channels == 3:
            rows.append(np.stack([extract_25d_slab(d, k) for k in range(d.shape[0])]))
        elif in_channels == 1:
            rows.append(d[:, None])
        else:
            raise ShapeError(f"cannot feed 3D data to a {in_channels}-channel model")
    return torch.from_numpy(np.stack(rows, axis=1))


def _pad4(x: torch.Tensor):
    h, w = x.shape[-2:]
    ph, pw = (-h) % 4, (-w) % 4
    if ph or pw:
        lead = x.shape[:-3]
        x = F.pad(x.flatten(0, -4), (0, pw, 0, ph), mode="replicate").unflatten(0, lead)
    return x, (h, w)


@torch.no_grad()
def translate_tensor(generator: Seq2SeqGenerator, x: torch.Tensor, target: int,
                     t_out: int = 1, chunk: int = 16) -> torch.Tensor:
    """(K, T, C, H, W) in [0, 1] -> (K, t_out, C_out, H, W), arbitrary H, W."""
    p = next(generator.parameters())
    x, (h, w) = _pad4(x.to(p.dtype))
    out = [generator(x[k:k + chunk].to(p.device), target, t_out).cpu()
           for k in range(0, x.shape[0], chunk)]
    return torch.cat(out)[..., :h, :w].clamp(0, 1)


def translate(generator: Seq2SeqGenerator, x, source: int, target: int,
              t_out: int = 1, chunk: int = 16):
    """Synthesize sequence ``target`` from image ``x`` of sequence ``source``.

    Returns a Volume for ``t_out == 1`` and a Series4D otherwise, on the
    grid of ``x``.
    """
    _check_index(generator, source, "source")
    _check_index(generator, target, "target")
    if t_out < 1:
        raise ValueError("t_out must be >= 1")
    was_training = generator.training
    generator.eval()
    try:
        y = translate_tensor(generator, image_to_tensor(x, generator.cfg.in_channels),
                             target, t_out, chunk)
    finally:
        generator.train(was_training)
    # centre channel of a slab (or the only channel)
    y = y[:, :, y.shape[2] // 2].numpy()  # (K, t_out, H, W)
    ref = frames_of(x)[0]
    vols = []
    for t in range(t_out):
        data = y[0, t] if ref.ndim == 2 else y[:, t]
        vols.append(Volume(np.ascontiguousarray(data), ref.spacing))
    if t_out == 1:
        return vols[0]
    return Series4D(tuple(vols), x.axis_meaning if isinstance(x, Series4D) else "timepoint")
