"""Simulated two-sequence toy subjects.

Each subject shows a disc and two letters at identical positions in both
sequences. One letter slot carries the same letter in both images (shared
tissue); the other carries a different letter per image, which is the
information unique to each sequence. Tissues are painted with per-sequence
gray levels, so the same structure has a different intensity in X1 and X2.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ConfigError
from ..volume_io import Volume, save_png, write_manifest
from .font import GLYPH_H, GLYPH_W, LETTERS, glyph_bitmap

N_CLASSES = len(LETTERS)
BACKGROUND, DISC, GLYPH = 0, 1, 2

# per-sequence (low, high) gray-level ranges for background, disc, glyph
DEFAULT_PALETTES = (
    {"background": (0.0, 0.05), "disc": (0.40, 0.50), "glyph": (0.90, 1.00)},
    {"background": (0.0, 0.05), "disc": (0.80, 0.90), "glyph": (0.30, 0.40)},
)


@dataclass(frozen=True)
class ToyConfig:
    size: int = 128
    glyph_scale: int = 4
    margin: int = 4
    radius_range: tuple[int, int] = (28, 44)
    palettes: tuple = DEFAULT_PALETTES

    @property
    def glyph_shape(self):
        return GLYPH_H * self.glyph_scale, GLYPH_W * self.glyph_scale


@dataclass
class ToySubject:
    seed: int
    x1: Volume
    x2: Volume
    label1: int
    label2: int
    shared_label: int
    layout: dict
    intensities: tuple = field(repr=False)

    @property
    def letters(self) -> tuple[str, str]:
        return LETTERS[self.label1], LETTERS[self.label2]


def _boxes_overlap(a, b, gap):
    (ay, ax, ah, aw), (by, bx, bh, bw) = a, b
    return not (ay + ah + gap <= by or by + bh + gap <= ay or
                ax + aw + gap <= bx or bx + bw + gap <= ax)


def _place_slots(rng, cfg: ToyConfig):
    gh, gw = cfg.glyph_shape
    hi_y, hi_x = cfg.size - cfg.margin - gh, cfg.size - cfg.margin - gw
    while True:
        boxes = [(int(rng.integers(cfg.margin, hi_y + 1)), int(rng.integers(cfg.margin, hi_x + 1)), gh, gw)
                 for _ in range(2)]
        if not _boxes_overlap(boxes[0], boxes[1], cfg.margin):
            return boxes


def _glyph_mask(label, box, cfg: ToyConfig) -> np.ndarray:
    y, x, h, w = box
    m = np.zeros((cfg.size, cfg.size), dtype=bool)
    m[y:y + h, x:x + w] = glyph_bitmap(label, cfg.glyph_scale)
    return m


def tissue_map(subject: ToySubject, which: int, cfg: ToyConfig = ToyConfig()) -> np.ndarray:
    """Integer tissue labels (background/disc/glyph) of sequence ``which`` (1 or 2)."""
    lay = subject.layout
    yy, xx = np.mgrid[: cfg.size, : cfg.size]
    cy, cx, r = lay["disc"]
    t = np.full((cfg.size, cfg.size), BACKGROUND, dtype=np.int8)
    t[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = DISC
    diff_label = subject.label1 if which == 1 else subject.label2
    t[_glyph_mask(subject.shared_label, lay["shared_box"], cfg)] = GLYPH
    t[_glyph_mask(diff_label, lay["diff_box"], cfg)] = GLYPH
    return t


def generate_subject(seed: int, cfg: ToyConfig = ToyConfig()) -> ToySubject:
    rng = np.random.default_rng(seed)
    label1 = int(rng.integers(N_CLASSES))
    label2 = int(rng.integers(N_CLASSES - 1))
    label2 += label2 >= label1  # uniform over the 25 other letters
    shared = int(rng.integers(N_CLASSES))
    r = int(rng.integers(cfg.radius_range[0], cfg.radius_range[1] + 1))
    cy, cx = (int(v) for v in rng.integers(r + cfg.margin, cfg.size - r - cfg.margin, size=2))
    boxes = _place_slots(rng, cfg)
    intensities = tuple(
        {k: float(rng.uniform(*rng_range)) for k, rng_range in pal.items()} for pal in cfg.palettes
    )
    layout = {"disc": (cy, cx, r), "shared_box": boxes[0], "diff_box": boxes[1]}
    subj = ToySubject(seed, None, None, label1, label2, shared, layout, intensities)
    images = []
    for which, levels in zip((1, 2), intensities):
        lut = np.array([levels["background"], levels["disc"], levels["glyph"]], dtype=np.float32)
        images.append(Volume(lut[tissue_map(subj, which, cfg)]))
    subj.x1, subj.x2 = images
    return subj


def difference_mask(subject: ToySubject, cfg: ToyConfig = ToyConfig()) -> np.ndarray:
    """Pixels inked by either image's differing letter."""
    box = subject.layout["diff_box"]
    return _glyph_mask(subject.label1, box, cfg) | _glyph_mask(subject.label2, box, cfg)


def subject_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1, np.uint64)[0])


def generate_subjects(n: int, seed: int, cfg: ToyConfig = ToyConfig(), start: int = 0):
    for k in range(start, start + n):
        yield generate_subject(subject_seed(seed, k), cfg)


def split_assignment(n: int, split, seed: int) -> list[str]:
    if len(split) != 3 or sum(split) != n or min(split) < 0:
        raise ConfigError(f"split {tuple(split)} must be three non-negative counts summing to {n}")
    names = ["train"] * split[0] + ["val"] * split[1] + ["test"] * split[2]
    perm = np.random.default_rng(np.random.SeedSequence([seed, 0x5B117])).permutation(n)
    return [names[i] for i in perm]


def generate_dataset(n: int, seed: int, split, out=None, cfg: ToyConfig = ToyConfig()) -> dict:
    """Generate ``n`` subjects, assign splits, and optionally write PNGs + manifest.

    Returns the manifest as a dict. With ``out`` given, images land in
    ``out/images`` and the manifest in ``out/manifest.json``.
    """
    splits = split_assignment(n, split, seed)
    studies = []
    for k, (subj, part) in enumerate(zip(generate_subjects(n, seed, cfg), splits)):
        sid = f"toy{k:06d}"
        entry = {
            "subject_id": sid,
            "split": part,
            "seed": subj.seed,
            "labels": {"label1": subj.label1, "label2": subj.label2},
            "sequences": {
                0: {"path": f"images/{sid}_x1.png", "format": "png_stack", "scale": 1 / 255},
                1: {"path": f"images/{sid}_x2.png", "format": "png_stack", "scale": 1 / 255},
            },
        }
        if out is not None:
            save_png(subj.x1.data, Path(out) / entry["sequences"][0]["path"])
            save_png(subj.x2.data, Path(out) / entry["sequences"][1]["path"])
        studies.append(entry)
    extra = {"normalize": False, "toy": {"seed": seed, "n": n, "split": list(split)}}
    if out is not None:
        path = write_manifest(Path(out) / "manifest.json", studies, 2, ["X1", "X2"], extra)
        from ..volume_io import read_manifest
        return read_manifest(path)
    for s in studies:
        s["availability"] = [True, True]
        s["sequences"] = {str(k): v for k, v in s["sequences"].items()}
    return {"version": 1, "n_sequences": 2, "sequence_names": ["X1", "X2"], "studies": studies, **extra}


def manifest_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
