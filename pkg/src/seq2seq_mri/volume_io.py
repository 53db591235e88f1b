"""Spatial data model and image I/O.

Arrays are stored slice-first: a 3D volume is ``(D, H, W)`` with ``D`` the
axial axis, a 2D image is ``(H, W)``. Model-facing tensors add a leading
channel axis, ``(C, D, H, W)`` or ``(C, H, W)``.
"""
from __future__ import annotations

import json
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Union

import numpy as np

from .errors import DataError, ShapeError

FORMATS = ("nifti", "png_stack", "raw_npy_like")
MANIFEST_VERSION = 1


@dataclass(frozen=True)
class Volume:
    data: np.ndarray
    spacing: tuple[float, ...] | None = None
    intensity_range: tuple[float, float] | None = None

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim not in (2, 3):
            raise ShapeError(f"a Volume is 2D or 3D, got shape {data.shape}")
        if min(data.shape) < 1:
            raise ShapeError(f"empty volume shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise DataError("volume contains NaN or Inf")
        if self.spacing is not None and len(self.spacing) != data.ndim:
            raise ShapeError("spacing must have one entry per axis")
        object.__setattr__(self, "data", data)
        if self.intensity_range is None:
            object.__setattr__(self, "intensity_range", (float(data.min()), float(data.max())))

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def replace(self, data: np.ndarray, keep_range: bool = True) -> "Volume":
        return Volume(data, self.spacing, self.intensity_range if keep_range else None)


@dataclass(frozen=True)
class Series4D:
    frames: tuple[Volume, ...]
    axis_meaning: str = "timepoint"
    labels: tuple = ()

    def __post_init__(self):
        frames = tuple(self.frames)
        object.__setattr__(self, "frames", frames)
        if not frames:
            raise ShapeError("a Series4D needs at least one frame")
        if self.axis_meaning not in ("timepoint", "parameter"):
            raise ValueError(f"axis_meaning must be timepoint or parameter, got {self.axis_meaning}")
        if any(f.shape != frames[0].shape or f.spacing != frames[0].spacing for f in frames):
            raise ShapeError("all frames of a Series4D must share shape and spacing")
        if self.labels and len(self.labels) != len(frames):
            raise ValueError("one label per frame")

    @property
    def shape(self):
        return self.frames[0].shape

    def __len__(self):
        return len(self.frames)


Image = Union[Volume, Series4D]


def frames_of(x: Image) -> tuple[Volume, ...]:
    return x.frames if isinstance(x, Series4D) else (x,)


@dataclass
class Study:
    """One subject's co-registered sequences keyed by sequence index."""

    subject_id: str
    n_sequences: int
    sequences: dict = field(default_factory=dict)
    labels: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.sequences:
            raise DataError(f"study {self.subject_id} has no available sequence")
        bad = [i for i in self.sequences if not 0 <= i < self.n_sequences]
        if bad:
            raise DataError(f"study {self.subject_id}: sequence indices {bad} out of range")

    @property
    def availability(self) -> np.ndarray:
        return np.array([i in self.sequences for i in range(self.n_sequences)])

    @property
    def available(self) -> list[int]:
        return sorted(self.sequences)


# ---------------------------------------------------------------- loading

def _guess_format(path: Path) -> str:
    name = path.name.lower()
    if name.endswith((".nii", ".nii.gz")):
        return "nifti"
    if name.endswith(".npy"):
        return "raw_npy_like"
    if path.is_dir() or name.endswith(".png"):
        return "png_stack"
    raise DataError(f"cannot infer image format of {path}")


def _read_png(path: Path) -> np.ndarray:
    from PIL import Image as PILImage

    try:
        with PILImage.open(path) as im:
            im.load()
            if im.mode in ("I;16", "I;16B", "I"):
                return np.asarray(im, dtype=np.float64)
            return np.asarray(im.convert("L"), dtype=np.float64)
    except OSError as e:
        raise DataError(f"unreadable PNG {path}: {e}") from e


def _load_array(path: Path, fmt: str) -> tuple[np.ndarray, tuple | None]:
    if fmt == "nifti":
        import nibabel as nib

        try:
            img = nib.load(str(path))
            arr = np.asarray(img.dataobj, dtype=np.float64)
        except Exception as e:  # nibabel raises a zoo of types on bad files
            raise DataError(f"unreadable NIfTI {path}: {e}") from e
        zooms = tuple(float(z) for z in img.header.get_zooms()[: min(arr.ndim, 3)])
        # NIfTI stores (x, y, z[, t]); we store (z, y, x) per frame
        if arr.ndim == 2:
            return arr.T, zooms[::-1]
        if arr.ndim == 3:
            return arr.transpose(2, 1, 0), zooms[::-1]
        if arr.ndim == 4:
            return arr.transpose(3, 2, 1, 0), zooms[::-1]
        raise DataError(f"unsupported NIfTI rank {arr.ndim} in {path}")
    if fmt == "raw_npy_like":
        try:
            return np.load(path, allow_pickle=False).astype(np.float64), None
        except (OSError, ValueError) as e:
            raise DataError(f"unreadable array file {path}: {e}") from e
    if fmt == "png_stack":
        if path.is_dir():
            files = sorted(p for p in path.iterdir() if p.suffix.lower() == ".png")
            if not files:
                raise DataError(f"no PNG slices in {path}")
            slices = [_read_png(p) for p in files]
            if any(s.shape != slices[0].shape for s in slices):
                raise DataError(f"inconsistent slice shapes in PNG stack {path}")
            return np.stack(slices), None
        return _read_png(path), None
    raise DataError(f"unknown format {fmt!r}; expected one of {FORMATS}")


def load_volume(path, format: str | None = None) -> Volume:
    """Read a 2D/3D image with its original intensities."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    if path.is_file() and path.stat().st_size == 0:
        raise DataError(f"empty file: {path}")
    arr, spacing = _load_array(path, format or _guess_format(path))
    if arr.ndim == 4:
        raise ShapeError(f"{path} holds a 4D series; use load_series")
    return Volume(arr.astype(np.float32), spacing)


def load_series(paths, format: str | None = None, axis_meaning="timepoint", labels=()) -> Series4D:
    """Load a 4D series from one 4D NIfTI file or a list of 3D files."""
    if isinstance(paths, (str, os.PathLike)):
        path = Path(paths)
        if path.is_file() and path.stat().st_size == 0:
            raise DataError(f"empty file: {path}")
        arr, spacing = _load_array(path, format or _guess_format(path))
        if arr.ndim != 4:
            return Series4D((Volume(arr.astype(np.float32), spacing),), axis_meaning, tuple(labels))
        frames = tuple(Volume(a.astype(np.float32), spacing) for a in arr)
    else:
        frames = tuple(load_volume(p, format) for p in paths)
    return Series4D(frames, axis_meaning, tuple(labels))


# ---------------------------------------------------------------- transforms

def normalize_minmax(v: Volume, clip_lo: float = 0.0, clip_hi: float = 100.0) -> Volume:
    """Percentile clip then rescale to [0, 1].

    A constant volume maps to zeros with a warning instead of dividing by 0.
    """
    if not clip_lo < clip_hi:
        raise ValueError(f"clip_lo ({clip_lo}) must be below clip_hi ({clip_hi})")
    data = v.data.astype(np.float64)
    lo, hi = np.percentile(data, [clip_lo, clip_hi])
    if hi <= lo:
        warnings.warn("constant volume: normalized to zeros", RuntimeWarning, stacklevel=2)
        out = np.zeros_like(data)
    else:
        out = np.clip((data - lo) / (hi - lo), 0.0, 1.0)
    return Volume(out.astype(np.float32), v.spacing, v.intensity_range)


def normalize_image(x: Image, clip_lo: float = 0.0, clip_hi: float = 100.0) -> Image:
    if isinstance(x, Series4D):
        # one shared window keeps the temporal contrast between frames
        stack = np.stack([f.data for f in x.frames])
        norm = normalize_minmax(Volume(stack.reshape(-1, *stack.shape[2:])), clip_lo, clip_hi)
        data = norm.data.reshape(stack.shape)
        frames = tuple(Volume(d, f.spacing, f.intensity_range) for d, f in zip(data, x.frames))
        return Series4D(frames, x.axis_meaning, x.labels)
    return normalize_minmax(x, clip_lo, clip_hi)


def center_crop(v: Volume, target_shape, pad: bool = False) -> Volume:
    """Crop (or with ``pad=True`` zero-pad) to ``target_shape`` about the centre.

    Odd excess is split with the extra voxel removed from the high end.
    """
    target_shape = tuple(int(t) for t in target_shape)
    if len(target_shape) != v.ndim:
        raise ShapeError(f"target {target_shape} does not match volume rank {v.ndim}")
    if any(t > n for t, n in zip(target_shape, v.shape)) and not pad:
        raise ShapeError(f"target {target_shape} exceeds volume {v.shape} and padding is off")
    data = v.data
    if pad:
        widths = [((t - n) // 2, t - n - (t - n) // 2) if t > n else (0, 0)
                  for t, n in zip(target_shape, data.shape)]
        data = np.pad(data, widths)
    starts = [(n - t) // 2 for n, t in zip(data.shape, target_shape)]
    sl = tuple(slice(s, s + t) for s, t in zip(starts, target_shape))
    return v.replace(data[sl].copy())


def center_pad(v: Volume, target_shape) -> Volume:
    """Inverse placement of :func:`center_crop`: embed ``v`` in zeros."""
    out = np.zeros(tuple(target_shape), dtype=v.data.dtype)
    starts = [(t - n) // 2 for n, t in zip(v.shape, target_shape)]
    out[tuple(slice(s, s + n) for s, n in zip(starts, v.shape))] = v.data
    return v.replace(out)


def extract_25d_slab(v: Volume | np.ndarray, axial_index: int) -> np.ndarray:
    """Slices ``(k-1, k, k+1)`` as a ``(3, H, W)`` image; edges replicate."""
    data = v.data if isinstance(v, Volume) else np.asarray(v)
    if data.ndim != 3:
        raise ShapeError("2.5D slabs need a 3D volume")
    depth = data.shape[0]
    if not 0 <= axial_index < depth:
        raise IndexError(f"axial index {axial_index} outside [0, {depth})")
    idx = np.clip([axial_index - 1, axial_index, axial_index + 1], 0, depth - 1)
    return data[idx]


# ---------------------------------------------------------------- writing

def save_volume(v: Volume, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    name = path.name.lower()
    if name.endswith((".nii", ".nii.gz")):
        import nibabel as nib

        affine = np.diag(list(v.spacing[::-1] if v.spacing else (1.0,) * v.ndim) + [1.0] * (4 - v.ndim))
        nib.save(nib.Nifti1Image(v.data.T.astype(np.float32), affine), str(path))
    elif name.endswith(".npy"):
        np.save(path, v.data)
    elif name.endswith(".png"):
        if v.ndim != 2:
            raise ShapeError("PNG output is 2D only")
        save_png(v.data, path)
    else:
        raise DataError(f"cannot infer output format of {path}")
    return path


def save_png(image: np.ndarray, path) -> Path:
    """Write a [0, 1] grayscale image as 8-bit PNG."""
    from PIL import Image as PILImage

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    u8 = np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)
    PILImage.fromarray(u8, mode="L").save(path, format="PNG")
    return path


def overlay_rgb(base: np.ndarray, heat: np.ndarray, cmap: str = "jet", alpha: float = 0.6) -> np.ndarray:
    """Blend a colour-mapped heatmap onto a grayscale base, as uint8 RGB.

    The heatmap is scaled by its own maximum and also sets the per-pixel
    blend weight, so pixels with zero heat keep the base intensity.
    """
    import matplotlib

    base = np.asarray(base, dtype=np.float64)
    heat = np.asarray(heat, dtype=np.float64)
    if base.shape != heat.shape or base.ndim != 2:
        raise ShapeError(f"base {base.shape} and map {heat.shape} must be equal 2D shapes")
    if np.any(heat < 0):
        raise ValueError("heatmap must be non-negative")
    peak = heat.max()
    m = heat / peak if peak > 0 else np.zeros_like(heat)
    gray = np.repeat(np.clip(base, 0, 1)[..., None], 3, axis=-1)
    color = matplotlib.colormaps[cmap](m)[..., :3]
    w = (alpha * m)[..., None]
    return np.round(((1 - w) * gray + w * color) * 255).astype(np.uint8)


def save_overlay(base: np.ndarray, heat: np.ndarray, path, cmap: str = "jet", alpha: float = 0.6) -> Path:
    from PIL import Image as PILImage

    rgb = overlay_rgb(base, heat, cmap, alpha)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(rgb, mode="RGB").save(path, format="PNG")
    return path


# ---------------------------------------------------------------- manifests

def write_manifest(path, studies: Iterable[dict], n_sequences: int,
                   sequence_names=None, extra: dict | None = None) -> Path:
    """Write a manifest: study -> sequence index -> file path(s) -> availability.

    Each study entry is a dict with ``subject_id``, ``sequences`` mapping
    sequence index to ``{"path": ..., "format": ...}`` (``"paths"`` for a
    4D series given as separate files), and optional ``labels``/``split``.
    """
    studies = list(studies)
    for s in studies:
        s.setdefault("availability",
                     [str(i) in map(str, s["sequences"]) for i in range(n_sequences)])
        s["sequences"] = {str(k): v for k, v in s["sequences"].items()}
    doc = {
        "version": MANIFEST_VERSION,
        "n_sequences": n_sequences,
        "sequence_names": list(sequence_names or [f"seq{i}" for i in range(n_sequences)]),
        "studies": studies,
    }
    if extra:
        doc.update(extra)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True))
    return path


def read_manifest(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"unreadable manifest {path}: {e}") from e
    if doc.get("version") != MANIFEST_VERSION:
        raise DataError(f"manifest version {doc.get('version')} unsupported")
    doc["_root"] = str(path.parent)
    return doc


def load_study(entry: dict, manifest: dict, normalize: bool = True,
               clip=(0.0, 100.0)) -> Study:
    """Materialize one manifest entry, honouring its availability vector."""
    root = Path(manifest.get("_root", "."))
    n = manifest["n_sequences"]
    normalize = normalize and manifest.get("normalize", True)
    avail = entry.get("availability") or [True] * n
    seqs = {}
    for key, spec in entry["sequences"].items():
        i = int(key)
        if not avail[i]:
            continue
        fmt = spec.get("format")
        if "paths" in spec:
            img = load_series([root / p for p in spec["paths"]], fmt,
                              spec.get("axis_meaning", "timepoint"), tuple(spec.get("labels", ())))
        elif spec.get("frames", 1) > 1:
            img = load_series(root / spec["path"], fmt, spec.get("axis_meaning", "timepoint"))
        else:
            img = load_volume(root / spec["path"], fmt)
        if "scale" in spec:
            img = _rescale(img, float(spec["scale"]))
        seqs[i] = normalize_image(img, *clip) if normalize else img
    return Study(entry["subject_id"], n, seqs, dict(entry.get("labels", {})))


def _rescale(x: Image, scale: float) -> Image:
    if isinstance(x, Series4D):
        return Series4D(tuple(_rescale(f, scale) for f in x.frames), x.axis_meaning, x.labels)
    return Volume((x.data * scale).astype(np.float32), x.spacing, x.intensity_range)
