"""Image-quality metrics: PSNR, Gaussian-window SSIM and an LPIPS-style
deep-feature distance."""
from __future__ import annotations

import functools
import warnings
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from .errors import ConfigError, ShapeError

PSNR_CAP = 100.0


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, data_range: float = 1.0, cap: float = PSNR_CAP) -> float:
    """10 log10(range^2 / MSE) in dB, capped at ``cap`` (also for MSE = 0)."""
    a, b = _pair(a, b)
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return cap
    return float(min(cap, 10.0 * np.log10(data_range ** 2 / mse)))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(x, g):
    # separable correlation, then drop the border so only full windows remain
    r = len(g) // 2
    y = ndimage.correlate1d(x, g, axis=-2, mode="constant")
    y = ndimage.correlate1d(y, g, axis=-1, mode="constant")
    return y[..., r:x.shape[-2] - r, r:x.shape[-1] - r]


def ssim_map(a, b, data_range=1.0, win_size=11, sigma=1.5, k1=0.01, k2=0.03) -> np.ndarray:
    a, b = _pair(a, b)
    if a.ndim < 2:
        raise ShapeError("SSIM needs at least 2D input")
    small = min(a.shape[-2:])
    if small < win_size:
        win_size = small if small % 2 else small - 1
        warnings.warn(f"image smaller than the SSIM window; using a {win_size}x{win_size} window",
                      RuntimeWarning, stacklevel=3)
    g = gaussian_window(win_size, sigma)
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a ** 2
    var_b = _filter_valid(b * b, g) - mu_b ** 2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    return ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))


def ssim(a, b, data_range: float = 1.0, win_size: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM over all full windows of every 2D slice (last two axes)."""
    return float(ssim_map(a, b, data_range, win_size, sigma, k1, k2).mean())


# ---------------------------------------------------------------- LPIPS-style

class LpipsLike:
    """Channel-normalized deep-feature distance.

    ``backend`` is ``"lpips"`` (the published package and its weights),
    ``"vgg19"`` or ``"random"`` (the perceptual-loss extractors), or
    ``"auto"``, which takes the first of those that is available locally.
    """

    def __init__(self, backend: str = "auto", weights=None, width: float = 0.25):
        from .objectives import FeatureExtractor

        self._lpips = None
        self._extractor = None
        if backend == "auto":
            backend = _first_available_backend(weights)
        if backend == "lpips":
            self._lpips = _load_lpips()
        elif backend in ("vgg19", "random"):
            self._extractor = FeatureExtractor(backend, weights, width)
        else:
            raise ConfigError(f"unknown LPIPS backend {backend!r}")
        self.backend = backend

    @torch.no_grad()
    def __call__(self, a, b) -> float:
        a, b = _pair(a, b)
        ta, tb = _as_batch(a), _as_batch(b)
        if self._lpips is not None:
            return float(self._lpips(ta * 2 - 1, tb * 2 - 1).mean())
        dist = 0.0
        fa, fb = self._extractor(ta), self._extractor(tb)
        for x, y in zip(fa, fb):
            x = x / (x.norm(dim=1, keepdim=True) + 1e-10)
            y = y / (y.norm(dim=1, keepdim=True) + 1e-10)
            dist += float(((x - y) ** 2).sum(dim=1).mean())
        return dist / len(fa)


def _as_batch(x: np.ndarray) -> torch.Tensor:
    # 2D -> (1, 1, H, W); leading axes become the batch of single-channel images
    t = torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32))
    return t.reshape(-1, 1, *t.shape[-2:])


def _hub_file(name: str) -> Path:
    return Path(torch.hub.get_dir()) / "checkpoints" / name


def _load_lpips():
    try:
        import lpips
    except ImportError as e:
        raise ConfigError("LPIPS backend needs the 'lpips' package (pip install lpips)") from e
    if not _hub_file("alexnet-owt-7be5be79.pth").is_file():
        raise ConfigError("LPIPS backend needs torchvision's pretrained AlexNet in the torch hub cache")
    return lpips.LPIPS(net="alex", verbose=False).eval()


def _first_available_backend(weights) -> str:
    try:
        import lpips  # noqa: F401
        if _hub_file("alexnet-owt-7be5be79.pth").is_file():
            return "lpips"
    except ImportError:
        pass
    from .objectives import VGG19_FILE

    if weights or _hub_file(VGG19_FILE).is_file():
        return "vgg19"
    warnings.warn("no pretrained LPIPS/VGG19 weights found; using the seeded random-feature "
                  "extractor", RuntimeWarning, stacklevel=3)
    return "random"


@functools.lru_cache(maxsize=4)
def default_lpips(backend: str = "auto") -> LpipsLike:
    return LpipsLike(backend)


def lpips_like(a, b, metric: LpipsLike | None = None) -> float:
    return (metric or default_lpips())(a, b)
