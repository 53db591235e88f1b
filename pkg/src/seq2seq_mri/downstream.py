"""Toy letter classification with and without differentiation-map channels.

Baseline models see ``(X1, X2)``; the ``baseline_plus_md`` variant also
sees ``(M_d(X1), M_d(X2))``. One residual trunk feeds two 26-way heads,
one for each image's differing letter.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError
from .generator.translate import translate_tensor
from .toy.sim import N_CLASSES

log = logging.getLogger(__name__)

VARIANTS = ("baseline", "baseline_plus_md")
TARGETS = ("label1", "label2")
# input channel order, fixed
CHANNELS = {"baseline": ("X1", "X2"), "baseline_plus_md": ("X1", "X2", "Md(X1)", "Md(X2)")}


@dataclass
class ExperimentSpec:
    variants: tuple = VARIANTS
    sample_sizes: tuple = (3000, 5000, 7000, 9000)
    seeds: tuple = (0, 1, 2)
    epochs: int = 10
    batch_size: int = 128
    learning_rate: float = 1e-3
    widths: tuple = (16, 32, 64, 128)
    targets: tuple = TARGETS

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        unknown = set(self.variants) - set(VARIANTS)
        if unknown:
            raise ConfigError(f"unknown variants {sorted(unknown)}")
        if set(self.targets) - set(TARGETS):
            raise ConfigError(f"targets must be among {TARGETS}")


@dataclass
class CurvePoint:
    variant: str
    target: str
    sample_size: int
    accuracies: list = field(default_factory=list)

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(self.accuracies)) if self.accuracies else float("nan")


# ---------------------------------------------------------------- inputs

@torch.no_grad()
def batch_diff_maps(generator, pairs: np.ndarray, chunk: int = 64) -> np.ndarray:
    """Differentiation maps for a stack of two-sequence subjects.

    ``pairs`` is ``(N, 2, H, W)``; returns ``(N, 2, H, W)`` holding
    ``|X'_{2->1} - X1| / 2`` and ``|X'_{1->2} - X2| / 2``.
    """
    generator.eval()
    out = np.empty(pairs.shape, dtype=np.float32)
    for k in range(0, len(pairs), chunk):
        x = torch.from_numpy(np.ascontiguousarray(pairs[k:k + chunk], dtype=np.float32))
        x1, x2 = x[:, 0, None, None], x[:, 1, None, None]  # (b, T=1, C=1, H, W)
        y21 = translate_tensor(generator, x2, 0)[:, 0, 0]
        y12 = translate_tensor(generator, x1, 1)[:, 0, 0]
        out[k:k + chunk, 0] = ((y21 - x[:, 0]).abs() / 2).numpy()
        out[k:k + chunk, 1] = ((y12 - x[:, 1]).abs() / 2).numpy()
    return out


def md_scale(train_maps: np.ndarray, q: float = 99.0) -> float:
    """Global rescaling constant: the q-th percentile of training-split maps."""
    v = float(np.percentile(train_maps, q))
    return v if v > 0 else 1.0


def build_inputs(pairs: np.ndarray, variant: str, maps: np.ndarray | None = None,
                 scale: float = 1.0) -> np.ndarray:
    """Stack classifier channels in :data:`CHANNELS` order.

    ``pairs`` is ``(N, 2, H, W)`` or one subject ``(2, H, W)``.
    """
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}")
    single = pairs.ndim == 3
    pairs = pairs[None] if single else pairs
    if variant == "baseline":
        out = pairs.astype(np.float32)
    else:
        if maps is None:
            raise ConfigError("baseline_plus_md needs differentiation maps (a trained generator)")
        maps = maps[None] if maps.ndim == 3 else maps
        out = np.concatenate([pairs, maps / scale], axis=1).astype(np.float32)
    return out[0] if single else out


# ---------------------------------------------------------------- model

class BasicBlock(nn.Module):
    def __init__(self, c_in, c_out, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(c_out)
        self.skip = None
        if stride != 1 or c_in != c_out:
            self.skip = nn.Sequential(nn.Conv2d(c_in, c_out, 1, stride, bias=False), nn.BatchNorm2d(c_out))

    def forward(self, x):
        y = F.relu(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        return F.relu(y + (x if self.skip is None else self.skip(x)))


class SmallResNet(nn.Module):
    """Four residual stages; ``blocks=(2, 2, 2, 2)`` with widths
    ``(64, 128, 256, 512)`` gives the ResNet-18 layout."""

    def __init__(self, in_channels: int, widths=(16, 32, 64, 128), blocks=(1, 1, 1, 1),
                 n_classes: int = N_CLASSES, n_heads: int = 2):
        super().__init__()
        self.stem = nn.Sequential(nn.Conv2d(in_channels, widths[0], 3, 2, 1, bias=False),
                                  nn.BatchNorm2d(widths[0]), nn.ReLU(), nn.MaxPool2d(3, 2, 1))
        stages, c = [], widths[0]
        for k, (w, n) in enumerate(zip(widths, blocks)):
            for b in range(n):
                stages.append(BasicBlock(c, w, 2 if (k > 0 and b == 0) else 1))
                c = w
        self.stages = nn.Sequential(*stages)
        self.heads = nn.ModuleList(nn.Linear(c, n_classes) for _ in range(n_heads))

    def forward(self, x):
        z = self.stages(self.stem(x)).mean(dim=(2, 3))
        return [h(z) for h in self.heads]


@torch.no_grad()
def evaluate(model: nn.Module, x: np.ndarray, y: np.ndarray, batch: int = 256) -> np.ndarray:
    """Per-head accuracy on ``(x, y)``; ``y`` is ``(N, n_heads)``."""
    model.eval()
    correct = np.zeros(y.shape[1])
    for k in range(0, len(x), batch):
        logits = model(torch.from_numpy(x[k:k + batch]))
        for h, lg in enumerate(logits):
            correct[h] += (lg.argmax(1).numpy() == y[k:k + batch, h]).sum()
    return correct / len(x)


def train_classifier(spec: ExperimentSpec, x_train, y_train, x_test, y_test, seed: int,
                     sample_size: int | None = None):
    """Train on the first ``sample_size`` training subjects; return
    ``(model, per-head test accuracy)``."""
    n = len(x_train) if sample_size is None else sample_size
    if n > len(x_train):
        raise ConfigError(f"sample size {n} exceeds the {len(x_train)} training subjects")
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    model = SmallResNet(x_train.shape[1], spec.widths, n_heads=y_train.shape[1])
    opt = torch.optim.Adam(model.parameters(), spec.learning_rate)
    xt = torch.from_numpy(np.ascontiguousarray(x_train[:n]))
    yt = torch.from_numpy(np.ascontiguousarray(y_train[:n], dtype=np.int64))
    for _ in range(spec.epochs):
        model.train()
        perm = torch.from_numpy(rng.permutation(n))
        for k in range(0, n, spec.batch_size):
            idx = perm[k:k + spec.batch_size]
            if len(idx) < 2:
                continue  # batch norm needs two samples
            logits = model(xt[idx])
            loss = sum(F.cross_entropy(lg, yt[idx, h]) for h, lg in enumerate(logits))
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
    return model, evaluate(model, x_test, y_test)


# ---------------------------------------------------------------- curves

def accuracy_curve(spec: ExperimentSpec, inputs: dict, y_train, y_test, out_dir=None,
                   progress=None) -> list[CurvePoint]:
    """Run the variant x size x seed grid.

    ``inputs`` maps variant -> ``(x_train, x_test)``. Variants without
    inputs are reported as gaps.
    """
    points = []
    heads = {t: k for k, t in enumerate(TARGETS)}
    for variant in spec.variants:
        for size in spec.sample_sizes:
            cell = {t: CurvePoint(variant, t, size) for t in spec.targets}
            if variant in inputs:
                x_train, x_test = inputs[variant]
                for seed in spec.seeds:
                    if size > len(x_train):
                        log.warning("sample size %d exceeds training split; left as a gap", size)
                        break
                    _, acc = train_classifier(spec, x_train, y_train, x_test, y_test, seed, size)
                    for t in spec.targets:
                        cell[t].accuracies.append(float(acc[heads[t]]))
                    if progress:
                        progress(variant, size, seed, acc)
            points.extend(cell.values())
    if out_dir is not None:
        write_curve_outputs(points, spec, out_dir)
    return points


def curve_deltas(points: list[CurvePoint]) -> dict:
    """``{(target, size): mean(plus_md) - mean(baseline)}`` where both exist."""
    by = {(p.variant, p.target, p.sample_size): p.mean_accuracy for p in points}
    out = {}
    for (variant, target, size), mean in by.items():
        if variant != "baseline_plus_md":
            continue
        base = by.get(("baseline", target, size), float("nan"))
        out[(target, size)] = mean - base
    return out


def write_curve_outputs(points: list[CurvePoint], spec: ExperimentSpec, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "per_seed.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "target", "sample_size", "seed", "accuracy"])
        for p in points:
            for seed, acc in zip(spec.seeds, p.accuracies):
                w.writerow([p.variant, p.target, p.sample_size, seed, repr(acc)])
    with (out / "curve.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "target", "sample_size", "mean_accuracy", "std_accuracy", "n_seeds"])
        for p in points:
            if p.accuracies:
                w.writerow([p.variant, p.target, p.sample_size, repr(p.mean_accuracy),
                            repr(float(np.std(p.accuracies))), len(p.accuracies)])
            else:
                w.writerow([p.variant, p.target, p.sample_size, "missing", "missing", 0])
    deltas = curve_deltas(points)
    with (out / "deltas.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["target", "sample_size", "delta"])
        for (t, s), d in sorted(deltas.items()):
            w.writerow([t, s, "missing" if math.isnan(d) else repr(d)])
    from .plotting import plot_accuracy_curve

    plot_accuracy_curve(points, out / "curve.png")
    return deltas


def read_per_seed(path) -> dict:
    """``{(variant, target, size): [accuracies]}`` from a per-seed CSV."""
    out: dict = {}
    with Path(path).open() as fh:
        for row in csv.DictReader(fh):
            key = (row["variant"], row["target"], int(row["sample_size"]))
            out.setdefault(key, []).append(float(row["accuracy"]))
    return out
