"""Sequence-level and pixel-level imaging-differentiation analysis.

The adjacency matrix scores how well each source sequence ``i`` generates
each target ``j``::

    A_ij = nPSNR_ij + nSSIM_ij - nLPIPS_ij

where the ``n`` prefix is a z-score over the evaluated entries. Row sums
measure totipotency (how well ``i`` generates the others); negated column
sums measure imaging differentiation (how hard ``j`` is to generate). The
per-pixel differentiation map of a sequence averages the absolute error of
its reconstructions from every other available sequence.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, ShapeError
from .generator.translate import translate
from .metrics import LpipsLike, default_lpips, psnr, ssim
from .volume_io import Series4D, Study, frames_of

EXCLUDE, INCLUDE = "exclude", "include"


def support_mask(n: int, diagonal_policy: str = EXCLUDE) -> np.ndarray:
    if diagonal_policy not in (EXCLUDE, INCLUDE):
        raise ValueError(f"diagonal_policy must be 'exclude' or 'include', got {diagonal_policy!r}")
    mask = np.ones((n, n), dtype=bool)
    if diagonal_policy == EXCLUDE:
        np.fill_diagonal(mask, False)
    return mask


def normalize_metric(m, diagonal_policy: str = EXCLUDE) -> np.ndarray:
    """Z-score ``m`` over its evaluated entries (population std).

    Entries off the support, and NaN (missing) entries, come back as NaN and
    do not enter the statistics.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ShapeError(f"expected a square matrix, got {m.shape}")
    evaluated = support_mask(len(m), diagonal_policy) & np.isfinite(m)
    if evaluated.sum() < 2:
        raise DataError("normalization needs at least two evaluated entries")
    vals = m[evaluated]
    out = np.full_like(m, np.nan)
    std = vals.std()
    if std == 0:
        warnings.warn("constant metric matrix: normalized to zeros", RuntimeWarning, stacklevel=2)
        out[evaluated] = 0.0
    else:
        out[evaluated] = (vals - vals.mean()) / std
    return out


@dataclass
class AdjacencyMatrix:
    a: np.ndarray
    psnr: np.ndarray
    ssim: np.ndarray
    lpips: np.ndarray
    diagonal_policy: str = EXCLUDE
    counts: np.ndarray | None = None
    normalized: dict = field(default_factory=dict)

    @property
    def n_sequences(self) -> int:
        return len(self.a)


def adjacency_from_raw(psnr_m, ssim_m, lpips_m, diagonal_policy: str = EXCLUDE,
                       counts=None) -> AdjacencyMatrix:
    n_p = normalize_metric(psnr_m, diagonal_policy)
    n_s = normalize_metric(ssim_m, diagonal_policy)
    n_l = normalize_metric(lpips_m, diagonal_policy)
    return AdjacencyMatrix(
        n_p + n_s - n_l, np.asarray(psnr_m, float), np.asarray(ssim_m, float),
        np.asarray(lpips_m, float), diagonal_policy, counts,
        {"psnr": n_p, "ssim": n_s, "lpips": n_l},
    )


def pair_metrics(pred, target, lpips_metric: LpipsLike | None = None) -> tuple[float, float, float]:
    """(PSNR, SSIM, LPIPS) of two images, averaged over frames for 4D."""
    ps, ss, ls = [], [], []
    metric = lpips_metric or default_lpips()
    for p, t in zip(frames_of(pred), frames_of(target)):
        ps.append(psnr(p.data, t.data))
        ss.append(ssim(p.data, t.data))
        ls.append(metric(p.data, t.data))
    return float(np.mean(ps)), float(np.mean(ss)), float(np.mean(ls))


def build_adjacency(generator, studies, n_sequences: int | None = None,
                    diagonal_policy: str = EXCLUDE, lpips_metric: LpipsLike | None = None,
                    per_study: list | None = None) -> AdjacencyMatrix:
    """Average raw metrics of X'_{i->j} against X_j per ordered pair over the
    studies holding both, then normalize and combine.

    Studies are visited in subject-id order so the reduction is reproducible.
    Pairs never co-available stay NaN. Pass a list as ``per_study`` to
    receive ``(subject_id, i, j, psnr, ssim, lpips)`` rows.
    """
    n = n_sequences or generator.n_sequences
    support = support_mask(n, diagonal_policy)
    sums = np.zeros((3, n, n))
    counts = np.zeros((n, n), dtype=int)
    for st in sorted(studies, key=lambda s: s.subject_id):
        for i in st.available:
            for j in st.available:
                if not support[i, j]:
                    continue
                target = st.sequences[j]
                pred = translate(generator, st.sequences[i], i, j, len(frames_of(target)))
                vals = pair_metrics(pred, target, lpips_metric)
                sums[:, i, j] += vals
                counts[i, j] += 1
                if per_study is not None:
                    per_study.append((st.subject_id, i, j, *vals))
    with np.errstate(invalid="ignore", divide="ignore"):
        means = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    return adjacency_from_raw(means[0], means[1], means[2], diagonal_policy, counts)


@dataclass
class CentralityReport:
    c_t: np.ndarray
    c_d: np.ndarray
    rank_t: np.ndarray
    rank_d: np.ndarray


def descending_ranks(values) -> np.ndarray:
    """1 = largest; ties go to the lower index."""
    values = np.asarray(values, dtype=np.float64)
    order = sorted(range(len(values)), key=lambda i: (-values[i], i))
    ranks = np.empty(len(values), dtype=int)
    ranks[order] = np.arange(1, len(values) + 1)
    return ranks


def centrality(adj, diagonal_policy: str | None = None) -> CentralityReport:
    """Totipotency ``C_t(i) = (1/S) sum_j A_ij`` and imaging differentiation
    ``C_d(i) = -(1/S) sum_j A_ji`` over the evaluated support."""
    if isinstance(adj, AdjacencyMatrix):
        a, policy = adj.a, diagonal_policy or adj.diagonal_policy
    else:
        a, policy = np.asarray(adj, dtype=np.float64), diagonal_policy or EXCLUDE
    n = len(a)
    support = support_mask(n, policy)
    if not np.all(np.isfinite(a[support])):
        raise DataError("adjacency has missing entries on its support; impute them or "
                        "exclude the affected sequences before ranking")
    a = np.where(support, a, 0.0)
    c_t = a.sum(axis=1) / n
    c_d = -a.sum(axis=0) / n
    return CentralityReport(c_t, c_d, descending_ranks(c_t), descending_ranks(c_d))


# ---------------------------------------------------------------- pixel level

@dataclass
class DiffMap:
    map: np.ndarray
    source_counts: int


def combine_diff_map(target, predictions: dict, n_sequences: int) -> DiffMap:
    """``sum_j |pred_j - target| / S`` over the given source predictions.

    Sources are summed in index order so the result does not depend on the
    order they were produced in.
    """
    if not predictions:
        raise DataError("a differentiation map needs at least one source sequence")
    tgt = _stack_frames(target)
    total = np.zeros_like(tgt, dtype=np.float64)
    for j in sorted(predictions):
        pred = _stack_frames(predictions[j])
        if pred.shape != tgt.shape:
            raise ShapeError(f"prediction from {j} has shape {pred.shape}, target {tgt.shape}")
        total += np.abs(pred - tgt)
    m = total / n_sequences
    return DiffMap(m[0] if not isinstance(target, Series4D) else m, len(predictions))


def _stack_frames(x) -> np.ndarray:
    if isinstance(x, np.ndarray):
        return x.astype(np.float64)[None]
    return np.stack([f.data for f in frames_of(x)]).astype(np.float64)


def diff_map(generator, study: Study, i: int, include_diagonal: bool = False,
             sources=None) -> DiffMap:
    """Imaging-differentiation map of sequence ``i`` of ``study``."""
    if i not in study.sequences:
        raise DataError(f"sequence {i} is not available in study {study.subject_id}")
    if sources is None:
        sources = [j for j in study.available if include_diagonal or j != i]
    target = study.sequences[i]
    t = len(frames_of(target))
    preds = {j: translate(generator, study.sequences[j], j, i, t) for j in sorted(set(sources))}
    return combine_diff_map(target, preds, study.n_sequences)
