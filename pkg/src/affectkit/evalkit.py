"""Retrieval, classification and image-fidelity metrics, plus a k-fold splitter.

Ranking ties are broken by index: among equal scores the lower index counts
as ranked earlier. Results are therefore reproducible bit for bit.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .rng import stream

PSNR_CAP = 100.0
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class RetrievalResult:
    i2t_r1: float
    i2t_r5: float
    t2i_r1: float
    t2i_r5: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ClassificationResult:
    top1: float
    top2: float
    top3: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ImageMetrics:
    psnr: float
    mse: float
    ssim: float

    def to_dict(self) -> dict:
        return asdict(self)


def _true_rank(scores: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Zero-based rank of ``scores[i, target[i]]`` within row ``i`` under the index tie rule."""
    rows = np.arange(scores.shape[0])
    true = scores[rows, target][:, None]
    cols = np.arange(scores.shape[1])[None, :]
    ahead = (scores > true) | ((scores == true) & (cols < target[:, None]))
    return ahead.sum(axis=1)


def recall_at_k(S, k: int, direction: str = "i2t") -> float:
    """Fraction of queries whose paired item (the diagonal) ranks in the top ``k``.

    Rows of ``S`` are images and columns texts; ``i2t`` queries with rows,
    ``t2i`` with columns.
    """
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise MetricError(f"recall_at_k needs a square similarity matrix, got {S.shape}")
    if direction not in ("i2t", "t2i"):
        raise MetricError(f"direction must be 'i2t' or 't2i', got {direction!r}")
    n = S.shape[0]
    if not 1 <= k <= n:
        raise MetricError(f"k must be in [1, {n}], got {k}")
    scores = S if direction == "i2t" else S.T
    return float(np.mean(_true_rank(scores, np.arange(n)) < k))


def top_k_accuracy(scores, labels, k: int) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.ndim != 2 or labels.shape != (scores.shape[0],):
        raise MetricError(f"scores {scores.shape} and labels {labels.shape} do not line up")
    C = scores.shape[1]
    if not 1 <= k <= C:
        raise MetricError(f"k must be in [1, {C}], got {k}")
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise MetricError(f"labels must lie in [0, {C})")
    return float(np.mean(_true_rank(scores, labels) < k))


def retrieval_metrics(S) -> RetrievalResult:
    n = np.asarray(S).shape[0]
    k5 = min(5, n)
    return RetrievalResult(
        i2t_r1=recall_at_k(S, 1, "i2t"),
        i2t_r5=recall_at_k(S, k5, "i2t"),
        t2i_r1=recall_at_k(S, 1, "t2i"),
        t2i_r5=recall_at_k(S, k5, "t2i"),
    )


def classification_metrics(scores, labels) -> ClassificationResult:
    C = np.asarray(scores).shape[1]
    return ClassificationResult(*(top_k_accuracy(scores, labels, min(k, C)) for k in (1, 2, 3)))


# ---------------------------------------------------------------------------
# image fidelity


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def _ssim_channel(a: np.ndarray, b: np.ndarray, data_range: float) -> float:
    size = min(SSIM_WINDOW, a.shape[0], a.shape[1])
    if size % 2 == 0:
        size -= 1
    w = _gaussian_window(size, SSIM_SIGMA)

    def filt(x):
        return np.einsum("ijkl,kl->ij", sliding_window_view(x, (size, size)), w)

    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a * mu_a
    var_b = filt(b * b) - mu_b * mu_b
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim(A, B, data_range: float = 1.0) -> float:
    """Gaussian-window SSIM averaged over valid window positions (and channels).

    Images smaller than the 11 x 11 window use the largest odd window that fits.
    """
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.shape != B.shape:
        raise MetricError(f"image shapes differ: {A.shape} vs {B.shape}")
    if A.ndim == 2:
        return _ssim_channel(A, B, data_range)
    if A.ndim == 3:
        return float(np.mean([_ssim_channel(A[..., c], B[..., c], data_range) for c in range(A.shape[2])]))
    raise MetricError(f"expected H x W or H x W x C images, got {A.shape}")


def image_metrics(A, B) -> ImageMetrics:
    """MSE, PSNR (dynamic range 1, capped at 100 dB) and SSIM for images in [0, 1]."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.shape != B.shape:
        raise MetricError(f"image shapes differ: {A.shape} vs {B.shape}")
    mse = float(np.mean((A - B) ** 2))
    psnr = PSNR_CAP if mse == 0 else float(min(PSNR_CAP, 10.0 * np.log10(1.0 / mse)))
    return ImageMetrics(psnr=psnr, mse=mse, ssim=ssim(A, B))


# ---------------------------------------------------------------------------
# cross-validation


def kfold_splits(n: int, k: int = 5, seed: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    """``k`` (train, test) index pairs whose test sets partition ``range(n)``.

    Fold sizes differ by at most one; the first ``n % k`` folds are the larger.
    """
    if k < 1:
        raise MetricError(f"k must be positive, got {k}")
    if n < k:
        raise MetricError(f"cannot split {n} items into {k} folds")
    perm = stream(seed, "kfold").permutation(n)
    out = []
    for test in np.array_split(perm, k):
        mask = np.ones(n, dtype=bool)
        mask[test] = False
        out.append((np.flatnonzero(mask), np.sort(test)))
    return out
