"""Global, summary and fine-grained contrastive losses.

All losses are symmetric InfoNCE: the mean of a row-direction and a
column-direction softmax cross-entropy whose targets sit on the diagonal.
Each direction is averaged over its queries.

The fine-grained loss pools image patches into one region per stimulus
sentence with cross-attention, then contrasts each region with its stimulus.
Two readings of the negative pool are supported: ``within_image`` (the other
two stimuli of the same item) and ``batch_wide`` (every stimulus in the batch).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Graph, Tensor
from .embedding import N_STIMULI, EmbeddingBatch

# additive logit for excluded pairs; exp() of it underflows to exactly zero
MASKED_LOGIT = -1e4

NEGATIVE_POOLS = ("within_image", "batch_wide")
POOLING_RULES = ("softmax_over_patches", "paper_literal")


class ContrastiveError(ValueError):
    pass


@dataclass(frozen=True)
class ContrastiveConfig:
    tau: float = 0.07
    negative_pool: str = "within_image"
    pooling_rule: str = "softmax_over_patches"
    # temperature of the cross-attention softmax; None reuses tau
    pool_tau: float | None = None

    def __post_init__(self):
        if not self.tau > 0:
            raise ContrastiveError(f"tau must be positive, got {self.tau}")
        if self.pool_tau is not None and not self.pool_tau > 0:
            raise ContrastiveError(f"pool_tau must be positive, got {self.pool_tau}")
        if self.negative_pool not in NEGATIVE_POOLS:
            raise ContrastiveError(f"negative_pool must be one of {NEGATIVE_POOLS}, got {self.negative_pool!r}")
        if self.pooling_rule not in POOLING_RULES:
            raise ContrastiveError(f"pooling_rule must be one of {POOLING_RULES}, got {self.pooling_rule!r}")

    @property
    def attention_tau(self) -> float:
        return self.tau if self.pool_tau is None else self.pool_tau


@dataclass
class RegionRepresentation:
    """Pooled unit regions (``n x 3 x d``) and their pooling weights (``n x M_p x 3``)."""

    values: Tensor
    attention: np.ndarray

    def flat(self) -> Tensor:
        n, k, d = self.values.shape
        return self.values.reshape(n * k, d)


def _as_tensor(x, g: Graph | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return (g if g is not None else Graph()).const(x)


def block_mask(n_blocks: int, rows_per_block: int, cols_per_block: int) -> np.ndarray:
    """Boolean ``(n*r) x (n*c)`` matrix, true inside the diagonal blocks."""
    return np.kron(np.eye(n_blocks, dtype=bool), np.ones((rows_per_block, cols_per_block), dtype=bool))


def symmetric_cross_entropy(logits: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Mean of row- and column-softmax cross-entropy with diagonal targets.

    ``logits`` is ``m x m`` or a stack ``b x m x m`` (averaged over all
    ``b * m`` queries per direction). Entries where ``mask`` is false are
    removed from both softmaxes.
    """
    m = logits.shape[-1]
    if logits.ndim not in (2, 3) or logits.shape[-2] != m:
        raise ContrastiveError(f"expected square logit matrices, got {logits.shape}")
    if mask is not None:
        logits = logits + np.where(mask, 0.0, MASKED_LOGIT)
    diag = dc.sum(dc.mul(logits, np.eye(m)), axis=-1)
    queries = int(np.prod(logits.shape[:-1]))
    rows = dc.sum(dc.logsumexp_rows(logits) - diag) / queries
    cols = dc.sum(dc.logsumexp_rows(logits.T) - diag) / queries
    return (rows + cols) * 0.5


def info_nce_symmetric(S, tau: float) -> Tensor:
    """Symmetric InfoNCE over an ``n x n`` similarity matrix whose diagonal holds the positives."""
    if not tau > 0:
        raise ContrastiveError(f"tau must be positive, got {tau}")
    S = _as_tensor(S)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ContrastiveError(f"info_nce_symmetric needs a square similarity matrix, got {S.shape}")
    return symmetric_cross_entropy(S / tau)


def global_loss(batch: EmbeddingBatch, tau: float | None = None) -> Tensor:
    return info_nce_symmetric(batch.image_global @ batch.text_full.T, batch.tau if tau is None else tau)


def summary_loss(batch: EmbeddingBatch, tau: float | None = None) -> Tensor:
    return info_nce_symmetric(batch.image_global @ batch.text_summary.T, batch.tau if tau is None else tau)


# ---------------------------------------------------------------------------
# region pooling


def pool_regions(patches: Tensor, stimuli: Tensor, cfg: ContrastiveConfig) -> RegionRepresentation:
    """Cross-attention pooling of ``n x M_p x d`` patches by ``n x 3 x d`` stimuli, item by item."""
    if patches.ndim != 3 or stimuli.ndim != 3 or stimuli.shape[1] != N_STIMULI:
        raise ContrastiveError(f"pool_regions expects n x M_p x d patches and n x 3 x d stimuli, got {patches.shape}, {stimuli.shape}")
    if patches.shape[0] != stimuli.shape[0] or patches.shape[2] != stimuli.shape[2]:
        raise dc.ShapeError("pool_regions", patches.shape, stimuli.shape)
    if cfg.pooling_rule == "softmax_over_patches":
        # each stimulus spreads one unit of attention over its item's patches
        weights = dc.row_softmax((stimuli @ patches.T) / cfg.attention_tau)
    else:
        # each patch splits one unit of attention across the item's three stimuli
        weights = dc.row_softmax((patches @ stimuli.T) / cfg.attention_tau).T
    try:
        values = dc.l2_normalize_rows(weights @ patches)
    except dc.ZeroNormError as exc:
        raise ContrastiveError(f"pool_regions: zero pooled vector at flat stimulus rows {exc.rows}") from None
    return RegionRepresentation(values, np.swapaxes(weights.value, -1, -2).copy())


def cross_attention_pool(image_patches, stimuli, cfg: ContrastiveConfig | None = None):
    """Single-item pooling: ``M_p x d`` patches and ``3 x d`` stimuli.

    Returns ``(regions 3 x d, weights M_p x 3)``; regions are a Tensor when
    inputs are tensors, otherwise an array.
    """
    cfg = cfg or ContrastiveConfig()
    g = next((x.graph for x in (image_patches, stimuli) if isinstance(x, Tensor)), None)
    as_arrays = g is None
    g = g if g is not None else Graph()
    patches = _as_tensor(image_patches, g)
    stim = _as_tensor(stimuli, g)
    if patches.ndim != 2 or stim.ndim != 2 or stim.shape[0] != N_STIMULI:
        raise ContrastiveError(f"expected M_p x d patches and {N_STIMULI} x d stimuli, got {patches.shape}, {stim.shape}")
    reg = pool_regions(patches.reshape(1, *patches.shape), stim.reshape(1, *stim.shape), cfg)
    regions = reg.values.reshape(stim.shape)
    return (np.array(regions.value) if as_arrays else regions), reg.attention[0]


def _flat(x: Tensor) -> Tensor:
    return x.reshape(-1, x.shape[-1]) if x.ndim == 3 else x


def region_similarity(regions: Tensor, stimuli: Tensor) -> Tensor:
    """``3n x 3n`` grid ``S[r, s] = cos(region r, stimulus s)`` over item-major flattened rows."""
    return _flat(regions) @ _flat(stimuli).T


def region_contrastive_loss(regions: Tensor, stimuli: Tensor, cfg: ContrastiveConfig) -> Tensor:
    """Fine-grained InfoNCE between already pooled unit regions and unit stimuli."""
    if regions.shape != stimuli.shape or regions.ndim != 3 or regions.shape[1] != N_STIMULI:
        raise ContrastiveError(f"regions {regions.shape} and stimuli {stimuli.shape} must both be n x 3 x d")
    if cfg.negative_pool == "within_image":
        # one 3 x 3 problem per item; identical to masking the batch grid
        return symmetric_cross_entropy((regions @ stimuli.T) / cfg.tau)
    return symmetric_cross_entropy(region_similarity(regions, stimuli) / cfg.tau)


def fine_grained_loss(batch: EmbeddingBatch, cfg: ContrastiveConfig | None = None) -> Tensor:
    cfg = cfg or ContrastiveConfig(tau=batch.tau)
    reg = pool_regions(batch.image_patches, batch.text_stimuli, cfg)
    return region_contrastive_loss(reg.values, batch.text_stimuli, cfg)
