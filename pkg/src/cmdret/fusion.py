"""Denoising-path forward: in-batch patch-swap noise, then reconstruction
of a global image vector by cross-attending from the paired speech vector.

Noise replaces a fixed fraction of each item's patch features with patches
drawn from *other* items in the batch. The fusion stage queries the noisy
patches with the item's own speech global vector (identity query/key/value
projections), applies a square FC with a residual connection and layer
norm, and unit-normalizes the result.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoders import ParamStore
from .errors import BatchSizeError, ConfigError, ShapeError


@dataclass
class NoiseSpec:
    """Fraction of patches to replace per item, and the seed that fixes the draw."""

    ratio: float = 0.30
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.ratio < 1.0:
            raise ConfigError(f"noise ratio must lie in [0, 1), got {self.ratio}")


@dataclass
class NoisyImageBatch:
    """Noised patches plus bookkeeping of what was replaced from where.

    donor_index[b, n] = (source item, source patch) for replaced slots,
    (-1, -1) elsewhere.
    """

    patches: np.ndarray
    replaced_mask: np.ndarray
    donor_index: np.ndarray


def replaced_count(ratio: float, n_patches: int) -> int:
    """round-half-up of ratio * N, identical for every batch item."""
    return int(math.floor(ratio * n_patches + 0.5))


def inject_patch_noise(batch_patches: np.ndarray, spec: NoiseSpec) -> NoisyImageBatch:
    """Swap a seeded selection of patches with patches from other batch items.

    Replacement positions are drawn uniformly without replacement per item;
    each replaced slot takes a donor item uniform over the other B-1 items
    and a donor position uniform over N, drawn independently per slot.
    """
    patches = np.asarray(batch_patches, dtype=np.float64)
    if patches.ndim != 3:
        raise ShapeError(f"expected (B, N, D) patches, got shape {patches.shape}")
    b, n, _ = patches.shape
    if n < 1:
        raise ShapeError("need at least one patch per item")
    if b < 2:
        raise BatchSizeError(f"batch size {b}: no donor available for patch noise")

    count = replaced_count(spec.ratio, n)
    noisy = patches.copy()
    mask = np.zeros((b, n), dtype=bool)
    donors = np.full((b, n, 2), -1, dtype=np.int64)
    rng = np.random.default_rng(spec.rng_seed)
    for i in range(b):
        positions = rng.choice(n, size=count, replace=False)
        for pos in positions:
            donor_item = int(rng.integers(b - 1))
            if donor_item >= i:
                donor_item += 1
            donor_pos = int(rng.integers(n))
            noisy[i, pos] = patches[donor_item, donor_pos]
            mask[i, pos] = True
            donors[i, pos] = (donor_item, donor_pos)
    return NoisyImageBatch(patches=noisy, replaced_mask=mask, donor_index=donors)


def cross_attend(speech_cls: Tensor, noisy: NoisyImageBatch) -> Tensor:
    """Attention-pool each item's noisy patches with its own speech query.

    Identity query/key/value projections: weights = softmax(q K^T / sqrt(E))
    with K = V = the item's patches; output row i is the pooled vector for
    pair i.
    """
    b, n, dim = noisy.patches.shape
    if speech_cls.data.ndim != 2 or speech_cls.data.shape != (b, dim):
        raise ShapeError(
            f"speech queries {speech_cls.data.shape} vs noisy patches {noisy.patches.shape}"
        )
    inv_sqrt = 1.0 / math.sqrt(dim)
    rows = []
    for i in range(b):
        q = ad.slice_rows(speech_cls, i, i + 1)
        kv = ad.as_tensor(noisy.patches[i])
        scores = ad.scale(ad.matmul(q, ad.transpose(kv)), inv_sqrt)
        weights = ad.softmax(scores, axis=-1)
        rows.append(ad.matmul(weights, kv))
    return ad.concat_rows(rows)


def fuse_project(attended: Tensor, store: ParamStore) -> Tensor:
    """FC + residual + layer norm, then unit-normalize each reconstructed row."""
    h = ad.linear(attended, store["fusion.fc_weight"], store["fusion.fc_bias"])
    res = ad.add(h, attended)
    normed = ad.layer_norm(res, store["fusion.ln_gamma"], store["fusion.ln_beta"])
    return ad.l2_normalize_rows(normed)


def denoise_batch(
    speech_cls: Tensor,
    batch_patches: np.ndarray,
    spec: NoiseSpec,
    store: ParamStore,
) -> Tensor:
    """Full denoising forward: noise, cross-attend, project. Rows unit-norm."""
    noisy = inject_patch_noise(batch_patches, spec)
    return fuse_project(cross_attend(speech_cls, noisy), store)
