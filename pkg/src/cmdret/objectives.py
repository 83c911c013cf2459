"""Training losses: bidirectional contrastive alignment and its denoising
variant, combined with a weighting coefficient.

Targets support multiple positives per row: when n items in a batch share
a pairing label, each positive carries probability 1/n. Cross-entropies
are computed in log space (log-sum-exp over scaled similarities), so the
loss stays finite for any finite inputs, and are averaged over batch rows
so magnitudes are batch-size invariant.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, DataError, ShapeError


def build_targets(pair_ids: Sequence[str], direction: str = "s2i") -> np.ndarray:
    """Row-stochastic target matrix: y[i, j] = 1/n_i where labels match.

    The matching relation is symmetric, so both directions share the same
    matrix; ``direction`` documents which anchoring the caller intends.
    """
    if direction not in ("s2i", "i2s"):
        raise ContractError(f"direction must be 's2i' or 'i2s', got {direction!r}")
    ids = list(pair_ids)
    if not ids:
        raise ContractError("empty batch: no pairing labels")
    b = len(ids)
    y = np.zeros((b, b))
    for i in range(b):
        matches = [j for j in range(b) if ids[j] == ids[i]]
        y[i, matches] = 1.0 / len(matches)
    return y


def similarity_probs(sim: np.ndarray, tau: float, direction: str = "s2i") -> np.ndarray:
    """Row-stochastic softmax of the (transposed, for i2s) similarity matrix at temperature tau."""
    sim = np.asarray(sim, dtype=np.float64)
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1]:
        raise ShapeError(f"similarity matrix must be square, got shape {sim.shape}")
    if not np.all(np.isfinite(sim)):
        raise DataError("similarity matrix contains non-finite entries")
    if tau <= 0:
        raise ContractError(f"temperature must be positive, got {tau}")
    if direction == "i2s":
        sim = sim.T
    elif direction != "s2i":
        raise ContractError(f"direction must be 's2i' or 'i2s', got {direction!r}")
    z = sim / tau
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(y: np.ndarray, p: np.ndarray) -> float:
    """Mean over rows of -sum_j y_j ln p_j.

    A zero probability at a positive target yields +inf (the training path
    works in log space precisely so this cannot happen for finite logits);
    zeros at non-positive targets contribute nothing.
    """
    y = np.asarray(y, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if y.shape != p.shape:
        raise ShapeError(f"target shape {y.shape} vs probability shape {p.shape}")
    if np.any(p < 0):
        raise DataError("probabilities must be non-negative")
    positive = y > 0
    if np.any(p[positive] == 0.0):
        return float("inf")
    terms = np.zeros_like(p)
    terms[positive] = y[positive] * np.log(p[positive])
    return float(-terms.sum(axis=1).mean())


def contrastive_loss(
    p_s2i: np.ndarray, p_i2s: np.ndarray, y_s2i: np.ndarray, y_i2s: np.ndarray
) -> float:
    """Half the sum of the two directional cross-entropies."""
    return 0.5 * (cross_entropy(y_s2i, p_s2i) + cross_entropy(y_i2s, p_i2s))


def total_loss(l_sic: float, l_cmd: float, alpha: float) -> float:
    """Combined objective: alignment loss plus alpha times the denoising loss."""
    if alpha < 0:
        raise ConfigError(f"alpha must be non-negative, got {alpha}")
    return l_sic + alpha * l_cmd


# ---------------------------------------------------------------------------
# differentiable (tape) versions used during training
# ---------------------------------------------------------------------------


def _soft_ce_rows(z: Tensor, y: np.ndarray) -> Tensor:
    """Mean-over-rows cross-entropy of softmax(z) against constant targets y.

    Uses H(y, softmax(z)) = mean_i [logsumexp(z_i) - sum_j y_ij z_ij], valid
    because every target row sums to 1.
    """
    b = z.data.shape[0]
    lse = ad.sum_all(ad.logsumexp(z, axis=1))
    dot = ad.sum_all(ad.mul(z, ad.as_tensor(y)))
    return ad.scale(ad.sub(lse, dot), 1.0 / b)


def contrastive_loss_graph(
    sim: Tensor, y_s2i: np.ndarray, y_i2s: np.ndarray, log_tau: Tensor
) -> Tensor:
    """Differentiable bidirectional contrastive loss from a similarity matrix."""
    b = sim.data.shape[0]
    if sim.data.shape != (b, b) or y_s2i.shape != (b, b) or y_i2s.shape != (b, b):
        raise ShapeError(
            f"square shapes required: sim {sim.data.shape}, targets {y_s2i.shape}/{y_i2s.shape}"
        )
    inv_tau = ad.exp(ad.neg(log_tau))
    z = ad.mul_scalar(sim, inv_tau)
    l_fwd = _soft_ce_rows(z, y_s2i)
    l_bwd = _soft_ce_rows(ad.transpose(z), y_i2s)
    return ad.scale(ad.add(l_fwd, l_bwd), 0.5)


def cmd_loss_graph(
    speech_cls: Tensor,
    denoised_cls: Tensor,
    pair_ids: Sequence[str],
    log_tau: Tensor,
) -> Tensor:
    """Contrastive loss between speech globals and reconstructed image globals.

    ``denoised_cls`` rows must already be unit-normalized; the similarity
    matrix, targets and temperature machinery are identical to the clean
    alignment loss.
    """
    sim = ad.matmul(speech_cls, ad.transpose(denoised_cls))
    y_s2i = build_targets(pair_ids, "s2i")
    y_i2s = build_targets(pair_ids, "i2s")
    return contrastive_loss_graph(sim, y_s2i, y_i2s, log_tau)


def total_loss_graph(l_sic: Tensor, l_cmd: Tensor | None, alpha: float) -> Tensor:
    if alpha < 0:
        raise ConfigError(f"alpha must be non-negative, got {alpha}")
    if l_cmd is None or alpha == 0:
        return l_sic
    return ad.add(l_sic, ad.scale(l_cmd, alpha))
