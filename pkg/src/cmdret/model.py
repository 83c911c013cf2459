"""Composition of the trainable pieces into the full training forward pass."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoders import (
    FeatureSequence,
    ModelConfig,
    MultiLayerSpeechFeatures,
    ParamStore,
    aggregate_layers,
    encode_speech,
    image_passthrough,
)
from .errors import BatchSizeError
from .fusion import NoiseSpec, denoise_batch
from .objectives import build_targets, cmd_loss_graph, contrastive_loss_graph, total_loss_graph


@dataclass
class LossBreakdown:
    total: Tensor
    l_sic: float
    l_cmd: float


def encode_speech_batch(batch, store: ParamStore, cfg: ModelConfig) -> Tensor:
    """Encode every speech item of a batch; returns the (B, E) global matrix."""
    rows = []
    for i in range(len(batch.pair_ids)):
        mls = MultiLayerSpeechFeatures(batch.speech[i])
        frames = aggregate_layers(mls, store["speech.layer_logits"])
        s_cls, _ = encode_speech(frames, int(batch.lengths[i]), store, cfg)
        rows.append(s_cls)
    return ad.concat_rows(rows)


def normalized_image_cls(batch) -> np.ndarray:
    """Unit-normalized frozen image globals for a batch, shape (B, E)."""
    rows = []
    for i in range(len(batch.pair_ids)):
        seq = image_passthrough(
            FeatureSequence(tokens=batch.patches[i], cls=batch.image_cls[i], modality="image")
        )
        rows.append(seq.cls)
    return np.stack(rows, axis=0)


def forward_losses(
    batch,
    store: ParamStore,
    cfg: ModelConfig,
    alpha: float,
    noise_ratio: float,
    noise_seed: int,
) -> LossBreakdown:
    """Full objective on one batch: alignment loss plus weighted denoising loss.

    With alpha == 0 the denoising path is skipped entirely: no noise is
    drawn and no fusion parameter enters the graph.
    """
    b = len(batch.pair_ids)
    if alpha > 0 and b < 2:
        raise BatchSizeError(f"batch size {b}: the denoising task needs at least 2 items")

    speech_cls = encode_speech_batch(batch, store, cfg)
    image_cls = normalized_image_cls(batch)
    sim = ad.matmul(speech_cls, ad.transpose(ad.as_tensor(image_cls)))
    y_s2i = build_targets(batch.pair_ids, "s2i")
    y_i2s = build_targets(batch.pair_ids, "i2s")
    log_tau = store["temperature.log_tau"]
    l_sic = contrastive_loss_graph(sim, y_s2i, y_i2s, log_tau)

    l_cmd = None
    if alpha > 0:
        denoised = denoise_batch(
            speech_cls, batch.patches, NoiseSpec(ratio=noise_ratio, rng_seed=noise_seed), store
        )
        l_cmd = cmd_loss_graph(speech_cls, denoised, batch.pair_ids, log_tau)

    total = total_loss_graph(l_sic, l_cmd, alpha)
    return LossBreakdown(
        total=total,
        l_sic=l_sic.item(),
        l_cmd=l_cmd.item() if l_cmd is not None else 0.0,
    )
