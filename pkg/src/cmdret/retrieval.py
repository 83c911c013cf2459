"""Inference-time evaluation: global-feature similarity and Recall@K in
both directions. The fusion stage plays no part here; scoring is a plain
dot product between unit-normalized global vectors.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import ContractError, DataError, ShapeError

REPORT_KS = (1, 5, 10)


@dataclass
class RetrievalReport:
    """Recall percentages per K for both directions plus their mean."""

    r_at: dict[int, dict[str, float]]  # K -> {"s2i": x, "i2s": y, "mean": m}
    num_speech: int
    num_images: int

    def machine_lines(self) -> list[str]:
        lines = []
        for direction in ("s2i", "i2s", "mean"):
            for k in sorted(self.r_at):
                lines.append(f"{direction},{k},{self.r_at[k][direction]:.4f}")
        return lines

    def table(self) -> str:
        ks = sorted(self.r_at)
        header = "direction " + " ".join(f"{'R@' + str(k):>8}" for k in ks)
        rows = [header, "-" * len(header)]
        for direction in ("s2i", "i2s", "mean"):
            cells = " ".join(f"{self.r_at[k][direction]:8.2f}" for k in ks)
            rows.append(f"{direction:<9} {cells}")
        rows.append(f"queries: {self.num_speech} speech / {self.num_images} images")
        return "\n".join(rows)


def score_all_pairs(speech_cls: np.ndarray, image_cls: np.ndarray) -> np.ndarray:
    """Dot-product similarity matrix between unit-normalized global vectors."""
    speech_cls = np.asarray(speech_cls, dtype=np.float64)
    image_cls = np.asarray(image_cls, dtype=np.float64)
    if speech_cls.ndim != 2 or image_cls.ndim != 2 or speech_cls.shape[1] != image_cls.shape[1]:
        raise ShapeError(
            f"incompatible embedding shapes {speech_cls.shape} and {image_cls.shape}"
        )
    for name, mat in (("speech", speech_cls), ("image", image_cls)):
        norms = np.sqrt((mat * mat).sum(axis=1))
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise DataError(f"{name} vectors are not unit-normalized (max |norm-1| = {np.abs(norms - 1).max():.3g})")
    return speech_cls @ image_cls.T


def recall_at_k(sim: np.ndarray, ground_truth: Mapping[int, set[int]], k: int) -> float:
    """Percentage of queries whose top-k gallery items contain a correct index.

    Ranking is by descending similarity; ties break toward the lower
    gallery index so results are deterministic.
    """
    sim = np.asarray(sim, dtype=np.float64)
    if sim.ndim != 2:
        raise ShapeError(f"similarity matrix must be 2-D, got {sim.shape}")
    q, g = sim.shape
    if not 1 <= k <= g:
        raise ContractError(f"k={k} outside [1, {g}]")
    hits = 0
    for i in range(q):
        correct = ground_truth.get(i)
        if not correct:
            raise DataError(f"query {i} has no correct gallery indices")
        # stable sort on negated scores keeps ascending index order for ties
        top = np.argsort(-sim[i], kind="stable")[:k]
        if any(int(j) in correct for j in top):
            hits += 1
    return 100.0 * hits / q


def evaluate_bidirectional(
    speech_cls: np.ndarray,
    image_cls: np.ndarray,
    speech_to_image: Sequence[int],
    ks: Sequence[int] = REPORT_KS,
) -> RetrievalReport:
    """Recall@K with images as one gallery and all captions as the other.

    ``speech_to_image[i]`` is the gallery index of speech item i's image;
    in the image-to-speech direction any of an image's captions counts as
    a hit. K values larger than a gallery are capped at the gallery size.
    """
    speech_cls = np.asarray(speech_cls, dtype=np.float64)
    image_cls = np.asarray(image_cls, dtype=np.float64)
    n_speech, n_images = speech_cls.shape[0], image_cls.shape[0]
    if len(speech_to_image) != n_speech:
        raise DataError(f"pairing covers {len(speech_to_image)} of {n_speech} speech items")
    if any(not 0 <= int(ix) < n_images for ix in speech_to_image):
        raise DataError("pairing references an image outside the gallery")
    captions_of: dict[int, set[int]] = {}
    for s, img in enumerate(speech_to_image):
        captions_of.setdefault(int(img), set()).add(s)
    if len(captions_of) != n_images:
        unpaired = sorted(set(range(n_images)) - set(captions_of))
        raise DataError(f"images without any caption: {unpaired}")

    sim = score_all_pairs(speech_cls, image_cls)
    gt_s2i = {s: {int(img)} for s, img in enumerate(speech_to_image)}
    gt_i2s = captions_of

    r_at: dict[int, dict[str, float]] = {}
    for k in ks:
        s2i = recall_at_k(sim, gt_s2i, min(k, n_images))
        i2s = recall_at_k(sim.T, gt_i2s, min(k, n_speech))
        r_at[int(k)] = {"s2i": s2i, "i2s": i2s, "mean": (s2i + i2s) / 2.0}
    return RetrievalReport(r_at=r_at, num_speech=n_speech, num_images=n_images)
