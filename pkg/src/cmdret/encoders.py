"""Trainable speech encoder and frozen image-side pass-through.

The speech side combines multi-layer upstream features with learned
softmax weights, prepends a trainable CLS vector, runs one transformer
encoder layer (multi-head self-attention plus a position-wise feed
forward, post-norm residuals), projects position 0 into the shared
embedding space and unit-normalizes it. The image side arrives already
extracted and projected; only its global vector is normalized here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, DataError, ShapeError


@dataclass
class MultiLayerSpeechFeatures:
    """Stacked upstream speech features, shape (num_layers, T, D)."""

    layers: np.ndarray

    def __post_init__(self):
        self.layers = np.asarray(self.layers, dtype=np.float64)
        if self.layers.ndim != 3:
            raise ShapeError(f"expected (layers, T, D) features, got shape {self.layers.shape}")
        if self.layers.shape[0] < 2:
            raise ShapeError("need the convolutional output plus at least one hidden layer")


@dataclass
class FeatureSequence:
    """A token sequence plus optional global vector for one modality."""

    tokens: np.ndarray
    cls: np.ndarray | None
    modality: str


@dataclass
class ModelConfig:
    """Dimensions and switches for the trainable model."""

    speech_dim: int = 16
    shared_dim: int = 16
    feature_layers: int = 3
    heads: int = 8
    ff_mult: int = 4
    positional_encoding: bool = False
    pre_norm: bool = False
    tau_init: float = 0.07

    def validate(self) -> None:
        if self.speech_dim < 1 or self.shared_dim < 1:
            raise ConfigError(f"dims must be positive, got speech_dim={self.speech_dim} shared_dim={self.shared_dim}")
        if self.feature_layers < 2:
            raise ConfigError("feature_layers counts the conv output plus hidden layers; need at least 2")
        if self.heads < 1 or self.speech_dim % self.heads != 0:
            raise ConfigError(f"head count {self.heads} must divide speech_dim {self.speech_dim}")
        if self.tau_init <= 0:
            raise ConfigError(f"tau_init must be positive, got {self.tau_init}")


class ParamStore:
    """Named trainable tensors; each name registered exactly once."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def register(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise ContractError(f"parameter {name!r} registered twice")
        t = Tensor(value, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def values(self):
        return self._params.values()

    def names(self) -> list[str]:
        return list(self._params)

    def total_count(self) -> int:
        return sum(p.data.size for p in self._params.values())

    def zero_grads(self) -> None:
        for p in self._params.values():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise DataError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, arr in state.items():
            p = self._params[name]
            if p.data.shape != arr.shape:
                raise DataError(f"parameter {name!r}: stored shape {arr.shape} vs model shape {p.data.shape}")
            p.data = np.ascontiguousarray(arr, dtype=np.float64)


def group_of(name: str) -> str:
    """Reporting group for a parameter name."""
    if name == "speech.layer_logits":
        return "layer_logits"
    if name.startswith("speech."):
        return "encoder"
    if name.startswith("fusion."):
        return "fusion"
    if name.startswith("temperature."):
        return "temperature"
    return "other"


def build_param_store(cfg: ModelConfig, seed: int) -> ParamStore:
    """Initialize every trainable parameter from a seeded generator."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    d, e = cfg.speech_dim, cfg.shared_dim
    ff = cfg.ff_mult * d
    store = ParamStore()

    def dense(rows, cols):
        return rng.normal(0.0, 1.0 / math.sqrt(rows), size=(rows, cols))

    store.register("speech.layer_logits", np.zeros(cfg.feature_layers))
    store.register("speech.cls_token", rng.normal(0.0, 0.02, size=(1, d)))
    for proj in ("q", "k", "v", "out"):
        store.register(f"speech.attn.{proj}_weight", dense(d, d))
        store.register(f"speech.attn.{proj}_bias", np.zeros(d))
    store.register("speech.ln1_gamma", np.ones(d))
    store.register("speech.ln1_beta", np.zeros(d))
    store.register("speech.ff.fc1_weight", dense(d, ff))
    store.register("speech.ff.fc1_bias", np.zeros(ff))
    store.register("speech.ff.fc2_weight", dense(ff, d))
    store.register("speech.ff.fc2_bias", np.zeros(d))
    store.register("speech.ln2_gamma", np.ones(d))
    store.register("speech.ln2_beta", np.zeros(d))
    store.register("speech.proj_weight", dense(d, e))
    store.register("speech.proj_bias", np.zeros(e))

    store.register("fusion.fc_weight", dense(e, e))
    store.register("fusion.fc_bias", np.zeros(e))
    store.register("fusion.ln_gamma", np.ones(e))
    store.register("fusion.ln_beta", np.zeros(e))

    store.register("temperature.log_tau", np.asarray(math.log(cfg.tau_init)))
    return store


def aggregate_layers(mls: MultiLayerSpeechFeatures, layer_logits: Tensor) -> Tensor:
    """Convex combination of upstream layers with softmax(layer_logits) weights."""
    n_layers = mls.layers.shape[0]
    if layer_logits.data.shape != (n_layers,):
        raise ShapeError(
            f"layer logits shape {layer_logits.data.shape} vs {n_layers} feature layers"
        )
    weights = ad.softmax(layer_logits, axis=0)
    return ad.weighted_sum(weights, ad.as_tensor(mls.layers))


def _sinusoidal_positions(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    enc = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return enc


def _attention_mask(total: int, n_valid: int) -> np.ndarray:
    """Additive mask row over key positions; padded frames get MASK_FILL."""
    row = np.zeros((1, total))
    row[0, 1 + n_valid :] = ad.MASK_FILL
    return row


def encode_speech(
    frames: Tensor,
    n_valid: int,
    store: ParamStore,
    cfg: ModelConfig,
) -> tuple[Tensor, Tensor]:
    """Run the transformer layer over CLS + frames; return (S_cls 1xE, tokens TxD).

    ``frames`` may be padded beyond ``n_valid``; padded positions receive no
    attention mass, so the returned global vector is pad-invariant.
    """
    if frames.data.ndim != 2:
        raise ShapeError(f"frames must be 2-D (T, D), got {frames.data.shape}")
    t_pad, d = frames.data.shape
    if d != cfg.speech_dim:
        raise ShapeError(f"frame dim {d} vs configured speech_dim {cfg.speech_dim}")
    if not 1 <= n_valid <= t_pad:
        raise ContractError(f"n_valid={n_valid} out of range for padded length {t_pad}")
    if cfg.speech_dim % cfg.heads != 0:
        raise ConfigError(f"head count {cfg.heads} must divide speech_dim {cfg.speech_dim}")

    x = ad.concat_rows([store["speech.cls_token"], frames])
    total = t_pad + 1
    if cfg.positional_encoding:
        x = ad.add(x, ad.as_tensor(_sinusoidal_positions(total, d)))

    def attn_block(inp: Tensor) -> Tensor:
        q = ad.linear(inp, store["speech.attn.q_weight"], store["speech.attn.q_bias"])
        k = ad.linear(inp, store["speech.attn.k_weight"], store["speech.attn.k_bias"])
        v = ad.linear(inp, store["speech.attn.v_weight"], store["speech.attn.v_bias"])
        head_dim = d // cfg.heads
        mask = ad.as_tensor(np.broadcast_to(_attention_mask(total, n_valid), (total, total)).copy())
        outs = []
        for h in range(cfg.heads):
            lo, hi = h * head_dim, (h + 1) * head_dim
            qh, kh, vh = (ad.slice_cols(m, lo, hi) for m in (q, k, v))
            scores = ad.scale(ad.matmul(qh, ad.transpose(kh)), 1.0 / math.sqrt(head_dim))
            weights = ad.softmax(ad.add(scores, mask), axis=-1)
            outs.append(ad.matmul(weights, vh))
        merged = ad.concat_rows([ad.transpose(o) for o in outs])
        attn = ad.transpose(merged)
        return ad.linear(attn, store["speech.attn.out_weight"], store["speech.attn.out_bias"])

    def ff_block(inp: Tensor) -> Tensor:
        h1 = ad.gelu(ad.linear(inp, store["speech.ff.fc1_weight"], store["speech.ff.fc1_bias"]))
        return ad.linear(h1, store["speech.ff.fc2_weight"], store["speech.ff.fc2_bias"])

    if cfg.pre_norm:
        a = attn_block(ad.layer_norm(x, store["speech.ln1_gamma"], store["speech.ln1_beta"]))
        h1 = ad.add(x, a)
        f = ff_block(ad.layer_norm(h1, store["speech.ln2_gamma"], store["speech.ln2_beta"]))
        h2 = ad.add(h1, f)
    else:
        h1 = ad.layer_norm(ad.add(x, attn_block(x)), store["speech.ln1_gamma"], store["speech.ln1_beta"])
        h2 = ad.layer_norm(ad.add(h1, ff_block(h1)), store["speech.ln2_gamma"], store["speech.ln2_beta"])

    cls_out = ad.slice_rows(h2, 0, 1)
    projected = ad.linear(cls_out, store["speech.proj_weight"], store["speech.proj_bias"])
    s_cls = ad.l2_normalize_rows(projected)
    tokens = ad.slice_rows(h2, 1, total)
    return s_cls, tokens


def image_passthrough(raw: FeatureSequence) -> FeatureSequence:
    """Normalize the frozen image global vector; patches pass unchanged."""
    if raw.cls is None:
        raise DataError("image features carry no global (cls) vector")
    cls = np.asarray(raw.cls, dtype=np.float64)
    norm = float(np.sqrt((cls * cls).sum()))
    if norm < 1e-30:
        raise DataError("norm underflow: image global vector is (near-)zero")
    return FeatureSequence(tokens=raw.tokens, cls=cls / norm, modality=raw.modality)
