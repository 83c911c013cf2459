"""Optimization loop: Adam with decoupled weight decay, linear warmup/decay
learning-rate schedule, seeded batching, checkpointing and metric logging.

Everything is deterministic given (seed, config, dataset): parameter init,
batch composition per epoch and the per-step noise draw are all derived
from explicit seeds, so two runs produce bit-identical trajectories and a
checkpoint resume continues exactly where the uninterrupted run would be.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataio import DatasetManifest, batch_plan, make_batches
from .encoders import ModelConfig, ParamStore, build_param_store
from .errors import (
    BatchSizeError,
    ConfigError,
    ContractError,
    DataError,
    DivergenceError,
    FormatError,
)
from .model import forward_losses
from .autodiff import Tape, Tensor


@dataclass
class TrainConfig:
    batch_size: int = 8
    total_steps: int = 500
    warmup_steps: int = 50
    peak_lr: float = 2e-3
    final_lr: float = 1e-8
    weight_decay: float = 1e-6
    alpha: float = 0.5
    noise_ratio: float = 0.30
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay_mode: str = "decoupled"
    decay_shape: str = "linear"
    checkpoint_every: int = 100
    tau_clamp: bool = False
    tau_max_scale: float = 100.0

    def validate(self) -> None:
        if not 0 < self.warmup_steps < self.total_steps:
            raise ConfigError(
                f"need 0 < warmup_steps < total_steps, got {self.warmup_steps}/{self.total_steps}"
            )
        if self.final_lr > self.peak_lr:
            raise ConfigError(f"final_lr {self.final_lr} exceeds peak_lr {self.peak_lr}")
        if self.alpha < 0:
            raise ConfigError(f"alpha must be non-negative, got {self.alpha}")
        if not 0.0 <= self.noise_ratio < 1.0:
            raise ConfigError(f"noise_ratio must lie in [0, 1), got {self.noise_ratio}")
        if self.weight_decay_mode not in ("decoupled", "coupled"):
            raise ConfigError(f"weight_decay_mode must be decoupled|coupled, got {self.weight_decay_mode!r}")
        if self.decay_shape not in ("linear", "cosine", "exponential"):
            raise ConfigError(f"decay_shape must be linear|cosine|exponential, got {self.decay_shape!r}")


def paper_schedule_config(**overrides) -> TrainConfig:
    """Full-scale defaults: batch 128, 60k steps, 4k warmup."""
    cfg = TrainConfig(batch_size=128, total_steps=60000, warmup_steps=4000, peak_lr=1e-4)
    for k, v in overrides.items():
        setattr(cfg, k, v)
    return cfg


def lr_at_step(step: int, cfg: TrainConfig) -> float:
    """Piecewise-linear rate: 0 -> peak over warmup, then peak -> final."""
    if step < 0 or step > cfg.total_steps:
        raise ContractError(f"step {step} outside [0, {cfg.total_steps}]")
    if step <= cfg.warmup_steps:
        return cfg.peak_lr * (step / cfg.warmup_steps)
    frac = (cfg.total_steps - step) / (cfg.total_steps - cfg.warmup_steps)
    if cfg.decay_shape == "linear":
        return cfg.final_lr + (cfg.peak_lr - cfg.final_lr) * frac
    if cfg.decay_shape == "cosine":
        return cfg.final_lr + (cfg.peak_lr - cfg.final_lr) * 0.5 * (1 - math.cos(math.pi * frac))
    return cfg.final_lr * (cfg.peak_lr / cfg.final_lr) ** frac  # exponential


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class OptimState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init_like(cls, store: ParamStore, beta1: float = 0.9, beta2: float = 0.999,
                  eps: float = 1e-8) -> "OptimState":
        return cls(
            m={name: np.zeros_like(p.data) for name, p in store.items()},
            v={name: np.zeros_like(p.data) for name, p in store.items()},
            step=0, beta1=beta1, beta2=beta2, eps=eps,
        )


def decays_weight(name: str) -> bool:
    """Only dense weight matrices shrink; vectors, norms, logits and the
    temperature are excluded."""
    return name.endswith("_weight")


def adam_step(
    params: dict[str, Tensor],
    state: OptimState,
    lr: float,
    weight_decay: float,
    mode: str = "decoupled",
) -> None:
    """Bias-corrected Adam update over the given parameters, in place.

    Every parameter passed in must carry a gradient; ``state.step`` counts
    completed updates across calls.
    """
    for name, p in params.items():
        if p.grad is None:
            raise ContractError(f"parameter {name!r} has no gradient")
    state.step += 1
    t = state.step
    b1, b2, eps = state.beta1, state.beta2, state.eps
    for name, p in params.items():
        g = p.grad
        if mode == "coupled" and weight_decay and decays_weight(name):
            g = g + weight_decay * p.data
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)
        if mode == "decoupled" and weight_decay and decays_weight(name):
            p.data = p.data - lr * weight_decay * p.data


def noise_seed_for(seed: int, step: int) -> int:
    """Stable per-step seed for the patch-noise draw."""
    ss = np.random.SeedSequence([seed, 0x6E6F6973, step])
    return int(ss.generate_state(1, dtype=np.uint64)[0] % (2**63))


def train_step(
    batch,
    store: ParamStore,
    state: OptimState,
    cfg: TrainConfig,
    model_cfg: ModelConfig,
    step: int,
) -> tuple[float, float, float]:
    """One optimization step; returns (l_sic, l_cmd, total) as floats."""
    b = len(batch.pair_ids)
    if cfg.alpha > 0 and b < 2:
        raise BatchSizeError(f"batch size {b}: denoising needs a donor; use alpha=0 or batch >= 2")
    store.zero_grads()
    with Tape() as tape:
        losses = forward_losses(
            batch, store, model_cfg,
            alpha=cfg.alpha, noise_ratio=cfg.noise_ratio,
            noise_seed=noise_seed_for(cfg.seed, step),
        )
        total = losses.total.item()
        if not math.isfinite(total):
            raise DivergenceError("non-finite training loss", step=step)
        tape.backward(losses.total)
    active = {name: p for name, p in store.items() if p.grad is not None}
    lr = lr_at_step(step + 1, cfg)
    adam_step(active, state, lr, cfg.weight_decay, cfg.weight_decay_mode)
    if cfg.tau_clamp:
        floor = -math.log(cfg.tau_max_scale)
        log_tau = store["temperature.log_tau"]
        log_tau.data = np.maximum(log_tau.data, floor)
    return losses.l_sic, losses.l_cmd, total


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"CMDC"
_CKPT_VERSION = 1


def _write_named_arrays(fh, arrays: dict[str, np.ndarray]) -> None:
    fh.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        encoded = name.encode("utf-8")
        fh.write(struct.pack("<H", len(encoded)))
        fh.write(encoded)
        fh.write(struct.pack("<B", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_named_arrays(fh) -> dict[str, np.ndarray]:
    (count,) = struct.unpack("<I", fh.read(4))
    out = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", fh.read(2))
        name = fh.read(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<B", fh.read(1))
        shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        raw = fh.read(8 * size)
        if len(raw) != 8 * size:
            raise FormatError(f"checkpoint truncated while reading {name!r}")
        out[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
    return out


def save_checkpoint(path, store: ParamStore, state: OptimState, step: int, config_hash: bytes) -> None:
    if len(config_hash) != 32:
        raise ContractError("config hash must be 32 bytes")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<H", _CKPT_VERSION))
        fh.write(struct.pack("<Q", step))
        fh.write(config_hash)
        _write_named_arrays(fh, {n: p.data for n, p in store.items()})
        _write_named_arrays(fh, state.m)
        _write_named_arrays(fh, state.v)


def load_checkpoint(path):
    """Returns (params, moments_m, moments_v, step, config_hash)."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _CKPT_MAGIC:
            raise FormatError(f"{path}: bad checkpoint magic {magic!r}", offset=0)
        (version,) = struct.unpack("<H", fh.read(2))
        if version != _CKPT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}", offset=4)
        (step,) = struct.unpack("<Q", fh.read(8))
        config_hash = fh.read(32)
        params = _read_named_arrays(fh)
        m = _read_named_arrays(fh)
        v = _read_named_arrays(fh)
    return params, m, v, step, config_hash


# ---------------------------------------------------------------------------
# full loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    final_checkpoint: Path
    metrics_path: Path
    metrics: list[tuple[int, float, float, float, float]]  # (step, l_sic, l_cmd, total, lr)


def run_training(
    manifest: DatasetManifest,
    cfg: TrainConfig,
    model_cfg: ModelConfig,
    out_dir,
    resume: Path | None = None,
    config_hash: bytes = b"\x00" * 32,
    header_lines: list[str] | None = None,
) -> TrainResult:
    """Train for cfg.total_steps over seeded shuffled batches.

    Writes periodic checkpoints plus ``final.ckpt`` and an append-only
    metrics log with one line per step. With ``resume`` given, optimizer
    state and the step counter continue from the checkpoint and the batch
    stream is fast-forwarded, reproducing the uninterrupted run exactly.
    """
    cfg.validate()
    model_cfg.validate()
    if manifest.num_captions == 0:
        raise DataError("empty dataset")

    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"checkpoint directory not writable: {out}: {exc}") from exc

    store = build_param_store(model_cfg, cfg.seed)
    state = OptimState.init_like(store, cfg.beta1, cfg.beta2, cfg.adam_eps)
    start_step = 0
    if resume is not None:
        params, m, v, start_step, ckpt_hash = load_checkpoint(resume)
        if ckpt_hash != config_hash:
            raise ConfigError("checkpoint was written under a different configuration")
        store.load_state(params)
        state = OptimState(m=m, v=v, step=start_step,
                           beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps)
        if start_step >= cfg.total_steps:
            raise ConfigError(f"checkpoint already at step {start_step} of {cfg.total_steps}")

    metrics_path = out / "metrics.csv"
    mode = "a" if resume is not None and metrics_path.exists() else "w"
    metrics: list[tuple[int, float, float, float, float]] = []
    with open(metrics_path, mode, encoding="utf-8") as log:
        if mode == "w":
            for line in header_lines or []:
                log.write(f"# {line}\n")
            log.write("# step,l_sic,l_cmd,total,lr\n")
        bpe = len(batch_plan(manifest, cfg.batch_size, cfg.seed, 0, training=True))
        epoch = -1
        epoch_batches: list = []
        for step in range(start_step, cfg.total_steps):
            if step // bpe != epoch:
                epoch = step // bpe
                epoch_batches = make_batches(manifest, cfg.batch_size, cfg.seed, epoch, training=True)
            batch = epoch_batches[step % bpe]
            l_sic, l_cmd, total = train_step(batch, store, state, cfg, model_cfg, step)
            lr = lr_at_step(step + 1, cfg)
            metrics.append((step + 1, l_sic, l_cmd, total, lr))
            log.write(f"{step + 1},{l_sic:.17g},{l_cmd:.17g},{total:.17g},{lr:.17g}\n")
            if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(out / f"step_{step + 1:06d}.ckpt", store, state, step + 1, config_hash)
        log.flush()

    final = out / "final.ckpt"
    save_checkpoint(final, store, state, cfg.total_steps, config_hash)
    return TrainResult(final_checkpoint=final, metrics_path=metrics_path, metrics=metrics)
