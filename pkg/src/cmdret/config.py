"""Line-oriented "key = value" run configuration with CLI overrides.

Unknown keys are hard errors in both the file and on the command line, and
the fully resolved configuration is echoed into every output header so a
run can be reproduced from its artifacts alone.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields
from pathlib import Path

from .encoders import ModelConfig
from .errors import ConfigError
from .trainer import TrainConfig


@dataclass
class RunConfig:
    # model dims
    speech_dim: int = 16
    shared_dim: int = 16
    feature_layers: int = 3
    heads: int = 8
    positional_encoding: bool = False
    pre_norm: bool = False
    tau_init: float = 0.07
    # optimization
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
    # paths
    manifest: str = ""
    eval_manifest: str = ""
    checkpoint_dir: str = ""
    checkpoint: str = ""
    report_path: str = ""
    resume: str = ""
    # synthetic data
    out_dir: str = ""
    num_images: int = 32
    captions_per_image: int = 2
    synth_frames: int = 10
    synth_patches: int = 8
    difficulty: float = 0.0
    # gradient check
    fd_step: float = 1e-5
    fd_tol: float = 1e-4
    gradcheck_batch: int = 4
    gradcheck_frames: int = 5
    gradcheck_patches: int = 7
    # alpha sweep
    alphas: str = "0.0,0.5"
    sweep_out: str = ""

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            speech_dim=self.speech_dim,
            shared_dim=self.shared_dim,
            feature_layers=self.feature_layers,
            heads=self.heads,
            positional_encoding=self.positional_encoding,
            pre_norm=self.pre_norm,
            tau_init=self.tau_init,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size,
            total_steps=self.total_steps,
            warmup_steps=self.warmup_steps,
            peak_lr=self.peak_lr,
            final_lr=self.final_lr,
            weight_decay=self.weight_decay,
            alpha=self.alpha,
            noise_ratio=self.noise_ratio,
            seed=self.seed,
            beta1=self.beta1,
            beta2=self.beta2,
            adam_eps=self.adam_eps,
            weight_decay_mode=self.weight_decay_mode,
            decay_shape=self.decay_shape,
            checkpoint_every=self.checkpoint_every,
            tau_clamp=self.tau_clamp,
            tau_max_scale=self.tau_max_scale,
        )

    def echo_lines(self) -> list[str]:
        return [f"{f.name} = {_format_value(getattr(self, f.name))}" for f in fields(RunConfig)]

    def digest(self) -> bytes:
        return hashlib.sha256("\n".join(self.echo_lines()).encode("utf-8")).digest()

    def alpha_list(self) -> list[float]:
        try:
            values = [float(tok) for tok in self.alphas.split(",") if tok.strip() != ""]
        except ValueError as exc:
            raise ConfigError(f"alphas must be a comma-separated float list, got {self.alphas!r}") from exc
        if not values:
            raise ConfigError("alphas list is empty")
        for a in values:
            if not 0.0 <= a <= 1.0:
                raise ConfigError(f"alpha sweep values must lie in [0, 1], got {a}")
        return values


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_value(key: str, raw: str):
    ftype = _FIELD_TYPES.get(key)
    if ftype is None:
        raise ConfigError(f"unknown configuration key {key!r}")
    raw = raw.strip()
    if ftype in ("int", int):
        try:
            return int(raw)
        except ValueError as exc:
            raise ConfigError(f"{key}: expected an integer, got {raw!r}") from exc
    if ftype in ("float", float):
        try:
            return float(raw)
        except ValueError as exc:
            raise ConfigError(f"{key}: expected a number, got {raw!r}") from exc
    if ftype in ("bool", bool):
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected true/false, got {raw!r}")
    return raw


def parse_config_file(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, _, raw = stripped.partition("=")
            key = key.strip()
            values[key] = _parse_value(key, raw)
    return values


def resolve_config(config_file: str | None, overrides: dict) -> RunConfig:
    """defaults < config file < command-line overrides."""
    cfg = RunConfig()
    if config_file:
        for key, value in parse_config_file(config_file).items():
            setattr(cfg, key, value)
    for key, raw in overrides.items():
        setattr(cfg, key, _parse_value(key, raw))
    return cfg
