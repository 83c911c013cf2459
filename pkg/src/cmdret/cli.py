"""Command-line entry point.

Subcommands: train, eval, gradcheck, synth, sweep-alpha. Every flag
mirrors a configuration key one-to-one; precedence is defaults < config
file < flags. Exit codes: 0 success, 1 config, 2 data, 3 numeric or
divergence, 4 io.
"""

from __future__ import annotations

import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .config import RunConfig, resolve_config
from .dataio import Batch, assemble_batch, load_manifest, synthesize_dataset
from .encoders import build_param_store, group_of, image_passthrough, FeatureSequence
from .errors import (
    ConfigError,
    ContractError,
    DataError,
    DeterminismError,
    DivergenceError,
    StateError,
)
from .gradcheck import finite_diff_check
from .model import encode_speech_batch, forward_losses
from .retrieval import evaluate_bidirectional
from .trainer import load_checkpoint, noise_seed_for, run_training

USAGE = """usage: cmdret <command> [--config FILE] [--<key> <value> ...]

commands:
  train        train a model on a manifest (needs manifest, checkpoint_dir)
  eval         evaluate a checkpoint (needs checkpoint, manifest or eval_manifest)
  gradcheck    verify every parameter gradient against finite differences
  synth        generate a synthetic paired dataset (needs out_dir)
  sweep-alpha  train/evaluate once per alpha in `alphas` (needs manifest, checkpoint_dir)

any configuration key doubles as a flag, e.g. --batch_size 8 --alpha 0.5
"""

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3, 4

_VALID_KEYS = {f.name for f in fields(RunConfig)}
_GRADCHECK_MAX_DIM = 32


def _parse_argv(argv: list[str]) -> tuple[str, str | None, dict[str, str]]:
    if not argv or argv[0] in ("-h", "--help", "help"):
        print(USAGE)
        raise SystemExit(EXIT_OK)
    command = argv[0]
    config_file = None
    overrides: dict[str, str] = {}
    i = 1
    while i < len(argv):
        tok = argv[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}; flags look like --key value")
        key = tok[2:]
        if i + 1 >= len(argv):
            raise ConfigError(f"flag --{key} is missing a value")
        value = argv[i + 1]
        i += 2
        if key == "config":
            config_file = value
        elif key in _VALID_KEYS:
            overrides[key] = value
        else:
            raise ConfigError(f"unknown configuration key {key!r}")
    return command, config_file, overrides


def _print_header(command: str, config_file: str | None, overrides: dict[str, str],
                  cfg: RunConfig, out=sys.stdout) -> None:
    print(f"# command = {command}", file=out)
    print(f"# config_file = {config_file or '(none)'}", file=out)
    for k, v in overrides.items():
        print(f"# override {k} = {v}", file=out)
    print("# resolved configuration:", file=out)
    for line in cfg.echo_lines():
        print(f"#   {line}", file=out)


def _require(cfg: RunConfig, key: str) -> str:
    value = getattr(cfg, key)
    if not value:
        raise ConfigError(f"{key} must be set for this command")
    return value


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_train(cfg: RunConfig, header: list[str]) -> int:
    manifest_path = _require(cfg, "manifest")
    out_dir = _require(cfg, "checkpoint_dir")
    train_cfg = cfg.train_config()
    train_cfg.validate()
    model_cfg = cfg.model_config()
    model_cfg.validate()
    manifest = load_manifest(manifest_path, split="train")
    resume = Path(cfg.resume) if cfg.resume else None
    result = run_training(
        manifest, train_cfg, model_cfg, out_dir,
        resume=resume, config_hash=cfg.digest(), header_lines=header,
    )
    last = result.metrics[-1]
    print(f"finished {train_cfg.total_steps} steps: "
          f"l_sic={last[1]:.6f} l_cmd={last[2]:.6f} total={last[3]:.6f}")
    print(f"checkpoint: {result.final_checkpoint}")
    print(f"metrics: {result.metrics_path}")
    return EXIT_OK


def _encode_manifest(manifest, store, model_cfg, batch_size: int):
    """Global vectors for every caption (manifest order) and every image."""
    captions = manifest.captions()
    speech_rows = []
    for lo in range(0, len(captions), batch_size):
        batch = assemble_batch(captions[lo : lo + batch_size])
        speech_rows.append(encode_speech_batch(batch, store, model_cfg).data)
    speech_cls = np.concatenate(speech_rows, axis=0)

    image_rows = []
    image_index: dict = {}
    for e in manifest.entries:
        from .dataio import read_feature_file

        feats = read_feature_file(e.image_path)
        seq = image_passthrough(
            FeatureSequence(tokens=feats.layers[0], cls=feats.cls[0], modality="image")
        )
        image_index[e.image_path] = len(image_rows)
        image_rows.append(seq.cls)
    image_cls = np.stack(image_rows, axis=0)

    speech_to_image = [image_index[img] for (_, img, _) in captions]
    return speech_cls, image_cls, speech_to_image


def cmd_eval(cfg: RunConfig, header: list[str]) -> int:
    ckpt_path = _require(cfg, "checkpoint")
    manifest_path = cfg.eval_manifest or _require(cfg, "manifest")
    model_cfg = cfg.model_config()
    model_cfg.validate()
    manifest = load_manifest(manifest_path, split="eval")
    params, _, _, step, _ = load_checkpoint(ckpt_path)
    store = build_param_store(model_cfg, cfg.seed)
    store.load_state(params)

    speech_cls, image_cls, speech_to_image = _encode_manifest(
        manifest, store, model_cfg, max(1, cfg.batch_size)
    )
    report = evaluate_bidirectional(speech_cls, image_cls, speech_to_image)
    print(f"checkpoint step {step}, {manifest.num_captions} captions, {manifest.num_images} images")
    print(report.table())
    if cfg.report_path:
        out = Path(cfg.report_path)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text("\n".join(report.machine_lines()) + "\n", encoding="utf-8")
        print(f"report: {out}")
    return EXIT_OK


def _gradcheck_batch(cfg: RunConfig) -> Batch:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x67636B]))
    b = cfg.gradcheck_batch
    t, n = cfg.gradcheck_frames, cfg.gradcheck_patches
    d, e, layers = cfg.speech_dim, cfg.shared_dim, cfg.feature_layers
    lengths = np.array([max(1, t - (i % 2)) for i in range(b)], dtype=np.int64)
    speech = rng.normal(size=(b, layers, t, d))
    ids = [f"p{max(0, i - 1)}" for i in range(b)]  # first two share a label
    return Batch(
        speech=speech,
        lengths=lengths,
        patches=rng.normal(size=(b, n, e)),
        image_cls=rng.normal(size=(b, e)),
        pair_ids=ids,
    )


def cmd_gradcheck(cfg: RunConfig, header: list[str]) -> int:
    if cfg.speech_dim > _GRADCHECK_MAX_DIM or cfg.shared_dim > _GRADCHECK_MAX_DIM:
        raise ConfigError(
            f"gradcheck probes every parameter element and is bounded to dims <= {_GRADCHECK_MAX_DIM}; "
            f"got speech_dim={cfg.speech_dim} shared_dim={cfg.shared_dim}. "
            f"Lower the dims (gradients are dimension-independent)."
        )
    model_cfg = cfg.model_config()
    model_cfg.validate()
    store = build_param_store(model_cfg, cfg.seed)
    batch = _gradcheck_batch(cfg)
    noise_seed = noise_seed_for(cfg.seed, 0)
    alpha = cfg.alpha if cfg.alpha > 0 else 0.5  # keep the fusion path in the graph

    def loss_fn(params):
        return forward_losses(
            batch, params, model_cfg,
            alpha=alpha, noise_ratio=cfg.noise_ratio, noise_seed=noise_seed,
        ).total

    report = finite_diff_check(loss_fn, store, h=cfg.fd_step, tol=cfg.fd_tol)

    groups: dict[str, float] = {}
    for name, check in report.per_param.items():
        g = group_of(name)
        groups[g] = max(groups.get(g, 0.0), check.max_error)
    for g in sorted(groups):
        status = "ok" if groups[g] < cfg.fd_tol else "FAIL"
        print(f"group {g}: worst relative error {groups[g]:.3e} [{status}]")
    worst = report.worst()
    print(f"worst parameter: {worst.name}[{worst.worst_index}] = {worst.max_error:.3e}")
    if not report.passed:
        for c in report.failures():
            print(f"FAILED: {c.name} (index {c.worst_index}, error {c.max_error:.3e})", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"gradcheck passed at tol {cfg.fd_tol:g} (h={cfg.fd_step:g})")
    return EXIT_OK


def cmd_synth(cfg: RunConfig, header: list[str]) -> int:
    out_dir = _require(cfg, "out_dir")
    manifest = synthesize_dataset(
        out_dir,
        num_images=cfg.num_images,
        captions_per_image=cfg.captions_per_image,
        frames=cfg.synth_frames,
        patches=cfg.synth_patches,
        speech_dim=cfg.speech_dim,
        shared_dim=cfg.shared_dim,
        seed=cfg.seed,
        difficulty=cfg.difficulty,
        feature_layers=cfg.feature_layers,
    )
    print(f"manifest: {manifest}")
    return EXIT_OK


def cmd_sweep_alpha(cfg: RunConfig, header: list[str]) -> int:
    manifest_path = _require(cfg, "manifest")
    out_root = Path(_require(cfg, "checkpoint_dir"))
    alphas = cfg.alpha_list()
    sweep_path = Path(cfg.sweep_out) if cfg.sweep_out else out_root / "sweep.csv"
    sweep_path.parent.mkdir(parents=True, exist_ok=True)

    manifest = load_manifest(manifest_path, split="train")
    model_cfg = cfg.model_config()
    model_cfg.validate()
    with open(sweep_path, "w", encoding="utf-8") as out:
        for alpha in alphas:
            run_cfg = cfg.train_config()
            run_cfg.alpha = alpha
            run_cfg.validate()
            run_dir = out_root / f"alpha_{alpha:g}"
            result = run_training(manifest, run_cfg, model_cfg, run_dir,
                                  config_hash=cfg.digest(), header_lines=header)
            params, _, _, _, _ = load_checkpoint(result.final_checkpoint)
            store = build_param_store(model_cfg, cfg.seed)
            store.load_state(params)
            eval_manifest = (
                load_manifest(cfg.eval_manifest, split="eval") if cfg.eval_manifest else manifest
            )
            speech_cls, image_cls, pairing = _encode_manifest(
                eval_manifest, store, model_cfg, max(1, cfg.batch_size)
            )
            report = evaluate_bidirectional(speech_cls, image_cls, pairing)
            line = f"{alpha:g},{report.r_at[1]['mean']:.4f}"
            out.write(line + "\n")
            out.flush()
            print(line)
    print(f"sweep results: {sweep_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

_COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "synth": cmd_synth,
    "sweep-alpha": cmd_sweep_alpha,
}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        command, config_file, overrides = _parse_argv(argv)
        if command not in _COMMANDS:
            raise ConfigError(f"unknown command {command!r}; try --help")
        cfg = resolve_config(config_file, overrides)
        _print_header(command, config_file, overrides, cfg)
        header = [f"command = {command}", f"config_file = {config_file or '(none)'}"]
        header += [f"override {k} = {v}" for k, v in overrides.items()]
        header += cfg.echo_lines()
        return _COMMANDS[command](cfg, header)
    except SystemExit as exc:
        return int(exc.code or 0)
    except ConfigError as exc:
        print(f"error[config]: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"error[data]: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (DivergenceError, DeterminismError, ContractError, StateError) as exc:
        print(f"error[numeric]: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"error[io]: {exc}", file=sys.stderr)
        return EXIT_IO


def entry() -> None:
    sys.exit(main())
