"""Schedule, optimizer, training-step semantics, determinism and resume."""

from pathlib import Path

import numpy as np
import pytest

from cmdret.autodiff import Tape, Tensor
from cmdret import autodiff as ad
from cmdret.dataio import Batch, DatasetManifest, load_manifest, synthesize_dataset
from cmdret.encoders import ModelConfig, build_param_store
from cmdret.errors import BatchSizeError, ConfigError, ContractError, DataError, DivergenceError
from cmdret.trainer import (
    OptimState,
    TrainConfig,
    adam_step,
    decays_weight,
    load_checkpoint,
    lr_at_step,
    paper_schedule_config,
    run_training,
    save_checkpoint,
    train_step,
)

DESK_MODEL = ModelConfig(speech_dim=8, shared_dim=8, feature_layers=3, heads=8)


def _desk_train(**kw) -> TrainConfig:
    base = dict(batch_size=4, total_steps=20, warmup_steps=2, peak_lr=1e-3, seed=0,
                checkpoint_every=0)
    base.update(kw)
    return TrainConfig(**base)


def _random_batch(b=4, seed=0, labels=None):
    rng = np.random.default_rng(seed)
    return Batch(
        speech=rng.normal(size=(b, 3, 5, 8)),
        lengths=np.full(b, 5, dtype=np.int64),
        patches=rng.normal(size=(b, 6, 8)),
        image_cls=rng.normal(size=(b, 8)),
        pair_ids=labels or [f"p{i}" for i in range(b)],
    )


class TestSchedule:
    def test_full_scale_endpoints_exact(self):
        cfg = paper_schedule_config()
        assert lr_at_step(0, cfg) == 0.0
        assert lr_at_step(4000, cfg) == 1e-4
        assert lr_at_step(60000, cfg) == 1e-8

    def test_peak_attained_only_at_warmup(self):
        cfg = TrainConfig(total_steps=200, warmup_steps=37, peak_lr=3e-3, final_lr=1e-8)
        values = [lr_at_step(s, cfg) for s in range(201)]
        assert max(values) == cfg.peak_lr
        assert values.index(max(values)) == 37

    def test_piecewise_linear_and_continuous(self):
        cfg = TrainConfig(total_steps=100, warmup_steps=20, peak_lr=1e-3, final_lr=1e-8)
        values = np.array([lr_at_step(s, cfg) for s in range(101)])
        diffs = np.diff(values)
        # constant slope within each segment
        np.testing.assert_allclose(diffs[:20], diffs[0], rtol=1e-9)
        np.testing.assert_allclose(diffs[21:], diffs[21], rtol=1e-9)
        # no jump at the junction
        assert abs(values[20] - cfg.peak_lr) < 1e-18

    def test_out_of_range_step_rejected(self):
        cfg = _desk_train()
        with pytest.raises(ContractError):
            lr_at_step(cfg.total_steps + 1, cfg)
        with pytest.raises(ContractError):
            lr_at_step(-1, cfg)

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            TrainConfig(total_steps=10, warmup_steps=10).validate()
        with pytest.raises(ConfigError):
            TrainConfig(peak_lr=1e-5, final_lr=1e-4).validate()
        with pytest.raises(ConfigError):
            TrainConfig(alpha=-1.0).validate()

    def test_alternative_decay_shapes_share_endpoints(self):
        for shape in ("cosine", "exponential"):
            cfg = TrainConfig(total_steps=100, warmup_steps=10, peak_lr=1e-3,
                              final_lr=1e-8, decay_shape=shape)
            assert lr_at_step(10, cfg) == pytest.approx(1e-3, rel=1e-12)
            assert lr_at_step(100, cfg) == pytest.approx(1e-8, rel=1e-12)


class TestAdam:
    def test_zero_gradient_zero_decay_is_fixed_point(self):
        p = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
        p.grad = np.zeros(3)
        state = OptimState(m={"p": np.zeros(3)}, v={"p": np.zeros(3)})
        adam_step({"p": p}, state, lr=0.1, weight_decay=0.0)
        np.testing.assert_array_equal(p.data, [1.0, -2.0, 3.0])

    def test_first_step_moves_by_about_lr(self):
        p = Tensor(np.asarray(0.0), requires_grad=True)
        p.grad = np.asarray(1.0)
        state = OptimState(m={"p": np.zeros(())}, v={"p": np.zeros(())})
        adam_step({"p": p}, state, lr=0.01, weight_decay=0.0)
        assert p.data == pytest.approx(-0.01, rel=1e-6)
        assert state.step == 1

    def test_converges_on_quadratic(self):
        p = Tensor(np.asarray(1.0), requires_grad=True)
        state = OptimState(m={"p": np.zeros(())}, v={"p": np.zeros(())})
        for _ in range(100):
            p.grad = np.asarray(2.0 * float(p.data))  # d/dx x^2
            adam_step({"p": p}, state, lr=0.1, weight_decay=0.0)
        assert abs(float(p.data)) < 0.05

    def test_missing_gradient_names_parameter(self):
        p = Tensor(np.zeros(2), requires_grad=True)
        state = OptimState(m={"w": np.zeros(2)}, v={"w": np.zeros(2)})
        with pytest.raises(ContractError, match="'w'"):
            adam_step({"w": p}, state, lr=0.1, weight_decay=0.0)

    def test_weight_decay_applies_only_to_weight_matrices(self):
        assert decays_weight("speech.attn.q_weight")
        assert decays_weight("fusion.fc_weight")
        assert not decays_weight("speech.attn.q_bias")
        assert not decays_weight("speech.ln1_gamma")
        assert not decays_weight("speech.layer_logits")
        assert not decays_weight("speech.cls_token")
        assert not decays_weight("temperature.log_tau")

    def test_decoupled_and_coupled_modes_differ(self):
        def run(mode):
            p = Tensor(np.asarray([[2.0]]), requires_grad=True, name="x_weight")
            p.grad = np.asarray([[1.0]])
            state = OptimState(m={"x_weight": np.zeros((1, 1))}, v={"x_weight": np.zeros((1, 1))})
            adam_step({"x_weight": p}, state, lr=0.1, weight_decay=0.5, mode=mode)
            return p.item()

        assert run("decoupled") != run("coupled")
        # decoupled: plain step then multiplicative shrink
        p_plain = Tensor(np.asarray([[2.0]]), requires_grad=True)
        p_plain.grad = np.asarray([[1.0]])
        st = OptimState(m={"p": np.zeros((1, 1))}, v={"p": np.zeros((1, 1))})
        adam_step({"p": p_plain}, st, lr=0.1, weight_decay=0.0)
        expected = p_plain.item() * (1.0 - 0.1 * 0.5)
        assert run("decoupled") == pytest.approx(expected, rel=1e-12)


class TestTrainStep:
    def test_single_item_batch_with_denoising_rejected(self):
        cfg = _desk_train(alpha=0.5)
        store = build_param_store(DESK_MODEL, 0)
        state = OptimState.init_like(store)
        with pytest.raises(BatchSizeError):
            train_step(_random_batch(b=1), store, state, cfg, DESK_MODEL, step=0)

    def test_alpha_zero_keeps_fusion_at_initialization(self):
        cfg = _desk_train(alpha=0.0, total_steps=30, warmup_steps=3)
        store = build_param_store(DESK_MODEL, 0)
        init = store.state_dict()
        state = OptimState.init_like(store)
        for step in range(10):
            l_sic, l_cmd, total = train_step(
                _random_batch(seed=step), store, state, cfg, DESK_MODEL, step
            )
            assert l_cmd == 0.0
            assert total == l_sic
        for name in store.names():
            if name.startswith("fusion."):
                np.testing.assert_array_equal(store[name].data, init[name])
            elif name.startswith("speech.") or name.startswith("temperature."):
                assert not np.array_equal(store[name].data, init[name]), name

    def test_divergence_raises_with_step_index(self):
        cfg = _desk_train(alpha=0.0)
        store = build_param_store(DESK_MODEL, 0)
        state = OptimState.init_like(store)
        bad = _random_batch()
        bad.speech[0, 0, 0, 0] = np.nan
        with pytest.raises(DivergenceError, match="step 7"):
            train_step(bad, store, state, cfg, DESK_MODEL, step=7)

    def test_deterministic_given_seed(self):
        def losses():
            cfg = _desk_train(alpha=0.5)
            store = build_param_store(DESK_MODEL, 5)
            state = OptimState.init_like(store)
            out = []
            for step in range(5):
                out.append(train_step(_random_batch(seed=3), store, state, cfg, DESK_MODEL, step))
            return out

        assert losses() == losses()


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("smallset")
    manifest_path = synthesize_dataset(
        root, num_images=6, captions_per_image=2, frames=6, patches=5,
        speech_dim=8, shared_dim=8, seed=1, difficulty=0.0,
    )
    return load_manifest(manifest_path)


class TestRunTraining:
    def test_metrics_has_one_entry_per_step(self, small_dataset, tmp_path):
        cfg = _desk_train(total_steps=12, warmup_steps=2)
        result = run_training(small_dataset, cfg, DESK_MODEL, tmp_path / "run")
        assert len(result.metrics) == 12
        lines = [
            ln for ln in result.metrics_path.read_text().splitlines() if not ln.startswith("#")
        ]
        assert len(lines) == 12
        steps = [int(ln.split(",")[0]) for ln in lines]
        assert steps == list(range(1, 13))

    def test_empty_dataset_rejected(self, tmp_path):
        empty = DatasetManifest(entries=[])
        with pytest.raises(DataError, match="empty"):
            run_training(empty, _desk_train(), DESK_MODEL, tmp_path / "run")

    def test_unwritable_output_fails_before_training(self, small_dataset, tmp_path):
        blocked = tmp_path / "blocked"
        blocked.write_text("a file, not a directory")
        with pytest.raises(OSError):
            run_training(small_dataset, _desk_train(), DESK_MODEL, blocked / "run")

    def test_identical_seeds_identical_trajectories(self, small_dataset, tmp_path):
        cfg = _desk_train(total_steps=15, warmup_steps=2, alpha=0.5)
        r1 = run_training(small_dataset, cfg, DESK_MODEL, tmp_path / "a")
        r2 = run_training(small_dataset, cfg, DESK_MODEL, tmp_path / "b")
        assert r1.metrics == r2.metrics  # bitwise: floats compare exactly
        p1, *_ = load_checkpoint(r1.final_checkpoint)
        p2, *_ = load_checkpoint(r2.final_checkpoint)
        for name in p1:
            np.testing.assert_array_equal(p1[name], p2[name])

    def test_different_seed_changes_trajectory(self, small_dataset, tmp_path):
        cfg_a = _desk_train(total_steps=6, warmup_steps=2, seed=0)
        cfg_b = _desk_train(total_steps=6, warmup_steps=2, seed=1)
        r1 = run_training(small_dataset, cfg_a, DESK_MODEL, tmp_path / "a")
        r2 = run_training(small_dataset, cfg_b, DESK_MODEL, tmp_path / "b")
        assert r1.metrics != r2.metrics

    def test_resume_matches_uninterrupted_run_bitwise(self, small_dataset, tmp_path):
        cfg = _desk_train(total_steps=14, warmup_steps=2, alpha=0.5, checkpoint_every=7)
        full = run_training(small_dataset, cfg, DESK_MODEL, tmp_path / "full")
        part_dir = tmp_path / "part"
        run_training(small_dataset, cfg, DESK_MODEL, part_dir)
        resumed = run_training(
            small_dataset, cfg, DESK_MODEL, tmp_path / "resumed",
            resume=part_dir / "step_000007.ckpt",
        )
        assert resumed.metrics == full.metrics[7:]
        pf, mf, vf, sf, _ = load_checkpoint(full.final_checkpoint)
        pr, mr, vr, sr, _ = load_checkpoint(resumed.final_checkpoint)
        assert sf == sr
        for name in pf:
            np.testing.assert_array_equal(pf[name], pr[name])
            np.testing.assert_array_equal(mf[name], mr[name])
            np.testing.assert_array_equal(vf[name], vr[name])

    def test_resume_under_changed_config_rejected(self, small_dataset, tmp_path):
        cfg = _desk_train(total_steps=10, warmup_steps=2, checkpoint_every=5)
        run_training(small_dataset, cfg, DESK_MODEL, tmp_path / "x", config_hash=b"\x01" * 32)
        with pytest.raises(ConfigError):
            run_training(
                small_dataset, cfg, DESK_MODEL, tmp_path / "y",
                resume=tmp_path / "x" / "step_000005.ckpt", config_hash=b"\x02" * 32,
            )


class TestCheckpointFormat:
    def test_roundtrip(self, tmp_path):
        store = build_param_store(DESK_MODEL, 9)
        state = OptimState.init_like(store)
        state.step = 41
        state.m["speech.proj_weight"][:] = 0.25
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, store, state, 41, b"\x07" * 32)
        params, m, v, step, digest = load_checkpoint(path)
        assert step == 41 and digest == b"\x07" * 32
        for name, p in store.items():
            np.testing.assert_array_equal(params[name], p.data)
        np.testing.assert_array_equal(m["speech.proj_weight"], 0.25)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        from cmdret.errors import FormatError

        with pytest.raises(FormatError):
            load_checkpoint(path)
