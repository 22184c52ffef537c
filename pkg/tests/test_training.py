import math

import numpy as np
import pytest
import torch
from torch.testing import assert_close

from crisscross_eeg.core.errors import ConfigError, DataError, NumericError, ShapeError
from crisscross_eeg.core.events import CheckpointEvent, EpochEvent, StepEvent
from crisscross_eeg.core.history import read_train_log
from crisscross_eeg.core.model import ModelConfig
from crisscross_eeg.core.params import build_model, load_checkpoint
from crisscross_eeg.core.patching import MaskSpec
from crisscross_eeg.core.recordings import SampleSet
from crisscross_eeg.core.synthetic import SyntheticSpec, generate_synthetic
from crisscross_eeg.core.training import (
    OptimizerConfig,
    OptimizerState,
    ScheduleConfig,
    TrainConfig,
    adamw_step,
    clip_grad_norm,
    cosine_lr,
    global_norm,
    gradients,
    pretrain,
    reconstruction_loss,
    value_and_gradients,
)


class TestCosineLr:
    def test_endpoints_and_midpoint(self):
        sched = ScheduleConfig(base_lr=5e-4, min_lr=1e-5, epochs=4)
        assert cosine_lr(0, 10, sched) == pytest.approx(5e-4)
        assert cosine_lr(20, 10, sched) == pytest.approx((5e-4 + 1e-5) / 2)
        assert cosine_lr(40, 10, sched) == pytest.approx(1e-5)

    def test_fractional_epochs(self):
        sched = ScheduleConfig(epochs=2)
        values = [cosine_lr(s, 7, sched) for s in range(14)]
        assert all(a > b for a, b in zip(values, values[1:]))

    def test_cycle_override(self):
        sched = ScheduleConfig(base_lr=1.0, min_lr=0.0, epochs=10, cycle_epochs=2)
        assert cosine_lr(2, 1, sched) == pytest.approx(0.0)

    def test_invalid(self):
        with pytest.raises(ConfigError):
            ScheduleConfig(base_lr=1e-5, min_lr=1e-4)


class TestGradients:
    def test_quadratic(self):
        x = torch.tensor([1.0, -2.0], dtype=torch.float64, requires_grad=True)
        loss, grads = value_and_gradients(lambda: (x**2).sum(), {"x": x})
        assert loss.item() == 5.0
        assert_close(grads["x"], torch.tensor([2.0, -4.0], dtype=torch.float64))

    def test_unused_tensor_gets_zeros(self):
        x = torch.ones(2, requires_grad=True)
        y = torch.ones(3, requires_grad=True)
        grads = gradients(lambda: x.sum(), {"x": x, "y": y})
        assert torch.equal(grads["y"], torch.zeros(3))

    def test_non_finite_loss(self):
        x = torch.ones(2, requires_grad=True)
        with pytest.raises(NumericError) as info:
            value_and_gradients(lambda: (x / 0).sum(), {"x": x})
        assert info.value.tensor_name == "loss"

    def test_non_scalar(self):
        x = torch.ones(2, requires_grad=True)
        with pytest.raises(ShapeError):
            gradients(lambda: x * 2, {"x": x})


class TestClip:
    def test_scales_to_max_norm(self):
        grads = {"a": torch.tensor([3.0]), "b": torch.tensor([4.0])}
        clipped, norm = clip_grad_norm(grads, 1.0)
        assert norm == pytest.approx(5.0)
        assert global_norm(clipped) == pytest.approx(1.0)
        assert_close(clipped["a"] / clipped["b"], torch.tensor([0.75]))

    def test_clipped_norm_never_exceeds_max(self, rng):
        for _ in range(50):
            scale = 10.0 ** rng.uniform(-3, 3)
            grads = {
                "a": torch.from_numpy(rng.normal(0.0, scale, size=(4, 3))),
                "b": torch.from_numpy(rng.normal(0.0, scale, size=7)),
            }
            max_norm = float(rng.uniform(0.1, 5.0))
            clipped, _ = clip_grad_norm(grads, max_norm)
            assert global_norm(clipped) <= max_norm + 1e-9

    def test_below_threshold_untouched(self):
        grads = {"a": torch.tensor([0.3, 0.4])}
        clipped, norm = clip_grad_norm(grads, 1.0)
        assert clipped is grads
        assert norm == pytest.approx(0.5)


class TestAdamW:
    def test_one_step(self):
        p = torch.tensor([1.0], dtype=torch.float64, requires_grad=True)
        params = {"p": p}
        cfg = OptimizerConfig(betas=(0.9, 0.999), eps=1e-8, weight_decay=0.05)
        state = OptimizerState(params, cfg)
        grad = {"p": torch.tensor([0.5], dtype=torch.float64)}
        adamw_step(params, grad, state, 0.1)
        # decoupled decay, then the bias-corrected step (m_hat = g, v_hat = g^2)
        expected = 1.0 * (1 - 0.1 * 0.05) - 0.1 * 0.5 / (0.5 + 1e-8)
        assert p.item() == pytest.approx(expected, rel=1e-12)
        assert state.step == 1
        moments = state.moments()
        assert moments["p.exp_avg"].item() == pytest.approx(0.05)
        assert moments["p.exp_avg_sq"].item() == pytest.approx(0.001 * 0.25)

    def test_zero_lr_leaves_parameters(self):
        p = torch.tensor([1.5, -2.0, 0.25], dtype=torch.float64, requires_grad=True)
        before = p.detach().clone()
        state = OptimizerState({"p": p}, OptimizerConfig(weight_decay=0.05))
        grad = torch.tensor([0.3, -0.7, 2.0], dtype=torch.float64)
        adamw_step({"p": p}, {"p": grad}, state, 0.0)
        assert torch.equal(p.detach(), before)

    def test_decay_alone_shrinks_by_factor(self):
        p = torch.tensor([1.5, -2.0, 0.25], dtype=torch.float64, requires_grad=True)
        before = p.detach().clone()
        state = OptimizerState({"p": p}, OptimizerConfig(weight_decay=0.05))
        adamw_step({"p": p}, {"p": torch.zeros(3, dtype=torch.float64)}, state, 0.1)
        assert_close(p.detach(), before * (1 - 0.1 * 0.05), rtol=0.0, atol=1e-15)

    def test_mismatched_names(self):
        p = torch.zeros(2, requires_grad=True)
        state = OptimizerState({"p": p})
        with pytest.raises(ShapeError):
            adamw_step({"p": p}, {"q": torch.zeros(2)}, state, 0.1)

    def test_moments_reload(self):
        p = torch.tensor([1.0, 2.0], dtype=torch.float64, requires_grad=True)
        state = OptimizerState({"p": p})
        first = torch.tensor([0.1, 0.2], dtype=torch.float64)
        adamw_step({"p": p}, {"p": first}, state, 0.01)
        q = p.detach().clone().requires_grad_(True)
        other = OptimizerState({"p": q})
        other.load(state.moments(), state.step)
        grad = torch.tensor([0.3, -0.1], dtype=torch.float64)
        adamw_step({"p": p}, {"p": grad}, state, 0.01)
        adamw_step({"p": q}, {"p": grad}, other, 0.01)
        assert torch.equal(p, q)


def _setup():
    cfg = ModelConfig.tiny()
    spec = SyntheticSpec(
        n_channels=4, duration_s=0.64, sample_rate=100.0, samples_per_class=12
    )
    return cfg, generate_synthetic(spec)


class TestDescent:
    def test_full_batch_loss_decreases_every_step(self):
        cfg, data = _setup()
        model = build_model(cfg, seed=0)
        named = dict(model.named_parameters())
        state = OptimizerState(named)
        mask = MaskSpec(0.5, rng_seed=2)
        losses = []
        for _ in range(20):
            loss, grads = value_and_gradients(
                lambda: reconstruction_loss(model, data.samples, mask), named
            )
            losses.append(loss.item())
            adamw_step(named, grads, state, 1e-3)
        losses.append(reconstruction_loss(model, data.samples, mask).item())
        assert all(after < before for before, after in zip(losses, losses[1:]))


class TestPretrain:
    def test_runs_and_logs(self, tmp_path):
        cfg, data = _setup()
        events = []
        result = pretrain(
            data,
            cfg,
            MaskSpec(0.5),
            ScheduleConfig(epochs=2),
            train=TrainConfig(batch_size=8),
            out_dir=tmp_path,
            on_event=events.append,
        )
        assert result.steps == 6
        assert [r.step for r in result.log.records] == list(range(6))
        assert [p.name for p in result.checkpoints] == ["epoch000", "epoch001"]
        assert sum(isinstance(e, StepEvent) for e in events) == 6
        assert sum(isinstance(e, EpochEvent) for e in events) == 2
        assert sum(isinstance(e, CheckpointEvent) for e in events) == 2
        assert load_checkpoint(result.checkpoints[-1]).step == 6
        assert all(math.isfinite(x) for x in result.log.losses)

    def test_deterministic(self):
        cfg, data = _setup()
        args = (data, cfg, MaskSpec(0.5), ScheduleConfig(epochs=1))
        a = pretrain(*args, train=TrainConfig(batch_size=8), seed=3)
        b = pretrain(*args, train=TrainConfig(batch_size=8), seed=3)
        assert a.log.losses == b.log.losses
        for name in a.params.names:
            assert torch.equal(a.params[name], b.params[name])

    def test_resume_is_bit_exact(self, tmp_path):
        cfg, data = _setup()
        kwargs = dict(train=TrainConfig(batch_size=8), seed=11)
        sched = ScheduleConfig(epochs=2)
        full = pretrain(
            data, cfg, MaskSpec(0.5), sched, out_dir=tmp_path / "a", **kwargs
        )
        resumed = pretrain(
            data,
            cfg,
            MaskSpec(0.5),
            sched,
            out_dir=tmp_path / "b",
            resume=tmp_path / "a" / "epoch000",
            **kwargs,
        )
        assert [r.step for r in resumed.log.records] == [3, 4, 5]
        assert resumed.log.losses == full.log.losses[3:]
        for name in full.params.names:
            assert torch.equal(resumed.params[name], full.params[name])

    def test_max_steps(self):
        cfg, data = _setup()
        result = pretrain(
            data,
            cfg,
            MaskSpec(0.5),
            ScheduleConfig(epochs=5),
            train=TrainConfig(batch_size=8, max_steps=4),
        )
        assert result.steps == 4

    def test_learnable_token_moves(self):
        _, data = _setup()
        cfg = ModelConfig.tiny(learnable_token=True)
        result = pretrain(
            data,
            cfg,
            MaskSpec(0.5, "learnable"),
            ScheduleConfig(epochs=1, base_lr=1e-2),
            train=TrainConfig(batch_size=8),
        )
        assert result.params["mask_token"].abs().sum() > 0

    def test_token_kind_must_agree(self):
        cfg, data = _setup()
        with pytest.raises(ConfigError):
            pretrain(data, cfg, MaskSpec(0.5, "learnable"), ScheduleConfig())

    def test_empty_dataset(self):
        cfg, _ = _setup()
        empty = SampleSet(np.zeros((0, 4, 64)), 100.0)
        with pytest.raises(DataError):
            pretrain(empty, cfg, MaskSpec(), ScheduleConfig())

    def test_diverged_run_writes_diagnostic(self, tmp_path):
        cfg, data = _setup()
        data.samples[:] = np.nan
        with pytest.raises(NumericError):
            pretrain(data, cfg, MaskSpec(0.5), ScheduleConfig(), out_dir=tmp_path)
        assert (tmp_path / "diagnostic" / "manifest.txt").is_file()

    def test_log_round_trip(self, tmp_path):
        cfg, data = _setup()
        result = pretrain(
            data,
            cfg,
            MaskSpec(0.5),
            ScheduleConfig(epochs=1),
            train=TrainConfig(batch_size=8),
        )
        path = result.log.write(tmp_path / "train_log.csv")
        assert read_train_log(path).records == result.log.records


@pytest.mark.slow
def test_pretraining_loss_descends():
    data = generate_synthetic(
        SyntheticSpec(n_channels=8, duration_s=5.0, samples_per_class=1000, rng_seed=1)
    )
    result = pretrain(
        data,
        ModelConfig.desk(dropout_p=0.0),
        MaskSpec(0.5),
        ScheduleConfig(epochs=2),
        train=TrainConfig(batch_size=16, max_steps=200),
    )
    initial = np.mean(result.log.losses[:5])
    final = result.log.smoothed(20).iloc[-1]
    assert final < 0.5 * initial
