import math

import numpy as np
import pandas as pd
import pytest
import torch
import torch.nn.functional as F
from torch.testing import assert_close

from crisscross_eeg.core import finetune as finetune_module
from crisscross_eeg.core.errors import ConfigError, DataError, NumericError, ShapeError
from crisscross_eeg.core.finetune import (
    FinetuneConfig,
    TaskHead,
    TaskSpec,
    build_head,
    compare_initializations,
    evaluate,
    finetune,
    finetune_loss,
    frozen_probe,
    predictions_frame,
    subsample_indices,
    task_head_forward,
    write_predictions,
)
from crisscross_eeg.core.model import ModelConfig
from crisscross_eeg.core.patching import MaskSpec
from crisscross_eeg.core.recordings import SampleSet
from crisscross_eeg.core.synthetic import (
    SyntheticSpec,
    generate_synthetic,
    split_indices,
)
from crisscross_eeg.core.training import ScheduleConfig, TrainConfig, pretrain


def _balanced_splits(labels: np.ndarray) -> dict[str, np.ndarray]:
    """8/2/2 samples per class so every split holds both classes."""
    parts = {"train": [], "val": [], "test": []}
    for label in np.unique(labels):
        idx = np.flatnonzero(labels == label)
        parts["train"] += list(idx[:8])
        parts["val"] += list(idx[8:10])
        parts["test"] += list(idx[10:12])
    return {name: np.sort(np.array(idx)) for name, idx in parts.items()}


def _quick_config(**overrides) -> FinetuneConfig:
    base = dict(
        schedule=ScheduleConfig(base_lr=1e-3, min_lr=1e-5, epochs=2),
        batch_size=8,
    )
    base.update(overrides)
    return FinetuneConfig(**base)


class TestTaskSpec:
    def test_out_dim(self):
        assert TaskSpec("binary").out_dim == 1
        assert TaskSpec("multiclass", n_classes=5).out_dim == 5
        assert TaskSpec("regression").out_dim == 1

    def test_monitor(self):
        assert TaskSpec("multiclass", n_classes=3).monitor_metric == "cohen_kappa"
        with pytest.raises(ConfigError):
            TaskSpec("binary", monitor="r2")

    def test_invalid(self):
        with pytest.raises(ConfigError):
            TaskSpec("ordinal")
        with pytest.raises(ConfigError):
            TaskSpec("multiclass", n_classes=1)


class TestTaskHead:
    def test_shapes(self):
        head = TaskHead((4, 3), 8, TaskSpec("multiclass", n_classes=3))
        assert head(torch.randn(5, 4, 3, 8)).shape == (5, 3)
        with pytest.raises(ShapeError):
            head(torch.randn(5, 3, 4, 8))

    def test_functional_matches_module(self, tiny_cfg):
        spec = TaskSpec("binary", head_hidden=(6, 5))
        head = build_head((4, 4), tiny_cfg, spec, seed=2)
        x = torch.randn(3, 4, 4, 8, dtype=torch.float64)
        params = dict(head.named_parameters())
        with torch.no_grad():
            assert_close(task_head_forward(x, params, spec), head(x))

    def test_functional_grid_mismatch(self, tiny_cfg):
        spec = TaskSpec("binary")
        head = build_head((4, 4), tiny_cfg, spec, seed=2)
        with pytest.raises(ShapeError):
            task_head_forward(
                torch.zeros(2, 4, 3, 8), dict(head.named_parameters()), spec
            )

    def test_seeded(self, tiny_cfg):
        a = build_head((2, 2), tiny_cfg, TaskSpec(), seed=4)
        b = build_head((2, 2), tiny_cfg, TaskSpec(), seed=4)
        assert torch.equal(a.layers[0].weight, b.layers[0].weight)


class TestLoss:
    def test_binary(self):
        logits = torch.tensor([[0.3], [-1.2]], dtype=torch.float64)
        labels = torch.tensor([1, 0])
        expected = F.binary_cross_entropy_with_logits(
            logits.reshape(-1), labels.double()
        )
        assert_close(finetune_loss(logits, labels, TaskSpec()), expected)

    def test_multiclass_smoothing(self):
        logits = torch.tensor([[2.0, 0.0, -1.0]], dtype=torch.float64)
        labels = torch.tensor([0])
        spec = TaskSpec("multiclass", n_classes=3, label_smoothing=0.1)
        log_p = torch.log_softmax(logits, dim=1)[0]
        expected = -(0.9 + 0.1 / 3) * log_p[0] - (0.1 / 3) * (log_p[1] + log_p[2])
        assert_close(finetune_loss(logits, labels, spec), expected)

    def test_smoothing_keeps_the_true_class_on_top(self):
        torch.manual_seed(0)
        logits = torch.randn(6, 4, dtype=torch.float64, requires_grad=True)
        labels = torch.tensor([0, 1, 2, 3, 1, 2])
        plain = finetune_loss(logits, labels, TaskSpec("multiclass", n_classes=4))
        spec = TaskSpec("multiclass", n_classes=4, label_smoothing=0.1)
        smoothed = finetune_loss(logits, labels, spec)
        assert smoothed.item() != pytest.approx(plain.item())
        # d(mean CE)/d logits = (softmax - target) / B, so the target is recoverable
        (grad,) = torch.autograd.grad(smoothed, logits)
        target = logits.detach().softmax(dim=1) - len(labels) * grad
        assert torch.equal(target.argmax(dim=1), labels)
        assert_close(target.sum(dim=1), torch.ones(6, dtype=torch.float64))
        on_label = target.gather(1, labels.unsqueeze(1)).squeeze(1)
        assert_close(on_label, torch.full((6,), 0.9 + 0.1 / 4, dtype=torch.float64))

    def test_regression(self):
        out = torch.tensor([[1.0], [3.0]])
        loss = finetune_loss(out, torch.tensor([2.0, 2.0]), TaskSpec("regression"))
        assert loss.item() == pytest.approx(1.0)

    def test_label_range(self):
        with pytest.raises(DataError):
            finetune_loss(torch.zeros(2, 1), torch.tensor([0, 2]), TaskSpec())


class TestSubsample:
    def test_floor_and_determinism(self):
        indices = np.arange(100, 110)
        kept = subsample_indices(indices, 0.35, seed=1)
        assert len(kept) == 3
        assert set(kept) <= set(indices)
        assert np.array_equal(kept, np.sort(kept))
        assert np.array_equal(kept, subsample_indices(indices, 0.35, seed=1))

    def test_full_fraction(self):
        indices = np.array([5, 1, 3])
        assert np.array_equal(subsample_indices(indices, 1.0, seed=0), indices)

    def test_nothing_left(self):
        with pytest.raises(DataError):
            subsample_indices(np.arange(10), 0.05, seed=0)

    def test_config_bounds(self):
        with pytest.raises(ConfigError):
            FinetuneConfig(data_fraction=0.0)


class TestFinetune:
    def test_runs(self, tiny_params, tiny_samples):
        splits = _balanced_splits(tiny_samples.labels)
        result = finetune(
            tiny_params, tiny_samples, splits, TaskSpec(), _quick_config()
        )
        assert result.best_epoch in (0, 1)
        assert len(result.val_history) == 2
        assert [r.step for r in result.log.records] == [0, 1, 2, 3]
        assert result.report.kind == "binary"
        assert result.report.n_samples == 4
        assert result.test_outputs.shape == (4, 1)
        assert "task.layers.0.weight" in result.params
        assert result.val_report.auroc == pytest.approx(
            result.val_history[result.best_epoch]
        )

    def test_deterministic(self, tiny_params, tiny_samples):
        splits = _balanced_splits(tiny_samples.labels)
        a = finetune(tiny_params, tiny_samples, splits, TaskSpec(), _quick_config())
        b = finetune(tiny_params, tiny_samples, splits, TaskSpec(), _quick_config())
        assert a.log.losses == b.log.losses
        assert np.array_equal(a.test_outputs, b.test_outputs)

    def test_encoder_trains(self, tiny_params, tiny_samples):
        splits = _balanced_splits(tiny_samples.labels)
        result = finetune(
            tiny_params, tiny_samples, splits, TaskSpec(), _quick_config()
        )
        assert all(norm > 0 for norm in result.encoder_grad_norms)

    def test_frozen_leaves_encoder(self, tiny_params, tiny_samples):
        splits = _balanced_splits(tiny_samples.labels)
        result = frozen_probe(
            tiny_params, tiny_samples, splits, TaskSpec(), _quick_config()
        )
        for name, tensor in tiny_params.encoder_tensors().items():
            assert torch.equal(result.params[name], tensor)
        assert result.encoder_grad_norms == [0.0] * 4

    def test_frozen_norm_is_measured(self, tiny_params, tiny_samples, monkeypatch):
        real_modules = finetune_module._modules_for

        def unfreezable(*args):
            model, head = real_modules(*args)
            monkeypatch.setattr(model, "parameters", lambda: iter(()))
            return model, head

        monkeypatch.setattr(finetune_module, "_modules_for", unfreezable)
        splits = _balanced_splits(tiny_samples.labels)
        result = frozen_probe(
            tiny_params, tiny_samples, splits, TaskSpec(), _quick_config()
        )
        # gradient reaches the encoder, which is still never stepped
        assert all(norm > 0 for norm in result.encoder_grad_norms)
        for name, tensor in tiny_params.encoder_tensors().items():
            assert torch.equal(result.params[name], tensor)

    def test_data_fraction(self, tiny_params, tiny_samples):
        splits = _balanced_splits(tiny_samples.labels)
        result = finetune(
            tiny_params,
            tiny_samples,
            splits,
            TaskSpec(),
            _quick_config(data_fraction=0.5),
        )
        assert len(result.train_indices) == 8
        assert set(result.train_indices) <= set(splits["train"])
        assert len(result.log) == 2

    def test_from_scratch(self, tiny_cfg, tiny_samples):
        splits = _balanced_splits(tiny_samples.labels)
        result = finetune(
            None, tiny_samples, splits, TaskSpec(), _quick_config(), model_cfg=tiny_cfg
        )
        assert result.params.config == tiny_cfg
        with pytest.raises(ConfigError):
            finetune(None, tiny_samples, splits, TaskSpec(), _quick_config())

    def test_needs_labels_and_splits(self, tiny_params, tiny_samples):
        splits = _balanced_splits(tiny_samples.labels)
        unlabelled = SampleSet(tiny_samples.samples, tiny_samples.sample_rate)
        with pytest.raises(DataError):
            finetune(tiny_params, unlabelled, splits, TaskSpec(), _quick_config())
        with pytest.raises(DataError):
            finetune(
                tiny_params,
                tiny_samples,
                {**splits, "val": np.array([], dtype=int)},
                TaskSpec(),
                _quick_config(),
            )

    def test_constant_first_epoch_predictions(
        self, tiny_params, tiny_samples, monkeypatch
    ):
        real_predict = finetune_module.predict
        calls = []

        def constant_first(model, head, dataset, batch_size=64):
            outputs = real_predict(model, head, dataset, batch_size)
            calls.append(len(dataset))
            return np.zeros_like(outputs) if len(calls) == 1 else outputs

        monkeypatch.setattr(finetune_module, "predict", constant_first)
        regression = SampleSet(
            tiny_samples.samples,
            tiny_samples.sample_rate,
            tiny_samples.labels.astype(float),
        )
        splits = _balanced_splits(tiny_samples.labels)
        result = finetune(
            tiny_params, regression, splits, TaskSpec("regression"), _quick_config()
        )
        assert len(result.val_history) == 2
        assert all(math.isfinite(v) for v in result.val_history)
        assert math.isfinite(result.report.rmse)

    def test_single_class_validation_split(self, tiny_params, tiny_samples):
        splits = _balanced_splits(tiny_samples.labels)
        labels = tiny_samples.labels
        splits["val"] = splits["val"][labels[splits["val"]] == 0]
        result = finetune(
            tiny_params, tiny_samples, splits, TaskSpec(), _quick_config()
        )
        assert all(math.isnan(v) for v in result.val_history)
        assert result.best_epoch == 0
        assert math.isnan(result.val_report.auroc)
        assert 0.0 <= result.report.auroc <= 1.0

    def test_float_labels_rejected_for_classification(self, tiny_params, tiny_samples):
        floats = SampleSet(
            tiny_samples.samples,
            tiny_samples.sample_rate,
            tiny_samples.labels.astype(float),
        )
        splits = _balanced_splits(tiny_samples.labels)
        with pytest.raises(DataError):
            finetune(tiny_params, floats, splits, TaskSpec(), _quick_config())


class TestEvaluate:
    def test_fresh_head(self, tiny_params, tiny_samples):
        report, outputs = evaluate(tiny_params, tiny_samples, TaskSpec())
        assert outputs.shape == (len(tiny_samples), 1)
        assert 0.0 <= report.auroc <= 1.0

    def test_trained_head_reproduces_test_outputs(self, tiny_params, tiny_samples):
        splits = _balanced_splits(tiny_samples.labels)
        result = finetune(
            tiny_params, tiny_samples, splits, TaskSpec(), _quick_config()
        )
        test_set = tiny_samples.subset(splits["test"])
        _, outputs = evaluate(result.params, test_set, TaskSpec())
        np.testing.assert_allclose(outputs, result.test_outputs, rtol=1e-12)


    def test_undefined_metric_raises(self, tiny_params, tiny_samples):
        one_class = tiny_samples.subset(np.flatnonzero(tiny_samples.labels == 0))
        with pytest.raises(NumericError):
            evaluate(tiny_params, one_class, TaskSpec())


class TestPredictions:
    def test_binary_frame(self):
        frame = predictions_frame(
            np.array([3, 7]), np.array([[0.0], [2.0]]), [0, 1], "binary"
        )
        assert list(frame.columns) == ["sample_id", "score", "label"]
        assert frame["score"].iloc[0] == pytest.approx(0.5)

    def test_multiclass_frame(self):
        frame = predictions_frame(
            np.arange(2), np.zeros((2, 3)), [0, 2], "multiclass"
        )
        assert list(frame.columns) == [
            "sample_id",
            "logit_0",
            "logit_1",
            "logit_2",
            "label",
        ]

    def test_write(self, tmp_path):
        frame = predictions_frame(
            np.arange(3), np.array([1.5, -2.0, 0.25]), [1.0, -2.0, 0.0], "regression"
        )
        write_predictions(frame, tmp_path / "predictions.csv")
        back = pd.read_csv(tmp_path / "predictions.csv")
        assert list(back["prediction"]) == [1.5, -2.0, 0.25]


@pytest.mark.slow
def test_pretrained_encoder_transfers():
    data = generate_synthetic(
        SyntheticSpec(n_channels=8, duration_s=5.0, samples_per_class=100, rng_seed=5)
    )
    splits = split_indices(len(data), seed=5)
    model_cfg = ModelConfig.desk(dropout_p=0.0)
    pretrained = pretrain(
        data.subset(splits["train"]),
        model_cfg,
        MaskSpec(0.5),
        ScheduleConfig(epochs=20),
        train=TrainConfig(batch_size=16, max_steps=150),
    ).params
    cfg = FinetuneConfig(schedule=ScheduleConfig(base_lr=5e-4, min_lr=1e-5, epochs=10))

    tuned = finetune(pretrained, data, splits, TaskSpec(), cfg)
    assert tuned.report.balanced_accuracy > 0.95

    probe = frozen_probe(pretrained, data, splits, TaskSpec(), cfg)
    assert probe.report.balanced_accuracy > 0.75

    table = compare_initializations(pretrained, data, splits, TaskSpec(), cfg)
    means = table.groupby("init")["balanced_accuracy"].mean()
    assert means["pretrained"] >= means["scratch"] - 0.05
