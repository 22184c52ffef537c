"""Task heads, fine-tuning losses and the fine-tune / frozen-probe protocols.

The head flattens the encoder output ``[C, n, d]`` of a whole sample and runs
it through a small perceptron. Fine-tuning selects the epoch with the best
validation monitor score and reports test metrics for that epoch's weights.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from einops import rearrange
from torch import nn
from torch.func import functional_call

from crisscross_eeg.core.errors import (
    ConfigError,
    ContainerError,
    DataError,
    ShapeError,
)
from crisscross_eeg.core.events import (
    EpochEvent,
    EvalEvent,
    EventCallback,
    StepEvent,
    StepRecord,
    TrainLog,
    emit,
)
from crisscross_eeg.core.metrics import (
    MONITORS,
    TASK_KINDS,
    EvalReport,
    evaluate_outputs,
)
from crisscross_eeg.core.model import CrissCrossModel, ModelConfig
from crisscross_eeg.core.params import ParameterSet, build_model, reset_parameters
from crisscross_eeg.core.patching import to_patches
from crisscross_eeg.core.recordings import SampleSet, batch_iter, steps_per_epoch
from crisscross_eeg.core.training import (
    OptimizerConfig,
    OptimizerState,
    ScheduleConfig,
    adamw_step,
    clip_grad_norm,
    cosine_lr,
    global_norm,
    value_and_gradients,
)
from crisscross_eeg.core.utils import derive_seed, thread_cached

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TaskSpec:
    """Downstream task: kind, head widths and the validation monitor."""

    kind: str = "binary"
    n_classes: int = 2
    head_hidden: tuple[int, ...] = (256,)
    label_smoothing: float = 0.1
    monitor: str | None = None

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ConfigError(
                f"Unknown task kind {self.kind!r}; use one of {TASK_KINDS}"
            )
        if self.kind == "multiclass" and self.n_classes < 2:
            raise ConfigError(
                f"A multiclass task needs >= 2 classes, got {self.n_classes}"
            )
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError(
                f"label_smoothing must lie in [0, 1), got {self.label_smoothing}"
            )
        if any(width < 1 for width in self.head_hidden):
            raise ConfigError(f"Invalid head widths {self.head_hidden}")
        if self.monitor is not None and self.monitor != MONITORS[self.kind]:
            raise ConfigError(
                f"{self.kind} tasks are monitored by {MONITORS[self.kind]!r}, not {self.monitor!r}"
            )

    @property
    def out_dim(self) -> int:
        return self.n_classes if self.kind == "multiclass" else 1

    @property
    def monitor_metric(self) -> str:
        return MONITORS[self.kind]


def _finetune_schedule() -> ScheduleConfig:
    return ScheduleConfig(base_lr=1e-4, min_lr=1e-6, epochs=20, grad_clip_norm=1.0)


@dataclass
class FinetuneConfig:
    """Fine-tuning loop settings (low-resource and frozen-encoder switches included)."""

    schedule: ScheduleConfig = field(default_factory=_finetune_schedule)
    optim: OptimizerConfig = field(default_factory=OptimizerConfig)
    batch_size: int = 16
    data_fraction: float = 1.0
    frozen: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 < self.data_fraction <= 1.0:
            raise ConfigError(
                f"data_fraction must lie in (0, 1], got {self.data_fraction}"
            )


class TaskHead(nn.Module):
    """Flatten ``[B, C, n, d]`` and apply Linear -> GELU -> ... -> Linear."""

    def __init__(self, grid: tuple[int, int], d: int, spec: TaskSpec):
        super().__init__()
        self.grid = grid
        widths = [grid[0] * grid[1] * d, *spec.head_hidden]
        layers: list[nn.Module] = []
        for w_in, w_out in zip(widths[:-1], widths[1:]):
            layers += [nn.Linear(w_in, w_out), nn.GELU()]
        layers.append(nn.Linear(widths[-1], spec.out_dim))
        self.layers = nn.Sequential(*layers)

    def forward(self, embeddings: torch.Tensor) -> torch.Tensor:
        if tuple(embeddings.shape[-3:-1]) != self.grid:
            raise ShapeError(
                f"Head expects a {self.grid[0]}x{self.grid[1]} grid, "
                f"got {tuple(embeddings.shape[-3:-1])}"
            )
        return self.layers(rearrange(embeddings, "... c n d -> ... (c n d)"))


@thread_cached(maxsize=16)
def _head_skeleton(
    grid: tuple[int, int], d: int, spec: TaskSpec
) -> TaskHead:
    with torch.device("meta"):
        return TaskHead(grid, d, spec)


def task_head_forward(
    embeddings: torch.Tensor, head_params: dict[str, torch.Tensor], spec: TaskSpec
) -> torch.Tensor:
    """Head outputs for ``[..., C, n, d]`` embeddings under ``head_params``.

    The expected grid is recovered from the first layer's input width.
    """
    channels, n_patches, d = embeddings.shape[-3:]
    in_dim = head_params["layers.0.weight"].shape[1]
    if in_dim != channels * n_patches * d:
        raise ShapeError(
            f"Head reads {in_dim} features, a {channels}x{n_patches} grid gives "
            f"{channels * n_patches * d}"
        )
    module = _head_skeleton((channels, n_patches), d, spec)
    return functional_call(module, head_params, (embeddings,))


def finetune_loss(
    outputs: torch.Tensor, labels: torch.Tensor, spec: TaskSpec
) -> torch.Tensor:
    """BCE on the logit, label-smoothed cross-entropy, or MSE by task kind."""
    if spec.kind == "regression":
        return F.mse_loss(outputs.reshape(-1), labels.to(outputs.dtype).reshape(-1))
    labels = labels.long().reshape(-1)
    upper = 2 if spec.kind == "binary" else spec.n_classes
    if labels.numel() and (labels.min() < 0 or labels.max() >= upper):
        raise DataError(
            f"Labels must lie in [0, {upper}), got "
            f"[{labels.min().item()}, {labels.max().item()}]"
        )
    if spec.kind == "binary":
        return F.binary_cross_entropy_with_logits(
            outputs.reshape(-1), labels.to(outputs.dtype)
        )
    return F.cross_entropy(
        outputs.reshape(len(labels), -1), labels, label_smoothing=spec.label_smoothing
    )


def subsample_indices(indices: np.ndarray, fraction: float, seed: int) -> np.ndarray:
    """Keep ``floor(fraction * len(indices))`` indices, drawn under ``seed``."""
    keep = math.floor(fraction * len(indices))
    if keep < 1:
        raise DataError(f"data_fraction={fraction} leaves no training samples")
    if keep == len(indices):
        return np.asarray(indices)
    chosen = np.random.default_rng(seed).permutation(len(indices))[:keep]
    return np.sort(np.asarray(indices)[chosen])


@dataclass
class FinetuneResult:
    params: ParameterSet
    report: EvalReport
    best_epoch: int
    val_report: EvalReport
    val_history: list[float] = field(default_factory=list)
    log: TrainLog = field(default_factory=TrainLog)
    train_indices: np.ndarray | None = None
    encoder_grad_norms: list[float] = field(default_factory=list)
    test_outputs: np.ndarray | None = None


def _check_labels(dataset: SampleSet, spec: TaskSpec) -> None:
    if dataset.labels is None:
        raise DataError("Fine-tuning needs a labelled sample set")
    integer_labels = np.issubdtype(dataset.labels.dtype, np.integer)
    if spec.kind != "regression" and not integer_labels:
        raise DataError(
            f"{spec.kind} tasks need integer labels, got {dataset.labels.dtype}"
        )


def _grid_of(dataset: SampleSet, cfg: ModelConfig) -> tuple[int, int]:
    n_patches = dataset.n_timepoints // cfg.patch_len
    if n_patches < 1:
        raise DataError(
            f"Samples of {dataset.n_timepoints} points hold no {cfg.patch_len}-point patch"
        )
    return dataset.n_channels, n_patches


def build_head(
    grid: tuple[int, int], cfg: ModelConfig, spec: TaskSpec, seed: int
) -> TaskHead:
    head = TaskHead(grid, cfg.d, spec)
    reset_parameters(head, seed)
    return head.to(cfg.torch_dtype)


def _forward(
    model: CrissCrossModel, head: TaskHead, samples: np.ndarray
) -> torch.Tensor:
    grid = to_patches(samples, model.cfg.patch_len, model.cfg.torch_dtype)
    return head(model(grid.patches).embeddings)


def predict(
    model: CrissCrossModel, head: TaskHead, dataset: SampleSet, batch_size: int = 64
) -> np.ndarray:
    """Raw head outputs ``[N, out_dim]`` in dataset order, dropout off."""
    model.eval()
    head.eval()
    outputs = []
    with torch.no_grad():
        for batch in batch_iter(dataset, batch_size):
            outputs.append(_forward(model, head, batch.samples).double().numpy())
    return np.concatenate(outputs, axis=0)


def _modules_for(
    params: ParameterSet, dataset: SampleSet, spec: TaskSpec, seed: int
) -> tuple[CrissCrossModel, TaskHead]:
    cfg = params.config
    model = build_model(cfg, seed=derive_seed(seed, "init"))
    head = build_head(_grid_of(dataset, cfg), cfg, spec, derive_seed(seed, "head"))
    params.load_into(model, head if params.task_tensors() else None)
    return model, head


def evaluate(
    params: ParameterSet,
    dataset: SampleSet,
    spec: TaskSpec,
    seed: int = 0,
    batch_size: int = 64,
) -> tuple[EvalReport, np.ndarray]:
    """Score ``dataset`` without training.

    Without ``task.*`` tensors in ``params`` a freshly initialized head is used.
    """
    _check_labels(dataset, spec)
    if len(dataset) == 0:
        raise DataError("Cannot evaluate an empty split")
    model, head = _modules_for(params, dataset, spec, seed)
    outputs = predict(model, head, dataset, batch_size)
    return evaluate_outputs(spec.kind, outputs, dataset.labels), outputs


def predictions_frame(
    sample_ids: np.ndarray, outputs: np.ndarray, labels: np.ndarray, kind: str
) -> pd.DataFrame:
    """Sample id, score column(s) and label, one row per sample."""
    outputs = np.asarray(outputs).reshape(len(sample_ids), -1)
    frame = pd.DataFrame({"sample_id": np.asarray(sample_ids, dtype=np.int64)})
    if kind == "binary":
        frame["score"] = 1.0 / (1.0 + np.exp(-outputs[:, 0]))
    elif kind == "multiclass":
        for k in range(outputs.shape[1]):
            frame[f"logit_{k}"] = outputs[:, k]
    else:
        frame["prediction"] = outputs[:, 0]
    frame["label"] = labels
    return frame


def write_predictions(frame: pd.DataFrame, path: str | Path) -> None:
    try:
        frame.to_csv(path, index=False, float_format="%.10g")
    except OSError as exc:
        raise ContainerError(f"Failed to write predictions {path}: {exc}") from exc


def finetune(
    params: ParameterSet | None,
    dataset: SampleSet,
    splits: dict[str, np.ndarray],
    spec: TaskSpec,
    cfg: FinetuneConfig | None = None,
    model_cfg: ModelConfig | None = None,
    seed: int = 0,
    on_event: EventCallback | None = None,
) -> FinetuneResult:
    """Train encoder and head (or the head alone when ``cfg.frozen``).

    Args:
        params: Pre-trained encoder; ``None`` trains from a fresh init of ``model_cfg``.
        splits: ``train``/``val``/``test`` index arrays into ``dataset``.
    """
    cfg = cfg or FinetuneConfig()
    _check_labels(dataset, spec)
    for name in ("train", "val", "test"):
        if name not in splits or len(splits[name]) == 0:
            raise DataError(f"Split {name!r} is empty")
    if params is None:
        if model_cfg is None:
            raise ConfigError("finetune() needs pre-trained params or a model config")
        scratch = build_model(model_cfg, derive_seed(seed, "scratch"))
        params = ParameterSet.from_module(scratch)
    model_cfg = params.config

    train_idx = subsample_indices(
        np.asarray(splits["train"]),
        cfg.data_fraction,
        derive_seed(seed, "fraction"),
    )
    train_set = dataset.subset(train_idx)
    val_set = dataset.subset(splits["val"])
    test_set = dataset.subset(splits["test"])
    logger.info(
        "Fine-tuning on %d train / %d val / %d test samples%s",
        len(train_set),
        len(val_set),
        len(test_set),
        " (frozen encoder)" if cfg.frozen else "",
    )

    model, head = _modules_for(params.with_task({}), dataset, spec, seed)
    encoder = {n: p for n, p in model.named_parameters() if n != "mask_token"}
    if cfg.frozen:
        for p in model.parameters():
            p.requires_grad_(False)
        trainable = {f"task.{n}": p for n, p in head.named_parameters()}
    else:
        trainable = dict(encoder)
        trainable.update({f"task.{n}": p for n, p in head.named_parameters()})
    state = OptimizerState(trainable, cfg.optim)
    # every encoder tensor autograd can reach, so a frozen encoder is measured too
    watched = {n: p for n, p in encoder.items() if p.requires_grad}
    watched.update(trainable)

    sched = cfg.schedule
    per_epoch = steps_per_epoch(len(train_set), cfg.batch_size)
    log = TrainLog()
    encoder_norms: list[float] = []
    best: tuple[float, int, ParameterSet, EvalReport] | None = None
    history: list[float] = []
    step = 0
    for epoch in range(sched.epochs):
        model.train(not cfg.frozen)
        head.train()
        losses = []
        epoch_seed = derive_seed(seed, "ft-epoch", epoch)
        for batch in batch_iter(train_set, cfg.batch_size, epoch_seed):
            lr = cosine_lr(step, per_epoch, sched)
            labels = torch.as_tensor(batch.labels)
            with torch.random.fork_rng(devices=[]):
                torch.manual_seed(derive_seed(seed, "ft-dropout", step))
                loss, grads = value_and_gradients(
                    lambda: finetune_loss(
                        _forward(model, head, batch.samples), labels, spec
                    ),
                    watched,
                )
            encoder_grads = {
                n: grads.get(n, torch.zeros_like(p)) for n, p in encoder.items()
            }
            encoder_norms.append(global_norm(encoder_grads))
            grads = {n: grads[n] for n in trainable}
            grads, norm = clip_grad_norm(grads, sched.grad_clip_norm)
            adamw_step(trainable, grads, state, lr)
            record = StepRecord(step, epoch, loss.item(), lr, norm)
            log.append(record)
            losses.append(record.loss)
            emit(on_event, StepEvent(record, per_epoch * sched.epochs))
            step += 1
        emit(on_event, EpochEvent(epoch, float(np.mean(losses)), len(losses)))

        val_outputs = predict(model, head, val_set, cfg.batch_size)
        val_report = evaluate_outputs(
            spec.kind, val_outputs, val_set.labels, strict=False
        )
        value = val_report.monitor_value(spec.monitor_metric)
        if not math.isfinite(value):
            logger.warning(
                "Validation %s is undefined at epoch %d", spec.monitor_metric, epoch
            )
        history.append(value)
        # undefined scores rank below every defined one
        score = value if math.isfinite(value) else -math.inf
        is_best = best is None or score > best[0]
        if is_best:
            best = (score, epoch, ParameterSet.from_module(model, head), val_report)
        emit(on_event, EvalEvent(epoch, spec.monitor_metric, value, is_best))

    _, best_epoch, best_params, best_val = best
    best_params.load_into(model, head)
    test_outputs = predict(model, head, test_set, cfg.batch_size)
    report = evaluate_outputs(spec.kind, test_outputs, test_set.labels)
    logger.info(
        "Best epoch %d (%s=%.4f)",
        best_epoch,
        spec.monitor_metric,
        history[best_epoch],
    )
    return FinetuneResult(
        params=best_params,
        report=report,
        best_epoch=best_epoch,
        val_report=best_val,
        val_history=history,
        log=log,
        train_indices=train_idx,
        encoder_grad_norms=encoder_norms,
        test_outputs=test_outputs,
    )


def frozen_probe(
    params: ParameterSet,
    dataset: SampleSet,
    splits: dict[str, np.ndarray],
    spec: TaskSpec,
    cfg: FinetuneConfig | None = None,
    seed: int = 0,
    on_event: EventCallback | None = None,
) -> FinetuneResult:
    """Fine-tune only the task head on top of a fixed encoder."""
    frozen_cfg = replace(cfg or FinetuneConfig(), frozen=True)
    return finetune(
        params, dataset, splits, spec, frozen_cfg, seed=seed, on_event=on_event
    )


def compare_initializations(
    params: ParameterSet,
    dataset: SampleSet,
    splits: dict[str, np.ndarray],
    spec: TaskSpec,
    cfg: FinetuneConfig | None = None,
    seeds: tuple[int, ...] = (0, 1, 2),
) -> pd.DataFrame:
    """Fine-tune from ``params`` and from a fresh init under each seed.

    One row per (seed, init) with the test monitor metric and balanced
    accuracy where the task reports it.
    """
    rows = []
    for seed in seeds:
        for init, start in (("pretrained", params), ("scratch", None)):
            result = finetune(
                start, dataset, splits, spec, cfg, model_cfg=params.config, seed=seed
            )
            rows.append(
                {
                    "seed": seed,
                    "init": init,
                    spec.monitor_metric: result.report.monitor_value(),
                    "balanced_accuracy": result.report.balanced_accuracy,
                }
            )
    return pd.DataFrame(rows)
