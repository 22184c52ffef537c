"""Gradients, AdamW, cosine schedule, gradient clipping and the pre-training loop.

Every source of randomness in a run is derived from one master seed: the
initial weights, the per-epoch data order, and the per-step mask draw and
dropout state. A run resumed from a checkpoint therefore replays the
uninterrupted run exactly.
"""

import logging
import math
from collections.abc import Callable
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from crisscross_eeg.core.errors import ConfigError, DataError, NumericError, ShapeError
from crisscross_eeg.core.events import (
    CheckpointEvent,
    EpochEvent,
    EventCallback,
    StepEvent,
    StepRecord,
    TrainLog,
    emit,
)
from crisscross_eeg.core.model import CrissCrossModel, ModelConfig, masked_mse
from crisscross_eeg.core.params import (
    Checkpoint,
    ParameterSet,
    build_model,
    load_checkpoint,
    save_checkpoint,
)
from crisscross_eeg.core.patching import MaskSpec, apply_mask, to_patches
from crisscross_eeg.core.recordings import SampleSet, batch_iter, steps_per_epoch
from crisscross_eeg.core.utils import derive_seed

logger = logging.getLogger(__name__)


@dataclass
class ScheduleConfig:
    """Cosine-annealed learning rate over fractional epochs, plus gradient clipping."""

    base_lr: float = 5e-4
    min_lr: float = 1e-5
    epochs: int = 5
    cycle_epochs: float | None = None
    grad_clip_norm: float = 1.0

    def __post_init__(self):
        if not 0 <= self.min_lr <= self.base_lr:
            raise ConfigError(
                f"Need 0 <= min_lr <= base_lr, got min_lr={self.min_lr}, base_lr={self.base_lr}"
            )
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.cycle_epochs is not None and self.cycle_epochs <= 0:
            raise ConfigError(f"cycle_epochs must be positive, got {self.cycle_epochs}")
        if self.grad_clip_norm <= 0:
            raise ConfigError(
                f"grad_clip_norm must be positive, got {self.grad_clip_norm}"
            )

    @property
    def cycle(self) -> float:
        if self.cycle_epochs is not None:
            return self.cycle_epochs
        return float(self.epochs)


@dataclass
class OptimizerConfig:
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 5e-2

    def __post_init__(self):
        if not all(0 <= b < 1 for b in self.betas):
            raise ConfigError(f"Adam betas must lie in [0, 1), got {self.betas}")
        if self.eps <= 0 or self.weight_decay < 0:
            raise ConfigError("eps must be positive and weight_decay non-negative")


@dataclass
class TrainConfig:
    """Loop settings. ``max_steps`` caps the run below ``epochs * steps_per_epoch``."""

    batch_size: int = 16
    max_steps: int | None = None
    log_every: int = 10
    smoothing_window: int = 20

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError(f"max_steps must be >= 1, got {self.max_steps}")


class OptimizerState:
    """AdamW moments and step count for a fixed set of named parameters."""

    def __init__(
        self, params: dict[str, torch.Tensor], cfg: OptimizerConfig | None = None
    ):
        self.config = cfg or OptimizerConfig()
        self.params = params
        self.step = 0
        self.optimizer = torch.optim.AdamW(
            list(params.values()),
            lr=0.0,
            betas=self.config.betas,
            eps=self.config.eps,
            weight_decay=self.config.weight_decay,
            foreach=False,
        )

    def moments(self) -> dict[str, torch.Tensor]:
        """``<name>.exp_avg`` and ``<name>.exp_avg_sq`` per stepped parameter."""
        out = {}
        for name, p in self.params.items():
            state = self.optimizer.state.get(p)
            if state:
                out[f"{name}.exp_avg"] = state["exp_avg"].detach().clone()
                out[f"{name}.exp_avg_sq"] = state["exp_avg_sq"].detach().clone()
        return out

    def load(self, moments: dict[str, torch.Tensor], step: int) -> None:
        self.step = step
        if step == 0:
            return
        for name, p in self.params.items():
            if f"{name}.exp_avg" not in moments:
                continue
            exp_avg = moments[f"{name}.exp_avg"]
            exp_avg_sq = moments[f"{name}.exp_avg_sq"]
            if exp_avg.shape != p.shape or exp_avg_sq.shape != p.shape:
                raise ShapeError(f"Optimizer moments of {name} do not match its shape")
            self.optimizer.state[p] = {
                "step": torch.tensor(float(step)),
                "exp_avg": exp_avg.to(p.dtype).clone(),
                "exp_avg_sq": exp_avg_sq.to(p.dtype).clone(),
            }


def value_and_gradients(
    loss_fn: Callable[[], torch.Tensor], params: dict[str, torch.Tensor]
) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Evaluate ``loss_fn`` and its exact gradient with respect to each named tensor.

    Tensors that do not influence the loss get zero gradients.
    """
    loss = loss_fn()
    if loss.ndim != 0:
        raise ShapeError(f"Loss must be a scalar, got shape {tuple(loss.shape)}")
    if not torch.isfinite(loss):
        raise NumericError(f"Loss is not finite ({loss.item()})", tensor_name="loss")
    raw = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
    grads = {}
    for (name, p), g in zip(params.items(), raw):
        g = torch.zeros_like(p) if g is None else g.detach()
        if not torch.isfinite(g).all():
            raise NumericError(f"Gradient of {name} is not finite", tensor_name=name)
        grads[name] = g
    return loss.detach(), grads


def gradients(
    loss_fn: Callable[[], torch.Tensor], params: dict[str, torch.Tensor]
) -> dict[str, torch.Tensor]:
    return value_and_gradients(loss_fn, params)[1]


def global_norm(grads: dict[str, torch.Tensor]) -> float:
    if not grads:
        return 0.0
    norms = torch.stack([torch.linalg.vector_norm(g.double()) for g in grads.values()])
    return torch.linalg.vector_norm(norms).item()


def clip_grad_norm(
    grads: dict[str, torch.Tensor], max_norm: float
) -> tuple[dict[str, torch.Tensor], float]:
    """Scale all gradients by ``max_norm / norm`` when their global L2 norm exceeds it.

    Returns the (possibly scaled) gradients and the pre-clip norm.
    """
    norm = global_norm(grads)
    if norm <= max_norm:
        return grads, norm
    scale = max_norm / norm
    return {name: g * scale for name, g in grads.items()}, norm


def adamw_step(
    params: dict[str, torch.Tensor],
    grads: dict[str, torch.Tensor],
    state: OptimizerState,
    lr: float,
) -> None:
    """One decoupled-weight-decay Adam update of ``params`` in place."""
    if set(grads) != set(params):
        raise ShapeError(
            f"Gradients for {sorted(set(grads) ^ set(params))} do not match the parameters"
        )
    for name, p in params.items():
        if grads[name].shape != p.shape:
            raise ShapeError(
                f"Gradient of {name} has shape {tuple(grads[name].shape)}, "
                f"parameter has {tuple(p.shape)}"
            )
        p.grad = grads[name].detach().to(p.dtype)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.optimizer.step()
    for p in params.values():
        p.grad = None
    state.step += 1


def cosine_lr(step: int, steps_per_epoch: int, sched: ScheduleConfig) -> float:
    """Learning rate at ``step``, annealed over the fractional epoch."""
    epoch = step / steps_per_epoch
    cosine = (1 + math.cos(math.pi * epoch / sched.cycle)) / 2
    return sched.min_lr + (sched.base_lr - sched.min_lr) * cosine


def reconstruction_loss(
    model: CrissCrossModel, samples: np.ndarray | torch.Tensor, mask: MaskSpec
) -> torch.Tensor:
    """Patch, mask, encode, reconstruct and score one batch ``[B, C, T]``."""
    grid = to_patches(samples, model.cfg.patch_len, model.cfg.torch_dtype)
    masked = apply_mask(grid, mask, token=model.mask_token)
    x_hat = model.reconstruct(model(masked.patches).embeddings)
    return masked_mse(x_hat, masked.targets, masked.mask)


@dataclass
class PretrainResult:
    params: ParameterSet
    log: TrainLog
    checkpoints: list[Path] = field(default_factory=list)
    steps: int = 0


def _check_mask_token(model_cfg: ModelConfig, mask: MaskSpec) -> None:
    if model_cfg.learnable_token != (mask.token_kind == "learnable"):
        raise ConfigError(
            f"Mask token kind {mask.token_kind!r} disagrees with "
            f"model.learnable_token={model_cfg.learnable_token}"
        )


def pretrain(
    dataset: SampleSet,
    model_cfg: ModelConfig,
    mask: MaskSpec,
    sched: ScheduleConfig,
    optim: OptimizerConfig | None = None,
    train: TrainConfig | None = None,
    seed: int = 0,
    params: ParameterSet | None = None,
    out_dir: str | Path | None = None,
    resume: str | Path | Checkpoint | None = None,
    on_event: EventCallback | None = None,
) -> PretrainResult:
    """Masked-patch reconstruction pre-training.

    Args:
        dataset: Unlabelled samples ``[N x C x T]``.
        params: Initial weights; a fresh deterministic init from ``seed`` when omitted.
        out_dir: Where per-epoch checkpoints (``epoch<k>``) and diagnostic
            checkpoints are written. Nothing is written when ``None``.
        resume: Checkpoint (or its path) to continue from; its step, weights
            and optimizer moments replace the fresh state.
    """
    if len(dataset) == 0:
        raise DataError("Cannot pre-train on an empty dataset")
    _check_mask_token(model_cfg, mask)
    optim = optim or OptimizerConfig()
    train = train or TrainConfig()

    model = build_model(model_cfg, seed=derive_seed(seed, "init"))
    if params is not None:
        params.load_into(model)
    named = dict(model.named_parameters())
    state = OptimizerState(named, optim)
    if resume is not None:
        checkpoint = (
            resume
            if isinstance(resume, Checkpoint)
            else load_checkpoint(resume, model_cfg)
        )
        checkpoint.params.load_into(model)
        state.load(checkpoint.moments, checkpoint.step)
        logger.info("Resuming from step %d", checkpoint.step)

    per_epoch = steps_per_epoch(len(dataset), train.batch_size)
    total = train.max_steps if train.max_steps is not None else per_epoch * sched.epochs
    log = TrainLog()
    checkpoints: list[Path] = []
    out = Path(out_dir) if out_dir is not None else None
    model.train()

    step = state.step
    while step < total:
        epoch = step // per_epoch
        losses = []
        batches = batch_iter(
            dataset, train.batch_size, derive_seed(seed, "epoch", epoch)
        )
        for position, batch in enumerate(batches):
            if epoch * per_epoch + position < step:
                continue
            if step >= total:
                break
            step_mask = replace(
                mask, rng_seed=derive_seed(seed, "mask", mask.rng_seed, step)
            )
            lr = cosine_lr(step, per_epoch, sched)
            try:
                with torch.random.fork_rng(devices=[]):
                    torch.manual_seed(derive_seed(seed, "dropout", step))
                    loss, grads = value_and_gradients(
                        lambda: reconstruction_loss(model, batch.samples, step_mask),
                        named,
                    )
            except NumericError:
                if out is not None:
                    path = save_checkpoint(
                        out / "diagnostic",
                        ParameterSet.from_module(model),
                        step,
                        state.moments(),
                        check_finite=False,
                    )
                    emit(on_event, CheckpointEvent(path, step, diagnostic=True))
                raise
            grads, norm = clip_grad_norm(grads, sched.grad_clip_norm)
            adamw_step(named, grads, state, lr)
            record = StepRecord(
                step=step, epoch=epoch, loss=loss.item(), lr=lr, grad_norm=norm
            )
            log.append(record)
            losses.append(record.loss)
            emit(on_event, StepEvent(record, total))
            step += 1

        if losses:
            emit(on_event, EpochEvent(epoch, float(np.mean(losses)), len(losses)))
        if out is not None and (step % per_epoch == 0 or step >= total):
            path = save_checkpoint(
                out / f"epoch{epoch:03d}",
                ParameterSet.from_module(model),
                step,
                state.moments(),
            )
            checkpoints.append(path)
            emit(on_event, CheckpointEvent(path, step))

    model.eval()
    return PretrainResult(ParameterSet.from_module(model), log, checkpoints, step)
