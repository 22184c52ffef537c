"""Finite-difference verification of every parameter gradient.

The checked loss is the joint objective of a tiny 64-bit network: masked
reconstruction MSE plus a binary task-head loss, so gradients flow into every
parameter family (conv, norm, frequency, positional, attention, ffn, head,
mask token, task head). Coordinates are sampled per family and the analytic
gradient is compared with a central difference.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from torch.func import functional_call

from crisscross_eeg.core.errors import ConfigError
from crisscross_eeg.core.finetune import TaskSpec, build_head, finetune_loss
from crisscross_eeg.core.model import ModelConfig, masked_mse
from crisscross_eeg.core.params import (
    TASK_PREFIX,
    build_model,
    parameter_family,
)
from crisscross_eeg.core.patching import MaskSpec, apply_mask, to_patches
from crisscross_eeg.core.training import value_and_gradients
from crisscross_eeg.core.utils import derive_seed

logger = logging.getLogger(__name__)


@dataclass
class GradcheckConfig:
    channels: int = 4
    n_patches: int = 4
    batch: int = 2
    coordinates: int = 200
    step: float = 1e-5
    tolerance: float = 1e-4
    denominator_floor: float = 1e-3
    mask_ratio: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.coordinates < 1 or self.step <= 0 or self.tolerance <= 0:
            raise ConfigError("coordinates, step and tolerance must be positive")


@dataclass
class FamilyResult:
    family: str
    coordinates: int
    worst_error: float
    worst_tensor: str

    def passed(self, tolerance: float) -> bool:
        return self.worst_error < tolerance


@dataclass
class GradcheckReport:
    results: list[FamilyResult] = field(default_factory=list)
    tolerance: float = 1e-4

    @property
    def passed(self) -> bool:
        return all(r.passed(self.tolerance) for r in self.results)

    @property
    def coordinates(self) -> int:
        return sum(r.coordinates for r in self.results)

    @property
    def failing(self) -> list[str]:
        return [r.family for r in self.results if not r.passed(self.tolerance)]

    def as_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "family": [r.family for r in self.results],
                "coordinates": [r.coordinates for r in self.results],
                "worst_rel_error": [r.worst_error for r in self.results],
                "worst_tensor": [r.worst_tensor for r in self.results],
                "passed": [r.passed(self.tolerance) for r in self.results],
            }
        )


class _ScaledBackward(torch.autograd.Function):
    """Identity in the forward pass, gradient multiplied by ``factor`` backward."""

    @staticmethod
    def forward(ctx, x, factor):
        ctx.factor = factor
        return x.clone()

    @staticmethod
    def backward(ctx, grad):
        return grad * ctx.factor, None


def relative_error(analytic: float, numeric: float, floor: float = 1e-3) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def _sample_coordinates(
    named: dict[str, torch.Tensor], total: int, rng: np.random.Generator
) -> list[tuple[str, int]]:
    """Stratify ``total`` coordinates across families, weighting tensors by size."""
    by_family: dict[str, list[str]] = {}
    for name in named:
        by_family.setdefault(parameter_family(name), []).append(name)
    per_family = math.ceil(total / len(by_family))
    picked: list[tuple[str, int]] = []
    for names in by_family.values():
        sizes = np.array([named[n].numel() for n in names], dtype=np.float64)
        pool = [(n, i) for n in names for i in range(named[n].numel())]
        weights = np.concatenate([np.full(int(s), 1.0 / s) for s in sizes])
        weights /= weights.sum()
        count = min(per_family, len(pool))
        for k in rng.choice(len(pool), size=count, replace=False, p=weights):
            picked.append(pool[k])
    return picked


def _split_task(tensors: dict[str, torch.Tensor]):
    encoder = {n: t for n, t in tensors.items() if not n.startswith(TASK_PREFIX)}
    task = {
        n[len(TASK_PREFIX) :]: t
        for n, t in tensors.items()
        if n.startswith(TASK_PREFIX)
    }
    return encoder, task


def run_gradcheck(
    cfg: GradcheckConfig | None = None,
    model_cfg: ModelConfig | None = None,
    corrupt: str | None = None,
) -> GradcheckReport:
    """Compare analytic and central-difference gradients.

    Args:
        corrupt: Family whose backward pass is deliberately scaled by 1.5;
            the report must then flag that family.
    """
    cfg = cfg or GradcheckConfig()
    model_cfg = model_cfg or ModelConfig.tiny(learnable_token=True)
    if model_cfg.dtype != "float64" or model_cfg.dropout_p != 0.0:
        raise ConfigError("Gradient checks need a float64 model without dropout")
    model = build_model(model_cfg, seed=derive_seed(cfg.seed, "init"))
    spec = TaskSpec(kind="binary", head_hidden=(8,))
    grid_shape = (cfg.channels, cfg.n_patches)
    head = build_head(grid_shape, model_cfg, spec, derive_seed(cfg.seed, "head"))
    model.eval()
    head.eval()

    rng = np.random.default_rng(derive_seed(cfg.seed, "data"))
    timepoints = cfg.n_patches * model_cfg.patch_len
    samples = rng.normal(size=(cfg.batch, cfg.channels, timepoints))
    labels = torch.as_tensor(rng.integers(0, 2, size=cfg.batch))
    grid = to_patches(samples, model_cfg.patch_len, torch.float64)
    token_kind = "learnable" if model_cfg.learnable_token else "full_zero"
    mask = MaskSpec(cfg.mask_ratio, token_kind, derive_seed(cfg.seed, "mask"))

    named = dict(model.named_parameters())
    named.update({f"{TASK_PREFIX}{n}": p for n, p in head.named_parameters()})
    families = {parameter_family(n) for n in named}
    if corrupt is not None and corrupt not in families:
        raise ConfigError(
            f"Unknown parameter family {corrupt!r}; have {sorted(families)}"
        )

    def loss_fn() -> torch.Tensor:
        tensors = {
            n: _ScaledBackward.apply(p, 1.5) if parameter_family(n) == corrupt else p
            for n, p in named.items()
        }
        encoder, task = _split_task(tensors)
        masked = apply_mask(grid, mask, token=encoder.get("mask_token"))
        encoded = functional_call(model, encoder, (masked.patches,)).embeddings
        recon = F.linear(encoded, encoder["head.weight"], encoder["head.bias"])
        outputs = functional_call(head, task, (encoded,))
        reconstruction = masked_mse(recon, masked.targets, masked.mask)
        return reconstruction + finetune_loss(outputs, labels, spec)

    _, analytic = value_and_gradients(loss_fn, named)

    counts: dict[str, int] = {}
    worst: dict[str, tuple[float, str]] = {}
    with torch.no_grad():
        for name, index in _sample_coordinates(named, cfg.coordinates, rng):
            flat = named[name].view(-1)
            original = flat[index].item()
            flat[index] = original + cfg.step
            plus = loss_fn().item()
            flat[index] = original - cfg.step
            minus = loss_fn().item()
            flat[index] = original
            numeric = (plus - minus) / (2 * cfg.step)
            grad = analytic[name].view(-1)[index].item()
            error = relative_error(grad, numeric, cfg.denominator_floor)
            family = parameter_family(name)
            counts[family] = counts.get(family, 0) + 1
            if family not in worst or error > worst[family][0]:
                worst[family] = (error, name)

    results = [FamilyResult(f, counts[f], *worst[f]) for f in sorted(worst)]
    report = GradcheckReport(results, cfg.tolerance)
    logger.info(
        "Gradient check over %d coordinates: %s",
        report.coordinates,
        "pass" if report.passed else f"FAIL in {report.failing}",
    )
    return report
