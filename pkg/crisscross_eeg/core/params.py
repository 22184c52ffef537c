"""Named parameter tensors, deterministic initialization and checkpoints.

A checkpoint is a directory with a ``manifest.txt`` (format version, step,
dtype, tensor shapes and a snapshot of the model config) and one raw
little-endian file per tensor: ``<name>.f32`` or ``<name>.f64`` depending on
the run's precision. Optimizer moments travel alongside as
``optim.<name>.exp_avg`` / ``optim.<name>.exp_avg_sq``.
"""

import functools
import logging
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
from torch import nn

from crisscross_eeg.core import config as flatconf
from crisscross_eeg.core.encoder import AbsolutePositional
from crisscross_eeg.core.errors import (
    ConfigError,
    ContainerError,
    NumericError,
    ShapeError,
)
from crisscross_eeg.core.model import CrissCrossModel, ModelConfig, skeleton
from crisscross_eeg.core.recordings import (
    FORMAT_VERSION,
    MANIFEST_NAME,
    read_manifest,
    read_payload,
    write_manifest,
    write_payload,
)

logger = logging.getLogger(__name__)

TASK_PREFIX = "task."
OPTIM_PREFIX = "optim."
FAMILIES = (
    "conv",
    "norm",
    "frequency",
    "positional",
    "attention",
    "ffn",
    "head",
    "token",
)

# fields a run may change without touching the trained architecture
RUNTIME_FIELDS = ("dropout_p", "dtype")

_SUFFIX = {"float32": ".f32", "float64": ".f64"}
_NUMPY = {"float32": np.dtype("<f4"), "float64": np.dtype("<f8")}


@functools.lru_cache(maxsize=16)
def expected_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Shape of every encoder tensor implied by ``cfg``."""
    return {name: tuple(p.shape) for name, p in skeleton(cfg).named_parameters()}


def parameter_family(name: str) -> str:
    """Coarse family of a tensor name, used to stratify gradient checks."""
    if name.startswith(TASK_PREFIX):
        return "task"
    if name == "mask_token":
        return "token"
    if name.startswith("patch_encoder.time_branch."):
        index = int(name.split(".")[2])
        return "conv" if index % 3 == 0 else "norm"
    if name.startswith("patch_encoder.freq_proj."):
        return "frequency"
    if name.startswith("positional."):
        return "positional"
    if name.startswith("head."):
        return "head"
    part = name.split(".")[2]
    if part in ("attn_norm", "ffn_norm"):
        return "norm"
    if part == "attn":
        return "attention"
    if part == "ffn":
        return "ffn"
    raise ConfigError(f"Cannot classify parameter {name!r}")


@dataclass
class ParameterSet:
    """Every learnable tensor by name, for one `ModelConfig`.

    Task-head tensors, when present, are prefixed ``task.`` and are not part
    of the encoder.
    """

    tensors: dict[str, torch.Tensor]
    config: ModelConfig
    meta: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.validate(self.config)

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    @property
    def names(self) -> list[str]:
        return list(self.tensors)

    def encoder_tensors(self) -> dict[str, torch.Tensor]:
        return {k: v for k, v in self.tensors.items() if not k.startswith(TASK_PREFIX)}

    def task_tensors(self) -> dict[str, torch.Tensor]:
        return {
            k[len(TASK_PREFIX) :]: v
            for k, v in self.tensors.items()
            if k.startswith(TASK_PREFIX)
        }

    def num_elements(self, include_task: bool = False) -> int:
        tensors = self.tensors if include_task else self.encoder_tensors()
        return sum(t.numel() for t in tensors.values())

    def families(self) -> dict[str, list[str]]:
        grouped: dict[str, list[str]] = {}
        for name in self.tensors:
            grouped.setdefault(parameter_family(name), []).append(name)
        return grouped

    def validate(self, cfg: ModelConfig) -> None:
        """Check the encoder tensors match ``cfg`` name for name and shape for shape."""
        expected = expected_shapes(cfg)
        encoder = self.encoder_tensors()
        missing = sorted(set(expected) - set(encoder))
        extra = sorted(set(encoder) - set(expected))
        if missing or extra:
            raise ShapeError(
                f"Parameter names disagree with config: missing {missing}, extra {extra}"
            )
        for name, shape in expected.items():
            if tuple(encoder[name].shape) != shape:
                raise ShapeError(
                    f"{name}: shape {tuple(encoder[name].shape)}, config implies {shape}"
                )

    def ensure_finite(self) -> None:
        for name, tensor in self.tensors.items():
            if not torch.isfinite(tensor).all():
                raise NumericError(f"Parameter {name} is not finite", tensor_name=name)

    def clone(self) -> "ParameterSet":
        return ParameterSet(
            {k: v.detach().clone() for k, v in self.tensors.items()},
            self.config,
            dict(self.meta),
        )

    def with_task(self, task: dict[str, torch.Tensor]) -> "ParameterSet":
        merged = self.encoder_tensors()
        merged.update({f"{TASK_PREFIX}{k}": v for k, v in task.items()})
        return ParameterSet(merged, self.config, dict(self.meta))

    @classmethod
    def from_module(
        cls, model: CrissCrossModel, task_head: nn.Module | None = None
    ) -> "ParameterSet":
        tensors = {name: p.detach().clone() for name, p in model.named_parameters()}
        if task_head is not None:
            tensors.update(
                {
                    f"{TASK_PREFIX}{n}": p.detach().clone()
                    for n, p in task_head.named_parameters()
                }
            )
        return cls(tensors, model.cfg)

    def load_into(
        self, model: CrissCrossModel, task_head: nn.Module | None = None
    ) -> None:
        """Copy tensors into live modules in place."""
        self.validate(model.cfg)
        with torch.no_grad():
            for name, p in model.named_parameters():
                p.copy_(self.tensors[name])
            if task_head is not None:
                task = self.task_tensors()
                for name, p in task_head.named_parameters():
                    if name not in task:
                        raise ShapeError(f"Checkpoint has no task tensor {name!r}")
                    p.copy_(task[name])


def reset_parameters(module: nn.Module, seed: int) -> None:
    """Kaiming-normal weights, zero biases and unit norm scales, fixed by ``seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        with torch.no_grad():
            for sub in module.modules():
                if isinstance(sub, (nn.Linear, nn.Conv1d, nn.Conv2d)):
                    nn.init.kaiming_normal_(sub.weight)
                    if sub.bias is not None:
                        nn.init.zeros_(sub.bias)
                elif isinstance(sub, (nn.LayerNorm, nn.GroupNorm)):
                    nn.init.ones_(sub.weight)
                    if sub.bias is not None:
                        nn.init.zeros_(sub.bias)
                elif isinstance(sub, AbsolutePositional):
                    nn.init.trunc_normal_(sub.table, std=0.02)
            if isinstance(module, CrissCrossModel) and module.mask_token is not None:
                nn.init.zeros_(module.mask_token)


def build_model(cfg: ModelConfig, seed: int = 0) -> CrissCrossModel:
    model = CrissCrossModel(cfg)
    reset_parameters(model, seed)
    return model.to(cfg.torch_dtype)


def init_parameters(cfg: ModelConfig, seed: int = 0) -> ParameterSet:
    """Deterministic initial parameters for ``cfg``."""
    return ParameterSet.from_module(build_model(cfg, seed))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    params: ParameterSet
    step: int
    moments: dict[str, torch.Tensor] = field(default_factory=dict)


def _shape_text(shape: tuple[int, ...]) -> str:
    return "x".join(str(s) for s in shape) if shape else "scalar"


def check_architecture(stored: ModelConfig, cfg: ModelConfig, where: str) -> None:
    """Raise `ConfigError` when ``cfg`` and ``stored`` describe different networks."""
    differing = [
        f.name
        for f in fields(ModelConfig)
        if f.name not in RUNTIME_FIELDS
        and getattr(stored, f.name) != getattr(cfg, f.name)
    ]
    if differing:
        detail = ", ".join(
            f"{name}={getattr(cfg, name)!r} (checkpoint {getattr(stored, name)!r})"
            for name in differing
        )
        raise ConfigError(f"{where}: model config disagrees with checkpoint: {detail}")


def _parse_shape(text: str) -> tuple[int, ...]:
    return () if text == "scalar" else tuple(int(s) for s in text.split("x"))


def save_checkpoint(
    path: str | Path,
    params: ParameterSet,
    step: int,
    moments: dict[str, torch.Tensor] | None = None,
    check_finite: bool = True,
) -> Path:
    """Write ``params`` (and optimizer moments) as a checkpoint directory.

    Diagnostic checkpoints of a diverged run pass ``check_finite=False``.
    """
    if check_finite:
        params.ensure_finite()
    dtype = params.config.dtype
    directory = Path(path)
    tensors = dict(params.tensors)
    tensors.update({f"{OPTIM_PREFIX}{k}": v for k, v in (moments or {}).items()})
    entries: dict[str, object] = {
        "format_version": FORMAT_VERSION,
        "kind": "checkpoint",
        "step": step,
        "dtype": dtype,
        "mask_token": "learnable" if params.config.learnable_token else "full_zero",
    }
    entries.update(
        {f"tensor.{name}": _shape_text(tuple(t.shape)) for name, t in tensors.items()}
    )
    entries.update(
        {f"config.{k}": v for k, v in flatconf.flatten(params.config).items()}
    )
    entries.update({f"meta.{k}": v for k, v in params.meta.items()})
    try:
        directory.mkdir(parents=True, exist_ok=True)
        for name, tensor in tensors.items():
            data = tensor.detach().cpu().numpy()
            write_payload(directory / f"{name}{_SUFFIX[dtype]}", data, _NUMPY[dtype])
        write_manifest(directory / MANIFEST_NAME, entries)
    except OSError as exc:
        raise ContainerError(f"Failed to write checkpoint {directory}: {exc}") from exc
    logger.info("Saved checkpoint %s at step %d", directory, step)
    return directory


def load_checkpoint(path: str | Path, cfg: ModelConfig | None = None) -> Checkpoint:
    """Read a checkpoint; every tensor shape is validated against the model config.

    Without ``cfg`` the config snapshot stored in the manifest is used. With
    ``cfg``, shapes must match (`ShapeError`) and so must every architecture
    field of the snapshot (`ConfigError`); dropout and precision come from
    ``cfg``.
    """
    directory = Path(path)
    manifest = read_manifest(directory / MANIFEST_NAME)
    if manifest.get("format_version") != str(FORMAT_VERSION):
        raise ContainerError(
            f"{directory}: unsupported format_version {manifest.get('format_version')!r}"
        )
    if manifest.get("kind") != "checkpoint":
        raise ContainerError(f"{directory}: not a checkpoint container")
    dtype = manifest.get("dtype", "float32")
    if dtype not in _SUFFIX:
        raise ContainerError(f"{directory}: unsupported dtype {dtype!r}")

    snapshot = {
        k[len("config.") :]: v for k, v in manifest.items() if k.startswith("config.")
    }
    stored_cfg = flatconf.build(ModelConfig, snapshot)
    cfg = cfg or stored_cfg

    tensors: dict[str, torch.Tensor] = {}
    moments: dict[str, torch.Tensor] = {}
    for key, shape_text in manifest.items():
        if not key.startswith("tensor."):
            continue
        name = key[len("tensor.") :]
        data = read_payload(
            directory / f"{name}{_SUFFIX[dtype]}",
            _parse_shape(shape_text),
            _NUMPY[dtype],
        )
        tensor = torch.from_numpy(data.copy()).to(cfg.torch_dtype)
        if name.startswith(OPTIM_PREFIX):
            moments[name[len(OPTIM_PREFIX) :]] = tensor
        else:
            tensors[name] = tensor
    meta = {k[len("meta.") :]: v for k, v in manifest.items() if k.startswith("meta.")}
    params = ParameterSet(tensors, cfg, meta)
    check_architecture(stored_cfg, cfg, str(directory))
    params.ensure_finite()
    step = int(manifest.get("step", "0"))
    return Checkpoint(params=params, step=step, moments=moments)
