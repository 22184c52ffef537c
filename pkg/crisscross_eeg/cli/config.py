"""Run configuration: every section of a ``crisscross-eeg`` config file.

Example::

    seed=7
    model.n_layers=2
    model.ffn_dim=256
    mask.ratio=0.5
    schedule.epochs=3
    paths.data=runs/synthetic
"""

import dataclasses
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

from crisscross_eeg.core import config as flatconf
from crisscross_eeg.core.errors import ConfigError
from crisscross_eeg.core.finetune import FinetuneConfig, TaskSpec
from crisscross_eeg.core.model import ModelConfig
from crisscross_eeg.core.patching import MaskSpec
from crisscross_eeg.core.preprocess import PreprocessConfig
from crisscross_eeg.core.synthetic import SyntheticSpec
from crisscross_eeg.core.training import OptimizerConfig, ScheduleConfig, TrainConfig

logger = logging.getLogger(__name__)

CONFIG_ENV = "CRISSCROSS_EEG_CONFIG"


@dataclass
class PathsConfig:
    """Input and output locations; command-line flags take precedence."""

    recordings: str | None = None
    data: str | None = None
    splits: str | None = None
    checkpoint: str | None = None
    out_dir: str = "runs"


@dataclass
class RunConfig:
    seed: int = 0
    threads: int | None = None
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    mask: MaskSpec = field(default_factory=MaskSpec)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    optim: OptimizerConfig = field(default_factory=OptimizerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    task: TaskSpec = field(default_factory=TaskSpec)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    synth: SyntheticSpec = field(default_factory=SyntheticSpec)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def __post_init__(self):
        # The mask section decides whether the encoder carries a token parameter.
        learnable = self.mask.token_kind == "learnable"
        if self.model.learnable_token != learnable:
            self.model = dataclasses.replace(self.model, learnable_token=learnable)

    def to_entries(self) -> dict[str, str]:
        entries = flatconf.flatten(self)
        # Band assignments are derived from the other synth fields.
        entries.pop("synth.band_assignments", None)
        return entries

    def write(self, path: str | Path) -> Path:
        return flatconf.write_flat(path, self.to_entries(), "crisscross-eeg run config")


def build_run_config(
    entries: dict[str, str], base: RunConfig | None = None
) -> RunConfig:
    """Build a validated `RunConfig` from flat entries; unknown keys are errors."""
    sections = flatconf.split_sections(entries)
    known = {f.name for f in dataclasses.fields(RunConfig)}
    for name in sections:
        if name and name not in known:
            raise ConfigError(f"Unknown config section {name!r}")
    base = base or RunConfig()
    if "synth" in sections:
        # re-derive band assignments for the overridden channel/class counts
        base = dataclasses.replace(
            base, synth=dataclasses.replace(base.synth, band_assignments=())
        )
    return flatconf.build(RunConfig, entries, base=base)


def default_config_path() -> Path | None:
    value = os.environ.get(CONFIG_ENV)
    return Path(value) if value else None


def load_run_config(
    path: str | Path | None = None, overrides: dict[str, str] | None = None
) -> RunConfig:
    """Read ``path`` (default ``$CRISSCROSS_EEG_CONFIG``) and apply overrides."""
    path = Path(path) if path is not None else default_config_path()
    entries: dict[str, str] = {}
    if path is not None:
        entries.update(flatconf.read_flat(path))
        logger.info("Loaded config %s (%d keys)", path, len(entries))
    entries.update(overrides or {})
    return build_run_config(entries)
