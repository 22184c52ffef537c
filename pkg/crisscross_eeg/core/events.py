"""Training progress records and event handling.

Training loops emit typed events to an ``on_event`` callback; the default
`TrainEventHandler` turns them into log lines. The `TrainLog` collects
per-step records and serializes them as CSV for plotting and comparison.
"""

import logging
from collections.abc import Callable
from dataclasses import asdict, dataclass, field
from pathlib import Path

import pandas as pd

from crisscross_eeg.core.errors import ConfigError, ContainerError

logger = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "epoch", "loss", "lr", "grad_norm")


@dataclass(frozen=True)
class StepRecord:
    step: int
    epoch: int
    loss: float
    lr: float
    grad_norm: float


@dataclass
class TrainLog:
    """Per-step records with strictly increasing step numbers."""

    records: list[StepRecord] = field(default_factory=list)

    def append(self, record: StepRecord) -> None:
        if self.records and record.step <= self.records[-1].step:
            raise ConfigError(
                f"Step {record.step} does not follow step {self.records[-1].step}"
            )
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def losses(self) -> list[float]:
        return [r.loss for r in self.records]

    def to_frame(self) -> pd.DataFrame:
        rows = [asdict(r) for r in self.records]
        return pd.DataFrame(rows, columns=list(LOG_COLUMNS))

    def smoothed(self, window: int = 20) -> pd.Series:
        """Trailing moving average of the loss."""
        return self.to_frame()["loss"].rolling(window, min_periods=1).mean()

    def write(self, path: str | Path) -> Path:
        """One record per line; floats are written round-trip exact."""
        target = Path(path)
        try:
            target.parent.mkdir(parents=True, exist_ok=True)
            self.to_frame().to_csv(target, index=False, float_format="%.17g")
        except OSError as exc:
            raise ContainerError(f"Failed to write train log {target}: {exc}") from exc
        return target


# Events ----------------------------------------------------------------------


@dataclass(frozen=True)
class StepEvent:
    record: StepRecord
    steps_total: int


@dataclass(frozen=True)
class EpochEvent:
    epoch: int
    mean_loss: float
    steps: int


@dataclass(frozen=True)
class CheckpointEvent:
    path: Path
    step: int
    diagnostic: bool = False


@dataclass(frozen=True)
class EvalEvent:
    """Validation metrics of one fine-tuning epoch."""

    epoch: int
    monitor: str
    value: float
    is_best: bool


TrainEvent = StepEvent | EpochEvent | CheckpointEvent | EvalEvent
EventCallback = Callable[[TrainEvent], None]


@dataclass
class TrainEventHandler:
    """Logs training events; every ``log_every`` steps for step events."""

    log_every: int = 10
    event_count: int = 0

    def handle_event(self, evt: TrainEvent) -> None:
        self.event_count += 1
        if isinstance(evt, StepEvent):
            r = evt.record
            if r.step % self.log_every == 0 or r.step + 1 == evt.steps_total:
                logger.info(
                    "step %d/%d epoch %d loss %.6f lr %.3e grad_norm %.4f",
                    r.step + 1,
                    evt.steps_total,
                    r.epoch,
                    r.loss,
                    r.lr,
                    r.grad_norm,
                )
        elif isinstance(evt, EpochEvent):
            logger.info(
                "epoch %d done: mean loss %.6f over %d steps",
                evt.epoch,
                evt.mean_loss,
                evt.steps,
            )
        elif isinstance(evt, CheckpointEvent):
            kind = "diagnostic checkpoint" if evt.diagnostic else "checkpoint"
            logger.info("%s at step %d: %s", kind, evt.step, evt.path)
        elif isinstance(evt, EvalEvent):
            marker = " (best)" if evt.is_best else ""
            logger.info(
                "epoch %d validation %s=%.4f%s",
                evt.epoch,
                evt.monitor,
                evt.value,
                marker,
            )

    __call__ = handle_event


def emit(on_event: EventCallback | None, evt: TrainEvent) -> None:
    if on_event is not None:
        on_event(evt)
