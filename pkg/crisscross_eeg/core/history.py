"""Restoring train logs from disk and drawing loss curves."""

from pathlib import Path

import pandas as pd
import plotly.graph_objects as go

from crisscross_eeg.core.errors import ContainerError
from crisscross_eeg.core.events import LOG_COLUMNS, StepRecord, TrainLog


def read_train_log(path: str | Path) -> TrainLog:
    """Rebuild a `TrainLog` from the CSV written by `TrainLog.write`."""
    source = Path(path)
    try:
        frame = pd.read_csv(source, float_precision="round_trip")
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise ContainerError(f"Cannot read train log {source}: {exc}") from exc
    missing = [c for c in LOG_COLUMNS if c not in frame.columns]
    if missing:
        raise ContainerError(f"{source}: train log lacks columns {missing}")
    log = TrainLog()
    for row in frame.itertuples(index=False):
        log.append(
            StepRecord(
                step=int(row.step),
                epoch=int(row.epoch),
                loss=float(row.loss),
                lr=float(row.lr),
                grad_norm=float(row.grad_norm),
            )
        )
    return log


def loss_curve_frame(log: TrainLog, window: int = 20) -> pd.DataFrame:
    """Step, raw loss and trailing-average loss: the data behind the loss plot."""
    frame = log.to_frame()
    frame["smoothed_loss"] = log.smoothed(window)
    return frame[["step", "epoch", "loss", "smoothed_loss", "lr"]]


def loss_curve_figure(
    log: TrainLog, window: int = 20, title: str = "Pre-training loss"
) -> go.Figure:
    frame = loss_curve_frame(log, window)
    fig = go.Figure()
    fig.add_trace(
        go.Scatter(
            x=frame["step"],
            y=frame["loss"],
            mode="lines",
            name="loss",
            opacity=0.35,
        )
    )
    fig.add_trace(
        go.Scatter(
            x=frame["step"],
            y=frame["smoothed_loss"],
            mode="lines",
            name=f"mean of {window}",
        )
    )
    fig.update_layout(title=title, xaxis_title="step", yaxis_title="masked MSE")
    return fig
