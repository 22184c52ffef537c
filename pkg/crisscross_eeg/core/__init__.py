"""Reusable building blocks for crisscross-eeg.

One module per concern: on-disk containers, preprocessing, patching, the
encoder and its attention, parameters and checkpoints, training, metrics,
fine-tuning and multi-part reports.
"""

from crisscross_eeg.core.errors import (
    ConfigError,
    ContainerError,
    CrissCrossError,
    DataError,
    NumericError,
    ShapeError,
)
from crisscross_eeg.core.model import CrissCrossModel, ModelConfig
from crisscross_eeg.core.params import ParameterSet
from crisscross_eeg.core.recordings import EEGRecording, SampleSet
from crisscross_eeg.core.reports import FigurePart, Report, TablePart, TextPart

__all__ = [
    "CrissCrossError",
    "ConfigError",
    "ShapeError",
    "DataError",
    "NumericError",
    "ContainerError",
    "EEGRecording",
    "SampleSet",
    "ModelConfig",
    "CrissCrossModel",
    "ParameterSet",
    "Report",
    "TextPart",
    "TablePart",
    "FigurePart",
]
