"""Report types returned by every command.

A report is a list of parts: text, pandas tables and plotly figures. Tables
and figures carry a file stem so renderers can persist them next to the
command's other outputs.
"""

from dataclasses import dataclass, field

import pandas as pd
import plotly.graph_objects as go

from crisscross_eeg.core.errors import EXIT_OK


@dataclass
class ReportPart:
    """Base class for all report parts."""

    pass


@dataclass
class TextPart(ReportPart):
    content: str


@dataclass
class TablePart(ReportPart):
    """Tabular result; written as ``<name>.csv`` when an output directory is set."""

    df: pd.DataFrame
    name: str | None = None


@dataclass
class FigurePart(ReportPart):
    """Plotly figure; written as ``<name>.html`` (or an image via kaleido)."""

    figure: go.Figure
    name: str | None = None


@dataclass
class Report:
    """Multi-part command result.

    Parts may be raw ``str`` / ``pd.DataFrame`` / ``go.Figure`` values or
    `ReportPart` instances:

        >>> Report(parts=["3 segments, 0 rejected", TablePart(df, "segments")])
    """

    parts: list[ReportPart | str | pd.DataFrame | go.Figure] = field(
        default_factory=list
    )
    exit_code: int = EXIT_OK

    def add(self, part: ReportPart | str | pd.DataFrame | go.Figure) -> "Report":
        self.parts.append(part)
        return self

    def normalize(self) -> list[ReportPart]:
        """Wrap raw strings, DataFrames and Figures in their part types."""
        normalized = []
        for part in self.parts:
            if isinstance(part, ReportPart):
                normalized.append(part)
            elif isinstance(part, str):
                normalized.append(TextPart(content=part))
            elif isinstance(part, pd.DataFrame):
                normalized.append(TablePart(df=part))
            elif isinstance(part, go.Figure):
                normalized.append(FigurePart(figure=part))
            else:
                normalized.append(TextPart(content=str(part)))
        return normalized

    @property
    def text(self) -> str:
        return "\n".join(p.content for p in self.normalize() if isinstance(p, TextPart))
