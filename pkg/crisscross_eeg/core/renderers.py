"""Render reports to a text stream and to files.

Text and tables go to the stream; tables with a name are also written as CSV
and named figures as standalone HTML (or PNG/SVG through kaleido) into the
output directory.
"""

import copy
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, TextIO

import pandas as pd
import plotly.graph_objects as go

from crisscross_eeg.core.errors import ConfigError, ContainerError
from crisscross_eeg.core.reports import (
    FigurePart,
    Report,
    ReportPart,
    TablePart,
    TextPart,
)

logger = logging.getLogger(__name__)

IMAGE_FORMATS = ("html", "png", "svg")


@dataclass
class PartRenderer:
    stream: TextIO = field(default_factory=lambda: sys.stdout)
    out_dir: Path | None = None
    dark_mode: bool = False
    image_format: str = "html"
    written: list[Path] = field(default_factory=list)

    def __post_init__(self):
        if self.image_format not in IMAGE_FORMATS:
            raise ConfigError(
                f"Unknown figure format {self.image_format!r}; use one of {IMAGE_FORMATS}"
            )

    def _target(self, name: str, suffix: str) -> Path | None:
        if self.out_dir is None or not name:
            return None
        try:
            self.out_dir.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ContainerError(
                f"Cannot create output directory {self.out_dir}: {exc}"
            ) from exc
        return self.out_dir / f"{name}.{suffix}"

    def render_text(self, text: str):
        print(text, file=self.stream)

    def render_table(self, df: pd.DataFrame, name: str | None = None):
        print(df.to_string(index=False), file=self.stream)
        target = self._target(name or "", "csv")
        if target is not None:
            try:
                df.to_csv(target, index=False, float_format="%.10g")
            except OSError as exc:
                raise ContainerError(f"Failed to write table {target}: {exc}") from exc
            self.written.append(target)

    def render_figure(self, fig: go.Figure, name: str | None = None):
        """Write a themed copy of ``fig``; figures without a name are skipped."""
        target = self._target(name or "", self.image_format)
        if target is None:
            logger.debug("Skipping unnamed or undirected figure")
            return
        themed = copy.deepcopy(fig)
        if self.dark_mode:
            themed.update_layout(
                template="plotly_dark", paper_bgcolor="#161b22", plot_bgcolor="#0d1117"
            )
        else:
            themed.update_layout(
                template="plotly_white", paper_bgcolor="#ffffff", plot_bgcolor="#f6f8fa"
            )
        try:
            if self.image_format == "html":
                themed.write_html(target, include_plotlyjs="cdn")
            else:
                themed.write_image(target)
        except (OSError, ValueError) as exc:
            raise ContainerError(f"Failed to write figure {target}: {exc}") from exc
        self.written.append(target)
        print(f"figure: {target}", file=self.stream)

    def render_part(self, part: ReportPart | Any):
        match part:
            case TextPart(content=text):
                self.render_text(text)
            case TablePart(df=df, name=name):
                self.render_table(df, name)
            case FigurePart(figure=fig, name=name):
                self.render_figure(fig, name)
            case str():
                self.render_text(part)
            case pd.DataFrame():
                self.render_table(part)
            case go.Figure():
                self.render_figure(part)
            case _:
                self.render_text(str(part))


class ReportRenderer:
    """Renders complete reports; consecutive text parts print as one block."""

    def __init__(
        self,
        stream: TextIO | None = None,
        out_dir: str | Path | None = None,
        dark_mode: bool = False,
        image_format: str = "html",
    ):
        self.part_renderer = PartRenderer(
            stream=stream or sys.stdout,
            out_dir=Path(out_dir) if out_dir is not None else None,
            dark_mode=dark_mode,
            image_format=image_format,
        )

    @property
    def written(self) -> list[Path]:
        return self.part_renderer.written

    def render_report(
        self, report: Report | str | pd.DataFrame | go.Figure
    ) -> list[Path]:
        match report:
            case Report():
                merged: list[ReportPart] = []
                text_buffer: list[str] = []
                for part in report.normalize():
                    if isinstance(part, TextPart):
                        text_buffer.append(part.content)
                        continue
                    if text_buffer:
                        merged.append(TextPart(content="\n".join(text_buffer)))
                        text_buffer = []
                    merged.append(part)
                if text_buffer:
                    merged.append(TextPart(content="\n".join(text_buffer)))
                for part in merged:
                    self.part_renderer.render_part(part)
            case _:
                self.part_renderer.render_part(report)
        return list(self.written)
