import io
import logging
from pathlib import Path

import pandas as pd
import plotly.graph_objects as go
import pytest

from crisscross_eeg.core.errors import ConfigError, ContainerError
from crisscross_eeg.core.events import (
    CheckpointEvent,
    EpochEvent,
    EvalEvent,
    StepEvent,
    StepRecord,
    TrainEventHandler,
    TrainLog,
    emit,
)
from crisscross_eeg.core.history import (
    loss_curve_figure,
    loss_curve_frame,
    read_train_log,
)
from crisscross_eeg.core.renderers import ReportRenderer
from crisscross_eeg.core.reports import FigurePart, Report, TablePart, TextPart


def _log(losses):
    log = TrainLog()
    for step, loss in enumerate(losses):
        log.append(StepRecord(step, step // 2, loss, 1e-4, 0.5))
    return log


class TestTrainLog:
    def test_steps_must_increase(self):
        log = _log([1.0, 0.5])
        with pytest.raises(ConfigError):
            log.append(StepRecord(1, 0, 0.1, 1e-4, 0.1))

    def test_smoothed(self):
        smoothed = _log([4.0, 2.0, 0.0, 2.0]).smoothed(2)
        assert list(smoothed) == [4.0, 3.0, 1.0, 1.0]

    def test_csv_round_trip_is_exact(self, tmp_path):
        log = _log([0.1 + 0.2, 1 / 3, 2.0 ** -40])
        back = read_train_log(log.write(tmp_path / "logs" / "train_log.csv"))
        assert back.records == log.records

    def test_missing_columns(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("step,loss\n0,1.0\n")
        with pytest.raises(ContainerError, match="lacks columns"):
            read_train_log(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ContainerError):
            read_train_log(tmp_path / "absent.csv")

    def test_curve(self):
        log = _log([3.0, 1.0, 2.0])
        frame = loss_curve_frame(log, window=2)
        assert list(frame.columns) == ["step", "epoch", "loss", "smoothed_loss", "lr"]
        assert list(frame["smoothed_loss"]) == [3.0, 2.0, 1.5]
        assert len(loss_curve_figure(log, window=2).data) == 2


class TestEvents:
    def test_handler_logs(self, caplog):
        handler = TrainEventHandler(log_every=5)
        with caplog.at_level(logging.INFO, logger="crisscross_eeg.core.events"):
            for step in range(7):
                handler(StepEvent(StepRecord(step, 0, 1.0, 1e-4, 0.2), 7))
            handler(EpochEvent(0, 1.0, 7))
            handler(CheckpointEvent(Path("runs/epoch000"), 7, diagnostic=True))
            handler(EvalEvent(0, "auroc", 0.8, True))
        messages = [r.getMessage() for r in caplog.records]
        assert [m.split()[1] for m in messages[:3]] == ["1/7", "6/7", "7/7"]
        assert "diagnostic checkpoint at step 7" in messages[4]
        assert messages[5].endswith("auroc=0.8000 (best)")
        assert handler.event_count == 10

    def test_emit_without_callback(self):
        emit(None, EpochEvent(0, 1.0, 1))
        seen = []
        emit(seen.append, EpochEvent(0, 1.0, 1))
        assert len(seen) == 1


class TestReport:
    def test_normalize(self):
        df = pd.DataFrame({"a": [1]})
        fig = go.Figure()
        report = Report(["hello", df, fig, 42])
        kinds = [type(p) for p in report.normalize()]
        assert kinds == [TextPart, TablePart, FigurePart, TextPart]
        assert report.text == "hello\n42"

    def test_add_chains(self):
        report = Report().add("a").add("b")
        assert report.text == "a\nb"
        assert report.exit_code == 0


class TestRenderer:
    def test_writes_named_outputs(self, tmp_path):
        stream = io.StringIO()
        report = Report(
            [
                "first",
                "second",
                TablePart(pd.DataFrame({"variant": ["full"], "flops": [10]}), "flops"),
                TablePart(pd.DataFrame({"x": [1]})),
                FigurePart(go.Figure(go.Scatter(x=[0, 1], y=[1, 0])), "loss_curve"),
            ]
        )
        written = ReportRenderer(stream, tmp_path / "out").render_report(report)
        out = tmp_path / "out"
        assert written == [out / "flops.csv", out / "loss_curve.html"]
        assert pd.read_csv(written[0])["flops"].item() == 10
        assert "<html>" in written[1].read_text()
        assert stream.getvalue().startswith("first\nsecond\n")

    def test_nothing_written_without_out_dir(self):
        stream = io.StringIO()
        renderer = ReportRenderer(stream)
        renderer.render_report(Report([TablePart(pd.DataFrame({"a": [1]}), "t")]))
        assert renderer.written == []
        assert "a" in stream.getvalue()

    def test_dark_mode_leaves_figure(self, tmp_path):
        fig = go.Figure()
        ReportRenderer(io.StringIO(), tmp_path, dark_mode=True).render_report(
            Report([FigurePart(fig, "f")])
        )
        assert fig.layout.paper_bgcolor is None
        assert (tmp_path / "f.html").is_file()

    def test_unknown_format(self):
        with pytest.raises(ConfigError):
            ReportRenderer(io.StringIO(), image_format="gif")
