"""Command implementations behind the ``crisscross-eeg`` verbs.

Each ``cmd_*`` takes a validated `RunConfig` plus the paths it works on and
returns a `Report`; writing files other than the report's own tables and
figures (containers, checkpoints, logs) happens here.
"""

import dataclasses
import logging
import math
from pathlib import Path

import numpy as np
import pandas as pd
import plotly.graph_objects as go

from crisscross_eeg.cli.config import RunConfig
from crisscross_eeg.core.complexity import compare_variants, count_flops, count_params
from crisscross_eeg.core.errors import EXIT_NUMERIC, EXIT_OK, ConfigError
from crisscross_eeg.core.events import TrainEventHandler
from crisscross_eeg.core.finetune import (
    evaluate,
    finetune,
    predictions_frame,
    write_predictions,
)
from crisscross_eeg.core.history import loss_curve_figure, loss_curve_frame
from crisscross_eeg.core.model import ATTENTION_VARIANTS
from crisscross_eeg.core.params import (
    ParameterSet,
    init_parameters,
    load_checkpoint,
    save_checkpoint,
)
from crisscross_eeg.core.preprocess import run_pipeline
from crisscross_eeg.core.recordings import (
    list_containers,
    read_container,
    read_indices,
    read_sample_set,
    write_indices,
    write_sample_set,
)
from crisscross_eeg.core.reports import FigurePart, Report, TablePart
from crisscross_eeg.core.synthetic import generate_synthetic, split_indices
from crisscross_eeg.core.training import pretrain
from crisscross_eeg.core.utils import derive_seed
from crisscross_eeg.verify.gradcheck import GradcheckConfig, run_gradcheck
from crisscross_eeg.verify.oracle import run_oracles

logger = logging.getLogger(__name__)

SPLIT_NAMES = ("train", "val", "test")
# criss_cross/full total FLOPs expected for the default model on a 16 x 10 grid
CRISS_FULL_BAND = (0.55, 0.85)


def require_path(value: str | Path | None, what: str) -> Path:
    if value is None:
        raise ConfigError(f"No {what} given (flag or paths.* config key)")
    return Path(value)


def read_splits(directory: str | Path) -> dict[str, np.ndarray]:
    """``train.txt``, ``val.txt`` and ``test.txt`` index files from ``directory``."""
    root = Path(directory)
    return {name: read_indices(root / f"{name}.txt") for name in SPLIT_NAMES}


def _load_params(cfg: RunConfig, checkpoint: str | Path | None) -> ParameterSet:
    if checkpoint is None:
        logger.info("No checkpoint given; using a fresh initialization")
        return init_parameters(cfg.model, derive_seed(cfg.seed, "init"))
    return load_checkpoint(checkpoint, cfg.model).params


def cmd_synth(cfg: RunConfig, out_dir: str | Path) -> Report:
    """Write a labelled synthetic sample set and deterministic split files."""
    spec = dataclasses.replace(
        cfg.synth, rng_seed=derive_seed(cfg.seed, "synth", cfg.synth.rng_seed)
    )
    samples = generate_synthetic(spec)
    out = Path(out_dir)
    write_sample_set(samples, out / "samples")
    splits = split_indices(len(samples), seed=derive_seed(cfg.seed, "splits"))
    for name, indices in splits.items():
        write_indices(indices, out / "splits" / f"{name}.txt")
    counts = pd.Series(samples.labels).value_counts().sort_index()
    table = pd.DataFrame({"label": counts.index, "samples": counts.to_numpy()})
    sizes = ", ".join(f"{k} {len(v)}" for k, v in splits.items())
    return Report(
        [
            f"{len(samples)} samples of {samples.n_channels} channels x "
            f"{samples.n_timepoints} points written to {out / 'samples'}",
            f"splits: {sizes}",
            TablePart(table, "class_counts"),
        ]
    )


def cmd_preprocess(cfg: RunConfig, in_path: str | Path, out_path: str | Path) -> Report:
    """Clean every recording under ``in_path`` into one sample-set container each."""
    rows = []
    out = Path(out_path)
    for container in list_containers(in_path):
        result = run_pipeline(read_container(container), cfg.preprocess)
        write_sample_set(result.samples, out / container.name)
        rows.append(
            {
                "recording": container.name,
                "segments": result.segments,
                "rejected": result.rejected,
                "kept": result.kept,
            }
        )
    table = pd.DataFrame(rows, columns=["recording", "segments", "rejected", "kept"])
    segments, rejected = int(table["segments"].sum()), int(table["rejected"].sum())
    summary = f"{segments} segments, {rejected} rejected"
    return Report([summary, TablePart(table, "segments")])


def cmd_pretrain(
    cfg: RunConfig,
    data_path: str | Path,
    out_dir: str | Path,
    resume: str | Path | None = None,
) -> Report:
    """Masked-reconstruction pre-training; writes checkpoints and the loss log."""
    dataset = read_sample_set(data_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out / "run_config.txt")
    result = pretrain(
        dataset,
        cfg.model,
        cfg.mask,
        cfg.schedule,
        optim=cfg.optim,
        train=cfg.train,
        seed=cfg.seed,
        out_dir=out / "checkpoints",
        resume=resume,
        on_event=TrainEventHandler(cfg.train.log_every),
    )
    log_path = result.log.write(out / "train_log.csv")
    window = cfg.train.smoothing_window
    parts: list = [
        f"{result.steps} steps, {len(result.checkpoints)} checkpoints, log {log_path}"
    ]
    if len(result.log):
        smoothed = result.log.smoothed(window)
        parts.append(
            f"smoothed loss {smoothed.iloc[0]:.6f} -> {smoothed.iloc[-1]:.6f}"
        )
        parts.append(TablePart(loss_curve_frame(result.log, window), "loss_curve"))
        parts.append(FigurePart(loss_curve_figure(result.log, window), "loss_curve"))
    return Report(parts)


def cmd_finetune(
    cfg: RunConfig,
    data_path: str | Path,
    splits_dir: str | Path,
    out_dir: str | Path,
    checkpoint: str | Path | None = None,
    frozen: bool | None = None,
    data_fraction: float | None = None,
) -> Report:
    """Fine-tune (or probe with a frozen encoder) and report test metrics."""
    ft_cfg = cfg.finetune
    if frozen is not None:
        ft_cfg = dataclasses.replace(ft_cfg, frozen=frozen)
    if data_fraction is not None:
        ft_cfg = dataclasses.replace(ft_cfg, data_fraction=data_fraction)
    dataset = read_sample_set(data_path)
    splits = read_splits(splits_dir)
    params = None
    if checkpoint is not None:
        params = load_checkpoint(checkpoint, cfg.model).params
    result = finetune(
        params,
        dataset,
        splits,
        cfg.task,
        ft_cfg,
        model_cfg=cfg.model,
        seed=cfg.seed,
        on_event=TrainEventHandler(cfg.train.log_every),
    )
    out = Path(out_dir)
    report_path = result.report.write(out / "eval_report.txt")
    test_ids = np.asarray(splits["test"])
    frame = predictions_frame(
        test_ids, result.test_outputs, dataset.labels[test_ids], cfg.task.kind
    )
    write_predictions(frame, out / "predictions.csv")
    save_checkpoint(out / "finetuned", result.params, len(result.log))
    history = pd.DataFrame(
        {
            "epoch": range(len(result.val_history)),
            cfg.task.monitor_metric: result.val_history,
        }
    )
    mode = "frozen probe" if ft_cfg.frozen else "fine-tune"
    return Report(
        [
            f"{mode} on {len(result.train_indices)} training samples; "
            f"best epoch {result.best_epoch}",
            result.report.to_text().rstrip(),
            f"report: {report_path}",
            TablePart(history, "validation"),
        ]
    )


def cmd_evaluate(
    cfg: RunConfig,
    data_path: str | Path,
    splits_dir: str | Path | None,
    out_dir: str | Path,
    checkpoint: str | Path | None = None,
    split: str = "test",
) -> Report:
    """Score one split without training."""
    dataset = read_sample_set(data_path)
    if splits_dir is not None:
        indices = read_splits(splits_dir)[split]
    else:
        indices = np.arange(len(dataset))
    params = _load_params(cfg, checkpoint)
    report, outputs = evaluate(params, dataset.subset(indices), cfg.task, cfg.seed)
    out = Path(out_dir)
    report_path = report.write(out / "eval_report.txt")
    frame = predictions_frame(indices, outputs, dataset.labels[indices], cfg.task.kind)
    write_predictions(frame, out / "predictions.csv")
    return Report([report.to_text().rstrip(), f"report: {report_path}"])


def _flops_note(summary: pd.DataFrame) -> str:
    totals = summary.set_index("variant")["total_flops"]
    ratio = totals["criss_cross"] / totals["full"]
    lo, hi = CRISS_FULL_BAND
    band = "inside" if lo <= ratio <= hi else "outside"
    note = f"criss_cross/full FLOPs {ratio:.3f}, {band} [{lo}, {hi}]"
    if totals["axial"] == totals["criss_cross"]:
        note += "; axial equals criss_cross exactly"
    return note


def cmd_flops(cfg: RunConfig, channels: int, seconds: float) -> Report:
    """Per-component FLOPs and parameters for every attention variant."""
    n_patches = math.floor(seconds * cfg.preprocess.target_rate / cfg.model.patch_len)
    if channels < 1 or n_patches < 1:
        raise ConfigError(
            f"{channels} channels x {seconds} s gives an empty patch grid"
        )
    summary = compare_variants(cfg.model, channels, n_patches)
    frames = []
    for variant in ATTENTION_VARIANTS:
        variant_cfg = dataclasses.replace(cfg.model, attention_variant=variant)
        breakdown = count_flops(variant_cfg, channels, n_patches)
        frames.append(breakdown.as_frame().assign(variant=variant))
    components = pd.concat(frames, ignore_index=True)
    fig = go.Figure(
        go.Bar(x=summary["variant"], y=summary["total_flops"] / 1e6, name="MFLOPs")
    )
    fig.update_layout(
        title=f"Forward FLOPs, {channels} channels x {n_patches} patches",
        yaxis_title="MFLOPs",
    )
    return Report(
        [
            f"grid {channels} x {n_patches}; parameters {count_params(cfg.model):,}",
            _flops_note(summary),
            TablePart(summary, "flops"),
            TablePart(components, "flops_components"),
            FigurePart(fig, "flops"),
        ]
    )


def cmd_gradcheck(cfg: RunConfig, corrupt: str | None = None) -> Report:
    """Finite-difference check of the tiny network; exit status 3 on failure."""
    report = run_gradcheck(GradcheckConfig(seed=cfg.seed), corrupt=corrupt)
    status = "pass" if report.passed else f"FAIL: {', '.join(report.failing)}"
    return Report(
        [
            f"{report.coordinates} coordinates, "
            f"tolerance {report.tolerance:g}: {status}",
            TablePart(report.as_frame(), "gradcheck"),
        ],
        exit_code=EXIT_OK if report.passed else EXIT_NUMERIC,
    )


def cmd_oracle(cfg: RunConfig) -> Report:
    """Brute-force oracle suite; exit status 3 when a deviation is out of tolerance."""
    report = run_oracles(cfg.seed)
    status = "pass" if report.passed else f"FAIL: {', '.join(report.failing)}"
    return Report(
        [f"oracles: {status}", TablePart(report.as_frame(), "oracles")],
        exit_code=EXIT_OK if report.passed else EXIT_NUMERIC,
    )
