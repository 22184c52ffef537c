"""Signal cleaning chain for pre-training corpora.

band-pass -> notch -> resample -> segment -> bad-sample rejection -> unit
normalization. Filters are zero-phase (forward-backward), so filtering never
shifts waveforms relative to each other across channels.
"""

import logging
from dataclasses import dataclass, replace
from fractions import Fraction

import numpy as np
from scipy import signal

from crisscross_eeg.core.errors import ConfigError, DataError
from crisscross_eeg.core.recordings import EEGRecording, SampleSet

logger = logging.getLogger(__name__)

# 19 channels of the 10-20 system shared by most clinical montages.
COMMON_CHANNELS = (
    "Fp1", "Fp2", "F7", "F3", "Fz", "F4", "F8", "T3", "C3", "Cz",
    "C4", "T4", "T5", "P3", "Pz", "P4", "T6", "O1", "O2",
)  # fmt: skip


@dataclass
class PreprocessConfig:
    """Parameters of the cleaning chain (defaults follow the pre-training corpus)."""

    bandpass_lo: float = 0.3
    bandpass_hi: float = 75.0
    filter_order: int = 4
    notch_freq: float = 60.0
    notch_q: float = 30.0
    target_rate: float = 200.0
    segment_s: float = 30.0
    reject_amp_uv: float = 100.0
    norm_unit_uv: float = 100.0
    channels: tuple[str, ...] | None = None
    drop_short: bool = False
    min_recording_s: float = 300.0
    trim_edges: bool = False
    edge_trim_s: float = 60.0

    def __post_init__(self):
        if not 0 < self.bandpass_lo < self.bandpass_hi < self.target_rate / 2:
            raise ConfigError(
                "Band edges must satisfy 0 < lo < hi < target_rate/2, got "
                f"lo={self.bandpass_lo}, hi={self.bandpass_hi}, "
                f"target_rate={self.target_rate}"
            )
        if self.segment_s <= 0:
            raise ConfigError(f"segment_s must be positive, got {self.segment_s}")
        if self.reject_amp_uv <= 0 or self.norm_unit_uv <= 0:
            raise ConfigError("reject_amp_uv and norm_unit_uv must be positive")
        if self.filter_order < 1 or self.notch_q <= 0:
            raise ConfigError("filter_order must be >= 1 and notch_q positive")


@dataclass
class PipelineResult:
    """Output of `run_pipeline` plus its bookkeeping counts."""

    samples: SampleSet
    segments: int
    rejected: int

    @property
    def kept(self) -> int:
        return len(self.samples)


def _with_data(rec: EEGRecording, data: np.ndarray, **changes) -> EEGRecording:
    return replace(rec, data=data, channel_names=list(rec.channel_names), **changes)


def bandpass(
    rec: EEGRecording, lo: float, hi: float, order: int = 4
) -> EEGRecording:
    """Zero-phase Butterworth band-pass; shape and sample rate unchanged."""
    nyquist = rec.sample_rate / 2
    if not 0 < lo < hi < nyquist:
        raise ConfigError(
            f"Invalid band edges lo={lo}, hi={hi} for Nyquist {nyquist} Hz"
        )
    sos = signal.butter(
        order, [lo, hi], btype="bandpass", fs=rec.sample_rate, output="sos"
    )
    try:
        filtered = signal.sosfiltfilt(sos, rec.data.astype(np.float64), axis=-1)
    except ValueError as exc:
        raise DataError(f"Recording too short to band-pass filter: {exc}") from exc
    return _with_data(rec, filtered)


def notch(rec: EEGRecording, f0: float, q: float = 30.0) -> EEGRecording:
    """Zero-phase IIR notch at ``f0`` Hz with quality factor ``q``."""
    nyquist = rec.sample_rate / 2
    if not 0 < f0 < nyquist:
        raise ConfigError(f"Notch frequency {f0} Hz must lie in (0, {nyquist}) Hz")
    b, a = signal.iirnotch(f0, q, fs=rec.sample_rate)
    try:
        filtered = signal.filtfilt(b, a, rec.data.astype(np.float64), axis=-1)
    except ValueError as exc:
        raise DataError(f"Recording too short to notch filter: {exc}") from exc
    return _with_data(rec, filtered)


def resample(rec: EEGRecording, target: float) -> EEGRecording:
    """Polyphase rational resampling with scipy's built-in anti-aliasing FIR.

    The output has ``round(T * target / fs)`` timepoints.
    """
    if target <= 0:
        raise ConfigError(f"Target rate must be positive, got {target}")
    exact = target / rec.sample_rate
    ratio = Fraction(exact).limit_denominator(1000)
    if abs(float(ratio) - exact) > 1e-9 * exact:
        logger.warning(
            "Resampling %g Hz to %g Hz by %d/%d, an effective rate of %.6g Hz",
            rec.sample_rate,
            target,
            ratio.numerator,
            ratio.denominator,
            rec.sample_rate * float(ratio),
        )
    if ratio == 1:
        return _with_data(rec, rec.data.astype(np.float64).copy())
    n_out = int(round(rec.n_timepoints * target / rec.sample_rate))
    if n_out < 1:
        raise DataError(
            f"Resampling {rec.n_timepoints} points to {target} Hz leaves none"
        )
    data = signal.resample_poly(
        rec.data.astype(np.float64), ratio.numerator, ratio.denominator, axis=-1
    )
    return _with_data(rec, data[:, :n_out], sample_rate=float(target))


def segment(rec: EEGRecording, seconds: float) -> SampleSet:
    """Cut non-overlapping windows of ``seconds``; the trailing remainder is dropped."""
    length = int(round(seconds * rec.sample_rate))
    if length < 1:
        raise ConfigError(f"Segment of {seconds} s is shorter than one sample")
    count = rec.n_timepoints // length
    if count == 0:
        raise DataError(
            f"Recording of {rec.duration_s:.2f} s is shorter than one {seconds} s segment"
        )
    windows = rec.data[:, : count * length].reshape(rec.n_channels, count, length)
    return SampleSet(
        samples=windows.transpose(1, 0, 2).copy(),
        sample_rate=rec.sample_rate,
        channel_names=list(rec.channel_names),
    )


def reject_bad(sample_set: SampleSet, threshold_uv: float) -> SampleSet:
    """Drop samples with any ``|value| > threshold_uv``; survivors keep their order."""
    if len(sample_set) == 0:
        return sample_set
    peak = np.abs(sample_set.samples).max(axis=(1, 2))
    return sample_set.subset(np.flatnonzero(peak <= threshold_uv))


def normalize(sample_set: SampleSet, unit_uv: float) -> SampleSet:
    """Express samples in units of ``unit_uv`` microvolts."""
    if unit_uv <= 0:
        raise ConfigError(f"Normalization unit must be positive, got {unit_uv}")
    return replace(
        sample_set,
        samples=sample_set.samples / unit_uv,
        channel_names=list(sample_set.channel_names),
    )


def select_channels(rec: EEGRecording, names: tuple[str, ...]) -> EEGRecording:
    lookup = {name.lower(): i for i, name in enumerate(rec.channel_names)}
    missing = [name for name in names if name.lower() not in lookup]
    if missing:
        raise DataError(f"Recording lacks channels {missing}")
    index = [lookup[name.lower()] for name in names]
    return replace(rec, data=rec.data[index], channel_names=list(names))


def run_pipeline(rec: EEGRecording, cfg: PreprocessConfig) -> PipelineResult:
    """Run the full chain on one recording and count what was kept and rejected."""
    rec.ensure_finite()
    rec = EEGRecording(
        data=rec.to_microvolts(),
        sample_rate=rec.sample_rate,
        channel_names=list(rec.channel_names),
        unit_scale=1e-6,
    )
    if cfg.channels:
        rec = select_channels(rec, cfg.channels)
    segment_len = int(round(cfg.segment_s * cfg.target_rate))
    if cfg.drop_short and rec.duration_s <= cfg.min_recording_s:
        logger.info(
            "Skipping recording of %.1f s (<= %.1f s)",
            rec.duration_s,
            cfg.min_recording_s,
        )
        empty = np.zeros((0, rec.n_channels, segment_len), dtype=np.float32)
        return PipelineResult(
            SampleSet(empty, cfg.target_rate, channel_names=list(rec.channel_names)),
            segments=0,
            rejected=0,
        )
    if cfg.trim_edges:
        edge = int(round(cfg.edge_trim_s * rec.sample_rate))
        if rec.n_timepoints <= 2 * edge:
            raise DataError(
                f"Recording of {rec.duration_s:.1f} s too short to trim edges"
            )
        rec = _with_data(rec, rec.data[:, edge:-edge])

    rec = bandpass(rec, cfg.bandpass_lo, cfg.bandpass_hi, cfg.filter_order)
    rec = notch(rec, cfg.notch_freq, cfg.notch_q)
    rec = resample(rec, cfg.target_rate)
    segments = segment(rec, cfg.segment_s)
    clean = reject_bad(segments, cfg.reject_amp_uv)
    result = normalize(clean, cfg.norm_unit_uv)
    result.samples = result.samples.astype(np.float32)

    rejected = len(segments) - len(clean)
    logger.info("%d segments, %d rejected", len(segments), rejected)
    return PipelineResult(samples=result, segments=len(segments), rejected=rejected)
