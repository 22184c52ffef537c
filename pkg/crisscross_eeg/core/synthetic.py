"""Synthetic EEG with spatial-group x frequency-band class structure.

Class ``k`` drives a sinusoid in its assigned band on its assigned channel
group, on top of i.i.d. Gaussian noise on every channel. The labels therefore
depend jointly on *where* (channels) and *what* (frequency) the activity is,
which is exactly what spatial and temporal attention heads have to pick up.
"""

from dataclasses import dataclass, field

import numpy as np

from crisscross_eeg.core.errors import ConfigError
from crisscross_eeg.core.recordings import EEGRecording, SampleSet

DEFAULT_BANDS = [(8.0, 12.0), (20.0, 24.0), (4.0, 7.0), (13.0, 18.0), (30.0, 40.0)]


@dataclass(frozen=True)
class BandAssignment:
    """Channel group, frequency band (Hz) and amplitude for one class."""

    channels: tuple[int, ...]
    band: tuple[float, float]
    amplitude: float = 0.5


@dataclass
class SyntheticSpec:
    n_channels: int = 8
    duration_s: float = 5.0
    sample_rate: float = 200.0
    class_count: int = 2
    samples_per_class: int = 100
    band_assignments: tuple[BandAssignment, ...] = field(default_factory=tuple)
    noise_std: float = 0.1
    random_phase: bool = False
    rng_seed: int = 0

    def __post_init__(self):
        if self.class_count < 1:
            raise ConfigError(f"class_count must be >= 1, got {self.class_count}")
        if self.n_channels < 1 or self.samples_per_class < 1:
            raise ConfigError("n_channels and samples_per_class must be >= 1")
        if self.duration_s <= 0 or self.sample_rate <= 0:
            raise ConfigError("duration_s and sample_rate must be positive")
        if self.noise_std < 0:
            raise ConfigError(f"noise_std must be >= 0, got {self.noise_std}")
        if not self.band_assignments:
            self.band_assignments = default_band_assignments(
                self.n_channels, self.class_count
            )
        if len(self.band_assignments) != self.class_count:
            raise ConfigError(
                f"{len(self.band_assignments)} band assignments for "
                f"{self.class_count} classes"
            )
        nyquist = self.sample_rate / 2
        for k, assignment in enumerate(self.band_assignments):
            lo, hi = assignment.band
            if not 0 <= lo <= hi:
                raise ConfigError(f"class {k}: invalid band {assignment.band}")
            if hi >= nyquist:
                raise ConfigError(
                    f"class {k}: band {assignment.band} reaches Nyquist {nyquist} Hz"
                )
            if not assignment.channels or not all(
                0 <= c < self.n_channels for c in assignment.channels
            ):
                raise ConfigError(
                    f"class {k}: invalid channel group {assignment.channels}"
                )

    @property
    def n_timepoints(self) -> int:
        return int(round(self.duration_s * self.sample_rate))


def default_band_assignments(
    n_channels: int, class_count: int
) -> tuple[BandAssignment, ...]:
    """Split the montage into ``class_count`` contiguous groups, one band each."""
    groups = np.array_split(np.arange(n_channels), class_count)
    return tuple(
        BandAssignment(
            channels=tuple(int(c) for c in (group if len(group) else [0])),
            band=DEFAULT_BANDS[k % len(DEFAULT_BANDS)],
        )
        for k, group in enumerate(groups)
    )


def generate_synthetic(spec: SyntheticSpec) -> SampleSet:
    """Generate a labelled sample set; a pure function of ``spec``."""
    rng = np.random.default_rng(spec.rng_seed)
    n_total = spec.class_count * spec.samples_per_class
    labels = rng.permutation(
        np.repeat(np.arange(spec.class_count), spec.samples_per_class)
    )
    times = np.arange(spec.n_timepoints) / spec.sample_rate
    shape = (n_total, spec.n_channels, len(times))
    samples = rng.normal(0.0, spec.noise_std, size=shape)
    for i, label in enumerate(labels):
        assignment = spec.band_assignments[label]
        lo, hi = assignment.band
        frequency = rng.uniform(lo, hi) if hi > lo else lo
        phase = rng.uniform(0, 2 * np.pi) if spec.random_phase else 0.0
        tone = assignment.amplitude * np.sin(2 * np.pi * frequency * times + phase)
        samples[i, list(assignment.channels)] += tone
    return SampleSet(
        samples=samples.astype(np.float32),
        sample_rate=spec.sample_rate,
        labels=labels.astype(np.int64),
    )


def synthetic_recording(
    n_channels: int = 4,
    duration_s: float = 90.0,
    sample_rate: float = 256.0,
    tones: tuple[tuple[float, float], ...] = ((10.0, 20.0),),
    noise_uv: float = 0.0,
    seed: int = 0,
) -> EEGRecording:
    """Continuous microvolt recording summing ``(frequency, amplitude_uV)`` tones."""
    rng = np.random.default_rng(seed)
    times = np.arange(int(round(duration_s * sample_rate))) / sample_rate
    data = np.zeros((n_channels, len(times)))
    for frequency, amplitude in tones:
        data += amplitude * np.sin(2 * np.pi * frequency * times)
    if noise_uv > 0:
        data += rng.normal(0.0, noise_uv, size=data.shape)
    return EEGRecording(
        data=data.astype(np.float32), sample_rate=sample_rate, unit_scale=1e-6
    )


def split_indices(
    n: int, fractions: tuple[float, float, float] = (0.6, 0.2, 0.2), seed: int = 0
) -> dict[str, np.ndarray]:
    """Deterministic train/val/test index split."""
    if n < 3:
        raise ConfigError(f"Need at least 3 samples to split, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    total = sum(fractions)
    n_train = max(1, int(n * fractions[0] / total))
    n_val = max(1, int(n * fractions[1] / total))
    return {
        "train": np.sort(order[:n_train]),
        "val": np.sort(order[n_train : n_train + n_val]),
        "test": np.sort(order[n_train + n_val :]),
    }
