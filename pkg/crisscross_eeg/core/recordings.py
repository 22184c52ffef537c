"""Portable EEG containers and dataset iteration.

A container is a directory holding a line-oriented ``key=value`` manifest and a
raw little-endian float32 payload. Recordings (``[channels x timepoints]``) and
sample sets (``[samples x channels x timepoints]``) share the same conventions,
so either can be inspected or produced without this package.
"""

import logging
from collections.abc import Iterator, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from crisscross_eeg.core.errors import ContainerError, DataError

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.txt"
DATA_NAME = "data.f32"
LABELS_NAME = "labels.txt"
STORED_DTYPE = np.dtype("<f4")


@dataclass
class EEGRecording:
    """Continuous multichannel signal ``S`` with shape ``[C x T]``.

    ``unit_scale`` is the physical value in volts of one stored unit, so
    ``data * unit_scale * 1e6`` is the signal in microvolts.
    """

    data: np.ndarray
    sample_rate: float
    channel_names: list[str] = field(default_factory=list)
    unit_scale: float = 1e-6

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 2:
            raise DataError(f"Recording data must be 2-D, got shape {self.data.shape}")
        channels, timepoints = self.data.shape
        if channels < 1 or timepoints < 1:
            raise DataError(
                f"Recording needs >= 1 channel and timepoint, got {self.data.shape}"
            )
        if not self.sample_rate > 0:
            raise DataError(f"sample_rate must be positive, got {self.sample_rate}")
        if not self.unit_scale > 0:
            raise DataError(f"unit_scale must be positive, got {self.unit_scale}")
        if not self.channel_names:
            self.channel_names = [f"ch{i}" for i in range(channels)]
        if len(self.channel_names) != channels:
            raise DataError(
                f"{len(self.channel_names)} channel names for {channels} channels"
            )
        if len(set(self.channel_names)) != channels:
            raise DataError("Channel names must be unique")

    @property
    def n_channels(self) -> int:
        return self.data.shape[0]

    @property
    def n_timepoints(self) -> int:
        return self.data.shape[1]

    @property
    def duration_s(self) -> float:
        return self.n_timepoints / self.sample_rate

    def to_microvolts(self) -> np.ndarray:
        return self.data.astype(np.float64) * (self.unit_scale * 1e6)

    def ensure_finite(self) -> None:
        if not np.all(np.isfinite(self.data)):
            raise DataError("Recording contains NaN or Inf values")


@dataclass
class SampleSet:
    """Equal-shape samples ``[N x C x T]`` with optional labels."""

    samples: np.ndarray
    sample_rate: float
    labels: np.ndarray | None = None
    channel_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        if self.samples.ndim != 3:
            raise DataError(
                f"Samples must be [N x C x T], got shape {self.samples.shape}"
            )
        if not self.sample_rate > 0:
            raise DataError(f"sample_rate must be positive, got {self.sample_rate}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels)
            if len(self.labels) != len(self.samples):
                raise DataError(
                    f"{len(self.labels)} labels for {len(self.samples)} samples"
                )
        if not self.channel_names:
            self.channel_names = [f"ch{i}" for i in range(self.n_channels)]

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def n_channels(self) -> int:
        return self.samples.shape[1]

    @property
    def n_timepoints(self) -> int:
        return self.samples.shape[2]

    def subset(self, indices: Sequence[int] | np.ndarray) -> "SampleSet":
        index = np.asarray(indices, dtype=np.int64)
        return SampleSet(
            samples=self.samples[index],
            sample_rate=self.sample_rate,
            labels=None if self.labels is None else self.labels[index],
            channel_names=list(self.channel_names),
        )

    @classmethod
    def concatenate(cls, sets: Sequence["SampleSet"]) -> "SampleSet":
        if not sets:
            raise DataError("Cannot concatenate an empty list of sample sets")
        first = sets[0]
        with_labels = [s.labels is not None for s in sets]
        if any(with_labels) and not all(with_labels):
            raise DataError("Cannot mix labelled and unlabelled sample sets")
        return cls(
            samples=np.concatenate([s.samples for s in sets], axis=0),
            sample_rate=first.sample_rate,
            labels=(
                np.concatenate([s.labels for s in sets]) if all(with_labels) else None
            ),
            channel_names=list(first.channel_names),
        )


@dataclass
class Batch:
    """One mini-batch drawn by `batch_iter`."""

    indices: np.ndarray
    samples: np.ndarray
    labels: np.ndarray | None


def batch_iter(
    sample_set: SampleSet, batch_size: int, shuffle_seed: int | None = None
) -> Iterator[Batch]:
    """Yield one epoch of batches covering every sample exactly once.

    The order is a deterministic permutation under ``shuffle_seed`` (dataset
    order when ``None``); the last batch may be smaller.
    """
    if batch_size < 1:
        raise DataError(f"batch_size must be >= 1, got {batch_size}")
    if len(sample_set) == 0:
        raise DataError("Cannot iterate an empty sample set")
    order = np.arange(len(sample_set))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(sample_set))
    for start in range(0, len(order), batch_size):
        index = order[start : start + batch_size]
        yield Batch(
            indices=index,
            samples=sample_set.samples[index],
            labels=None if sample_set.labels is None else sample_set.labels[index],
        )


def steps_per_epoch(n_samples: int, batch_size: int) -> int:
    return -(-n_samples // batch_size)


# ---------------------------------------------------------------------------
# Manifest helpers
# ---------------------------------------------------------------------------


def write_manifest(path: Path, entries: dict[str, object]) -> None:
    lines = [f"{key}={value}" for key, value in entries.items()]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path: Path) -> dict[str, str]:
    if not path.is_file():
        raise ContainerError(f"Missing manifest: {path}")
    entries: dict[str, str] = {}
    for number, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ContainerError(f"{path}:{number}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        entries[key.strip()] = value.strip()
    return entries


def _check_version(manifest: dict[str, str], path: Path) -> None:
    version = manifest.get("format_version")
    if version != str(FORMAT_VERSION):
        raise ContainerError(f"{path}: unsupported format_version {version!r}")


def _require(manifest: dict[str, str], key: str, path: Path) -> str:
    try:
        return manifest[key]
    except KeyError:
        raise ContainerError(f"{path}: manifest lacks {key!r}") from None


def read_payload(
    path: Path, shape: tuple[int, ...], dtype: np.dtype = STORED_DTYPE
) -> np.ndarray:
    """Raw little-endian array of ``shape``; the file size must match exactly."""
    if not path.is_file():
        raise ContainerError(f"Missing data file: {path}")
    expected = int(np.prod(shape)) * dtype.itemsize
    actual = path.stat().st_size
    if actual != expected:
        raise ContainerError(
            f"{path}: {actual} bytes on disk, manifest shape {shape} needs {expected}"
        )
    return np.fromfile(path, dtype=dtype).reshape(shape)


def write_payload(path: Path, data: np.ndarray, dtype: np.dtype = STORED_DTYPE) -> None:
    np.ascontiguousarray(data, dtype=dtype).tofile(path)


# ---------------------------------------------------------------------------
# Recording containers
# ---------------------------------------------------------------------------


def write_container(recording: EEGRecording, path: str | Path) -> Path:
    """Write a recording as ``manifest.txt`` + ``data.f32`` under ``path``."""
    recording.ensure_finite()
    directory = Path(path)
    try:
        directory.mkdir(parents=True, exist_ok=True)
        write_payload(directory / DATA_NAME, recording.data)
        write_manifest(
            directory / MANIFEST_NAME,
            {
                "format_version": FORMAT_VERSION,
                "kind": "recording",
                "channels": recording.n_channels,
                "timepoints": recording.n_timepoints,
                "sample_rate": repr(float(recording.sample_rate)),
                "unit_scale": repr(float(recording.unit_scale)),
                "channel_names": ",".join(recording.channel_names),
            },
        )
    except OSError as exc:
        raise ContainerError(f"Failed to write container {directory}: {exc}") from exc
    logger.debug("Wrote recording %s (%s)", directory, recording.data.shape)
    return directory


def read_container(path: str | Path) -> EEGRecording:
    """Read a recording container, validating manifest and payload size."""
    directory = Path(path)
    manifest = read_manifest(directory / MANIFEST_NAME)
    _check_version(manifest, directory)
    try:
        channels = int(_require(manifest, "channels", directory))
        timepoints = int(_require(manifest, "timepoints", directory))
        sample_rate = float(_require(manifest, "sample_rate", directory))
        unit_scale = float(manifest.get("unit_scale", "1e-6"))
    except ValueError as exc:
        raise ContainerError(f"{directory}: malformed manifest value: {exc}") from exc
    names = manifest.get("channel_names", "")
    data = read_payload(directory / DATA_NAME, (channels, timepoints))
    recording = EEGRecording(
        data=data,
        sample_rate=sample_rate,
        channel_names=names.split(",") if names else [],
        unit_scale=unit_scale,
    )
    recording.ensure_finite()
    return recording


def list_containers(path: str | Path) -> list[Path]:
    """Container directories at or directly below ``path``, sorted by name."""
    root = Path(path)
    if (root / MANIFEST_NAME).is_file():
        return [root]
    if not root.is_dir():
        raise ContainerError(f"No such container directory: {root}")
    return sorted(p for p in root.iterdir() if (p / MANIFEST_NAME).is_file())


# ---------------------------------------------------------------------------
# Sample-set containers
# ---------------------------------------------------------------------------


def write_sample_set(sample_set: SampleSet, path: str | Path) -> Path:
    """Write a sample set (``[N x C x T]`` payload plus optional labels)."""
    if not np.all(np.isfinite(sample_set.samples)):
        raise DataError("Sample set contains NaN or Inf values")
    directory = Path(path)
    entries: dict[str, object] = {
        "format_version": FORMAT_VERSION,
        "kind": "sample_set",
        "samples": len(sample_set),
        "channels": sample_set.n_channels,
        "timepoints": sample_set.n_timepoints,
        "sample_rate": repr(float(sample_set.sample_rate)),
        "channel_names": ",".join(sample_set.channel_names),
    }
    try:
        directory.mkdir(parents=True, exist_ok=True)
        write_payload(directory / DATA_NAME, sample_set.samples)
        if sample_set.labels is not None:
            is_integer = np.issubdtype(sample_set.labels.dtype, np.integer)
            entries["label_kind"] = "int" if is_integer else "float"
            values = [repr(v.item()) for v in sample_set.labels]
            (directory / LABELS_NAME).write_text("\n".join(values) + "\n")
        write_manifest(directory / MANIFEST_NAME, entries)
    except OSError as exc:
        raise ContainerError(f"Failed to write sample set {directory}: {exc}") from exc
    return directory


def read_sample_set(path: str | Path) -> SampleSet:
    directory = Path(path)
    manifest = read_manifest(directory / MANIFEST_NAME)
    _check_version(manifest, directory)
    if manifest.get("kind") != "sample_set":
        raise ContainerError(f"{directory}: not a sample_set container")
    try:
        shape = tuple(
            int(_require(manifest, key, directory))
            for key in ("samples", "channels", "timepoints")
        )
        sample_rate = float(_require(manifest, "sample_rate", directory))
    except ValueError as exc:
        raise ContainerError(f"{directory}: malformed manifest value: {exc}") from exc
    samples = read_payload(directory / DATA_NAME, shape)
    labels = None
    if "label_kind" in manifest:
        label_path = directory / LABELS_NAME
        if not label_path.is_file():
            raise ContainerError(f"Missing labels file: {label_path}")
        dtype = np.int64 if manifest["label_kind"] == "int" else np.float64
        labels = np.array(label_path.read_text().split(), dtype=dtype)
    names = manifest.get("channel_names", "")
    return SampleSet(
        samples=samples,
        sample_rate=sample_rate,
        labels=labels,
        channel_names=names.split(",") if names else [],
    )


def write_indices(indices: Sequence[int] | np.ndarray, path: str | Path) -> Path:
    target = Path(path)
    try:
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text("".join(f"{int(i)}\n" for i in indices))
    except OSError as exc:
        raise ContainerError(f"Failed to write index file {target}: {exc}") from exc
    return target


def read_indices(path: str | Path) -> np.ndarray:
    source = Path(path)
    if not source.is_file():
        raise ContainerError(f"Missing split index file: {source}")
    try:
        return np.array(source.read_text().split(), dtype=np.int64)
    except ValueError as exc:
        raise ContainerError(f"{source}: malformed index file: {exc}") from exc
