"""Classification and regression metrics, bundled into an `EvalReport`.

Binary tasks report balanced accuracy, AUROC and AUC-PR; multiclass tasks
balanced accuracy, Cohen's kappa and weighted F1; regression tasks Pearson r,
R^2 and RMSE.
"""

import math
from collections.abc import Callable
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import stats
from sklearn import metrics as skm

from crisscross_eeg.core.errors import (
    ConfigError,
    ContainerError,
    DataError,
    NumericError,
)

TASK_KINDS = ("binary", "multiclass", "regression")
MONITORS = {"binary": "auroc", "multiclass": "cohen_kappa", "regression": "r2"}


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape or a.ndim != 1:
        raise DataError(
            f"Expected equal-length 1-D inputs, got {a.shape} and {b.shape}"
        )
    if a.size == 0:
        raise DataError("Metrics are undefined on empty inputs")
    return a, b


def balanced_accuracy(preds, labels) -> float:
    """Mean per-class recall over the classes present in ``labels``."""
    preds, labels = _pair(preds, labels)
    return float(skm.balanced_accuracy_score(labels, preds))


def cohen_kappa(preds, labels) -> float:
    preds, labels = _pair(preds, labels)
    if np.unique(np.concatenate([preds, labels])).size == 1:
        raise NumericError(
            "Kappa is undefined when expected agreement is 1", tensor_name="kappa"
        )
    return float(skm.cohen_kappa_score(labels, preds))


def weighted_f1(preds, labels) -> float:
    preds, labels = _pair(preds, labels)
    return float(skm.f1_score(labels, preds, average="weighted", zero_division=0))


def _require_two_classes(labels: np.ndarray, name: str) -> None:
    if np.unique(labels).size < 2:
        raise NumericError(
            f"{name} is undefined for single-class labels", tensor_name=name
        )


def auroc(scores, labels) -> float:
    """Area under the ROC curve; tied scores count half."""
    scores, labels = _pair(scores, labels)
    _require_two_classes(labels, "auroc")
    return float(skm.roc_auc_score(labels, scores))


def auc_pr(scores, labels) -> float:
    """Area under the precision-recall curve as a step sum (average precision)."""
    scores, labels = _pair(scores, labels)
    _require_two_classes(labels, "auc_pr")
    return float(skm.average_precision_score(labels, scores))


def pearson_r(preds, labels) -> float:
    preds, labels = _pair(preds, labels)
    if np.ptp(preds) == 0 or np.ptp(labels) == 0:
        raise NumericError(
            "Pearson r is undefined for constant input", tensor_name="pearson_r"
        )
    return float(stats.pearsonr(preds, labels).statistic)


def r2(preds, labels) -> float:
    preds, labels = _pair(preds, labels)
    if np.ptp(labels) == 0:
        raise NumericError("R^2 is undefined for constant labels", tensor_name="r2")
    return float(skm.r2_score(labels, preds))


def rmse(preds, labels) -> float:
    preds, labels = _pair(preds, labels)
    return float(np.sqrt(skm.mean_squared_error(labels, preds)))


@dataclass
class EvalReport:
    """Metrics for one prediction set; those outside the task kind stay None."""

    kind: str
    n_samples: int
    balanced_accuracy: float | None = None
    cohen_kappa: float | None = None
    weighted_f1: float | None = None
    auroc: float | None = None
    auc_pr: float | None = None
    pearson_r: float | None = None
    r2: float | None = None
    rmse: float | None = None

    def as_record(self) -> dict[str, object]:
        return {k: v for k, v in asdict(self).items() if v is not None}

    def monitor_value(self, monitor: str | None = None) -> float:
        name = monitor or MONITORS[self.kind]
        value = getattr(self, name, None)
        if value is None:
            raise ConfigError(f"Metric {name!r} is not reported for {self.kind} tasks")
        return value

    def to_text(self) -> str:
        lines = []
        for key, value in self.as_record().items():
            text = repr(value) if isinstance(value, float) else str(value)
            lines.append(f"{key}={text}")
        return "\n".join(lines) + "\n"

    def write(self, path: str | Path) -> Path:
        target = Path(path)
        try:
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_text(self.to_text(), encoding="utf-8")
        except OSError as exc:
            raise ContainerError(f"Failed to write report {target}: {exc}") from exc
        return target


def _metric(fn: Callable[..., float], strict: bool, *args) -> float:
    try:
        return fn(*args)
    except NumericError:
        if strict:
            raise
        return math.nan


def binary_scores(logits: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-np.asarray(logits, dtype=np.float64).reshape(-1)))


def evaluate_outputs(
    kind: str, outputs: np.ndarray, labels: np.ndarray, strict: bool = True
) -> EvalReport:
    """Score raw head outputs: logits for classification, values for regression.

    With ``strict=False`` an undefined metric (one class present, constant
    predictions) is reported as NaN instead of raising `NumericError`.
    """
    outputs = np.asarray(outputs, dtype=np.float64)
    labels = np.asarray(labels)
    n = len(labels)
    if kind == "binary":
        scores = binary_scores(outputs)
        preds = (scores >= 0.5).astype(np.int64)
        return EvalReport(
            kind,
            n,
            balanced_accuracy=balanced_accuracy(preds, labels),
            auroc=_metric(auroc, strict, scores, labels),
            auc_pr=_metric(auc_pr, strict, scores, labels),
        )
    if kind == "multiclass":
        preds = outputs.reshape(n, -1).argmax(axis=1)
        return EvalReport(
            kind,
            n,
            balanced_accuracy=balanced_accuracy(preds, labels),
            cohen_kappa=_metric(cohen_kappa, strict, preds, labels),
            weighted_f1=weighted_f1(preds, labels),
        )
    if kind == "regression":
        values = outputs.reshape(-1)
        return EvalReport(
            kind,
            n,
            pearson_r=_metric(pearson_r, strict, values, labels),
            r2=_metric(r2, strict, values, labels),
            rmse=rmse(values, labels),
        )
    raise ConfigError(f"Unknown task kind {kind!r}; use one of {TASK_KINDS}")
