"""Evaluation metrics: precision-recall area, counting errors, aggregation.

The headline quality measure is the area under the precision-recall curve
(APRC), computed as the average-precision step sum over descending score
thresholds; it is robust to heavy class imbalance, where a random scorer
lands at the positive fraction rather than 0.5.  Counting errors compare
predicted against true landslide pixel counts per chip: the absolute count
error, and the signed count error reported separately for chips with and
without true landslide pixels.  Aggregation follows a median-of-chips,
std-of-the-mean-across-runs convention.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError


@dataclass
class PRCurve:
    """Precision-recall points ordered by the descending score thresholds.

    The first point is the conventional (recall 0, precision 1) anchor with
    an infinite threshold; every further point corresponds to one distinct
    score value (tied scores share a threshold).
    """

    recalls: np.ndarray
    precisions: np.ndarray
    thresholds: np.ndarray

    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.recalls.tolist(), self.precisions.tolist()))


def _validate_scores_labels(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise DataError(
            f"scores length {scores.size} != labels length {labels.size}"
        )
    if scores.size == 0:
        raise DataError("empty score list")
    if not np.isin(labels, (0, 1)).all():
        raise DataError("labels must be binary 0/1")
    if not np.isfinite(scores).all():
        raise DataError("non-finite scores")
    return scores, labels.astype(np.int64)


def pr_curve(scores, labels) -> PRCurve:
    """Precision and recall at every distinct score threshold.

    Thresholds descend; a sample counts as predicted-positive when its score
    is >= the threshold, so tied scores enter together.
    """
    scores, labels = _validate_scores_labels(scores, labels)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise DataError("no positive labels: recall is undefined")

    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    cum_tp = np.cumsum(sorted_labels)
    cum_pred = np.arange(1, scores.size + 1)
    # Last index of each tied group = the point where the whole tie is in.
    distinct = np.nonzero(np.diff(sorted_scores, append=-np.inf))[0]
    tp = cum_tp[distinct]
    pred = cum_pred[distinct]
    recalls = np.concatenate([[0.0], tp / n_pos])
    precisions = np.concatenate([[1.0], tp / pred])
    thresholds = np.concatenate([[np.inf], sorted_scores[distinct]])
    return PRCurve(recalls=recalls, precisions=precisions, thresholds=thresholds)


def aprc(curve: PRCurve) -> float:
    """Average-precision step sum: sum of (R_n - R_{n-1}) * P_n."""
    return float(np.sum(np.diff(curve.recalls) * curve.precisions[1:]))


def average_precision(scores, labels) -> float:
    """APRC directly from scores and labels."""
    return aprc(pr_curve(scores, labels))


def random_baseline_aprc(labels) -> float:
    """Expected APRC of an uninformative scorer: the positive fraction."""
    labels = np.asarray(labels).ravel()
    if not np.isin(labels, (0, 1)).all():
        raise DataError("labels must be binary 0/1")
    if labels.size == 0 or labels.sum() == 0:
        raise DataError("no positive labels: baseline undefined")
    return float(labels.mean())


# ---------------------------------------------------------------------------
# Counting errors


@dataclass
class ChipCountError:
    """Eq.-style per-chip counting record."""

    chip_id: str
    delta_l1: int
    delta_count: int
    true_positive_pixels: int


def count_errors(pred_mask, true_mask) -> tuple[int, int]:
    """(absolute, signed) difference of predicted vs true positive counts."""
    pred = np.asarray(pred_mask)
    true = np.asarray(true_mask)
    if pred.shape != true.shape:
        raise DataError(
            f"mask shapes differ: {pred.shape} vs {true.shape}"
        )
    for name, m in (("pred", pred), ("true", true)):
        if not np.isin(m, (0, 1)).all():
            raise DataError(f"{name} mask not binary")
    delta = int(pred.sum()) - int(true.sum())
    return abs(delta), delta


def binarize(probs, threshold: float = 0.5) -> np.ndarray:
    """Probabilities to a 0/1 mask; strictly greater than the threshold."""
    probs = np.asarray(probs)
    if probs.size and (probs.min() < -1e-9 or probs.max() > 1 + 1e-9):
        raise DataError("probs must lie in [0, 1]")
    return (probs > threshold).astype(np.uint8)


def count_error_record(chip_id: str, probs, true_mask,
                       threshold: float = 0.5) -> ChipCountError:
    """Binarize one chip's probabilities and record its counting errors."""
    pred = binarize(probs, threshold)
    dl1, dc = count_errors(pred, true_mask)
    return ChipCountError(
        chip_id=chip_id,
        delta_l1=dl1,
        delta_count=dc,
        true_positive_pixels=int(np.asarray(true_mask).sum()),
    )


# ---------------------------------------------------------------------------
# Ensembling


def ensemble_probabilities(prob_maps) -> np.ndarray:
    """Arithmetic mean of member probability maps (probability space)."""
    maps = [np.asarray(p) for p in prob_maps]
    if not maps:
        raise DataError("empty ensemble")
    first = maps[0].shape
    for m in maps[1:]:
        if m.shape != first:
            raise DataError(f"ensemble member shapes differ: {first} vs {m.shape}")
    if len(maps) == 1:
        return maps[0]
    return np.mean(np.stack(maps), axis=0)


def ensemble_predict(checkpoints, pre, post, frozen_provider=None) -> np.ndarray:
    """Mean probability map over segmentation checkpoints for one chip pair.

    frozen_provider(checkpoint) must return that checkpoint's frozen
    embedding pair for this chip when the checkpoint was trained with a
    pretrained encoder; checkpoints must not mix the two modes.
    """
    from .training import checkpoint_probabilities  # deferred: trainer imports us

    if not checkpoints:
        raise DataError("empty ensemble")
    flags = {bool(cp.uses_pretrained) for cp in checkpoints}
    if len(flags) > 1:
        raise DataError("mixed uses_pretrained flags in ensemble")
    maps = []
    for cp in checkpoints:
        frozen = frozen_provider(cp) if (frozen_provider and cp.uses_pretrained) else None
        if cp.uses_pretrained and frozen is None:
            raise DataError(
                "checkpoint requires frozen embeddings but the provider "
                "returned none"
            )
        maps.append(checkpoint_probabilities(cp, pre, post, frozen))
    return ensemble_probabilities(maps)


# ---------------------------------------------------------------------------
# Aggregation


def lower_median(values) -> float:
    """Median with the lower element chosen for even-length inputs."""
    arr = sorted(values)
    if not arr:
        raise DataError("median of empty list")
    return float(arr[(len(arr) - 1) // 2])


def std_of_mean(values) -> float:
    """Sample std (ddof 1) divided by sqrt(n); 0 for fewer than 2 values."""
    arr = np.asarray(list(values), dtype=np.float64)
    if arr.size < 2:
        return 0.0
    return float(arr.std(ddof=1) / np.sqrt(arr.size))


@dataclass
class MetricsReport:
    """Aggregated evaluation results for one model variant."""

    aprc: float
    aprc_random_baseline: float
    aprc_error_bar: float
    n_runs: int
    median_delta_l1: float | None
    median_delta_count_empty: float | None
    median_delta_count_landslide: float | None
    missing_categories: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "aprc": self.aprc,
            "aprc_random_baseline": self.aprc_random_baseline,
            "aprc_error_bar": self.aprc_error_bar,
            "n_runs": self.n_runs,
            "median_delta_l1": self.median_delta_l1,
            "median_delta_count_empty": self.median_delta_count_empty,
            "median_delta_count_landslide": self.median_delta_count_landslide,
            "missing_categories": list(self.missing_categories),
        }

    @classmethod
    def from_json(cls, payload: dict) -> "MetricsReport":
        return cls(
            aprc=payload["aprc"],
            aprc_random_baseline=payload["aprc_random_baseline"],
            aprc_error_bar=payload["aprc_error_bar"],
            n_runs=payload["n_runs"],
            median_delta_l1=payload["median_delta_l1"],
            median_delta_count_empty=payload["median_delta_count_empty"],
            median_delta_count_landslide=payload["median_delta_count_landslide"],
            missing_categories=list(payload.get("missing_categories", [])),
        )


def aggregate(ensemble_aprc: float, random_baseline: float,
              per_run_aprcs, chip_records) -> MetricsReport:
    """Fold ensemble metrics and per-run spread into one report.

    Count-error medians are over chips: absolute errors over all chips,
    signed errors separately over chips without and with true landslide
    pixels.  A category with no chips is flagged instead of being reported.
    """
    per_run = list(per_run_aprcs)
    if not per_run:
        raise DataError("at least one run is required")
    records = list(chip_records)
    missing = []

    def median_or_flag(vals, name):
        if not vals:
            missing.append(name)
            return None
        return lower_median(vals)

    med_l1 = median_or_flag([r.delta_l1 for r in records], "delta_l1")
    med_empty = median_or_flag(
        [r.delta_count for r in records if r.true_positive_pixels == 0],
        "delta_count_empty")
    med_slide = median_or_flag(
        [r.delta_count for r in records if r.true_positive_pixels > 0],
        "delta_count_landslide")
    return MetricsReport(
        aprc=float(ensemble_aprc),
        aprc_random_baseline=float(random_baseline),
        aprc_error_bar=std_of_mean(per_run),
        n_runs=len(per_run),
        median_delta_l1=med_l1,
        median_delta_count_empty=med_empty,
        median_delta_count_landslide=med_slide,
        missing_categories=missing,
    )


# ---------------------------------------------------------------------------
# Serialization


def write_report_json(report: MetricsReport, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report.to_json(), indent=2) + "\n")
    return path


def read_report_json(path) -> MetricsReport:
    try:
        return MetricsReport.from_json(json.loads(Path(path).read_text()))
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise FormatError(f"malformed metrics report {path}: {exc}") from exc


def write_count_errors_csv(records, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["chip_id", "delta_l1", "delta_count",
                         "true_positive_pixels"])
        for r in records:
            writer.writerow([r.chip_id, r.delta_l1, r.delta_count,
                             r.true_positive_pixels])
    return path


def read_count_errors_csv(path) -> list[ChipCountError]:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise FormatError(f"cannot read count errors {path}: {exc}") from exc
    if not rows or rows[0] != ["chip_id", "delta_l1", "delta_count",
                               "true_positive_pixels"]:
        raise FormatError(f"count errors {path}: bad header row")
    out = []
    for row in rows[1:]:
        if len(row) != 4:
            raise FormatError(f"count errors {path}: malformed row {row!r}")
        out.append(ChipCountError(row[0], int(row[1]), int(row[2]), int(row[3])))
    return out
