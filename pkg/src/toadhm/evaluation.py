"""Test-time inference, thresholding, confusion matrix and reports."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

from .augment import gray_triple, normalize
from .data import NOT_TOAD, TOAD
from .model import heatmap_forward
from .targets import STRIDE

DEFAULT_THRESHOLD = 0.5
TEST_CROP = (704, 1280)
N_BINS = 100
UNDEFINED = "undefined"


def center_crop(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    h, w = image.shape[:2]
    ch, cw = size
    if h < ch or w < cw:
        raise ValueError(f"image {h}x{w} smaller than {ch}x{cw}")
    top, left = (h - ch) // 2, (w - cw) // 2
    return image[top:top + ch, left:left + cw]


def prepare_input(image: np.ndarray, crop: tuple[int, int] = TEST_CROP) -> np.ndarray:
    """Center crop, gray-triple and normalize with s = 1."""
    return normalize(gray_triple(center_crop(image, crop)), 1.0).astype(np.float32)


def predict_image(model, image: np.ndarray, crop: tuple[int, int] = TEST_CROP):
    """Returns ``(score, heatmap)``; score is the heat-map maximum."""
    heatmap = heatmap_forward(model, prepare_input(image, crop))
    return float(heatmap.max()), heatmap


def classify(score: float, threshold: float = DEFAULT_THRESHOLD) -> str:
    return TOAD if score > threshold else NOT_TOAD


def _is_toad(label) -> bool:
    if isinstance(label, (bool, np.bool_)):
        return bool(label)
    if label not in (TOAD, NOT_TOAD):
        raise ValueError(f"unknown label {label!r}")
    return label == TOAD


@dataclass(frozen=True)
class ConfusionMatrix:
    TP: int
    FP: int
    FN: int
    TN: int

    def __post_init__(self):
        if min(self.TP, self.FP, self.FN, self.TN) < 0:
            raise ValueError("counts must be non-negative")

    @property
    def P(self) -> int:
        return self.TP + self.FN

    @property
    def N(self) -> int:
        return self.FP + self.TN

    def to_dict(self) -> dict:
        return {"TP": self.TP, "FP": self.FP, "FN": self.FN, "TN": self.TN, "P": self.P, "N": self.N}


@dataclass(frozen=True)
class Metrics:
    """None marks an undefined score (zero denominator)."""

    recall: float | None
    precision: float | None
    accuracy: float | None
    f_measure: float | None

    def to_dict(self) -> dict:
        return {k: (UNDEFINED if v is None else v) for k, v in
                (("recall", self.recall), ("precision", self.precision),
                 ("accuracy", self.accuracy), ("f_measure", self.f_measure))}

    def percentages(self) -> dict:
        return {k: (UNDEFINED if v == UNDEFINED else percent(v)) for k, v in self.to_dict().items()}


def percent(value: float) -> float:
    """Fraction as a percentage truncated (not rounded) to one decimal."""
    return math.floor(value * 1000 + 1e-9) / 10


def confusion(predictions, labels) -> ConfusionMatrix:
    predictions, labels = list(predictions), list(labels)
    if len(predictions) != len(labels):
        raise ValueError(f"length mismatch: {len(predictions)} predictions, {len(labels)} labels")
    tp = fp = fn = tn = 0
    for pred, actual in zip(predictions, labels):
        p, a = _is_toad(pred), _is_toad(actual)
        if p and a:
            tp += 1
        elif p:
            fp += 1
        elif a:
            fn += 1
        else:
            tn += 1
    return ConfusionMatrix(tp, fp, fn, tn)


def metrics(cm: ConfusionMatrix) -> Metrics:
    total = cm.P + cm.N
    if total == 0:
        raise ValueError("empty confusion matrix")
    recall = cm.TP / cm.P if cm.P else None
    precision = cm.TP / (cm.TP + cm.FP) if cm.TP + cm.FP else None
    accuracy = (cm.TP + cm.TN) / total
    if recall and precision:
        f_measure = 2.0 / (1.0 / precision + 1.0 / recall)
    else:
        f_measure = None
    return Metrics(recall, precision, accuracy, f_measure)


def score_histogram(scores, bin_width: float = 0.01) -> tuple[np.ndarray, np.ndarray]:
    """Normalized histogram over [0, 1]; returns ``(bin_lows, density)``.

    Density sums to 1 for a non-empty input, 0 otherwise.  A score of
    exactly 1.0 lands in the last bin.
    """
    n_bins = int(round(1.0 / bin_width))
    scores = np.asarray(scores, dtype=np.float64).ravel()
    if scores.size and (scores.min() < 0 or scores.max() > 1):
        raise ValueError("scores must lie in [0, 1]")
    counts, _ = np.histogram(scores, bins=n_bins, range=(0.0, 1.0))
    lows = np.arange(n_bins) * bin_width
    density = counts / scores.size if scores.size else counts.astype(np.float64)
    return lows, density


def overlay(heatmap: np.ndarray, image: np.ndarray) -> np.ndarray:
    """Heat-map bilinearly enlarged x32 and multiplied into the gray image."""
    heatmap = np.asarray(heatmap, dtype=np.float32)
    image = np.asarray(image)
    h, w = image.shape[:2]
    if heatmap.shape != (h // STRIDE, w // STRIDE) or h % STRIDE or w % STRIDE:
        raise ValueError(f"heat-map {heatmap.shape} does not match image {image.shape[:2]} / {STRIDE}")
    gray = gray_triple(image)[..., 0] if image.ndim == 3 else image.astype(np.float64)
    big = cv2.resize(heatmap, (w, h), interpolation=cv2.INTER_LINEAR).astype(np.float64)
    out = np.clip(np.rint(gray * big), 0, 255).astype(np.uint8)
    return np.repeat(out[..., None], 3, axis=2) if image.ndim == 3 else out


@dataclass
class EvalResult:
    record_ids: list
    labels: list
    scores: list
    predictions: list
    confusion: ConfusionMatrix
    metrics: Metrics
    threshold: float

    @property
    def false_negatives(self) -> list[str]:
        return [rid for rid, a, p in zip(self.record_ids, self.labels, self.predictions)
                if a == TOAD and p == NOT_TOAD]

    @property
    def false_positives(self) -> list[str]:
        return [rid for rid, a, p in zip(self.record_ids, self.labels, self.predictions)
                if a == NOT_TOAD and p == TOAD]

    @property
    def fp_rate(self) -> float | None:
        return self.confusion.FP / self.confusion.N if self.confusion.N else None


def evaluate_records(model, records, crop: tuple[int, int] = TEST_CROP,
                     threshold: float = DEFAULT_THRESHOLD, on_heatmap=None) -> EvalResult:
    """Score every record; ``on_heatmap(record, score, heatmap)`` is called per image."""
    ids, labels, scores, preds = [], [], [], []
    for ref in records:
        record = ref.load() if hasattr(ref, "load") else ref
        score, heatmap = predict_image(model, record.image, crop)
        if on_heatmap is not None:
            on_heatmap(record, score, heatmap)
        ids.append(record.record_id)
        labels.append(record.label)
        scores.append(score)
        preds.append(classify(score, threshold))
    cm = confusion(preds, labels)
    return EvalResult(ids, labels, scores, preds, cm, metrics(cm), threshold)


def write_report(result: EvalResult, out_dir, provenance: dict | None = None) -> dict:
    """metrics.json, histogram.csv, false_negatives.txt and scores.csv."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = {
        "confusion": result.confusion.to_dict(),
        "metrics": result.metrics.to_dict(),
        "percent": result.metrics.percentages(),
        "fp_rate": UNDEFINED if result.fp_rate is None else result.fp_rate,
        "threshold": result.threshold,
        "n_images": len(result.scores),
        "provenance": provenance or {},
    }
    (out_dir / "metrics.json").write_text(json.dumps(report, indent=1))

    scores = np.asarray(result.scores)
    labels = np.asarray(result.labels)
    lows, toad = score_histogram(scores[labels == TOAD])
    _, not_toad = score_histogram(scores[labels == NOT_TOAD])
    with open(out_dir / "histogram.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_low", "toad_density", "nottoad_density"])
        for row in zip(lows, toad, not_toad):
            writer.writerow([f"{row[0]:.2f}", repr(float(row[1])), repr(float(row[2]))])

    (out_dir / "false_negatives.txt").write_text("".join(f"{r}\n" for r in result.false_negatives))
    with open(out_dir / "scores.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["record_id", "label", "score", "prediction"])
        for row in zip(result.record_ids, result.labels, result.scores, result.predictions):
            writer.writerow([row[0], row[1], repr(row[2]), row[3]])
    return report
