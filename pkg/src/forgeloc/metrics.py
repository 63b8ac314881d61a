"""Pixel-level localization metrics and evaluation reports."""
from __future__ import annotations

import csv
import json
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import EmptyInput, ShapeError

THRESHOLD = 0.5
METRIC_NAMES = ("precision", "recall", "iou", "f1", "f1_complement_max")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class MetricRecord:
    precision: float
    recall: float
    iou: float
    f1: float
    f1_complement_max: float
    image_id: str = ""
    perturbation: str = "none"


def binarize(m_hat, threshold: float = THRESHOLD) -> np.ndarray:
    """Threshold a probability map (strictly greater-than); 3-channel maps are channel-averaged first."""
    m_hat = np.asarray(m_hat, dtype=np.float64)
    if m_hat.ndim == 3:
        m_hat = m_hat.mean(axis=2)
    return (m_hat > threshold).astype(np.uint8)


def _check(m, pred):
    m, pred = np.asarray(m), np.asarray(pred)
    if m.shape != pred.shape:
        raise ShapeError(f"mask {m.shape} and prediction {pred.shape} differ")
    return m.astype(bool), pred.astype(bool)


def confusion(m, m_pred) -> ConfusionCounts:
    m, p = _check(m, m_pred)
    tp = int(np.count_nonzero(m & p))
    fp = int(np.count_nonzero(~m & p))
    fn = int(np.count_nonzero(m & ~p))
    return ConfusionCounts(tp, fp, fn, m.size - tp - fp - fn)


def _ratio(num, den) -> float:
    return num / den if den else 0.0


def scores(c: ConfusionCounts) -> dict:
    """Precision, recall, IoU and F1; 0/0 is 0 except a perfect all-negative call (IoU = F1 = 1)."""
    if c.tp == c.fp == c.fn == 0:
        return {"precision": 0.0, "recall": 0.0, "iou": 1.0, "f1": 1.0}
    precision = _ratio(c.tp, c.tp + c.fp)
    recall = _ratio(c.tp, c.tp + c.fn)
    return {
        "precision": precision,
        "recall": recall,
        "iou": _ratio(c.tp, c.tp + c.fp + c.fn),
        "f1": _ratio(2 * precision * recall, precision + recall),
    }


def f1_score(m, m_pred) -> float:
    return scores(confusion(m, m_pred))["f1"]


def complement_f1(m, m_pred) -> float:
    """Best of the F1 of the prediction and the F1 of its complement."""
    m, p = _check(m, m_pred)
    return max(f1_score(m, p), f1_score(m, ~p))


def metric_record(m, m_pred, image_id: str = "", perturbation: str = "none") -> MetricRecord:
    s = scores(confusion(m, m_pred))
    return MetricRecord(**s, f1_complement_max=complement_f1(m, m_pred),
                        image_id=image_id, perturbation=perturbation)


def aggregate(records: Iterable[MetricRecord]) -> dict:
    """Unweighted per-image means of every metric, grouped by perturbation tag."""
    records = list(records)
    if not records:
        raise EmptyInput("cannot aggregate an empty record list")
    groups = defaultdict(list)
    for r in sorted(records, key=lambda r: (r.perturbation, r.image_id)):
        groups[r.perturbation].append(r)
    summary = {}
    for tag in sorted(groups):
        rows = groups[tag]
        summary[tag] = {name: float(np.mean([getattr(r, name) for r in rows])) for name in METRIC_NAMES}
        summary[tag]["count"] = len(rows)
    return summary


@dataclass
class EvalReport:
    config_hash: str
    per_image: list[MetricRecord] = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    @classmethod
    def from_records(cls, records, config_hash: str = "") -> "EvalReport":
        records = sorted(records, key=lambda r: (r.perturbation, r.image_id))
        return cls(config_hash=config_hash, per_image=records, summary=aggregate(records))

    def to_json(self) -> str:
        payload = {
            "config_hash": self.config_hash,
            "per_image": [asdict(r) for r in self.per_image],
            "summary": self.summary,
        }
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"

    def write(self, path, csv_mirror: bool = False) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json())
        if csv_mirror:
            with open(path.with_suffix(".csv"), "w", newline="") as fh:
                writer = csv.DictWriter(fh, fieldnames=list(MetricRecord.__dataclass_fields__))
                writer.writeheader()
                for r in self.per_image:
                    writer.writerow(asdict(r))
        return path

    @classmethod
    def read(cls, path) -> "EvalReport":
        payload = json.loads(Path(path).read_text())
        return cls(config_hash=payload["config_hash"],
                   per_image=[MetricRecord(**r) for r in payload["per_image"]],
                   summary=payload["summary"])
