"""Overlap metrics over binary voxel masks and their per-case reports."""
import json
import os
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Union

import numpy as np

from .datagen import DomainSample, LabelMask
from .errors import ConfigurationError

METRIC_NAMES = ("dsc", "sen", "jac", "vs")
TABLE_HEADERS = {"dsc": "DSC", "sen": "Sen", "jac": "Jac", "vs": "VS"}

MaskLike = Union[LabelMask, np.ndarray]


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self) -> None:
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ConfigurationError("confusion counts must be nonnegative", "counts")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class CaseMetrics:
    dsc: float
    sen: float
    jac: float
    vs: float
    case_id: str = ""


def _as_binary(mask: MaskLike, role: str) -> np.ndarray:
    data = mask.data if isinstance(mask, LabelMask) else np.asarray(mask)
    if data.size and not np.isin(data, (0, 1)).all():
        raise ConfigurationError("mask values must be 0 or 1", role)
    return data.astype(bool)


def confusion(pred: MaskLike, gt: MaskLike) -> ConfusionCounts:
    p = _as_binary(pred, "pred")
    g = _as_binary(gt, "gt")
    if p.shape != g.shape:
        raise ConfigurationError(f"prediction {p.shape} and ground truth {g.shape} differ", "shape")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionCounts(tp, fp, fn, p.size - tp - fp - fn)


def _ratio(num: float, den: float, both_empty: bool) -> float:
    if den == 0:
        return 1.0 if both_empty else 0.0
    return num / den


def compute_metrics(c: ConfusionCounts, case_id: str = "") -> CaseMetrics:
    """DSC, sensitivity, Jaccard and volume similarity.

    Any 0/0 scores 1 when prediction and ground truth are both empty, else 0.
    """
    both_empty = c.tp + c.fp + c.fn == 0
    overlap = 2 * c.tp + c.fp + c.fn
    return CaseMetrics(
        dsc=_ratio(2 * c.tp, overlap, both_empty),
        sen=_ratio(c.tp, c.tp + c.fn, both_empty),
        jac=_ratio(c.tp, c.tp + c.fp + c.fn, both_empty),
        vs=1.0 - abs(c.fp - c.fn) / overlap if overlap else 1.0,
        case_id=case_id,
    )


def vs_sizes(pred_size: int, gt_size: int) -> float:
    """Volume similarity from the two mask sizes; equals the FP/FN form."""
    if pred_size + gt_size == 0:
        return 1.0
    return 1.0 - abs(pred_size - gt_size) / (pred_size + gt_size)


@dataclass
class MetricsReport:
    cases: List[CaseMetrics] = field(default_factory=list)
    label: str = ""

    def mean(self) -> Dict[str, float]:
        if not self.cases:
            return {name: float("nan") for name in METRIC_NAMES}
        return {name: float(np.mean([getattr(c, name) for c in self.cases])) for name in METRIC_NAMES}

    def to_dict(self) -> Dict:
        return {"label": self.label, "mean": self.mean(), "cases": [asdict(c) for c in self.cases]}

    def write_json(self, path: str) -> str:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2)
        return path

    def format_table(self) -> str:
        rows = [["case"] + [TABLE_HEADERS[n] for n in METRIC_NAMES]]
        for c in self.cases:
            rows.append([c.case_id] + [f"{100 * getattr(c, n):.2f}" for n in METRIC_NAMES])
        mean = self.mean()
        rows.append(["mean"] + [f"{100 * mean[n]:.2f}" for n in METRIC_NAMES])
        widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
        return "\n".join("  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in rows)


def binarize(probs: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    return (np.asarray(probs) >= threshold).astype(np.uint8)


def evaluate_cases(
    predict_fn: Callable[[np.ndarray], np.ndarray],
    samples: Iterable[DomainSample],
    threshold: float = 0.5,
    label: Optional[str] = None,
) -> MetricsReport:
    """Score ``predict_fn`` (a batch of volumes -> foreground probabilities) on each sample."""
    report = MetricsReport(label=label or "")
    for sample in samples:
        probs = np.asarray(predict_fn(sample.image.data[np.newaxis]))
        pred = binarize(probs.reshape(sample.mask.shape), threshold)
        report.cases.append(compute_metrics(confusion(pred, sample.mask), sample.case_id))
    return report
