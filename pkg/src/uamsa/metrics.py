"""Dice, IoU and distribution summaries for binary masks."""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from .errors import ParameterError, ShapeError

HIST_EDGES = np.round(np.arange(0, 1.0001, 0.05), 2)


@dataclass
class MetricRecord:
    sample_id: str
    dice: float
    iou_fg: float
    iou_bg: float
    miou: float
    mean_uncertainty: float = 0.0

    def as_dict(self) -> dict:
        return asdict(self)


def binarize(prob, threshold: float = 0.5) -> np.ndarray:
    """1 where ``prob >= threshold`` (ties go to foreground)."""
    return (np.asarray(prob) >= threshold).astype(np.uint8)


def _pair(pred, gt):
    p = np.asarray(pred).astype(bool)
    g = np.asarray(gt).astype(bool)
    if p.shape != g.shape:
        raise ShapeError(f"mask shapes differ: {p.shape} vs {g.shape}")
    return p, g


def _ratio(num: int, den: int) -> float:
    return 1.0 if den == 0 else num / den


def dice(pred, gt) -> float:
    p, g = _pair(pred, gt)
    inter = int(np.count_nonzero(p & g))
    return _ratio(2 * inter, int(np.count_nonzero(p)) + int(np.count_nonzero(g)))


def iou(pred, gt) -> float:
    p, g = _pair(pred, gt)
    return _ratio(int(np.count_nonzero(p & g)), int(np.count_nonzero(p | g)))


def miou(pred, gt) -> dict:
    p, g = _pair(pred, gt)
    fg = iou(p, g)
    bg = iou(~p, ~g)
    return {"iou_fg": fg, "iou_bg": bg, "miou": (fg + bg) / 2}


def evaluate_mask(sample_id: str, pred, gt, uncertainty=None) -> MetricRecord:
    m = miou(pred, gt)
    mu = float(np.mean(uncertainty, dtype=np.float64)) if uncertainty is not None else 0.0
    return MetricRecord(sample_id, dice(pred, gt), m["iou_fg"], m["iou_bg"], m["miou"], mu)


def _quartiles(values: np.ndarray) -> tuple[float, float, float]:
    """Median and quartiles; Q1/Q3 are medians of the lower/upper halves.

    For odd n the middle value is excluded from both halves.
    """
    v = np.sort(values)
    n = len(v)
    med = float(np.median(v))
    if n == 1:
        return med, med, med
    half = n // 2
    lower, upper = v[:half], v[n - half :]
    return float(np.median(lower)), med, float(np.median(upper))


def histogram(values) -> list[int]:
    """Counts in the 20 bins [0, .05), ..., [.95, 1.0]; 1.0 joins the last bin."""
    counts = [0] * 20
    for v in values:
        idx = min(int(np.floor(round(float(v) / 0.05, 9))), 19)
        counts[max(idx, 0)] += 1
    return counts


def summarize(records, metrics=("dice", "iou_fg", "miou")) -> dict:
    if not records:
        raise ParameterError("cannot summarize an empty record list")
    out = {}
    for name in metrics:
        vals = np.array([getattr(r, name) for r in records], dtype=np.float64)
        q1, med, q3 = _quartiles(vals)
        out[name] = {
            "mean": float(vals.mean()),
            "median": med,
            "q1": q1,
            "q3": q3,
            "histogram": histogram(vals),
        }
    return out
