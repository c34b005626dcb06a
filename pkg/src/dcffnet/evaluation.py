"""One-pass evaluation: success (overlap) and precision (centre error) curves."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import EvalConfig
from .heads import BBox


@dataclass(frozen=True)
class OPEResult:
    success_thresholds: np.ndarray
    success: np.ndarray
    precision_thresholds: np.ndarray
    precision: np.ndarray
    auc: float
    precision_at: float
    report_threshold: float
    ious: np.ndarray
    center_errors: np.ndarray


def _corners(boxes) -> np.ndarray:
    if isinstance(boxes, np.ndarray):
        return np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    return np.array([b.as_array() if isinstance(b, BBox) else b for b in boxes], dtype=np.float64).reshape(-1, 4)


def iou(a, b) -> np.ndarray:
    """IoU of corner boxes ``(x0, y0, x1, y1)``, row by row. Zero-area unions give 0."""
    a, b = _corners(a), _corners(b)
    iw = np.clip(np.minimum(a[:, 2], b[:, 2]) - np.maximum(a[:, 0], b[:, 0]), 0.0, None)
    ih = np.clip(np.minimum(a[:, 3], b[:, 3]) - np.maximum(a[:, 1], b[:, 1]), 0.0, None)
    inter = iw * ih
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a + area_b - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return np.clip(out, 0.0, 1.0)


def center_error(a, b) -> np.ndarray:
    a, b = _corners(a), _corners(b)
    ca = (a[:, :2] + a[:, 2:]) / 2
    cb = (b[:, :2] + b[:, 2:]) / 2
    return np.hypot(*(ca - cb).T)


def ope_evaluate(pred, gt, cfg: EvalConfig | None = None) -> OPEResult:
    """Score a tracked sequence; the first (initialisation) frame is not counted."""
    cfg = cfg or EvalConfig()
    p, t = _corners(pred), _corners(gt)
    if len(p) != len(t):
        raise ValueError(f"{len(p)} predicted boxes for {len(t)} ground-truth boxes")
    if len(p) < 2:
        raise ValueError("need at least one frame after the initialisation frame")
    ious = iou(p[1:], t[1:])
    errs = center_error(p[1:], t[1:])
    s_thr = np.arange(cfg.success_bins) / (cfg.success_bins - 1)
    p_thr = np.arange(cfg.precision_max + 1, dtype=np.float64)
    success = (ious[None, :] >= s_thr[:, None]).mean(axis=1)
    precision = (errs[None, :] <= p_thr[:, None]).mean(axis=1)
    at = float((errs <= cfg.precision_report).mean())
    return OPEResult(s_thr, success, p_thr, precision, float(success.mean()), at,
                     float(cfg.precision_report), ious, errs)


def write_curves(result: OPEResult, path) -> Path:
    """CSV with ``curve,threshold,value`` rows for both curves."""
    path = Path(path)
    lines = ["curve,threshold,value"]
    lines += [f"success,{t:.2f},{float(v)!r}" for t, v in zip(result.success_thresholds, result.success)]
    lines += [f"precision,{t:g},{float(v)!r}" for t, v in zip(result.precision_thresholds, result.precision)]
    path.write_text("\n".join(lines) + "\n")
    return path
