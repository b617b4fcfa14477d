"""Region similarity J, boundary F-measure, and J&F aggregation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage


def jaccard(pred: np.ndarray, gt: np.ndarray) -> float:
    pred, gt = np.asarray(pred, bool), np.asarray(gt, bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    union = np.count_nonzero(pred | gt)
    if union == 0:
        return 1.0
    return np.count_nonzero(pred & gt) / union


def default_tolerance(shape) -> int:
    """0.8% of the image diagonal, rounded up."""
    return int(math.ceil(0.008 * math.hypot(*shape[:2])))


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with a 4-neighbor that differs or falls outside the image."""
    m = np.asarray(mask, bool)
    padded = np.pad(m, 1, constant_values=False)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:])
    return m & ~interior


def _matched(src: np.ndarray, dst: np.ndarray, tol: float) -> int:
    """Number of ``src`` boundary pixels within Euclidean distance ``tol`` of ``dst``."""
    if not dst.any():
        return 0
    dist = ndimage.distance_transform_edt(~dst)
    return int(np.count_nonzero(dist[src] <= tol))


def boundary_f(pred: np.ndarray, gt: np.ndarray, tolerance_px=None) -> float:
    pred, gt = np.asarray(pred, bool), np.asarray(gt, bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    tol = default_tolerance(gt.shape) if tolerance_px is None else tolerance_px
    if tol < 0:
        raise ValueError("tolerance_px must be >= 0")
    bp, bg = boundary(pred), boundary(gt)
    n_p, n_g = np.count_nonzero(bp), np.count_nonzero(bg)
    if n_p == 0 and n_g == 0:
        return 1.0
    if n_p == 0 or n_g == 0:
        return 0.0
    precision = _matched(bp, bg, tol) / n_p
    recall = _matched(bg, bp, tol) / n_g
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


@dataclass
class EvalResult:
    J: np.ndarray  # (K, T)
    F: np.ndarray  # (K, T)
    mean_J: float
    mean_F: float
    per_target_J: np.ndarray = field(default=None)
    per_target_F: np.ndarray = field(default=None)

    @property
    def mean_JF(self) -> float:
        return (self.mean_J + self.mean_F) / 2


def evaluate(preds, gts, num_targets: int, tolerance_px=None) -> EvalResult:
    """Per-target, per-frame J and F for one sequence of label maps.

    Means skip frame 0 (the given mask) unless the sequence has one frame.
    The sequence mean averages per-target means.
    """
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions for {len(gts)} ground-truth frames")
    if not len(gts):
        raise ValueError("empty sequence")
    T, K = len(gts), int(num_targets)
    J = np.zeros((K, T))
    F = np.zeros((K, T))
    for t, (p, g) in enumerate(zip(preds, gts)):
        p, g = np.asarray(p), np.asarray(g)
        if p.max(initial=0) > K or g.max(initial=0) > K:
            raise ValueError(f"frame {t}: labels exceed num_targets={K}")
        for k in range(1, K + 1):
            J[k - 1, t] = jaccard(p == k, g == k)
            F[k - 1, t] = boundary_f(p == k, g == k, tolerance_px)
    frames = slice(1, None) if T > 1 else slice(None)
    pj, pf = J[:, frames].mean(axis=1), F[:, frames].mean(axis=1)
    return EvalResult(J, F, float(pj.mean()), float(pf.mean()), pj, pf)


def aggregate(results) -> dict:
    """Dataset means over (sequence, target) pairs."""
    pj = np.concatenate([r.per_target_J for r in results])
    pf = np.concatenate([r.per_target_F for r in results])
    mj, mf = float(pj.mean()), float(pf.mean())
    return {"J": mj, "F": mf, "JF": (mj + mf) / 2}
