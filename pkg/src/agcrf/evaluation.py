"""Contour-detection scoring: thinning, matching, and the three summary numbers.

The pipeline mirrors standard edge benchmarks at desk scale: predictions are
thinned by non-maximum suppression, binarized at 99 uniform thresholds,
matched one-to-one against ground-truth edge pixels within a tolerance
radius proportional to the image diagonal, and summarized as ODS (best F
over one dataset-wide threshold), OIS (mean per-image best F), and AP
(trapezoidal area under the dataset precision-recall sweep).

Greedy nearest-first matching replaces the benchmark's assignment solver;
it is deterministic and one-to-one, which is what the tolerance test needs
at this scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

DEFAULT_TOLERANCE = 0.0075


@dataclass(frozen=True)
class MatchCounts:
    tp: int
    fp: int
    fn: int


@dataclass(frozen=True)
class EvalResult:
    ods: float
    ois: float
    ap: float
    ods_threshold: float

    def to_dict(self) -> dict:
        return {"ODS": self.ods, "OIS": self.ois, "AP": self.ap,
                "ODS_threshold": self.ods_threshold}


# 4 quantized gradient directions as (dy, dx) neighbor offsets
_DIRECTIONS = ((0, 1), (1, 1), (1, 0), (1, -1))


def nms_thin(contour_map: np.ndarray, smoothing_sigma: float = 1.0) -> np.ndarray:
    """Suppress pixels that are not local maxima along the gradient direction.

    Orientation comes from Sobel gradients of a Gaussian-smoothed copy,
    quantized to 4 directions.  A pixel survives if it strictly beats one
    directional neighbor and at least ties the other (the asymmetry keeps a
    2-wide crest from vanishing entirely).  Survivors keep their original
    value, everything else drops to 0, so output <= input pointwise.
    """
    m = np.asarray(contour_map, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"contour map must be 2-d, got shape {m.shape}")
    if m.size == 0 or not m.any():
        return np.zeros_like(m)
    smoothed = ndimage.gaussian_filter(m, smoothing_sigma)
    gy = ndimage.sobel(smoothed, axis=0)
    gx = ndimage.sobel(smoothed, axis=1)
    angle = np.mod(np.arctan2(gy, gx), np.pi)
    bins = np.rint(angle / (np.pi / 4)).astype(int) % 4

    h, w = m.shape
    padded = np.pad(m, 1)
    keep = np.zeros_like(m, dtype=bool)
    rows, cols = np.mgrid[0:h, 0:w]
    for b, (dy, dx) in enumerate(_DIRECTIONS):
        sel = bins == b
        if not sel.any():
            continue
        r, c = rows[sel] + 1, cols[sel] + 1
        ahead = padded[r + dy, c + dx]
        behind = padded[r - dy, c - dx]
        vals = m[sel]
        keep[sel] = (vals > 0) & (vals > ahead) & (vals >= behind)
    return np.where(keep, m, 0.0)


def correspond(pred_binary: np.ndarray, gt_binary: np.ndarray,
               tol_frac: float = DEFAULT_TOLERANCE) -> MatchCounts:
    """Greedy one-to-one matching of predicted to true edge pixels.

    Candidate pairs within ``tol_frac * image diagonal`` are taken in order
    of increasing distance (ties broken by pixel index), each pixel matched
    at most once.
    """
    pred = np.asarray(pred_binary).astype(bool)
    gt = np.asarray(gt_binary).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    radius = tol_frac * float(np.hypot(*pred.shape))
    p_pts = np.argwhere(pred)
    g_pts = np.argwhere(gt)
    if len(p_pts) == 0 or len(g_pts) == 0:
        return MatchCounts(0, len(p_pts), len(g_pts))

    tree = cKDTree(g_pts)
    cand_d: list[float] = []
    cand_p: list[int] = []
    cand_g: list[int] = []
    for pi, hits in enumerate(tree.query_ball_point(p_pts, radius)):
        for gi in hits:
            cand_d.append(float(np.hypot(*(p_pts[pi] - g_pts[gi]))))
            cand_p.append(pi)
            cand_g.append(gi)
    order = np.lexsort((cand_g, cand_p, cand_d))
    p_used = np.zeros(len(p_pts), dtype=bool)
    g_used = np.zeros(len(g_pts), dtype=bool)
    tp = 0
    for idx in order:
        pi, gi = cand_p[idx], cand_g[idx]
        if not p_used[pi] and not g_used[gi]:
            p_used[pi] = True
            g_used[gi] = True
            tp += 1
    return MatchCounts(tp, len(p_pts) - tp, len(g_pts) - tp)


def _pr(tp: int, fp: int, fn: int) -> tuple[float, float]:
    # vacuous cases score 1: no predictions means no false alarms, no
    # ground truth means nothing was missed
    precision = tp / (tp + fp) if tp + fp > 0 else 1.0
    recall = tp / (tp + fn) if tp + fn > 0 else 1.0
    return precision, recall


def _f_measure(precision: float, recall: float) -> float:
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def threshold_grid(n_thresholds: int = 99) -> np.ndarray:
    """n uniform thresholds strictly inside (0, 1): k/(n+1) for k = 1..n."""
    return np.arange(1, n_thresholds + 1, dtype=np.float64) / (n_thresholds + 1)


def evaluate(preds: list[np.ndarray], gts: list[np.ndarray],
             tol_frac: float = DEFAULT_TOLERANCE, n_thresholds: int = 99
             ) -> tuple[EvalResult, list[tuple[float, float, float, float]]]:
    """Score a dataset of contour maps against binary ground truth.

    Returns the summary plus the dataset PR curve as (threshold, precision,
    recall, F) rows at strictly increasing thresholds.  Predictions are used
    as given; thin them first if the detector emits thick responses.

    ODS picks the single best dataset-wide threshold (lowest wins ties),
    OIS averages each image's own best F, AP integrates precision over
    recall by the trapezoid rule.  The threshold sweep makes ODS and OIS
    invariant to monotone rescaling of the predictions whenever distinct
    prediction values stay separated by more than one grid step.
    """
    if len(preds) == 0:
        raise ValueError("evaluate needs at least one image")
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions vs {len(gts)} ground truths")
    thresholds = threshold_grid(n_thresholds)
    n_img = len(preds)
    tp = np.zeros((n_img, n_thresholds), dtype=np.int64)
    fp = np.zeros_like(tp)
    fn = np.zeros_like(tp)
    for i, (pred, gt) in enumerate(zip(preds, gts)):
        pred = np.asarray(pred, dtype=np.float64)
        if pred.min() < 0 or pred.max() > 1:
            raise ValueError(f"prediction {i} not in [0, 1]")
        gt_b = np.asarray(gt).astype(bool)
        for k, t in enumerate(thresholds):
            counts = correspond(pred >= t, gt_b, tol_frac)
            tp[i, k], fp[i, k], fn[i, k] = counts.tp, counts.fp, counts.fn

    curve = []
    dataset_f = np.empty(n_thresholds)
    for k, t in enumerate(thresholds):
        p, r = _pr(int(tp[:, k].sum()), int(fp[:, k].sum()), int(fn[:, k].sum()))
        f = _f_measure(p, r)
        dataset_f[k] = f
        curve.append((float(t), p, r, f))
    best_k = int(np.argmax(dataset_f))  # argmax takes the first (lowest) threshold on ties
    ods = float(dataset_f[best_k])

    per_image_best = np.empty(n_img)
    for i in range(n_img):
        best = 0.0
        for k in range(n_thresholds):
            p, r = _pr(int(tp[i, k]), int(fp[i, k]), int(fn[i, k]))
            best = max(best, _f_measure(p, r))
        per_image_best[i] = best
    ois = float(per_image_best.mean())

    recalls = np.array([pt[2] for pt in curve])
    precisions = np.array([pt[1] for pt in curve])
    order = np.argsort(recalls, kind="stable")
    ap = float(np.trapezoid(precisions[order], recalls[order]))

    result = EvalResult(ods, ois, ap, float(thresholds[best_k]))
    return result, curve
