"""Evaluation metrics: per-class Dice, Normalized Surface Dice, macro-F1 over
the 7 binary labels, and the weighted overall score.

All metric values are on a 0..100 percent scale. Segmentation metrics are
computed per image as a mean over *included* foreground classes (a class
absent from both the prediction and the reference is excluded by default),
then averaged over images. Macro-F1 is computed from global per-label counts
over the whole evaluation set, never as a mean of per-image F1 values.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np
from scipy.ndimage import distance_transform_edt

ON_EMPTY_MODES = ("exclude", "perfect")


class PerClassResult(NamedTuple):
    """Per-foreground-class values (NaN where excluded) and their mean."""
    per_class: np.ndarray
    mean: float


def _as_mask(arr, name: str) -> np.ndarray:
    a = np.asarray(arr)
    if hasattr(arr, "detach"):
        a = arr.detach().cpu().numpy()
    if a.ndim != 2:
        raise ValueError(f"{name} must be a 2-D index mask, got shape {a.shape}")
    if not np.issubdtype(a.dtype, np.integer):
        a = a.astype(np.int64)
    return a


def _check_pair(pred, gt, c_seg: int):
    p = _as_mask(pred, "pred")
    g = _as_mask(gt, "gt")
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: pred {p.shape} vs gt {g.shape}")
    if c_seg < 2:
        raise ValueError(f"c_seg must be >= 2, got {c_seg}")
    for name, a in (("pred", p), ("gt", g)):
        if a.size and (a.min() < 0 or a.max() >= c_seg):
            raise ValueError(f"{name} contains class ids outside [0, {c_seg - 1}]")
    return p, g


def _finish(values: list, c_seg: int) -> PerClassResult:
    per_class = np.array([math.nan if v is None else v for v in values], dtype=np.float64)
    included = per_class[~np.isnan(per_class)]
    mean = float(included.mean()) if included.size else math.nan
    return PerClassResult(per_class, mean)


def dice_metric(pred, gt, c_seg: int, on_empty: str = "exclude") -> PerClassResult:
    """Per-foreground-class Dice overlap, percent scale.

    A class empty in both masks is excluded from the mean (``on_empty="exclude"``)
    or counted as 100 (``"perfect"``); empty on one side only scores 0.
    """
    if on_empty not in ON_EMPTY_MODES:
        raise ValueError(f"on_empty must be one of {ON_EMPTY_MODES}, got {on_empty!r}")
    p, g = _check_pair(pred, gt, c_seg)
    values = []
    for c in range(1, c_seg):
        pc, gc = p == c, g == c
        ps, gs = int(pc.sum()), int(gc.sum())
        if ps == 0 and gs == 0:
            values.append(None if on_empty == "exclude" else 100.0)
        elif ps == 0 or gs == 0:
            values.append(0.0)
        else:
            inter = int((pc & gc).sum())
            values.append(100.0 * 2.0 * inter / (ps + gs))
    return _finish(values, c_seg)


def boundary_pixels(mask_c: np.ndarray) -> np.ndarray:
    """Boolean boundary of a binary region: member pixels 4-adjacent to a
    non-member pixel or to the image border."""
    m = np.pad(mask_c, 1, constant_values=False)
    interior = m[:-2, 1:-1] & m[2:, 1:-1] & m[1:-1, :-2] & m[1:-1, 2:]
    return mask_c & ~interior


def nsd_metric(pred, gt, c_seg: int, tolerance_px: float = 1.0,
               on_empty: str = "exclude") -> PerClassResult:
    """Per-foreground-class Normalized Surface Dice, percent scale.

    Boundaries use 4-connectivity with the image border counting as outside;
    distances are Euclidean between pixel centers.
    """
    if on_empty not in ON_EMPTY_MODES:
        raise ValueError(f"on_empty must be one of {ON_EMPTY_MODES}, got {on_empty!r}")
    if tolerance_px < 0:
        raise ValueError(f"tolerance_px must be >= 0, got {tolerance_px}")
    p, g = _check_pair(pred, gt, c_seg)
    values = []
    for c in range(1, c_seg):
        bp = boundary_pixels(p == c)
        bg = boundary_pixels(g == c)
        n_p, n_g = int(bp.sum()), int(bg.sum())
        if n_p == 0 and n_g == 0:
            values.append(None if on_empty == "exclude" else 100.0)
        elif n_p == 0 or n_g == 0:
            values.append(0.0)
        else:
            dist_to_g = distance_transform_edt(~bg)
            dist_to_p = distance_transform_edt(~bp)
            hits = int((dist_to_g[bp] <= tolerance_px).sum())
            hits += int((dist_to_p[bg] <= tolerance_px).sum())
            values.append(100.0 * hits / (n_p + n_g))
    return _finish(values, c_seg)


def _as_bits(arr, name: str) -> np.ndarray:
    a = np.asarray(arr)
    if hasattr(arr, "detach"):
        a = arr.detach().cpu().numpy()
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise ValueError(f"{name} must be a [N, K] batch of binary label vectors, "
                         f"got shape {a.shape}")
    if not np.isin(a, (0, 1)).all():
        raise ValueError(f"{name} must contain only 0/1 entries")
    return a.astype(np.int64)


def f1_counts(pred_bits, gt_bits) -> np.ndarray:
    """Per-label [TP, FP, FN] counts over a batch, shape [K, 3]."""
    p = _as_bits(pred_bits, "pred")
    g = _as_bits(gt_bits, "gt")
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: pred {p.shape} vs gt {g.shape}")
    tp = ((p == 1) & (g == 1)).sum(axis=0)
    fp = ((p == 1) & (g == 0)).sum(axis=0)
    fn = ((p == 0) & (g == 1)).sum(axis=0)
    return np.stack([tp, fp, fn], axis=1)


def f1_from_counts(counts: np.ndarray) -> float:
    """Macro-F1 (percent) from per-label [TP, FP, FN] counts; a label with no
    positives and no predictions scores 1 by convention."""
    vals = []
    for tp, fp, fn in counts:
        denom = 2 * tp + fp + fn
        vals.append(1.0 if denom == 0 else 2.0 * tp / denom)
    return 100.0 * float(np.mean(vals))


def f1_metric(pred_bits, gt_bits) -> float:
    """Macro-F1 over labels (percent) computed from whole-set counts."""
    return f1_from_counts(f1_counts(pred_bits, gt_bits))


def overall_score(dsc: float, nsd: float, f1: float, s_time: float = 0.0) -> float:
    """Weighted challenge score: 0.45·f1 + 0.45·(dsc+nsd)/2 + 0.1·s_time."""
    for name, v in (("dsc", dsc), ("nsd", nsd), ("f1", f1), ("s_time", s_time)):
        if not 0.0 <= float(v) <= 100.0:
            raise ValueError(f"{name} must lie in [0, 100], got {v}")
    return 0.45 * f1 + 0.45 * (dsc + nsd) / 2.0 + 0.1 * s_time


@dataclass
class MetricsReport:
    dsc: float
    nsd: float
    f1: float
    s_time: float
    score: float
    per_class_dsc: np.ndarray
    per_class_nsd: np.ndarray
    nsd_tolerance_px: float = 1.0
    n_images: int = 0

    def __post_init__(self):
        for name in ("dsc", "nsd", "f1", "s_time", "score"):
            v = getattr(self, name)
            if not 0.0 <= v <= 100.0:
                raise ValueError(f"{name} must lie in [0, 100], got {v}")
        expect = overall_score(self.dsc, self.nsd, self.f1, self.s_time)
        if abs(expect - self.score) > 1e-9:
            raise ValueError(f"score {self.score} inconsistent with formula value {expect}")

    @property
    def score_no_time(self) -> float:
        """Score with the time term dropped: 0.45·f1 + 0.45·(dsc+nsd)/2."""
        return 0.45 * self.f1 + 0.45 * (self.dsc + self.nsd) / 2.0

    def summary(self) -> str:
        return (f"images={self.n_images} DSC={self.dsc:.2f} NSD={self.nsd:.2f} "
                f"(tolerance_px={self.nsd_tolerance_px:g}) F1={self.f1:.2f} "
                f"S_time={self.s_time:.2f} score_no_time={self.score_no_time:.2f} "
                f"score_with_time={self.score:.2f}")


@dataclass
class MetricAccumulator:
    """Streaming metric aggregation; the result is identical whether samples
    arrive one by one or all at once.

    Dice/NSD aggregate as means over images of per-image class means (images
    with no included class are skipped); per-class columns average over the
    images where that class was included. F1 aggregates global counts.
    """
    c_seg: int
    tolerance_px: float = 1.0
    on_empty: str = "exclude"
    _dsc_sum: float = 0.0
    _dsc_n: int = 0
    _nsd_sum: float = 0.0
    _nsd_n: int = 0
    _n_images: int = 0
    _cls_counts: Optional[np.ndarray] = None
    _pc_dsc_sum: np.ndarray = field(default=None)  # type: ignore[assignment]
    _pc_dsc_n: np.ndarray = field(default=None)    # type: ignore[assignment]
    _pc_nsd_sum: np.ndarray = field(default=None)  # type: ignore[assignment]
    _pc_nsd_n: np.ndarray = field(default=None)    # type: ignore[assignment]
    rows: list = field(default_factory=list)

    def __post_init__(self):
        k = self.c_seg - 1
        self._pc_dsc_sum = np.zeros(k)
        self._pc_dsc_n = np.zeros(k, dtype=np.int64)
        self._pc_nsd_sum = np.zeros(k)
        self._pc_nsd_n = np.zeros(k, dtype=np.int64)

    def update(self, pred_mask, gt_mask, pred_bits=None, gt_bits=None,
               sample_id: Optional[str] = None) -> None:
        d = dice_metric(pred_mask, gt_mask, self.c_seg, self.on_empty)
        s = nsd_metric(pred_mask, gt_mask, self.c_seg, self.tolerance_px, self.on_empty)
        self._n_images += 1
        if not math.isnan(d.mean):
            self._dsc_sum += d.mean
            self._dsc_n += 1
        if not math.isnan(s.mean):
            self._nsd_sum += s.mean
            self._nsd_n += 1
        for arr, sums, ns in ((d.per_class, self._pc_dsc_sum, self._pc_dsc_n),
                              (s.per_class, self._pc_nsd_sum, self._pc_nsd_n)):
            ok = ~np.isnan(arr)
            sums[ok] += arr[ok]
            ns[ok] += 1
        row_f1 = math.nan
        if pred_bits is not None:
            counts = f1_counts(pred_bits, gt_bits)
            if self._cls_counts is None:
                self._cls_counts = counts
            else:
                self._cls_counts = self._cls_counts + counts
            row_f1 = f1_from_counts(counts)
        self.rows.append({
            "id": sample_id if sample_id is not None else str(self._n_images - 1),
            "dsc": d.mean, "nsd": s.mean, "f1": row_f1,
        })

    def report(self, s_time: float = 0.0) -> MetricsReport:
        dsc = self._dsc_sum / self._dsc_n if self._dsc_n else 0.0
        nsd = self._nsd_sum / self._nsd_n if self._nsd_n else 0.0
        f1 = f1_from_counts(self._cls_counts) if self._cls_counts is not None else 0.0
        pc_dsc = np.where(self._pc_dsc_n > 0,
                          self._pc_dsc_sum / np.maximum(self._pc_dsc_n, 1), math.nan)
        pc_nsd = np.where(self._pc_nsd_n > 0,
                          self._pc_nsd_sum / np.maximum(self._pc_nsd_n, 1), math.nan)
        return MetricsReport(
            dsc=dsc, nsd=nsd, f1=f1, s_time=s_time,
            score=overall_score(dsc, nsd, f1, s_time),
            per_class_dsc=pc_dsc, per_class_nsd=pc_nsd,
            nsd_tolerance_px=self.tolerance_px, n_images=self._n_images)

    def write_csv(self, path, s_time: float = 0.0) -> MetricsReport:
        """Per-image rows plus a final AGGREGATE row. The tolerance and S_time
        are recorded explicitly in every row, and the aggregate carries the
        score both with and without the time term."""
        rep = self.report(s_time)
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id", "dsc", "nsd", "f1", "s_time", "nsd_tolerance_px",
                        "score_no_time", "score_with_time"])
            for row in self.rows:
                w.writerow([row["id"], f"{row['dsc']:.6f}", f"{row['nsd']:.6f}",
                            f"{row['f1']:.6f}", f"{s_time:.6f}",
                            f"{self.tolerance_px:g}", "", ""])
            w.writerow(["AGGREGATE", f"{rep.dsc:.6f}", f"{rep.nsd:.6f}",
                        f"{rep.f1:.6f}", f"{s_time:.6f}", f"{self.tolerance_px:g}",
                        f"{rep.score_no_time:.6f}", f"{rep.score:.6f}"])
        return rep
