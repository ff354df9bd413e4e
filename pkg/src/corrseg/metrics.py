"""Region decomposition and evaluation metrics (Dice score, Hausdorff distance)."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import ShapeMismatchError

REGIONS = ("ET", "WT", "TC")
UNDEFINED = float("nan")


def region_masks(label_values: np.ndarray) -> dict[str, np.ndarray]:
    """Nested tumour regions from label values {0,1,2,4}."""
    v = np.asarray(label_values)
    return {
        "WT": np.isin(v, (1, 2, 4)),
        "TC": np.isin(v, (1, 4)),
        "ET": v == 4,
    }


def _pair(pred, gt):
    pred, gt = np.asarray(pred, dtype=bool), np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ShapeMismatchError(f"pred {pred.shape} vs gt {gt.shape}")
    return pred, gt


def dice_score(pred, gt) -> float:
    """2TP / (2TP + FP + FN); 1.0 when both masks are empty."""
    pred, gt = _pair(pred, gt)
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    denom = 2 * tp + fp + fn
    return 1.0 if denom == 0 else 2 * tp / denom


_FACE_NEIGHBOURS = ndimage.generate_binary_structure(3, 1)


def boundary(mask: np.ndarray) -> np.ndarray:
    """Mask voxels with a 6-neighbour outside the mask or beyond the grid edge."""
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 3:
        raise ShapeMismatchError("boundary extraction expects a 3D mask")
    interior = ndimage.binary_erosion(mask, structure=_FACE_NEIGHBOURS, border_value=0)
    return mask & ~interior


def hausdorff(pred, gt, spacing: Sequence[float] = (1.0, 1.0, 1.0)) -> float:
    """Symmetric Hausdorff distance between 6-connected boundaries, in mm.

    Returns ``UNDEFINED`` (nan) when either mask is empty.
    """
    pred, gt = _pair(pred, gt)
    if not pred.any() or not gt.any():
        return UNDEFINED
    sp = np.asarray(spacing, dtype=np.float64)
    a = np.argwhere(boundary(pred)) * sp
    b = np.argwhere(boundary(gt)) * sp
    d_ab = cKDTree(b).query(a, k=1)[0].max()
    d_ba = cKDTree(a).query(b, k=1)[0].max()
    return float(max(d_ab, d_ba))


@dataclass
class MetricsReport:
    # rows of (case_id, region, dice, hausdorff_mm)
    rows: list[tuple[str, str, float, float]] = field(default_factory=list)

    def add_case(self, case_id: str, pred_values, gt_values, spacing=(1.0, 1.0, 1.0)):
        pm, gm = region_masks(pred_values), region_masks(gt_values)
        for r in REGIONS:
            self.rows.append((case_id, r, dice_score(pm[r], gm[r]),
                              hausdorff(pm[r], gm[r], spacing)))

    def mean(self, region: str) -> tuple[float, float]:
        """Mean Dice and mean Hausdorff (undefined entries excluded) for a region."""
        dices = [d for _, r, d, _ in self.rows if r == region]
        hds = [h for _, r, _, h in self.rows if r == region and not math.isnan(h)]
        mean_d = float(np.mean(dices)) if dices else UNDEFINED
        mean_h = float(np.mean(hds)) if hds else UNDEFINED
        return mean_d, mean_h

    def case(self, case_id: str) -> dict[str, tuple[float, float]]:
        return {r: (d, h) for c, r, d, h in self.rows if c == case_id}

    def write_csv(self, path) -> None:
        fmt = lambda h: "NA" if math.isnan(h) else f"{h:.6f}"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["case_id", "region", "dice", "hausdorff_mm"])
            for case_id, r, d, h in self.rows:
                w.writerow([case_id, r, f"{d:.6f}", fmt(h)])
            for r in REGIONS:
                d, h = self.mean(r)
                w.writerow(["mean", r, "NA" if math.isnan(d) else f"{d:.6f}", fmt(h)])
