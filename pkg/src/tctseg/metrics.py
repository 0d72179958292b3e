"""Overlap and surface-distance metrics for binary masks."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from tctseg.errors import ShapeError

_FACE_NEIGHBOURS = ndimage.generate_binary_structure(3, 1)


def _pair(a, b):
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def dice_score(a, b):
    """2|A&B| / (|A|+|B|); 1.0 when both masks are empty."""
    a, b = _pair(a, b)
    sa, sb = np.count_nonzero(a), np.count_nonzero(b)
    if sa + sb == 0:
        return 1.0
    return 2.0 * np.count_nonzero(a & b) / (sa + sb)


def iou_score(a, b):
    a, b = _pair(a, b)
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def surface_voxels(mask):
    """Foreground voxels with a background face neighbour or on the volume border."""
    mask = np.asarray(mask, dtype=bool)
    eroded = ndimage.binary_erosion(mask, structure=_FACE_NEIGHBOURS, border_value=0)
    return mask & ~eroded


def nearest_rank_percentile(values, q=95.0):
    """The ceil(q/100 * n)-th smallest value (1-based)."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    k = max(1, math.ceil(q / 100.0 * len(v)))
    return float(v[k - 1])


def _directed(src, dst):
    dist, _ = cKDTree(dst).query(src, k=1)
    return dist


def hd95(a, b, spacing=(1.0, 1.0, 1.0)):
    """Symmetric 95th-percentile surface distance in mm.

    Returns 0.0 when both masks are empty and ``None`` (undefined) when
    exactly one of them is.
    """
    a, b = _pair(a, b)
    ea, eb = not a.any(), not b.any()
    if ea and eb:
        return 0.0
    if ea or eb:
        return None
    sp = np.asarray(spacing, dtype=np.float64)
    pa = np.argwhere(surface_voxels(a)) * sp
    pb = np.argwhere(surface_voxels(b)) * sp
    return max(
        nearest_rank_percentile(_directed(pa, pb)),
        nearest_rank_percentile(_directed(pb, pa)),
    )


def connected_components(mask):
    """6-connected labelling; labels follow first-voxel raster order from 1.

    Returns ``(labels, count)``.
    """
    labels, count = ndimage.label(np.asarray(mask, dtype=bool), structure=_FACE_NEIGHBOURS)
    return labels.astype(np.int32), int(count)


@dataclass
class SegReport:
    """Per-class metrics of one prediction against its reference.

    ``hd95`` holds ``nan`` where the distance is undefined; ``hd95_defined``
    carries the flag explicitly.
    """

    dsc: np.ndarray
    iou: np.ndarray
    hd95: np.ndarray
    hd95_defined: np.ndarray = field(default=None)

    @property
    def undefined_count(self):
        return int(np.count_nonzero(~self.hd95_defined))


def segmentation_report(pred, ref, num_classes, spacing=(1.0, 1.0, 1.0)):
    """Per-class DSC / IoU / HD95 for integer label maps."""
    pred = np.asarray(pred)
    ref = np.asarray(ref)
    if pred.shape != ref.shape:
        raise ShapeError(f"prediction {pred.shape} and reference {ref.shape} differ")
    dsc, iou, hd, ok = [], [], [], []
    for c in range(1, num_classes + 1):
        a, b = pred == c, ref == c
        dsc.append(dice_score(a, b))
        iou.append(iou_score(a, b))
        d = hd95(a, b, spacing)
        ok.append(d is not None)
        hd.append(np.nan if d is None else d)
    return SegReport(np.array(dsc), np.array(iou), np.array(hd), np.array(ok))


def aggregate_reports(reports):
    """Mean DSC/IoU over samples, and mean HD95 over defined entries only.

    Returns a dict with per-class arrays plus the per-class count of
    undefined HD95 entries that were excluded.
    """
    dsc = np.mean([r.dsc for r in reports], axis=0)
    iou = np.mean([r.iou for r in reports], axis=0)
    hd_stack = np.array([r.hd95 for r in reports])
    defined = np.array([r.hd95_defined for r in reports])
    n_def = defined.sum(axis=0)
    hd_sum = np.where(defined, hd_stack, 0.0).sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        hd = np.where(n_def > 0, hd_sum / np.maximum(n_def, 1), np.nan)
    return {
        "dsc": dsc,
        "iou": iou,
        "hd95": hd,
        "hd95_undefined": (len(reports) - n_def).astype(int),
    }
