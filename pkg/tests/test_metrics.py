import math
from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tctseg.errors import ShapeError
from tctseg.metrics import (
    aggregate_reports,
    connected_components,
    dice_score,
    hd95,
    iou_score,
    nearest_rank_percentile,
    segmentation_report,
    surface_voxels,
)


def brute_surface(mask):
    """Foreground voxels with a face neighbour that is background or outside."""
    out = np.zeros_like(mask)
    Z, Y, X = mask.shape
    for z, y, x in zip(*np.nonzero(mask)):
        for dz, dy, dx in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
            n = (z + dz, y + dy, x + dx)
            if not (0 <= n[0] < Z and 0 <= n[1] < Y and 0 <= n[2] < X) or not mask[n]:
                out[z, y, x] = True
                break
    return out


def brute_hd95(a, b, spacing):
    if not a.any() and not b.any():
        return 0.0
    if not a.any() or not b.any():
        return None
    sp = np.asarray(spacing, float)
    pa = np.argwhere(brute_surface(a)) * sp
    pb = np.argwhere(brute_surface(b)) * sp
    d = np.sqrt(((pa[:, None, :] - pb[None, :, :]) ** 2).sum(-1))

    def p95(v):
        v = sorted(v)
        return v[math.ceil(0.95 * len(v)) - 1]

    return max(p95(d.min(axis=1)), p95(d.min(axis=0)))


def bfs_components(mask):
    seen = np.zeros(mask.shape, bool)
    count = 0
    for start in zip(*np.nonzero(mask)):
        if seen[start]:
            continue
        count += 1
        q = deque([start])
        seen[start] = True
        while q:
            z, y, x = q.popleft()
            for dz, dy, dx in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
                n = (z + dz, y + dy, x + dx)
                if all(0 <= n[k] < mask.shape[k] for k in range(3)) and mask[n] and not seen[n]:
                    seen[n] = True
                    q.append(n)
    return count


def random_pair(rng, shape=(8, 8, 8)):
    pa, pb = rng.uniform(0.05, 0.6, 2)
    a = rng.random(shape) < pa
    b = rng.random(shape) < pb
    if rng.random() < 0.1:
        a[:] = False
    if rng.random() < 0.1:
        b[:] = False
    return a, b


# ------------------------------------------------------------------ overlap

def test_dice_closed_forms():
    a = np.zeros((1, 1, 3), bool)
    b = np.zeros((1, 1, 3), bool)
    a[0, 0, :2] = True
    b[0, 0, 1:] = True
    assert dice_score(a, a) == 1.0
    assert dice_score(a, b) == 0.5
    assert dice_score(np.zeros(3, bool), np.zeros(3, bool)) == 1.0


def test_iou_closed_forms():
    a = np.array([1, 1, 0], bool)
    b = np.array([0, 1, 1], bool)
    assert iou_score(a, a) == 1.0
    assert iou_score(a, ~a) == 0.0
    assert iou_score(a, b) == pytest.approx(1 / 3)


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        dice_score(np.zeros(3, bool), np.zeros(4, bool))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_dice_iou_identity(seed):
    a, b = random_pair(np.random.default_rng(seed))
    d, j = dice_score(a, b), iou_score(a, b)
    assert d == pytest.approx(2 * j / (1 + j), abs=1e-12)


# ------------------------------------------------------------------ HD95

def test_hd95_identity_and_two_points():
    a = np.zeros((5, 5, 5), bool)
    a[1:4, 1:4, 1:4] = True
    assert hd95(a, a) == 0.0
    p = np.zeros((5, 5, 5), bool)
    q = np.zeros((5, 5, 5), bool)
    p[0, 0, 0] = True
    q[3, 0, 0] = True
    assert hd95(p, q) == 3.0


def test_hd95_shifted_line():
    a = np.zeros((1, 1, 7), bool)
    b = np.zeros((1, 1, 7), bool)
    a[0, 0, 0:5] = True
    b[0, 0, 1:6] = True
    assert hd95(a, b) == 1.0
    assert nearest_rank_percentile([1, 0, 0, 0, 0]) == 1.0


def test_hd95_empty_conventions():
    e = np.zeros((3, 3, 3), bool)
    f = e.copy()
    f[1, 1, 1] = True
    assert hd95(e, e) == 0.0
    assert hd95(e, f) is None


def test_hd95_spacing():
    p = np.zeros((1, 1, 4), bool)
    q = np.zeros((1, 1, 4), bool)
    p[0, 0, 0] = True
    q[0, 0, 3] = True
    assert hd95(p, q, spacing=(1.0, 1.0, 2.5)) == 7.5


def test_surface_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(10):
        m = rng.random((6, 7, 5)) < 0.6
        assert np.array_equal(surface_voxels(m), brute_surface(m))


def test_hd95_matches_brute_force_oracle():
    rng = np.random.default_rng(1)
    for _ in range(30):
        a, b = random_pair(rng)
        spacing = tuple(rng.uniform(0.5, 2.0, 3))
        assert hd95(a, b, spacing) == brute_hd95(a, b, spacing)


# ------------------------------------------------------------------ components

def test_components_basic():
    assert connected_components(np.zeros((3, 3, 3), bool))[1] == 0
    m = np.zeros((3, 3, 3), bool)
    m[1, 1, 1] = True
    assert connected_components(m)[1] == 1
    m = np.zeros((5, 5, 5), bool)
    m[0:2, 0:2, 0:2] = True
    m[3:5, 3:5, 3:5] = True
    assert connected_components(m)[1] == 2


def test_diagonal_voxels_are_separate():
    m = np.zeros((2, 2, 2), bool)
    m[0, 0, 0] = m[1, 1, 1] = True
    assert connected_components(m)[1] == 2


def test_components_match_bfs():
    rng = np.random.default_rng(2)
    for _ in range(20):
        m = rng.random((6, 6, 6)) < 0.35
        labels, count = connected_components(m)
        assert count == bfs_components(m)
        assert set(np.unique(labels[m])) == set(range(1, count + 1))


# ------------------------------------------------------------------ reports

def test_segmentation_report_and_aggregate():
    ref = np.zeros((6, 6, 6), np.uint8)
    ref[1:3, 1:3, 1:3] = 1
    ref[4:6, 4:6, 4:6] = 2
    pred = ref.copy()
    pred[4:6, 4:6, 4:6] = 0
    r = segmentation_report(pred, ref, 2)
    assert r.dsc.tolist() == [1.0, 0.0]
    assert r.hd95_defined.tolist() == [True, False]
    assert r.undefined_count == 1
    agg = aggregate_reports([r, segmentation_report(ref, ref, 2)])
    assert agg["dsc"].tolist() == [1.0, 0.5]
    assert agg["hd95"].tolist() == [0.0, 0.0]
    assert agg["hd95_undefined"].tolist() == [0, 1]
