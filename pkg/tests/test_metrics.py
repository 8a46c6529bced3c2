import csv
import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from videotransunet import metrics
from videotransunet.decoder import MaskPair
from videotransunet.synthetic import FrameStack


# -------- brute-force oracles: explicit neighbour loops and pairwise distances
def oracle_boundary(m):
    h, w = m.shape
    out = np.zeros_like(m, bool)
    for i in range(h):
        for j in range(w):
            if not m[i, j]:
                continue
            for di, dj in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                a, b = i + di, j + dj
                if not (0 <= a < h and 0 <= b < w) or not m[a, b]:
                    out[i, j] = True
    return out


def oracle_distances(p, t):
    bp, bt = np.argwhere(oracle_boundary(p)), np.argwhere(oracle_boundary(t))
    d = np.sqrt(((bp[:, None, :] - bt[None, :, :]) ** 2).sum(-1))
    return np.concatenate([d.min(1), d.min(0)])


def oracle_percentile(values, q):
    v = sorted(values)
    pos = q / 100 * (len(v) - 1)
    lo = math.floor(pos)
    hi = min(lo + 1, len(v) - 1)
    return v[lo] + (v[hi] - v[lo]) * (pos - lo)


def oracle_counts(p, t):
    tp = fp = tn = fn = 0
    for a, b in zip(p.ravel(), t.ravel()):
        tp += a and b
        fp += a and not b
        tn += (not a) and (not b)
        fn += (not a) and b
    return tp, fp, tn, fn


def random_pair(rng):
    h, w = rng.integers(4, 33, size=2)
    kind = rng.integers(0, 3)
    if kind == 0:  # blobs
        p = rng.random((h, w)) < rng.uniform(0.05, 0.7)
        t = rng.random((h, w)) < rng.uniform(0.05, 0.7)
    else:  # rectangles, overlapping or not
        p, t = np.zeros((h, w), bool), np.zeros((h, w), bool)
        for m in (p, t):
            r0, c0 = rng.integers(0, h), rng.integers(0, w)
            m[r0 : r0 + rng.integers(1, h), c0 : c0 + rng.integers(1, w)] = True
    return p, t


@pytest.mark.parametrize("seed", range(200))
def test_against_brute_force_oracles(seed):
    rng = np.random.default_rng(seed)
    p, t = random_pair(rng)
    tp, fp, tn, fn = oracle_counts(p, t)
    assert metrics.confusion(p, t) == (tp, fp, tn, fn)
    got = metrics.frame_metrics(p, t)
    dsc = 1.0 if 2 * tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn)
    assert abs(got["dsc"] - dsc) <= 1e-9
    assert abs(got["sensitivity"] - (tp / (tp + fn) if tp + fn else 1.0)) <= 1e-9
    assert abs(got["specificity"] - (tn / (tn + fp) if tn + fp else 1.0)) <= 1e-9
    if p.any() and t.any():
        d = oracle_distances(p, t)
        assert abs(got["hd95"] - oracle_percentile(d, 95)) <= 1e-9
        assert abs(got["asd"] - float(np.mean(d))) <= 1e-9
        np.testing.assert_array_equal(metrics.boundary(p), oracle_boundary(p))


def test_identical_masks():
    m = np.zeros((10, 10), bool)
    m[2:6, 3:8] = True
    got = metrics.frame_metrics(m, m)
    assert got == {"dsc": 1.0, "hd95": 0.0, "asd": 0.0, "sensitivity": 1.0, "specificity": 1.0}


def test_shifted_square():
    a = np.zeros((12, 12), bool)
    a[2:6, 2:6] = True
    b = np.roll(a, 3, axis=1)
    assert metrics.dsc(a, b) == pytest.approx(2 * 4 / 32)
    assert metrics.hd95(a, b) == pytest.approx(3.0)


def test_single_pixels_two_apart():
    a, b = np.zeros((5, 5), bool), np.zeros((5, 5), bool)
    a[2, 0], b[2, 2] = True, True
    assert metrics.hd95(a, b) == 2.0 and metrics.asd(a, b) == 2.0


def test_both_empty():
    z = np.zeros((6, 6), bool)
    assert metrics.frame_metrics(z, z) == {"dsc": 1.0, "hd95": 0.0, "asd": 0.0, "sensitivity": 1.0, "specificity": 1.0}


def test_one_empty():
    z, m = np.zeros((6, 6), bool), np.eye(6, dtype=bool)
    got = metrics.frame_metrics(z, m)
    assert got["dsc"] == 0.0 and math.isnan(got["hd95"]) and math.isnan(got["asd"])
    with pytest.raises(metrics.EmptyMaskError):
        metrics.hd95(m, z)
    with pytest.raises(metrics.EmptyMaskError):
        metrics.surface_distances(m, z)


def test_threshold_is_strict():
    prob = np.array([[0.5, 0.5000001], [0.2, 0.9]])
    np.testing.assert_array_equal(metrics.binarize(prob), [[False, True], [False, True]])


def test_shape_mismatch():
    with pytest.raises(ValueError, match="shapes"):
        metrics.dsc(np.zeros((3, 3)), np.zeros((3, 4)))


@settings(max_examples=60, deadline=None)
@given(
    hnp.arrays(bool, st.tuples(st.integers(2, 12), st.integers(2, 12))),
    hnp.arrays(bool, st.tuples(st.integers(2, 12), st.integers(2, 12))),
)
def test_metric_ranges_and_symmetry(a, b):
    b = np.resize(b, a.shape)
    got = metrics.frame_metrics(a, b)
    assert 0 <= got["dsc"] <= 1 and 0 <= got["sensitivity"] <= 1 and 0 <= got["specificity"] <= 1
    swapped = metrics.frame_metrics(b, a)
    assert got["dsc"] == swapped["dsc"]
    if a.any() and b.any():
        assert got["hd95"] == pytest.approx(swapped["hd95"]) and got["asd"] == pytest.approx(swapped["asd"])
        assert got["hd95"] >= 0


def _stack(seq, k, bolus, pharynx):
    frames = np.zeros((1,) + bolus.shape, np.float32)
    return FrameStack(frames, 0, MaskPair(bolus.astype(np.float32), pharynx.astype(np.float32)), seq, k)


def test_evaluate_dataset_and_csv():
    full = np.ones((8, 8), bool)
    empty = np.zeros((8, 8), bool)
    half = np.zeros((8, 8), bool)
    half[:4] = True
    stacks = [_stack("s0", 0, half, full), _stack("s0", 1, empty, full)]
    model = lambda s: MaskPair(np.where(half, 0.9, 0.1), np.full((8, 8), 0.9))
    report = metrics.evaluate_dataset(model, stacks)
    assert len(report.rows) == 4
    bolus = report.mean("bolus")
    assert bolus["dsc"] == pytest.approx(0.5) and bolus["excluded"] == 1 and bolus["empty_target"] == 1
    assert bolus["hd95"] == 0.0
    rows = list(csv.reader(io.StringIO(report.to_csv())))
    assert tuple(rows[0]) == metrics.COLUMNS
    assert rows[1][:3] == ["s0", "0", "bolus"]
    assert rows[3][4] == "nan"
    footer = rows[-3:]
    assert [r[0] for r in footer] == ["mean"] * 3 and [r[2] for r in footer] == ["bolus", "pharynx", "all"]
    assert footer[0][1] == "1" and float(footer[2][3]) == pytest.approx(0.75)
