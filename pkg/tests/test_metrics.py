import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from activemeta import metrics
from activemeta.errors import ShapeError

label_maps = arrays(np.uint8, (6, 6), elements=st.integers(0, 3))


def brute_force(pred, truth, num_classes):
    """Independent per-pixel counter."""
    per_class = {}
    for c in range(num_classes):
        inter = p = t = 0
        for i in range(pred.shape[0]):
            for j in range(pred.shape[1]):
                a, b = pred[i, j] == c, truth[i, j] == c
                inter += a and b
                p += a
                t += b
        per_class[c] = 1.0 if p + t == 0 else 2.0 * inter / (p + t)
    present = [c for c in range(1, num_classes) if (pred == c).any() or (truth == c).any()]
    mean_fg = sum(per_class[c] for c in present) / len(present) if present else 1.0
    return per_class, mean_fg


def test_matches_brute_force_on_random_maps():
    rng = np.random.default_rng(0)
    for _ in range(100):
        pred = rng.integers(0, 4, (16, 16))
        truth = rng.integers(0, 4, (16, 16))
        rep = metrics.dice_report(pred, truth, 4)
        per_class, mean_fg = brute_force(pred, truth, 4)
        assert rep.per_class == per_class
        assert rep.mean_foreground == mean_fg


def test_empty_vs_empty_is_one():
    z = np.zeros((4, 4), dtype=np.uint8)
    assert metrics.dice(z, z, 3) == 1.0
    rep = metrics.dice_report(z, z, 4)
    assert rep.per_class == {0: 1.0, 1: 1.0, 2: 1.0, 3: 1.0}
    assert rep.mean_foreground == 1.0


def test_disjoint_is_zero():
    a = np.array([[1, 0], [0, 0]])
    b = np.array([[0, 1], [0, 0]])
    assert metrics.dice(a, b, 1) == 0.0


def test_mean_foreground_uses_present_classes():
    pred = np.array([[1, 1], [0, 0]])
    truth = np.array([[1, 0], [0, 0]])
    rep = metrics.dice_report(pred, truth, 4)
    assert rep.mean_foreground == pytest.approx(2 / 3)
    assert rep.present_foreground() == [1]


@given(label_maps, label_maps, st.integers(0, 3))
def test_symmetry_and_bounds(a, b, c):
    d = metrics.dice(a, b, c)
    assert d == metrics.dice(b, a, c)
    assert 0.0 <= d <= 1.0


@given(label_maps)
def test_self_agreement_is_perfect(a):
    rep = metrics.dice_report(a, a, 4)
    assert all(v == 1.0 for v in rep.per_class.values())


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        metrics.dice(np.zeros((2, 2)), np.zeros((3, 3)), 1)


@settings(max_examples=50)
@given(st.lists(st.floats(0, 1), min_size=2, max_size=20))
def test_mean_std_sample_convention(values):
    m, s = metrics.mean_std(values)
    assert m == pytest.approx(np.mean(values))
    assert s == pytest.approx(np.std(values, ddof=1), abs=1e-12)


def test_mean_std_edge_cases():
    assert metrics.mean_std([0.4]) == (0.4, 0.0)
    with pytest.raises(metrics.EmptyAggregateError):
        metrics.mean_std([])
    with pytest.raises(metrics.EmptyAggregateError):
        metrics.aggregate([])


def test_aggregate_counts_and_std():
    reps = [metrics.dice_report(np.array([[c, 0]]), np.array([[1, 0]]), 2) for c in (1, 0, 1)]
    agg = metrics.aggregate(reps)
    assert agg[1].n == 3
    assert agg[1].mean == pytest.approx(2 / 3)
    assert agg[1].std == pytest.approx(math.sqrt(((1 / 3) ** 2 * 2 + (2 / 3) ** 2) / 2))


def test_csv_format(tmp_path):
    rep = metrics.dice_report(np.array([[1, 0]]), np.array([[1, 1]]), 2)
    path = tmp_path / "d.csv"
    metrics.write_csv(path, metrics.DICE_CSV_HEADER, metrics.report_rows("p1", 3, rep))
    raw = path.read_bytes()
    assert b"\r" not in raw
    assert raw.decode("utf-8").splitlines() == [
        "patient,slice,class,dsc", "p1,3,0,0.000000", "p1,3,1,0.666667",
    ]
