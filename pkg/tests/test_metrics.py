import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis.extra.numpy import arrays

from hsiseg.metrics import MetricRow, MetricsReport, aggregate, dice, hausdorff, score_masks
from oracles import count_dice, pairwise_hausdorff


def _square(r, c, n=8, size=2):
    m = np.zeros((n, n), bool)
    m[r:r + size, c:c + size] = True
    return m


def test_dice_identical():
    m = _square(2, 2)
    assert dice(m, m) == 1.0


def test_dice_disjoint():
    assert dice(_square(0, 0), _square(5, 5)) == 0.0


def test_dice_half_overlap():
    p, g = _square(2, 2), _square(2, 3)
    assert count_dice(p, g) == 0.5
    assert dice(p, g) == 0.5


def test_dice_both_empty():
    z = np.zeros((4, 4), bool)
    assert dice(z, z) == 1.0


def test_shape_mismatch():
    with pytest.raises(ValueError):
        dice(np.zeros((2, 2)), np.zeros((3, 3)))
    with pytest.raises(ValueError):
        hausdorff(np.zeros((2, 2)), np.zeros((3, 3)))


def test_hausdorff_identical():
    m = _square(1, 1, size=3)
    assert hausdorff(m, m) == 0.0


def test_hausdorff_345():
    p = np.zeros((6, 6), bool)
    g = np.zeros((6, 6), bool)
    p[0, 0] = True
    g[3, 4] = True
    assert hausdorff(p, g) == 5.0


def test_hausdorff_empty_undefined():
    assert hausdorff(np.zeros((3, 3)), _square(0, 0, n=3)) is None


def test_hausdorff_spacing_and_percentile():
    p, g = _square(2, 2, n=12, size=4), _square(2, 5, n=12, size=4)
    assert hausdorff(p, g, spacing=0.5) == pytest.approx(0.5 * hausdorff(p, g))
    assert hausdorff(p, g, percentile=50) <= hausdorff(p, g)


@pytest.mark.parametrize("d", [1, 2, 3, 5])
def test_translation_gives_shift(d):
    p = np.zeros((24, 24), bool)
    p[8:14, 6:12] = True
    q = np.roll(p, d, axis=1)
    assert hausdorff(p, q) == float(d)


def test_exhaustive_3x3_against_oracles():
    masks = [np.array(bits, bool).reshape(3, 3) for bits in itertools.product([0, 1], repeat=9)]
    nonempty = [m for m in masks if m.any()]
    for p in nonempty:
        for g in nonempty:
            assert dice(p, g) == count_dice(p, g)
            assert hausdorff(p, g) == pairwise_hausdorff(p, g)


def test_random_16x16_against_oracles():
    rng = np.random.default_rng(0)
    for _ in range(100):
        p = rng.random((16, 16)) < rng.uniform(0.05, 0.6)
        g = rng.random((16, 16)) < rng.uniform(0.05, 0.6)
        assert dice(p, g) == count_dice(p, g)
        assert hausdorff(p, g) == pairwise_hausdorff(p, g)


@settings(max_examples=60, deadline=None)
@given(arrays(bool, (6, 6)), arrays(bool, (6, 6)))
def test_symmetry_and_identity(p, g):
    assert dice(p, g) == dice(g, p)
    assert hausdorff(p, g) == hausdorff(g, p)
    assert (dice(p, g) == 1.0) == bool(np.array_equal(p, g))


def _row(cat, d, dom=0, hd=1.0):
    return MetricRow("m", 0, dom, cat, d, hd)


def test_aggregate_single_row():
    rep = aggregate([_row(1, 0.4, hd=3.0)])
    assert rep.mean_dice == 0.4 and rep.mean_hd == 3.0


def test_aggregate_category_mean():
    rep = aggregate([_row(1, 0.5), _row(2, 0.7), _row(3, 0.9)])
    assert rep.mean_dice == pytest.approx(0.7)


def test_aggregate_undefined_hd():
    rep = aggregate([_row(1, 0.0, hd=None), _row(2, 0.1, hd=None)])
    assert rep.mean_hd is None


def test_aggregate_empty():
    with pytest.raises(ValueError):
        aggregate([])


def test_report_round_trip():
    gt = np.zeros((2, 8, 8), np.uint8)
    gt[:, 2:5, 2:5] = 1
    rep = score_masks(gt, gt, np.array([0, 1]), [1], "m", 0)
    again = MetricsReport.from_dict(rep.to_dict())
    assert again == rep
    assert rep.mean_dice == 1.0 and rep.mean_hd == 0.0
