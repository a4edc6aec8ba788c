"""Pseudo-label quality scores and their band-widening monotonicity."""

import numpy as np
import pytest
from scipy.ndimage import gaussian_filter

from selflabel.metrics import PseudoQuality, aggregate, pseudo_quality
from selflabel.probmap import BG, FG, IGNORE, PixelPartition, partition_pixels
from selflabel.simworld import gen_sample


def make_part(labels):
    return PixelPartition(labels=np.asarray(labels, dtype=np.uint8),
                          tau_fg=0.7, tau_bg=0.2, band_radius=0)


def test_perfect_partition_scores_ones():
    s = gen_sample(3)
    gt = s.gt_mask.values
    labels = np.where(gt > 0.5, FG, BG).astype(np.uint8)
    q = pseudo_quality(make_part(labels), s.gt_mask)
    assert q.selected_accuracy == 1.0
    assert q.selected_coverage == 1.0
    assert q.pseudo_precision == 1.0
    assert q.pseudo_recall == 1.0
    assert not q.empty_selection


def test_half_wrong_selection():
    gt = np.zeros((4, 4))
    labels = np.full((4, 4), IGNORE, dtype=np.uint8)
    labels[0, :2] = FG  # wrong: gt is background
    labels[0, 2:] = BG  # right
    q = pseudo_quality(make_part(labels), gt)
    assert q.selected_accuracy == pytest.approx(0.5)
    assert q.selected_coverage == pytest.approx(4 / 16)
    assert q.pseudo_precision == 0.0


def test_empty_selection_flagged():
    q = pseudo_quality(make_part(np.full((4, 4), IGNORE)), np.zeros((4, 4)))
    assert q.empty_selection
    assert q.selected_coverage == 0.0
    assert q.selected_accuracy == 1.0
    assert q.pseudo_precision == 1.0 and q.pseudo_recall == 1.0


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        pseudo_quality(make_part(np.zeros((4, 4))), np.zeros((5, 5)))


def test_quality_validation():
    with pytest.raises(ValueError):
        PseudoQuality(1.2, 0.5, 0.5, 0.5)


def test_band_widening_never_decreases_accuracy():
    # blurred-blob maps: the over-covered error ring sits nearest the
    # partition boundary, so the band strips errors before good pixels
    for seed in range(25):
        s = gen_sample(seed)
        v = gaussian_filter(s.gt_mask.values, sigma=2.0)
        v = v / v.max()
        accs = []
        for band in range(4):
            part = partition_pixels(v, 0.25, 0.15, band_radius=band)
            accs.append(pseudo_quality(part, s.gt_mask).selected_accuracy)
        assert all(a <= b + 1e-12 for a, b in zip(accs, accs[1:])), (seed, accs)
        assert accs[0] < 1.0  # non-vacuous: band 0 actually contains errors


def test_aggregate_single_and_pair():
    row = PseudoQuality(0.9, 0.8, 0.7, 0.6)
    out = aggregate([row])
    assert out["selected_accuracy"] == {"mean": 0.9, "min": 0.9, "max": 0.9}
    two = aggregate([{"x": 0.0}, {"x": 1.0}])
    assert two["x"]["mean"] == pytest.approx(0.5)
    assert two["x"]["min"] == 0.0 and two["x"]["max"] == 1.0


def test_aggregate_rejects_empty():
    with pytest.raises(ValueError):
        aggregate([])
