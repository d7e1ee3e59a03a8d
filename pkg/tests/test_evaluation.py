import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import max_matching, star_polygon
from polyem.detector import Candidate
from polyem.evaluation import (
    brute_force_max_matching,
    detect_all,
    evaluate,
    match_detections,
    prf,
    score_detections,
)
from polyem.geometry import Polygon, bbox_of_polygon, polygon_iou
from polyem.oracle import NoiseSpec, OracleDetector
from polyem.scene_synth import synth_dataset


def square(x0, y0, side=8.0):
    return Polygon([(x0, y0), (x0 + side, y0), (x0 + side, y0 + side), (x0, y0 + side)])


def cand(poly, score=1.0):
    return Candidate(bbox_of_polygon(poly), poly, score)


def test_identical_sets_match_fully():
    truths = [square(0, 0), square(20, 0), square(0, 20)]
    m = match_detections([cand(t) for t in truths], truths)
    assert len(m.pairs) == 3 and m.unmatched_dets == [] and m.unmatched_truths == []
    assert prf(m, 3, 3) == (1.0, 1.0, 1.0)


def test_empty_detections_give_unit_precision_and_zero_recall():
    m = match_detections([], [square(0, 0)])
    assert prf(m, 0, 1) == (1.0, 0.0, 0.0)
    assert prf(match_detections([], []), 0, 0) == (1.0, 1.0, 1.0)


def test_prf_arithmetic():
    assert prf(8, 10, 10) == pytest.approx((0.8, 0.8, 0.8))
    assert prf(0, 3, 0)[2] == 0.0  # P = 0, R = 1


def test_higher_score_claims_the_truth_first():
    t = square(0, 0)
    near, nearer = square(1, 0), square(0.5, 0)
    m = match_detections([cand(near, 0.9), cand(nearer, 0.4)], [t])
    assert m.pairs == [(0, 0)] and m.unmatched_dets == [1]


def test_threshold_is_inclusive_and_validated():
    t = square(0, 0, 2)
    half = Polygon([(0, 0), (2, 0), (2, 1), (0, 1)])
    assert polygon_iou(half, t) == 0.5
    assert len(match_detections([half], [t], 0.5).pairs) == 1
    with pytest.raises(ValueError):
        match_detections([], [], 1.0)


def test_plain_polygons_count_as_unit_score_detections():
    t = square(0, 0)
    assert len(match_detections([t], [t]).pairs) == 1


@given(st.floats(0, 1), st.floats(0, 1))
def test_f_is_bounded_by_the_arithmetic_mean(p, r):
    f = 2 * p * r / (p + r) if p + r else 0.0
    assert f <= (p + r) / 2 + 1e-12
    assert 0.0 <= f <= 1.0


def test_f_never_exceeds_arithmetic_mean_over_random_counts():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        nd, nt = rng.integers(1, 50, 2)
        hits = int(rng.integers(0, min(nd, nt) + 1))
        p, r, f = prf(hits, int(nd), int(nt))
        assert 0 <= f <= (p + r) / 2 + 1e-12
        assert (f == 0) == (hits == 0)


@given(st.integers(0, 2**32 - 1), st.integers(0, 4), st.integers(0, 4))
def test_greedy_equals_brute_force_for_disjoint_truths(seed, nd, nt):
    rng = np.random.default_rng(seed)
    cells = rng.permutation(9)[:nt]
    truths = [Polygon(star_polygon(rng, 7, center=(20 * (c % 3) + 10, 20 * (c // 3) + 10), r_min=4, r_max=8)) for c in cells]
    dets = []
    for k in range(nd):
        if truths and rng.uniform() < 0.7:
            base = truths[rng.integers(len(truths))]
            poly = Polygon(base.vertices + rng.normal(0, 1.5, 2))
        else:
            poly = Polygon(star_polygon(rng, 7, center=rng.uniform(8, 52, 2), r_min=3, r_max=7))
        dets.append(cand(poly, 0.9 - 0.1 * k))
    ious = np.array([[polygon_iou(d.polygon, t) for t in truths] for d in dets]).reshape(nd, nt)
    got = len(match_detections(dets, truths, 0.5).pairs)
    assert got == max_matching(ious, 0.5) == brute_force_max_matching(ious, 0.5)
    for i, j in match_detections(dets, truths, 0.5).pairs:
        assert ious[i, j] >= 0.5


def test_micro_average_over_images():
    a, b = square(0, 0), square(20, 20)
    m = score_detections({"x": [cand(a)], "y": []}, {"x": [a], "y": [b]})
    assert (m.P, m.R, m.n_dets, m.n_truths, m.n_matched) == (1.0, 0.5, 1, 2, 1)
    assert set(m.to_json()) >= {"P", "R", "F", "iou_thresh"}


def test_evaluate_with_a_perfect_detector():
    recs = synth_dataset(10, 2)
    m = evaluate(OracleDetector(recs), recs)
    assert m.F == 1.0
    lossy = evaluate(OracleDetector(recs, NoiseSpec(drop_rate=1.0)), recs)
    assert lossy.R == 0.0 and lossy.P == 1.0
    assert list(detect_all(OracleDetector(recs), recs)) == [r.id for r in recs]
