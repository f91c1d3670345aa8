import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from corpnlab.evaluation import (MetricsRecord, ap50, average_precision, avg_false_negatives,
                                 avg_foreground_after_nms, proposal_recall, recall_hits)
from corpnlab.geometry import AnchorLabel
from cases import ap_case, oracle_layout
from oracles import exhaustive_ap, recount_fn

FG, BG = AnchorLabel.FOREGROUND, AnchorLabel.BACKGROUND


def test_fn_examples():
    assert avg_false_negatives([np.array([[0.6, 0.4, 0.3]])], [[FG, FG, FG]]) == 2.0
    assert avg_false_negatives([np.array([[0.6, 0.9, 0.7]])], [[FG, FG, FG]]) == 0.0
    # background anchors are not counted whatever their score
    assert avg_false_negatives([np.array([[0.1, 0.2]])], [[BG, BG]]) == 0.0
    assert avg_false_negatives([], []) == 0.0
    with pytest.raises(ValueError):
        avg_false_negatives([np.zeros((1, 2))], [])


def test_fn_uses_most_certain_rpn():
    # rpn 1 is most certain (0.05) and says background: counted even though rpn 0 says 0.6
    assert avg_false_negatives([np.array([[0.6], [0.05]])], [[FG]]) == 1.0
    # per-scene mean
    outs = [np.array([[0.1, 0.2]]), np.array([[0.9, 0.9]])]
    assert avg_false_negatives(outs, [[FG, FG], [FG, FG]]) == 1.0


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_fn_matches_recount(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 5))
    mats = [rng.random((n, int(rng.integers(1, 12)))) for _ in range(int(rng.integers(1, 4)))]
    labels = [rng.choice([FG, BG, AnchorLabel.IGNORE], size=m.shape[1]) for m in mats]
    assert avg_false_negatives(mats, labels) == pytest.approx(recount_fn(mats, labels), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_fn_nonincreasing_when_fg_score_rises(seed):
    rng = np.random.default_rng(seed)
    F = rng.random((1, 10))
    lab = rng.choice([FG, BG], size=10)
    before = avg_false_negatives([F], [lab])
    G = F.copy()
    i = int(rng.integers(10))
    G[0, i] = min(1.0, G[0, i] + rng.random())
    if lab[i] == FG:
        assert avg_false_negatives([G], [lab]) <= before


def test_fg_examples():
    assert avg_foreground_after_nms([]) == 0.0
    assert avg_foreground_after_nms([[True] * 3, [True] * 5]) == 4.0
    assert avg_foreground_after_nms([[True, False, True], []]) == 1.0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.lists(st.booleans(), max_size=8), min_size=1, max_size=5))
def test_fg_matches_recount(flags):
    expected = sum(sum(1 for f in p if f) for p in flags) / len(flags)
    assert avg_foreground_after_nms(flags) == pytest.approx(expected, abs=1e-12)


def test_recall_examples():
    gt = [(0, 0, 10, 10), (20, 20, 30, 30)]
    assert proposal_recall([gt], [gt]) == 1.0
    assert proposal_recall([[]], [gt]) == 0.0
    assert proposal_recall([[]], [[]]) == 1.0
    # 3 gt, 5 proposals: gt0 exact, gt1 at IOU 0.6, gt2 only at IOU 0.4
    gts = [(0, 0, 10, 10), (20, 0, 30, 10), (40, 0, 50, 10)]
    props = [(0, 0, 10, 10), (20, 0, 30, 6), (40, 0, 44, 10), (60, 60, 70, 70), (0, 0, 10, 10)]
    assert recall_hits(props, gts) == (2, 3)
    assert proposal_recall([props], [gts]) == pytest.approx(2 / 3)
    # top_k cuts the ranked list
    assert proposal_recall([props], [gts], top_k=1) == pytest.approx(1 / 3)


def test_average_precision_basics():
    assert average_precision([1, 1, 1], 3) == 1.0
    assert average_precision([0, 0], 2) == 0.0
    assert average_precision([], 2) == 0.0
    with pytest.raises(ValueError):
        average_precision([1], 0)


def test_ap_examples():
    gt = [[(0, (0, 0, 10, 10)), (0, (20, 20, 30, 30))]]
    perfect = [[((0, 0, 10, 10), 0.9, 0), ((20, 20, 30, 30), 0.8, 0)]]
    assert ap50(perfect, gt)[1] == 1.0
    wrong_cat = [[((0, 0, 10, 10), 0.9, 1), ((20, 20, 30, 30), 0.8, 1)]]
    per, _ = ap50(wrong_cat, gt)
    assert per == {0: 0.0}


def test_ap_worked_example():
    # 3 gt, 4 detections ranked: hit A, miss, hit B, duplicate of A.
    # precision 1, 1/2, 2/3, 1/2 at recall 1/3, 1/3, 2/3, 2/3 -> AP = 1/3 + (1/3)(2/3) = 5/9
    A, B, C = (0, 0, 10, 10), (20, 0, 30, 10), (40, 0, 50, 10)
    gt = [[(0, A), (0, B), (0, C)]]
    dets = [[(A, 0.9, 0), ((60, 60, 70, 70), 0.8, 0), (B, 0.7, 0), ((0, 0, 10, 9), 0.6, 0)]]
    per, mean = ap50(dets, gt)
    assert per[0] == pytest.approx(5 / 9, abs=1e-12)
    od, og = oracle_layout(dets, gt, 0)
    assert float(exhaustive_ap(od, og)) == pytest.approx(5 / 9, abs=1e-15)


def test_ap_excludes_categories_without_gt():
    gt = [[(0, (0, 0, 10, 10))]]
    dets = [[((0, 0, 10, 10), 0.9, 0), ((0, 0, 10, 10), 0.5, 3)]]
    per, mean = ap50(dets, gt)
    assert set(per) == {0} and mean == 1.0
    per, mean = ap50(dets, gt, categories=[3])
    assert per == {} and np.isnan(mean)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_ap_matches_exhaustive_oracle(seed):
    dets, gt = ap_case(np.random.default_rng(seed))
    per, _ = ap50(dets, gt)
    for c, ap in per.items():
        od, og = oracle_layout(dets, gt, c)
        assert abs(ap - float(exhaustive_ap(od, og))) <= 1e-12


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_ap_invariant_to_monotone_score_transform(seed):
    dets, gt = ap_case(np.random.default_rng(seed))
    warped = [[(b, float(np.exp(3 * s) - 7.0), c) for b, s, c in ds] for ds in dets]
    assert ap50(dets, gt)[0] == ap50(warped, gt)[0]


def test_metrics_record_dict():
    r = MetricsRecord(0.5, 0.6, 1.0, 2.0, 0.3, -4.0)
    assert list(r.as_dict()) == ["novel_ap50", "base_ap50", "avg_fn", "avg_fg", "proposal_recall", "logdet_cov"]
