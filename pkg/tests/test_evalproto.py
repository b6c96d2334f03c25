import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ptma.evalproto import DetectionRun, average_precision, evaluate_run, protocol_table


def brute_force_ap(scores, pos, calibrated):
    """O(N^2) per-rank recomputation: for each positive count what outranks it."""
    scores = list(map(float, scores))
    pos = list(map(bool, pos))
    n = len(scores)
    P = sum(pos)
    if P == 0:
        return None
    if P == n:
        return 1.0
    w = (n - P) / P if calibrated else 1.0
    total = 0.0
    for i in range(n):
        if not pos[i]:
            continue
        tp = fp = 0
        for j in range(n):
            ahead = scores[j] > scores[i] or (scores[j] == scores[i] and j <= i)
            if ahead:
                if pos[j]:
                    tp += 1
                else:
                    fp += 1
        total += (w * tp) / (w * tp + fp)
    return total / P


def test_hand_case():
    ap, w = average_precision([0.9, 0.8, 0.7, 0.1], [1, 0, 1, 0], calibrated=True)
    assert w == 1.0
    assert ap == pytest.approx((1 + 2 / 3) / 2, abs=1e-12)


def test_perfect_ranking():
    for cal in (False, True):
        ap, _ = average_precision([0.9, 0.8, 0.3, 0.2, 0.1], [1, 1, 0, 0, 0], cal)
        assert ap == 1.0


def test_weight_is_negative_positive_ratio():
    _, w = average_precision([0.1, 0.2, 0.3, 0.4], [1, 0, 0, 0], calibrated=True)
    assert w == 3.0


def test_no_positives_is_absent():
    assert average_precision([0.1, 0.2], [0, 0]) == (None, None)


def test_ties_break_by_frame_order():
    # equal scores: the earlier frame ranks first
    assert average_precision([0.5, 0.5], [1, 0])[0] == 1.0
    assert average_precision([0.5, 0.5], [0, 1])[0] == 0.5


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**20), n=st.integers(1, 80), cal=st.booleans(), ties=st.booleans())
def test_matches_brute_force(seed, n, cal, ties):
    rng = np.random.default_rng(seed)
    s = rng.random(n)
    if ties:
        s = np.round(s * 4) / 4
    pos = rng.random(n) < 0.4
    ap, _ = average_precision(s, pos, cal)
    ref = brute_force_ap(s, pos, cal)
    if ref is None:
        assert ap is None
    else:
        assert abs(ap - ref) <= 1e-12


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**20))
def test_monotone_transform_invariance(seed):
    rng = np.random.default_rng(seed)
    s = rng.random(50)
    pos = rng.random(50) < 0.3
    for cal in (False, True):
        a = average_precision(s, pos, cal)[0]
        b = average_precision(np.exp(3 * s) - 7, pos, cal)[0]
        if a is not None:
            assert a == b


def test_calibrated_equals_plain_when_balanced():
    rng = np.random.default_rng(0)
    s = rng.random(40)
    pos = np.zeros(40, dtype=bool)
    pos[rng.permutation(40)[:20]] = True
    assert average_precision(s, pos, True)[0] == average_precision(s, pos, False)[0]


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**20))
def test_ap_in_unit_interval_and_one_iff_separated(seed):
    rng = np.random.default_rng(seed)
    s = rng.random(30)
    pos = rng.random(30) < 0.5
    if not pos.any():
        return
    ap = average_precision(s, pos, True)[0]
    assert 0.0 <= ap <= 1.0 + 1e-15
    separated = pos.all() or s[pos].min() > s[~pos].max()
    assert (abs(ap - 1.0) < 1e-15) == separated


def test_uniform_random_scores_calibrated_half():
    rng = np.random.default_rng(11)
    n = 10_000
    pos = np.zeros(n, dtype=bool)
    pos[: n // 2] = True
    ap, _ = average_precision(rng.random(n), pos, True)
    assert abs(ap - 0.5) <= 0.05


def _onehot(labels, C):
    s = np.full((len(labels), C + 1), 0.0)
    s[np.arange(len(labels)), labels] = 1.0
    return s


def test_evaluate_perfect_oracle():
    labels = [np.array([0, 1, 1, 2, 0]), np.array([2, 2, 0, 1])]
    run = DetectionRun([_onehot(y, 2) for y in labels], labels)
    for m in ("mAP", "mcAP"):
        rep = evaluate_run(run, m)
        assert rep.mean == 1.0 and rep.frames == 9


def test_evaluate_means_present_classes_and_skips_background():
    labels = np.array([1, 0, 1, 0, 3, 0, 0, 3])
    rng = np.random.default_rng(2)
    scores = rng.dirichlet(np.ones(4), size=8)
    rep = evaluate_run(DetectionRun([scores], [labels]), "mAP")
    assert rep.per_class[2] is None
    assert 0 not in rep.per_class
    a1 = average_precision(scores[:, 1], labels == 1)[0]
    a3 = average_precision(scores[:, 3], labels == 3)[0]
    assert rep.mean == pytest.approx((a1 + a3) / 2, abs=1e-15)


def test_evaluate_pools_frames_across_videos():
    rng = np.random.default_rng(3)
    s1, s2 = rng.dirichlet(np.ones(3), 6), rng.dirichlet(np.ones(3), 5)
    y1, y2 = rng.integers(0, 3, 6), rng.integers(0, 3, 5)
    rep = evaluate_run(DetectionRun([s1, s2], [y1, y2]), "mcAP")
    S, Y = np.vstack([s1, s2]), np.concatenate([y1, y2])
    for c in (1, 2):
        ref = brute_force_ap(S[:, c], Y == c, True)
        assert (rep.per_class[c] is None) == (ref is None)
        if ref is not None:
            assert abs(rep.per_class[c] - ref) <= 1e-12


def test_run_rejects_non_probability_rows():
    with pytest.raises(ValueError):
        DetectionRun([np.ones((2, 3))], [np.zeros(2, dtype=int)])


def test_per_view_columns():
    y = np.array([1, 0, 2, 1])
    run = DetectionRun([_onehot(y, 2), np.full((4, 3), 1 / 3)], [y, y], views=[2, 3])
    rep = evaluate_run(run, "mAP")
    assert set(rep.per_view) == {"v2", "v3", "Avg."}
    assert rep.per_view["v2"] == 1.0
    assert rep.per_view["Avg."] == pytest.approx((rep.per_view["v2"] + rep.per_view["v3"]) / 2)
    json.dumps(rep.to_json())


def test_protocol_table_average():
    t = protocol_table({"v1->v2": 0.8, "v1->v3": 0.6})
    assert t["Avg."] == pytest.approx(0.7)
