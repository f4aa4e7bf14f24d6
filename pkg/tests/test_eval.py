import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from mrdesc import eval as ev
from mrdesc.eval import KeypointSet

TWENTY = ([0.1, 0.2, 0.2, 0.35, 0.4, 0.5, 0.55, 0.6, 0.6, 0.7, 0.8, 0.9, 1.0, 1.1, 1.1, 1.3, 1.4, 1.5, 1.7, 2.0],
          [1, 1, 0, 1, 1, 1, 0, 1, 1, 0, 1, 0, 1, 0, 0, 1, 0, 0, 1, 0])


def kp(positions, descriptors):
    return KeypointSet(np.asarray(positions, dtype=float), np.asarray(descriptors, dtype=float))


# fpr95

def test_fpr95_separated():
    assert ev.fpr95([0.1, 0.2, 0.3, 1.0, 2.0], [1, 1, 1, 0, 0]) == 0.0


def test_fpr95_ties_admitted_together():
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 2, 30)
    labels[:2] = [0, 1]
    assert ev.fpr95(np.full(30, 0.7), labels) == 1.0


def test_fpr95_twenty_scores():
    value = ev.fpr95(*TWENTY)
    assert value == oracles.fpr95_sweep(*TWENTY)
    # 11 positives: 95% needs all of them, reached at d = 1.7 with 8 of 9 negatives admitted
    assert value == 8 / 9


def test_fpr95_rejects_one_class():
    with pytest.raises(ev.UndefinedMetricError):
        ev.fpr95([0.1, 0.2], [1, 1])
    with pytest.raises(ev.UndefinedMetricError):
        ev.fpr95([0.1, 0.2], [0, 0])
    with pytest.raises(ValueError):
        ev.fpr95([-1.0, 0.2], [0, 1])


def test_fpr95_random_instances():
    rng = np.random.default_rng(1)
    for _ in range(200):
        d, y = oracles.random_scores(rng)
        assert ev.fpr95(d, y) == oracles.fpr95_sweep(d, y)


def test_roc_points_end_at_one():
    roc = ev.roc_points(*TWENTY)
    assert roc[-1][1:] == (1.0, 1.0)
    assert [t for t, _, _ in roc] == sorted(set(TWENTY[0]))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 30), st.integers(0, 1)), min_size=2, max_size=50))
def test_fpr95_rank_invariant(rows):
    d = np.array([r[0] for r in rows], dtype=float)
    y = np.array([r[1] for r in rows])
    if y.all() or not y.any():
        return
    base = ev.fpr95(d, y)
    assert ev.fpr95(d ** 2 + 3 * d + 1, y) == base
    assert ev.fpr95(np.sqrt(d), y) == base


# nearest neighbours

def test_nn_identical_sets():
    desc = np.random.default_rng(2).standard_normal((10, 8))
    a = kp(np.zeros((10, 2)), desc)
    assert ev.nn_match(a, a) == [(i, i, 0.0) for i in range(10)]


def test_nn_single_target():
    a = kp(np.zeros((5, 2)), np.random.default_rng(3).standard_normal((5, 4)))
    b = kp([[0, 0]], [[1, 1, 1, 1]])
    assert [j for _, j, _ in ev.nn_match(a, b)] == [0] * 5


def test_nn_ties_go_to_lower_index():
    a = kp([[0, 0]], [[0.0, 0.0]])
    b = kp(np.zeros((3, 2)), [[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
    assert ev.nn_match(a, b)[0][1] == 0


def test_nn_random_instances():
    rng = np.random.default_rng(4)
    for _ in range(150):
        da, db = oracles.random_descriptors(rng)
        got = ev.nn_match(kp(np.zeros((len(da), 2)), da), kp(np.zeros((len(db), 2)), db))
        assert got == oracles.nn(da.tolist(), db.tolist())


def test_mutual_examples():
    desc = np.random.default_rng(5).standard_normal((6, 3))
    a = kp(np.zeros((6, 2)), desc)
    assert len(ev.mutual_nn(a, a)) == 6
    a2 = kp(np.zeros((2, 2)), [[0.0], [0.5]])
    b2 = kp(np.zeros((2, 2)), [[0.1], [5.0]])
    assert [(i, j) for i, j, _ in ev.mutual_nn(a2, b2)] == [(0, 0)]


def test_mutual_random_instances():
    rng = np.random.default_rng(6)
    for _ in range(150):
        da, db = oracles.random_descriptors(rng)
        got = ev.mutual_nn(kp(np.zeros((len(da), 2)), da), kp(np.zeros((len(db), 2)), db))
        assert got == oracles.mutual(da.tolist(), db.tolist())


def test_mutual_symmetric():
    rng = np.random.default_rng(7)
    for _ in range(50):
        a, b = (kp(np.zeros((len(d), 2)), d) for d in oracles.random_descriptors(rng))
        ab = [(i, j) for i, j, _ in ev.mutual_nn(a, b)]
        ba = [(j, i) for i, j, _ in ev.mutual_nn(b, a)]
        assert sorted(ab) == sorted(ba)


# matching score and mAP

def test_matching_score_identity():
    rng = np.random.default_rng(8)
    a = kp(rng.uniform(0, 100, (20, 2)), rng.standard_normal((20, 8)))
    assert ev.matching_score(a, a, np.eye(3)) == 1.0
    assert ev.average_precision(a, a, np.eye(3)) == 1.0


def test_matching_score_shuffled_descriptors():
    rng = np.random.default_rng(9)
    pos = np.stack(np.meshgrid(np.arange(10) * 20.0, np.arange(5) * 20.0), -1).reshape(-1, 2)
    desc = rng.standard_normal((50, 16))
    a = kp(pos, desc)
    scores = []
    for _ in range(40):
        b = kp(pos, desc[rng.permutation(50)])
        s = ev.matching_score(a, b, np.eye(3))
        assert s == oracles.matching_score(a, b, np.eye(3))
        scores.append(s)
    assert np.mean(scores) == pytest.approx(1 / 50, abs=0.02)


def test_no_ground_truth_is_undefined():
    a = kp([[0, 0]], [[1.0]])
    b = kp([[50, 50]], [[1.0]])
    with pytest.raises(ev.UndefinedMetricError):
        ev.matching_score(a, b, np.eye(3))
    with pytest.raises(ev.UndefinedMetricError):
        ev.mean_average_precision([(a, b, np.eye(3))])


def test_ground_truth_one_to_one():
    a = kp([[0, 0], [1, 0]], [[0.0], [1.0]])
    b = kp([[0.5, 0]], [[0.0]])
    assert ev.ground_truth(a, b, np.eye(3)) == {(0, 0)}


def test_ap_single_correct_last():
    pos = [[0, 0], [20, 0], [40, 0], [60, 0]]
    a = kp(pos, [[0.0], [10.0], [20.0], [100.0]])
    b = kp(pos, [[20.5], [0.1], [10.2], [130.0]])
    assert ev.average_precision(a, b, np.eye(3)) == pytest.approx(1 / 4)
    assert ev.matching_score(a, b, np.eye(3)) == 1 / 4


def test_fifteen_keypoint_ap():
    rng = np.random.default_rng(10)
    a, b, h = oracles.random_matching_instance(rng, n_max=15)
    while len(ev.ground_truth(a, b, h)) == 0:
        a, b, h = oracles.random_matching_instance(rng, n_max=15)
    assert ev.average_precision(a, b, h) == oracles.average_precision(a, b, h)


def test_matching_random_instances():
    rng = np.random.default_rng(11)
    checked = 0
    while checked < 120:
        a, b, h = oracles.random_matching_instance(rng)
        if not oracles.ground_truth(a.positions.tolist(), b.positions.tolist(), h, 3.0):
            with pytest.raises(ev.UndefinedMetricError):
                ev.matching_score(a, b, h)
            continue
        assert ev.ground_truth(a, b, h) == oracles.ground_truth(a.positions.tolist(), b.positions.tolist(), h, 3.0)
        assert ev.matching_score(a, b, h) == oracles.matching_score(a, b, h)
        assert ev.mean_average_precision([(a, b, h)]) == oracles.average_precision(a, b, h)
        checked += 1


@pytest.mark.parametrize("scale", [0.25, 0.5, 2.0, 8.0, 1024.0])
def test_descriptor_scale_invariance(scale):
    rng = np.random.default_rng(12)
    for _ in range(20):
        a, b, h = oracles.random_matching_instance(rng, n_max=30)
        a2, b2 = KeypointSet(a.positions, a.descriptors * scale), KeypointSet(b.positions, b.descriptors * scale)
        assert [m[:2] for m in ev.nn_match(a, b)] == [m[:2] for m in ev.nn_match(a2, b2)]
        assert [m[:2] for m in ev.mutual_nn(a, b)] == [m[:2] for m in ev.mutual_nn(a2, b2)]
        if ev.ground_truth(a, b, h):
            assert ev.matching_score(a, b, h) == ev.matching_score(a2, b2, h)
            assert ev.average_precision(a, b, h) == ev.average_precision(a2, b2, h)


def test_matching_score_bounded():
    rng = np.random.default_rng(13)
    for _ in range(30):
        a, b, h = oracles.random_matching_instance(rng)
        if ev.ground_truth(a, b, h):
            assert 0.0 <= ev.matching_score(a, b, h) <= 1.0


def test_homography_checks():
    with pytest.raises(ev.HomographyError):
        ev.check_homography(np.zeros(9))
    with pytest.raises(ev.HomographyError):
        ev.check_homography([[1, 2, 0], [2, 4, 0], [0, 0, 1]])
    with pytest.raises(ev.HomographyError):
        ev.check_homography(np.eye(2))
    np.testing.assert_array_equal(ev.check_homography(2 * np.eye(3)), np.eye(3))


# exchange formats

def test_descriptor_file_round_trip(tmp_path):
    rng = np.random.default_rng(14)
    desc = rng.standard_normal((7, 128)).astype(np.float32)
    pos = rng.uniform(0, 500, (7, 2)).round(2)
    ev.write_descriptors(tmp_path / "d.txt", pos, desc)
    back = ev.read_descriptors(tmp_path / "d.txt")
    np.testing.assert_array_equal(back.descriptors.astype(np.float32), desc)
    np.testing.assert_allclose(back.positions, pos)


def test_bad_descriptor_file(tmp_path):
    (tmp_path / "d.txt").write_text("0 0 1 2\n0 0 1\n")
    with pytest.raises(ValueError, match=":2"):
        ev.read_descriptors(tmp_path / "d.txt")


def test_pair_distances_exact():
    rng = np.random.default_rng(15)
    a, b = rng.standard_normal((6, 5)), rng.standard_normal((4, 5))
    pairs = np.array([[0, 1, 1], [5, 3, 0], [2, 2, 1]])
    got = ev.pair_distances(a, b, pairs)
    assert got.tolist() == [oracles.dist(a[i].tolist(), b[j].tolist()) for i, j, _ in pairs]
    with pytest.raises(IndexError):
        ev.pair_distances(a, b, np.array([[6, 0, 1]]))
