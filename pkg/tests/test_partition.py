import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from regionreg import diffcore as dc
from regionreg.partition import (BRANCH_HIDDEN, PartitionParams, assign_regions, branch_logits, occupancy,
                                 occupancy_bce, region_feature_sequence, score_points)


def make(d=5, n=3, seed=0):
    rng = np.random.default_rng(seed)
    p = PartitionParams.init(rng, d, n)
    # nonzero biases so the oracle exercises every term
    p.b1.data[:] = rng.normal(size=p.b1.shape)
    p.b2.data[:] = rng.normal(size=p.b2.shape)
    return p, rng


def oracle_logits(points, e, params):
    """Each branch evaluated on its own, from its own slice of the stored weights."""
    n = params.n_regions
    out = np.zeros((len(points), n))
    for i, x in enumerate(points):
        z = np.concatenate([x, e])
        for k in range(n):
            cols = slice(k * BRANCH_HIDDEN, (k + 1) * BRANCH_HIDDEN)
            h = np.maximum(z @ params.w1.data[:, cols] + params.b1.data[cols], 0.0)
            out[i, k] = h @ params.w2.data[cols, k] + params.b2.data[k]
    return out


def test_single_region_scores_are_one(rng):
    p = PartitionParams.init(rng, 4, 1)
    s = score_points(rng.normal(size=(7, 3)), dc.Tensor(rng.normal(size=4)), p)
    np.testing.assert_array_equal(s.data, 1.0)


def test_zero_parameters_give_uniform_scores(rng):
    p = PartitionParams.init(rng, 4, 5)
    for t in p.named().values():
        t.data[:] = 0.0
    s = score_points(rng.normal(size=(6, 3)), dc.Tensor(rng.normal(size=4)), p)
    np.testing.assert_array_equal(s.data, 0.2)


@pytest.mark.parametrize("seed", range(5))
def test_scores_match_independent_branch_oracle(seed):
    p, rng = make(seed=seed)
    pts, e = rng.normal(size=(4, 3)), rng.normal(size=5)
    z = oracle_logits(pts, e, p)
    expected = np.array([[math.exp(v) / sum(math.exp(u) for u in row) for v in row] for row in z])
    np.testing.assert_allclose(score_points(pts, dc.Tensor(e), p).data, expected, rtol=0, atol=1e-12)


def test_off_block_weights_are_ignored():
    p, rng = make()
    pts, e = rng.normal(size=(4, 3)), dc.Tensor(rng.normal(size=5))
    before = branch_logits(pts, e, p).data
    p.w2.data[0, 1] = 123.0  # row of branch 0, column of branch 1
    np.testing.assert_array_equal(branch_logits(pts, e, p).data, before)


def test_embedding_dimension_mismatch_is_an_error():
    p, rng = make(d=5)
    with pytest.raises(dc.ShapeError):
        score_points(rng.normal(size=(4, 3)), dc.Tensor(np.zeros(6)), p)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.integers(1, 8))
def test_scores_are_distributions_and_labels_partition(seed, n):
    rng = np.random.default_rng(seed)
    p = PartitionParams.init(rng, 6, n)
    pts = rng.normal(scale=2.0, size=(30, 3))
    s = score_points(pts, dc.Tensor(rng.normal(size=6)), p).data
    assert np.abs(s.sum(axis=1) - 1).max() <= 1e-6
    labels, counts = assign_regions(s)
    assert counts.sum() == 30 and len(labels) == 30
    np.testing.assert_array_equal(labels, s.argmax(axis=1))


def test_assign_regions_tie_break_and_one_hot():
    labels, counts = assign_regions(np.full((4, 3), 1 / 3))
    np.testing.assert_array_equal(labels, 0)
    np.testing.assert_array_equal(counts, [4, 0, 0])
    labels, counts = assign_regions(np.eye(3)[[2, 0, 2, 1]])
    np.testing.assert_array_equal(labels, [2, 0, 2, 1])
    np.testing.assert_array_equal(counts, [1, 1, 2])


def test_rfs_single_region_is_global_max(rng):
    feats = dc.Tensor(rng.normal(size=(9, 4)))
    rfs, occ = region_feature_sequence(feats, np.zeros(9, dtype=int), 3)
    np.testing.assert_array_equal(rfs.data[0], feats.data.max(axis=0))
    np.testing.assert_array_equal(rfs.data[1:], 0.0)
    np.testing.assert_array_equal(occ, [True, False, False])


def test_rfs_each_point_its_own_region(rng):
    feats = dc.Tensor(rng.normal(size=(5, 4)))
    rfs, occ = region_feature_sequence(feats, np.arange(5), 5)
    np.testing.assert_array_equal(rfs.data, feats.data)
    assert occ.all()


@pytest.mark.parametrize("seed", range(10))
def test_rfs_matches_group_by_oracle(seed):
    rng = np.random.default_rng(seed)
    feats = rng.normal(size=(40, 6))
    labels = rng.integers(0, 5, size=40)
    rfs, occ = region_feature_sequence(dc.Tensor(feats), labels, 5)
    for k in range(5):
        rows = [feats[i] for i in range(40) if labels[i] == k]
        if rows:
            assert occ[k]
            np.testing.assert_allclose(rfs.data[k], np.max(rows, axis=0), atol=1e-12)
        else:
            assert not occ[k] and not rfs.data[k].any()


def test_occupancy_bounds_and_single_branch(rng):
    p = PartitionParams.init(rng, 4, 1)
    pts, e = rng.normal(size=(20, 3)), dc.Tensor(rng.normal(size=4))
    occ = occupancy(pts, e, p).data
    assert ((occ > 0) & (occ < 1)).all()
    z = branch_logits(pts, e, p).data[:, 0]
    np.testing.assert_allclose(occ, 1 / (1 + np.exp(-z)), atol=1e-15)


def test_occupancy_is_max_of_branch_sigmoids(rng):
    p = PartitionParams.init(rng, 4, 2)
    for t in p.named().values():
        t.data[:] = 0.0
    p.b2.data[:] = [3.0, -3.0]
    occ = occupancy(np.zeros((1, 3)), dc.Tensor(np.zeros(4)), p).data
    assert occ[0] == pytest.approx(1 / (1 + math.exp(-3)), abs=1e-15)
    assert occ[0] == pytest.approx(0.9526, abs=1e-4)


def test_bce_matches_direct_formula(rng):
    z = rng.normal(size=(10, 3))
    y = rng.random(10) < 0.5
    p = 1 / (1 + np.exp(-z.max(axis=1)))
    expected = -np.mean(np.where(y, np.log(p), np.log(1 - p)))
    assert occupancy_bce(dc.Tensor(z), y).item() == pytest.approx(expected, abs=1e-12)


def test_scores_and_occupancy_gradients():
    p, rng = make(d=4, n=2, seed=3)
    pts, e = rng.normal(size=(6, 3)), rng.normal(size=4)
    w = rng.normal(size=(6, 2))
    y = np.array([1, 0, 1, 1, 0, 0], dtype=bool)
    for name, t in p.named().items():
        def f(x, name=name):
            saved = getattr(p, name)
            setattr(p, name, x)
            try:
                s = score_points(pts, dc.Tensor(e), p)
                return dc.add(dc.sum(dc.mul(s, dc.Tensor(w))),
                              dc.add(dc.sum(occupancy(pts, dc.Tensor(e), p)),
                                     occupancy_bce(branch_logits(pts, dc.Tensor(e), p), y)))
            finally:
                setattr(p, name, saved)
        assert dc.grad_check(f, dc.Tensor(t.data.copy())) <= 1e-4, name
    assert dc.grad_check(lambda x: dc.sum(dc.mul(score_points(pts, x, p), dc.Tensor(w))),
                         dc.Tensor(e)) <= 1e-4
