import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from regionreg import diffcore as dc
from regionreg.attention import AttentionParams, attend_stack, position_encode, self_attend


def params_for(d, layers=1, seed=0):
    return AttentionParams.init(np.random.default_rng(seed), d, layers)


def test_hand_computed_two_region_fixture():
    p = params_for(2)
    p.layers[0]["phi"].data[:] = np.eye(2)
    p.layers[0]["psi"].data[:] = [[2.0, 0.0], [0.0, 1.0]]
    p.layers[0]["alpha"].data[:] = [[1.0, 2.0], [3.0, 4.0]]
    f = dc.Tensor([[1.0, 0.0], [0.0, 1.0]])
    out, w = self_attend(f, [True, True], p, 0)
    # logits = f phi (f psi)^T = [[2, 0], [0, 1]]; values = f alpha = [[1, 2], [3, 4]]
    w00 = math.exp(2) / (math.exp(2) + 1)
    w01 = 1 / (math.exp(2) + 1)
    w10 = 1 / (1 + math.e)
    w11 = math.e / (1 + math.e)
    expected = [[w00 * 1 + w01 * 3 + 1, w00 * 2 + w01 * 4 + 0],
                [w10 * 1 + w11 * 3 + 0, w10 * 2 + w11 * 4 + 1]]
    np.testing.assert_allclose(w, [[w00, w01], [w10, w11]], rtol=0, atol=1e-12)
    np.testing.assert_allclose(out.data, expected, rtol=0, atol=1e-12)


def test_single_unmasked_region_attends_to_itself(rng):
    p = params_for(4)
    f = dc.Tensor(rng.normal(size=(3, 4)))
    out, w = self_attend(f, [False, True, False], p, 0)
    assert w[1, 1] == 1.0
    np.testing.assert_allclose(out.data[1], f.data[1] @ p.layers[0]["alpha"].data + f.data[1], atol=1e-15)
    np.testing.assert_array_equal(out.data[[0, 2]], 0.0)


def test_zero_query_key_maps_give_uniform_weights(rng):
    p = params_for(4)
    p.layers[0]["phi"].data[:] = 0
    p.layers[0]["psi"].data[:] = 0
    _, w = self_attend(dc.Tensor(rng.normal(size=(4, 4))), [True, False, True, True], p, 0)
    np.testing.assert_allclose(w[:, [0, 2, 3]], 1 / 3, atol=1e-15)
    np.testing.assert_array_equal(w[:, 1], 0.0)


def test_as_printed_mode_collapses_to_own_value(rng):
    p = params_for(4)
    f = dc.Tensor(rng.normal(size=(3, 4)))
    out, _ = self_attend(f, [True] * 3, p, 0, mode="as_printed")
    np.testing.assert_allclose(out.data, f.data @ p.layers[0]["alpha"].data + f.data, atol=1e-12)


def test_all_masked_is_an_error(rng):
    with pytest.raises(ValueError):
        self_attend(dc.Tensor(rng.normal(size=(2, 4))), [False, False], params_for(4), 0)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.integers(1, 8))
def test_attention_rows_sum_to_one_over_unmasked(seed, n):
    rng = np.random.default_rng(seed)
    mask = rng.random(n) < 0.6
    mask[rng.integers(n)] = True
    p = params_for(6, seed=seed % 1000)
    _, w = self_attend(dc.Tensor(rng.normal(scale=3, size=(n, 6))), mask, p, 0)
    assert np.abs(w[:, mask].sum(axis=1) - 1).max() <= 1e-9
    assert (w[:, ~mask] == 0).all()


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_masked_rows_do_not_leak(seed):
    rng = np.random.default_rng(seed)
    mask = np.array([True, False, True, True, False])
    p = params_for(4, layers=2)
    f = rng.normal(size=(5, 4))
    g = f.copy()
    g[~mask] = rng.normal(scale=10, size=(2, 4))
    a = attend_stack(dc.Tensor(f), mask, p).data
    b = attend_stack(dc.Tensor(g), mask, p).data
    np.testing.assert_array_equal(a[mask], b[mask])
    np.testing.assert_array_equal(a[~mask], 0.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_permutation_equivariance_over_regions(seed):
    rng = np.random.default_rng(seed)
    p = params_for(4, layers=2)
    n = 5
    f = rng.normal(size=(n, 4))
    centroids = list(rng.normal(size=(n, 3)))
    mask = np.array([True, True, False, True, True])
    perm = rng.permutation(n)

    def run(f, c, m):
        pe = position_encode(c, m, p)
        return attend_stack(dc.add(dc.Tensor(f), pe), m, p).data

    a = run(f, centroids, mask)
    b = run(f[perm], [centroids[i] for i in perm], mask[perm])
    np.testing.assert_allclose(b, a[perm], atol=1e-12)


def test_position_encoding_examples(rng):
    p = params_for(4)
    c = [None, np.array([0.1, 0.2, 0.3]), None]
    pe = position_encode(c, [False, True, False], p).data
    assert np.count_nonzero(np.abs(pe).sum(axis=1)) == 1
    same = position_encode([np.ones(3), np.ones(3)], [True, True], p).data
    np.testing.assert_array_equal(same[0], same[1])
    for name in ("pe_w1", "pe_b1", "pe_w2"):
        getattr(p, name).data[:] = 0.0
    p.pe_b2.data[:] = [1.0, -2.0, 3.0, 0.5]
    pe = position_encode(list(rng.normal(size=(3, 3))), [True, False, True], p).data
    np.testing.assert_array_equal(pe, [[1, -2, 3, 0.5], [0, 0, 0, 0], [1, -2, 3, 0.5]])


def test_occupied_region_without_centroid_is_an_error():
    with pytest.raises(ValueError):
        position_encode([None], [True], params_for(4))


def test_full_stack_gradients():
    rng = np.random.default_rng(2)
    p = params_for(4, layers=1, seed=2)
    f0 = rng.normal(size=(3, 4))
    cents = list(rng.normal(size=(3, 3)))
    mask = np.array([True, True, True])
    w = rng.normal(size=(3, 4))

    def loss(f):
        return dc.sum(dc.mul(attend_stack(dc.add(f, position_encode(cents, mask, p)), mask, p), dc.Tensor(w)))

    assert dc.grad_check(loss, dc.Tensor(f0)) <= 1e-4
    for name, t in p.named().items():
        def g(x, name=name):
            if "." in name:
                _, i, k = name.split(".")
                saved = p.layers[int(i)][k]
                p.layers[int(i)][k] = x
                try:
                    return loss(dc.Tensor(f0))
                finally:
                    p.layers[int(i)][k] = saved
            saved = getattr(p, name)
            setattr(p, name, x)
            try:
                return loss(dc.Tensor(f0))
            finally:
                setattr(p, name, saved)
        assert dc.grad_check(g, dc.Tensor(t.data.copy())) <= 1e-4, name


def test_groups_attend_only_within_themselves(rng):
    p = params_for(4, layers=2)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    mask_a, mask_b = [True, False, True], [True, True, True]
    stacked = attend_stack(dc.Tensor(np.vstack([a, b])), mask_a + mask_b, p, groups=[0, 0, 0, 1, 1, 1])
    np.testing.assert_allclose(stacked.data[:3], attend_stack(dc.Tensor(a), mask_a, p).data, rtol=0, atol=1e-13)
    np.testing.assert_allclose(stacked.data[3:], attend_stack(dc.Tensor(b), mask_b, p).data, rtol=0, atol=1e-13)
