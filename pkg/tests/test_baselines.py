import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from camfusion.baselines import (
    NAIVE,
    FusionStrategy,
    avg_pool,
    cos_sim_medoid,
    cos_sim_medoid_index,
    l1_medoid,
    l1_medoid_index,
)

import oracles
from scenarios import medoid_set


def test_avg_pool_examples():
    np.testing.assert_allclose(avg_pool([[1.0, 0.0], [0.0, 1.0]]), [0.70710678, 0.70710678], atol=1e-8)
    v = np.array([[0.6, 0.8]])
    assert np.array_equal(avg_pool(v), v[0])
    same = np.tile([0.28, 0.96], (4, 1))
    assert np.array_equal(avg_pool(same), same[0])


def test_avg_pool_seed0_matches_mean_then_normalize():
    x = np.random.default_rng(0).standard_normal((5, 6))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    m = [sum(col) / 5 for col in zip(*x.tolist())]
    norm = sum(c * c for c in m) ** 0.5
    np.testing.assert_allclose(avg_pool(x), [c / norm for c in m], atol=1e-14)


def test_medoid_examples():
    v, w = [0.6, 0.8], [1.0, 0.0]
    assert l1_medoid([v, v, w]).tolist() == v
    assert l1_medoid([[0.0], [1.0], [10.0]]).tolist() == [1.0]
    assert cos_sim_medoid([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]).tolist() == [1.0, 0.0]
    assert cos_sim_medoid_index(np.tile([0.6, 0.8], (3, 1))) == 0
    assert l1_medoid_index(np.tile([0.6, 0.8], (3, 1))) == 0
    # two-element sets always tie, so the first element wins
    assert cos_sim_medoid_index([[0.6, 0.8], [1.0, 0.0]]) == 0
    assert l1_medoid_index([[1.0, 0.0], [0.6, 0.8]]) == 0


def test_six_random_vectors_match_brute_force():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((6, 4))
    assert l1_medoid_index(x) == oracles.l1_medoid_index(x.tolist())
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    assert cos_sim_medoid_index(x) == oracles.cos_medoid_index(x.tolist())


def test_random_sets_match_brute_force_with_ties():
    rng = np.random.default_rng(11)
    for _ in range(300):
        x = medoid_set(rng)
        assert l1_medoid_index(x) == oracles.l1_medoid_index(x.tolist())
        assert cos_sim_medoid_index(x) == oracles.cos_medoid_index(x.tolist())


@pytest.mark.parametrize("fn", [avg_pool, l1_medoid, cos_sim_medoid])
def test_empty_input_rejected(fn):
    with pytest.raises(ValueError):
        fn(np.zeros((0, 3)))


def _unique_min(cost):
    s = np.sort(cost)
    return len(s) == 1 or s[1] - s[0] > 1e-9


@given(st.integers(0, 2**16))
def test_medoids_are_members_and_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((int(rng.integers(1, 9)), 5))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    perm = rng.permutation(len(x))
    l1 = np.abs(x[:, None] - x[None]).sum(axis=(1, 2))
    cos = -(x @ x.T).sum(axis=1)
    for fn, cost in ((l1_medoid, l1), (cos_sim_medoid, cos)):
        out = fn(x)
        assert any(np.array_equal(out, row) for row in x)
        if _unique_min(cost):
            assert np.array_equal(fn(x[perm]), out)
    np.testing.assert_allclose(avg_pool(x[perm]), avg_pool(x), atol=1e-14)


def test_strategy_registry():
    assert set(NAIVE) == {FusionStrategy.AVG_POOL, FusionStrategy.L1_MEDOID,
                          FusionStrategy.COS_SIM_MEDOID}
    assert FusionStrategy("cosmed") is FusionStrategy.COS_SIM_MEDOID
