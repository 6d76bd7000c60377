import itertools
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mantrack.dynamics import ForceModelConfig
from mantrack.mfcolloc import (
    RankDeficientWarning, canonical_scale, coefficients, mf_propagate_ensemble, select_nodes, stack_snapshots, synthesize,
    synthesize_correction,
)

X0 = np.array([7078.0, 0.0, 0.0, 0.0, 5.2, 5.2])


def greedy_oracle(X, r):
    """Brute-force greedy: at every step take the column farthest from the current span."""
    chosen = []
    for _ in range(r):
        best, score = None, -1.0
        for j in range(X.shape[1]):
            if j in chosen:
                continue
            if chosen:
                B = X[:, chosen]
                res = X[:, j] - B @ np.linalg.lstsq(B, X[:, j], rcond=None)[0]
            else:
                res = X[:, j]
            if res @ res > score:
                best, score = j, res @ res
        chosen.append(best)
    return chosen


def test_first_node_has_largest_norm():
    X = np.array([[3.0, 0.0, 1.0], [0.0, 2.0, 1.0]])
    assert select_nodes(X, 1).node_ids[0] == 0


def test_full_rank_selects_every_sample():
    X = np.random.default_rng(1).standard_normal((8, 5))
    assert sorted(select_nodes(X, 5).node_ids) == list(range(5))


@pytest.mark.parametrize("seed", range(5))
def test_greedy_matches_brute_force(seed):
    X = np.random.default_rng(seed).standard_normal((4, 5))
    assert list(select_nodes(X, 3).node_ids) == greedy_oracle(X, 3)


def test_factor_matches_node_gramian():
    X = np.random.default_rng(2).standard_normal((10, 20))
    it = select_nodes(X, 6)
    G = X[:, it.node_ids].T @ X[:, it.node_ids]
    np.testing.assert_allclose(it.L @ it.L.T, G, atol=1e-10)
    assert np.all(np.diag(it.L) > 0)
    assert np.all(np.diff(it.pivots) <= 1e-12)


def test_rank_deficient_stops_early():
    rng = np.random.default_rng(3)
    X = rng.standard_normal((6, 2)) @ rng.standard_normal((2, 10))
    with pytest.warns(RankDeficientWarning):
        it = select_nodes(X, 5)
    assert it.r == 2 and it.status == "rank deficient"


def test_bad_r_rejected():
    with pytest.raises(ValueError):
        select_nodes(np.ones((2, 3)), 4)
    with pytest.raises(ValueError):
        select_nodes(np.ones((2, 3)), 0)


def test_nodes_are_reproduced():
    X = np.random.default_rng(4).standard_normal((9, 12))
    it = select_nodes(X, 4)
    c = coefficients(it, X[:, it.node_ids])
    np.testing.assert_allclose(c, np.eye(4), atol=1e-10)


def test_orthogonal_node_scaling():
    X = np.array([[2.0, 0.0], [0.0, 1.0], [0.0, 0.0]])
    it = select_nodes(X, 2)
    j = int(np.flatnonzero(it.node_ids == 1)[0])
    c = coefficients(it, 3.5 * X[:, 1])
    np.testing.assert_allclose(c, 3.5 * np.eye(2)[j], atol=1e-12)


def test_span_query_projects_exactly():
    rng = np.random.default_rng(5)
    X = rng.standard_normal((7, 10))
    it = select_nodes(X, 3)
    q = X[:, it.node_ids] @ rng.standard_normal(3)
    c = coefficients(it, q)
    assert np.linalg.norm(it.node_low_outputs @ c - q) < 1e-9 * np.linalg.norm(q)


def test_query_dimension_checked():
    it = select_nodes(np.eye(3), 2)
    with pytest.raises(ValueError):
        coefficients(it, np.ones(4))


def test_synthesize_needs_high_outputs():
    it = select_nodes(np.eye(3), 2)
    with pytest.raises(ValueError):
        synthesize(it, np.ones(2))
    it.node_high_outputs = np.arange(6.0).reshape(3, 2)
    np.testing.assert_array_equal(synthesize(it, np.array([0.0, 1.0])), [1.0, 3.0, 5.0])
    with pytest.raises(ValueError):
        synthesize(it, np.ones(3))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (5, 8), elements=st.floats(-10, 10)), st.integers(1, 5))
def test_pivots_non_increasing(X, r):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RankDeficientWarning)
        it = select_nodes(X, r)
    if it.r == 0:
        return
    assert np.all(np.diff(it.pivots) <= 1e-9 * it.pivots[0])
    assert len(set(it.node_ids.tolist())) == it.r


def _cloud(n, seed):
    rng = np.random.default_rng(seed)
    return X0 + rng.standard_normal((n, 6)) * np.array([1.0] * 3 + [1e-3] * 3)


def test_identical_models_reproduce_low_ensemble():
    cfg = ForceModelConfig.two_body()
    res = mf_propagate_ensemble(_cloud(40, 6), 0.0, [1800.0], cfg, cfg, r=10)
    node = res.interp.node_ids
    np.testing.assert_allclose(res.states[node], res.low_states[node], rtol=0, atol=1e-9)
    # off the nodes the surrogate is the projection onto the node span
    scale = canonical_scale()
    XL = stack_snapshots(res.low_states, scale)
    B = XL[:, node]
    proj = B @ np.linalg.lstsq(B, XL, rcond=None)[0]
    np.testing.assert_allclose(stack_snapshots(res.states, scale), proj, atol=1e-9)


def test_single_particle_is_its_own_node():
    res = mf_propagate_ensemble(X0[None], 0.0, [1000.0], ForceModelConfig.two_body(),
                                ForceModelConfig.low_fidelity(), r=5)
    from mantrack.dynamics import propagate_ensemble
    _, high, _ = propagate_ensemble(X0[None], 0.0, [1000.0], ForceModelConfig.low_fidelity())
    np.testing.assert_allclose(res.states[0, -1], high[0, -1], atol=1e-9)


def test_identical_particles_share_one_node():
    from mantrack.dynamics import propagate_ensemble
    X = np.vstack([X0] * 6)
    res = mf_propagate_ensemble(X, 0.0, [1000.0], ForceModelConfig.two_body(),
                                ForceModelConfig.low_fidelity(), r=4)
    assert res.interp.r == 1
    _, high, _ = propagate_ensemble(X0[None], 0.0, [1000.0], ForceModelConfig.low_fidelity())
    np.testing.assert_allclose(res.states[:, -1], np.broadcast_to(high[0, -1], (6, 6)), atol=1e-8)


def test_all_nodes_equals_high_fidelity():
    from mantrack.dynamics import propagate_ensemble
    # seven particles: a small cloud is an affine 6-dim family, so seven columns are independent
    X = _cloud(7, 7)
    hi = ForceModelConfig.low_fidelity()
    res = mf_propagate_ensemble(X, 0.0, [1500.0], ForceModelConfig.two_body(), hi, r=7)
    assert res.interp.r == 7
    _, high, _ = propagate_ensemble(X, 0.0, [1500.0], hi)
    np.testing.assert_allclose(res.states[:, -1], high[:, -1], atol=1e-6)


def test_failed_particles_are_flagged_and_skipped():
    from mantrack import constants as K
    X = np.vstack([_cloud(5, 8), [K.R_EARTH + 100.0, 0, 0, -1.0, 0.5, 0]])
    res = mf_propagate_ensemble(X, 0.0, [3600.0], ForceModelConfig.two_body(),
                                ForceModelConfig.low_fidelity(), r=3)
    assert not res.valid[-1] and res.valid[:-1].all()
    assert 5 not in res.interp.node_ids.tolist()


def test_correction_form_matches_span_synthesis_in_span(rng):
    XL = rng.standard_normal((12, 5))
    it = select_nodes(XL, 5)
    it.node_high_outputs = XL[:, it.node_ids] * 1.01 + 0.02
    q = XL @ rng.standard_normal((5, 3))
    c = coefficients(it, q)
    np.testing.assert_allclose(synthesize_correction(it, c, q), synthesize(it, c), atol=1e-12)


def test_correction_form_carries_a_constant_offset_off_span(rng):
    # high = low + d for every input: only the correction form recovers it away from the nodes
    XL = rng.standard_normal((12, 2))
    d = rng.standard_normal(12) * 1e-3
    it = select_nodes(XL, 1)
    it.node_high_outputs = it.node_low_outputs + d[:, None]
    q = XL[:, it.node_ids[0]] + rng.standard_normal(12) * 0.1
    c = coefficients(it, q)
    np.testing.assert_allclose(synthesize_correction(it, c, q), q + c[0] * d, atol=1e-14)
    assert np.max(np.abs(synthesize(it, c) - (q + d))) > 0.05
