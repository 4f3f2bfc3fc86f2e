from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import seeds
from lqmart.errors import BadExponent, BadProbabilities, LevelOutOfRange, NonRefining, ShapeMismatch
from lqmart.filtered_space import (FiniteMeasureSpace, RandomLqSequence, build_filtered_space,
                                   conditional_expectation, dumps, dyadic_space, is_mds, loads, lp_moment,
                                   lq_norm, mds_project, random_mds, tree_space)


def dyadic4():
    return build_filtered_space([0.25] * 4, [[[0, 1], [2, 3]], [[0], [1], [2], [3]]])


def random_space(seed):
    rng = np.random.default_rng(seed)
    branching = [int(b) for b in rng.integers(1, 4, size=rng.integers(1, 4))]
    return tree_space(branching, rng=rng), rng


# -- construction -------------------------------------------------------------

def test_dyadic_from_partitions():
    sp = dyadic4()
    assert sp.n_levels == 2
    assert [sp.n_blocks(i) for i in (-1, 0, 1)] == [1, 2, 4]
    ref = dyadic_space(2)
    for i in range(2):
        assert np.array_equal(sp.labels(i), ref.labels(i))


def test_single_sample_is_trivial():
    sp = build_filtered_space([1.0], [[[0]], [[0]]])
    X = np.array([[3.0, -1.0]])
    for i in (-1, 0, 1):
        assert np.array_equal(sp.cond_exp(X, i), X)


def test_not_a_refinement_chain():
    with pytest.raises(NonRefining):
        build_filtered_space([0.5, 0.5], [[["a", "b"]], [["a"]], [["b"]]], ids=["a", "b"])
    with pytest.raises(NonRefining):
        build_filtered_space([0.25] * 4, [[[0, 1], [2, 3]], [[0, 2], [1, 3]]])


@pytest.mark.parametrize("probs", [[0.5, 0.6], [1.0, 0.0], [0.5, 0.5 + 1e-9]])
def test_bad_probabilities(probs):
    with pytest.raises(BadProbabilities):
        build_filtered_space(probs, [[[0], [1]]])


def test_measure_space_needs_positive_weights():
    with pytest.raises(ValueError):
        FiniteMeasureSpace(np.array([1.0, 0.0]))
    with pytest.raises(ShapeMismatch):
        FiniteMeasureSpace(np.array([]))


# -- conditional expectation ----------------------------------------------------

def test_cond_exp_examples():
    sp = dyadic4()
    X = np.array([1.0, 2.0, 3.0, 4.0])
    assert np.allclose(conditional_expectation(sp, X, -1), 2.5)
    assert np.allclose(conditional_expectation(sp, X, 0), [1.5, 1.5, 3.5, 3.5])
    assert np.array_equal(conditional_expectation(sp, X, 1), X)
    with pytest.raises(LevelOutOfRange):
        sp.cond_exp(X, 2)
    with pytest.raises(LevelOutOfRange):
        sp.cond_exp(X, -2)


@given(seeds)
def test_tower_property(seed):
    sp, rng = random_space(seed)
    X = rng.standard_normal((sp.n_samples, 2))
    for i in range(-1, sp.n_levels):
        for j in range(-1, sp.n_levels):
            lhs = sp.cond_exp(sp.cond_exp(X, j), i)
            assert np.allclose(lhs, sp.cond_exp(X, min(i, j)), atol=1e-12)


@given(seeds, st.floats(1.0, 6.0))
def test_conditional_expectation_contracts(seed, p):
    sp, rng = random_space(seed)
    X = rng.standard_normal(sp.n_samples)
    for i in range(-1, sp.n_levels):
        assert lp_moment(sp, sp.cond_exp(X, i), p) <= lp_moment(sp, X, p) + 1e-12


# -- norms and moments ----------------------------------------------------------

def test_lq_norm_examples():
    assert lq_norm([2.0], 3) == pytest.approx(2.0)
    assert lq_norm([0.0, 0.0], 1.5) == 0.0
    assert lq_norm([3.0, 4.0], 2, [1.0, 1.0]) == pytest.approx(5.0)
    with pytest.raises(BadExponent):
        lq_norm([1.0], 0.5)


@given(seeds, st.floats(1.0, 8.0), st.floats(-5, 5))
def test_lq_norm_homogeneous_and_subadditive(seed, q, c):
    rng = np.random.default_rng(seed)
    w = rng.uniform(0.1, 2, 4)
    u, v = rng.standard_normal((2, 4))
    assert lq_norm(c * u, q, w) == pytest.approx(abs(c) * lq_norm(u, q, w), rel=1e-12, abs=1e-12)
    assert lq_norm(u + v, q, w) <= lq_norm(u, q, w) + lq_norm(v, q, w) + 1e-12


def test_lp_moment_examples():
    sp = build_filtered_space([0.25, 0.75], [[[0], [1]]])
    assert lp_moment(sp, np.array([2.0, 0.0]), 2) == pytest.approx(1.0)
    assert lp_moment(sp, np.array([-3.0, -3.0]), 1.7) == pytest.approx(3.0)
    fair = build_filtered_space([0.5, 0.5], [[[0], [1]]])
    assert lp_moment(fair, np.array([1.0, -1.0]), 4) == pytest.approx(1.0)
    with pytest.raises(BadExponent):
        lp_moment(sp, np.array([1.0, 1.0]), 0.0)


# -- martingale differences -------------------------------------------------------

def test_is_mds_examples():
    sp = dyadic4()
    tgt = FiniteMeasureSpace.uniform(1)
    assert is_mds(sp, RandomLqSequence(sp, tgt, np.zeros((2, 4, 1))))[0]
    ok, viol = is_mds(sp, RandomLqSequence(sp, tgt, np.ones((1, 4, 1))))
    assert not ok and viol == pytest.approx(1.0)
    pm = np.array([[1, 1, -1, -1], [1, -1, 1, -1]], dtype=float)[:, :, None]
    assert is_mds(sp, RandomLqSequence(sp, tgt, pm)) == (True, 0.0)


def test_mds_project_examples():
    sp = dyadic4()
    tgt = FiniteMeasureSpace.uniform(1)
    f = np.zeros((2, 4, 1))
    f[1, :, 0] = [1, 2, 3, 4]
    out = mds_project(sp, RandomLqSequence(sp, tgt, f))
    assert np.allclose(out.values[1, :, 0], [-0.5, 0.5, -0.5, 0.5])
    const = mds_project(sp, RandomLqSequence(sp, tgt, np.full((2, 4, 1), 7.0)))
    assert np.allclose(const.values, 0)


@given(seeds)
def test_mds_project_is_idempotent(seed):
    sp, rng = random_space(seed)
    tgt = FiniteMeasureSpace(rng.uniform(0.5, 2, 2))
    raw = rng.standard_normal((sp.n_levels, sp.n_samples, 2))
    adapted = RandomLqSequence(sp, tgt, np.stack([sp.cond_exp(raw[i], i) for i in range(sp.n_levels)]))
    once = mds_project(sp, adapted)
    assert is_mds(sp, once)[0]
    assert np.allclose(mds_project(sp, once).values, once.values, atol=1e-12)
    d = random_mds(sp, tgt, rng)
    assert np.allclose(mds_project(sp, d).values, d.values, atol=1e-12)


# -- serialization ------------------------------------------------------------------

@given(seeds)
def test_json_round_trip_is_bit_exact(seed):
    sp, rng = random_space(seed)
    seq = random_mds(sp, FiniteMeasureSpace(rng.uniform(0.5, 2, 3)), rng)
    back = loads(dumps(seq))
    assert np.array_equal(back.values, seq.values)
    assert np.array_equal(back.space.probs, seq.space.probs)
    assert np.array_equal(back.target.weights, seq.target.weights)
    for i in range(sp.n_levels):
        assert np.array_equal(back.space.labels(i), sp.labels(i))
