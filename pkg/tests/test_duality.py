from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import seeds
from lqmart.duality import (PrimalNorm, dual_norm_bruteforce, duality_map, hsq_dual_witness, hsq_norm,
                            hsq_partial_sums, lr_norm, mean_value_gap, pairing, reverse_dual_doob_check,
                            sequence_norm, sum_intersection_duality_check)
from lqmart.errors import BadExponent, DimensionCap, NegativeEntry, ShapeMismatch, ZeroInput, ZeroVector
from lqmart.filtered_space import FiniteMeasureSpace, RandomLqSequence, build_filtered_space, dyadic_space, lq_norm, \
    tree_space


def conj(r):
    return r / (r - 1)


def adapted_instance(rng, n=2, d=2):
    sp = tree_space([2] * n, rng=rng)
    tgt = FiniteMeasureSpace(rng.uniform(0.5, 2.0, d))
    vals = rng.standard_normal((n, sp.n_samples, d))
    return sp, RandomLqSequence(sp, tgt, np.stack([sp.cond_exp(vals[k], k) for k in range(n)]))


def point_space():
    return build_filtered_space([1.0], [[[0]]])


# -- duality map ---------------------------------------------------------------------

def test_duality_map_hilbert():
    assert np.allclose(duality_map([3.0, 4.0], 2.0, [1, 1]), [0.6, 0.8], rtol=0, atol=1e-15)


def test_duality_map_single_point():
    assert np.allclose(duality_map([-5.0], 2.0), [-1.0])


def test_duality_map_closed_form():
    x = duality_map([1.0, 2.0], 3.0, [1, 1])
    assert abs(x @ np.array([1.0, 2.0]) - 9 ** (1 / 3)) < 1e-12
    assert abs(float(lq_norm(x, 1.5, [1, 1])) - 1) < 1e-12


def test_duality_map_errors():
    with pytest.raises(ZeroVector):
        duality_map([0.0, 0.0], 2.0)
    with pytest.raises(BadExponent):
        duality_map([1.0], 1.0)


@given(seeds, st.sampled_from([1.2, 1.5, 2.0, 3.0, 6.0]), st.integers(1, 6))
def test_duality_map_norms_exactly(seed, qc, d):
    rng = np.random.default_rng(seed)
    xs = rng.standard_normal(d)
    w = rng.uniform(0.1, 3.0, d)
    x = duality_map(xs, qc, w)
    ref = float(lq_norm(xs, qc, w))
    assert abs(float(lq_norm(x, conj(qc), w)) - 1) < 1e-12
    assert abs(float(np.sum(w * x * xs)) - ref) < 1e-12 * max(1.0, ref)


# -- H^{s_q}_p norm and pairing ------------------------------------------------------

def test_hsq_zero_and_one_entry():
    sp = dyadic_space(1)
    tgt = FiniteMeasureSpace(np.ones(2))
    assert hsq_norm(sp, RandomLqSequence(sp, tgt, np.zeros((1, 2, 2))), 3, 1.5) == 0
    x = np.array([1.0, -2.0])
    seq = RandomLqSequence(sp, tgt, np.broadcast_to(x, (1, 2, 2)).copy())
    assert abs(hsq_norm(sp, seq, 3, 1.5) - float(lq_norm(x, 1.5))) < 1e-12


def test_hsq_dyadic_hand_enumeration():
    # f_0 = +-1 on the two halves, f_1 = +-a below the first half, +-b below the second
    sp = dyadic_space(2)
    tgt = FiniteMeasureSpace(np.ones(1))
    a, b, p, q = 1.0, 3.0, 3.0, 1.5
    vals = np.array([[1, 1, -1, -1], [a, -a, b, -b]], dtype=float)[:, :, None]
    seq = RandomLqSequence(sp, tgt, vals)
    sA, sB = (1 + a ** q) ** (1 / q), (1 + b ** q) ** (1 / q)
    assert abs(hsq_norm(sp, seq, p, q) - (0.5 * sA ** p + 0.5 * sB ** p) ** (1 / p)) < 1e-12
    s = hsq_partial_sums(sp, seq, q)
    assert np.allclose(s[1], [sA, sA, sB, sB])


@given(seeds)
def test_partial_sums_nondecreasing(seed):
    sp, g = adapted_instance(np.random.default_rng(seed), n=3)
    s = hsq_partial_sums(sp, g, 1.7)
    assert np.all(np.diff(s, axis=0) >= -1e-12)


def test_pairing_examples():
    sp = dyadic_space(2)
    tgt = FiniteMeasureSpace(np.array([1.0, 2.0]))
    f = RandomLqSequence(sp, tgt, np.arange(16, dtype=float).reshape(2, 4, 2))
    g = RandomLqSequence(sp, tgt, np.ones((2, 4, 2)))
    assert pairing(sp, f, f.with_values(np.zeros((2, 4, 2)))) == 0
    assert pairing(sp, f, g) == pairing(sp, g, f)
    # sum over k, omega of 0.25 * (f[.,.,0] + 2 f[.,.,1])
    assert abs(pairing(sp, f, g) - 0.25 * (f.values[..., 0].sum() + 2 * f.values[..., 1].sum())) < 1e-12
    with pytest.raises(ShapeMismatch):
        pairing(sp, f, RandomLqSequence(sp, tgt, np.ones((1, 4, 2))))


@given(seeds, st.sampled_from([(1.5, 3.0), (3.0, 1.5), (2.0, 2.0), (2.5, 1.3)]))
def test_holder_bound(seed, pq):
    p, q = pq
    rng = np.random.default_rng(seed)
    sp, f = adapted_instance(rng)
    g = f.with_values(rng.standard_normal(f.values.shape))
    lhs = abs(pairing(sp, f, g))
    assert lhs <= hsq_norm(sp, f, p, q) * hsq_norm(sp, g, conj(p), conj(q)) * (1 + 1e-12) + 1e-12


# -- witnesses and brute force -------------------------------------------------------

def test_witness_one_term():
    sp = point_space()
    tgt = FiniteMeasureSpace(np.array([1.0, 1.0]))
    g = RandomLqSequence(sp, tgt, np.array([[[3.0, -1.0]]]))
    p, q = 3.0, 1.5
    h = hsq_dual_witness(sp, g, p, q)
    N = hsq_norm(sp, g, conj(p), conj(q))
    assert abs(hsq_norm(sp, h, p, q) - 1) < 1e-12
    assert abs(pairing(sp, h, g) - N) < 1e-12
    assert np.allclose(h.values[0, 0], duality_map(g.values[0, 0], conj(q)))


def test_witness_hilbert_attains():
    sp, g = adapted_instance(np.random.default_rng(3))
    h = hsq_dual_witness(sp, g, 2.0, 2.0)
    assert pairing(sp, h, g) / hsq_norm(sp, h, 2, 2) >= hsq_norm(sp, g, 2, 2) * (1 - 1e-12)


def test_witness_zero_input():
    sp, g = adapted_instance(np.random.default_rng(0))
    with pytest.raises(ZeroInput):
        hsq_dual_witness(sp, g.with_values(np.zeros_like(g.values)), 2.0, 3.0)


@pytest.mark.parametrize("p,q", [(1.5, 3.0), (3.0, 1.5)])
@given(seed=seeds)
def test_witness_constant(seed, p, q):
    sp, g = adapted_instance(np.random.default_rng(seed))
    h = hsq_dual_witness(sp, g, p, q)
    N = hsq_norm(sp, g, conj(p), conj(q))
    lo = min(q / p, conj(q) / conj(p))
    assert pairing(sp, h, g) / hsq_norm(sp, h, p, q) >= lo * N - 1e-9


def test_bruteforce_l2_one_step():
    sp = point_space()
    tgt = FiniteMeasureSpace(np.ones(3))
    g = RandomLqSequence(sp, tgt, np.array([[[1.0, -2.0, 2.0]]]))
    rep = dual_norm_bruteforce(sp, g, PrimalNorm.l2())
    assert abs(rep.value - 3.0) < 1e-6 and rep.converged
    doc = json.loads(rep.to_json())
    assert set(doc) == {"value", "certificate", "iterations", "converged"}


def test_bruteforce_dpq_dual():
    rng = np.random.default_rng(5)
    sp, g = adapted_instance(rng)
    g = g.with_values(rng.standard_normal(g.values.shape))
    p, q = 3.0, 1.5
    ref = sequence_norm(sp, g.target.weights, "Dpq", conj(p), conj(q), 2)(g.values)
    rep = dual_norm_bruteforce(sp, g, PrimalNorm("Dpq", p, q, "any"))
    assert abs(rep.value - ref) < 1e-6 * max(1.0, ref)


def test_bruteforce_hsq_band():
    sp, g = adapted_instance(np.random.default_rng(11))
    p, q = 1.5, 3.0
    N = hsq_norm(sp, g, conj(p), conj(q))
    val = dual_norm_bruteforce(sp, g, PrimalNorm.hsq(p, q)).value
    assert min(q / p, conj(q) / conj(p)) * N - 1e-6 <= val <= N + 1e-6


def test_bruteforce_zero_and_cap():
    sp, g = adapted_instance(np.random.default_rng(0))
    zero = g.with_values(np.zeros_like(g.values))
    assert dual_norm_bruteforce(sp, zero, PrimalNorm.hsq(2, 2)).value == 0
    big_sp = dyadic_space(4)
    big = RandomLqSequence(big_sp, FiniteMeasureSpace(np.ones(4)), np.ones((4, 16, 4)))
    with pytest.raises(DimensionCap):
        dual_norm_bruteforce(big_sp, big, PrimalNorm.l2())


# -- reverse dual Doob ---------------------------------------------------------------

def test_reverse_doob_p1_equality():
    sp, g = adapted_instance(np.random.default_rng(2), n=3, d=1)
    f = g.with_values(np.abs(g.values))
    lhs, rhs, holds = reverse_dual_doob_check(sp, f, 1.0)
    assert abs(lhs - rhs) < 1e-12 and holds


def test_reverse_doob_zero():
    sp, g = adapted_instance(np.random.default_rng(2))
    assert reverse_dual_doob_check(sp, g.with_values(np.zeros_like(g.values)), 0.5) == (0.0, 0.0, True)


def test_reverse_doob_errors():
    sp, g = adapted_instance(np.random.default_rng(2))
    with pytest.raises(NegativeEntry):
        reverse_dual_doob_check(sp, g.with_values(-np.abs(g.values) - 1), 0.5)
    with pytest.raises(BadExponent):
        reverse_dual_doob_check(sp, g.with_values(np.abs(g.values)), 1.5)


@given(seeds, st.sampled_from([0.3, 0.5, 0.8, 1.0]))
def test_reverse_doob_holds(seed, p):
    rng = np.random.default_rng(seed)
    sp = tree_space([2, 3, 2], rng=rng)
    f = RandomLqSequence(sp, FiniteMeasureSpace(np.ones(2)), rng.exponential(size=(3, sp.n_samples, 2)))
    assert reverse_dual_doob_check(sp, f, p)[2]


# -- sums and intersections ----------------------------------------------------------

def test_sum_intersection_l1_linf():
    sp = point_space()
    tgt = FiniteMeasureSpace(np.ones(2))
    g = RandomLqSequence(sp, tgt, np.array([[[3.0, -1.0]]]))
    rep = sum_intersection_duality_check(sp, (lr_norm(sp, [1, 1], 1), lr_norm(sp, [1, 1], np.inf)), g)
    # the intersection is l^1 here, dual l^inf; the sum's dual is max(l^inf, l^1)
    assert abs(rep["dual_of_intersection"] - 3.0) < 1e-9
    assert abs(rep["dual_of_sum"] - 4.0) < 1e-9
    assert rep["holds"]


def test_sum_intersection_same_norm():
    sp, g = adapted_instance(np.random.default_rng(4))
    X = lr_norm(sp, g.target.weights, 2, 2)
    rep = sum_intersection_duality_check(sp, (X, X), g)
    single = X.dual()(g.values)
    assert rep["holds"]
    assert abs(rep["dual_of_intersection"] - single) < 1e-6 and abs(rep["dual_of_sum"] - single) < 1e-6


def test_sum_intersection_mixed_and_zero():
    sp, g = adapted_instance(np.random.default_rng(0))
    w = g.target.weights
    rep = sum_intersection_duality_check(sp, (sequence_norm(sp, w, "Dpq", 3, 1.5, 2), lr_norm(sp, w, 2, 2)), g)
    assert rep["holds"]
    zero = sum_intersection_duality_check(sp, (lr_norm(sp, w, 2, 2), lr_norm(sp, w, 3, 2)),
                                          g.with_values(np.zeros_like(g.values)))
    assert zero["sum_of_duals"] == 0 and zero["dual_of_intersection"] == 0 and zero["holds"]


# -- mean value step -----------------------------------------------------------------

def test_mean_value_inequality_grid():
    x, a = np.meshgrid(np.linspace(1, 20, 200), np.linspace(1, 8, 100))
    assert np.all(mean_value_gap(x, a) >= -1e-9 * x ** a)
