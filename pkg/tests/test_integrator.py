from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import seeds
from lqmart.errors import ConfigInvalid, NotConditionallyCentered, NotPredictable, UnannotatedIncrement
from lqmart.filtered_space import FiniteMeasureSpace, lq_norm
from lqmart.integrator import (AnnotatedIncreasing, BundleConfig, OperatorProcess, accessible_norms,
                               accessible_odd_sequence, accessible_regime, bdg_check, bracket_parts,
                               continuous_part_norm, coordinate_brackets, decompose_increasing,
                               elementary_integral, gamma_norm_mc, gamma_norm_sqfn, integral_parts, jump_measure,
                               main_si_report, path_values, qlc_field, quadratic_variation, simulate_bundle)
from lqmart.norms import norm_Dpq, norm_Dqq, norm_S
from lqmart.random_measure import MarkSpace, compensated_integral, simulate_poisson_rm

MIXED = {"grid_n": 2, "T": 1.0, "H_dim": 2,
         "continuous": {"G": [[1.0, 0.3], [0.0, 0.7]], "state_coef": 0.5},
         "qlc_jumps": {"rate": 0.8, "marks": [[1.0, 0.0], [0.5, -1.0]], "mark_weights": [1.0, 0.6],
                       "state_coef": 0.5},
         "accessible": {"times": [0.5, 1.0], "dists": [{"values": [[1.0, 0.5], [-0.5, -0.25]],
                                                        "probs": [1 / 3, 2 / 3]}], "state_coef": 0.4}}


def random_config(rng, grid_n=2):
    H = 2
    return {"grid_n": grid_n, "T": 1.0, "H_dim": H,
            "continuous": {"G": rng.standard_normal((H, H)).tolist(), "state_coef": float(rng.uniform(0, 1))},
            "qlc_jumps": {"rate": float(rng.uniform(0.2, 0.9)), "marks": rng.standard_normal((1, H)).tolist(),
                          "state_coef": float(rng.uniform(0, 1))},
            "accessible": {"times": [1.0], "dists": [{"values": [[1.0, -0.5], [-1.0, 0.5]], "probs": [0.5, 0.5]}],
                           "state_coef": float(rng.uniform(0, 1))}}


def history_operator(bundle, rng, target):
    A = rng.standard_normal((bundle.n_cells, target.n_points, bundle.config.H_dim))
    return OperatorProcess.from_history(
        bundle, lambda c, M, cnt: A[c][None] * (1 + 0.3 * np.tanh(M[:, :1]))[:, :, None], target)


def sem(x):
    return float(np.std(x) / np.sqrt(len(x)))


TGT = FiniteMeasureSpace(np.array([1.0, 0.7, 1.3]))


# -- configuration and simulation ----------------------------------------------------------

def test_config_errors():
    with pytest.raises(ConfigInvalid):
        BundleConfig.from_dict({"grid_n": 2, "H_dim": 2, "continuous": {"G": [[1.0]]}})
    with pytest.raises(ConfigInvalid):
        BundleConfig.from_dict({"grid_n": 2, "accessible": {"times": [0.3], "dists": [
            {"values": [[1.0], [-1.0]], "probs": [0.5, 0.5]}]}})
    with pytest.raises(NotConditionallyCentered):
        BundleConfig.from_dict({"grid_n": 2, "accessible": {"times": [0.5], "dists": [
            {"values": [[1.0], [0.0]], "probs": [0.5, 0.5]}]}})
    with pytest.raises(ConfigInvalid):
        BundleConfig.from_dict({"T": 1.0})
    with pytest.raises(ConfigInvalid):
        simulate_bundle({"grid_n": 2})
    assert BundleConfig.from_json(json.dumps(MIXED)).H_dim == 2


def test_empty_config_zero_paths():
    b = simulate_bundle({"grid_n": 3, "H_dim": 2}, n_paths=5)
    assert not np.any(path_values(b))
    e = simulate_bundle({"grid_n": 3}, mode="enumerate")
    assert e.n_paths == 1 and not np.any(path_values(e))


def test_random_walk_brackets():
    # sqrt(dt) = 1 and constant scale: increments are +-1
    b = simulate_bundle({"grid_n": 4, "T": 4.0, "continuous": {"G": [[1.0]]}}, mode="enumerate")
    X = path_values(b)[:, 0::2]
    assert np.array_equal(np.abs(np.diff(X[..., 0], axis=1)), np.ones((16, 4)))
    assert np.array_equal(quadratic_variation(X)[:, -1], np.full(16, 4.0))
    assert bdg_check(b, 2.0)[2] == 1.0


def test_brackets_simple_paths():
    const = np.ones((2, 5, 3))
    assert not np.any(quadratic_variation(const))
    jump = np.zeros((1, 3, 2))
    jump[0, 2:] = [3.0, -4.0]
    assert quadratic_variation(jump)[0, -1] == 25.0


def test_jumps_only_matches_poisson_measure():
    n, lam = 20_000, 1.5
    b = simulate_bundle({"grid_n": 32, "qlc_jumps": {"rate": lam, "marks": [[1.0]]}}, n_paths=n, seed=3)
    s, _ = simulate_poisson_rm(1.0, 32, MarkSpace.single(), lam, n, seed=4)
    x, y = b.counts.sum(axis=(1, 2)), s.counts().sum(axis=(1, 2))
    assert abs(x.mean() - y.mean()) <= 3 * np.hypot(sem(x), sem(y))
    assert abs(x.var() - y.var()) <= 0.1 * y.var()
    ev, comp, marks = jump_measure(b)
    assert ev.n_events == int(x.sum()) and np.array_equal(marks, [[1.0]])


def test_jump_measure_excludes_other_parts():
    b = simulate_bundle({"grid_n": 2, "continuous": {}, "accessible": {"times": [0.5], "dists": [
        {"values": [[1.0], [-1.0]], "probs": [0.5, 0.5]}]}}, mode="enumerate")
    assert jump_measure(b)[0].n_events == 0


def test_jump_exhaustion():
    b = simulate_bundle(MIXED | {"grid_n": 4, "accessible": MIXED["accessible"] | {"times": [0.5]}},
                        n_paths=200, seed=1)
    nonzero = np.flatnonzero(np.any(b.acc != 0, axis=(0, 2)))
    assert nonzero.tolist() == [1]


# -- integrals -------------------------------------------------------------------------------

def test_zero_and_identity_operator():
    b = simulate_bundle({"grid_n": 3, "continuous": {}, "qlc_jumps": {"rate": 0.9, "marks": [[1.0]]}},
                        mode="enumerate")
    zero = OperatorProcess.deterministic(np.zeros((3, 1, 1)))
    assert not np.any(elementary_integral(zero, b))
    one = OperatorProcess.deterministic(np.ones((3, 1, 1)))
    assert np.allclose(elementary_integral(one, b)[:, 0], path_values(b)[:, -1, 0], rtol=0, atol=1e-14)


def test_step_operator_against_compensated_poisson():
    n, lam, grid = 40_000, 2.0, 8
    b = simulate_bundle({"grid_n": grid, "qlc_jumps": {"rate": lam, "marks": [[1.0]]}}, n_paths=n, seed=5)
    phi = np.where(np.arange(grid) < 4, 1.0, -2.0)
    I = elementary_integral(OperatorProcess.deterministic(phi[:, None, None]), b)[:, 0]
    assert abs(I.mean()) <= 3 * sem(I)
    var = float(np.sum(phi ** 2) * lam / grid)
    d = I ** 2 - var
    assert abs(d.mean()) <= 3 * sem(d)


def test_not_predictable():
    b = simulate_bundle(MIXED, mode="enumerate")
    rng = np.random.default_rng(0)
    phi = OperatorProcess(rng.standard_normal((b.n_paths, 2, 3, 2)), TGT)
    with pytest.raises(NotPredictable):
        elementary_integral(phi, b)


@given(seeds, st.floats(-2, 2), st.floats(-2, 2))
def test_linearity(seed, a, c):
    rng = np.random.default_rng(seed)
    b = simulate_bundle(random_config(rng), n_paths=50, seed=seed % 1000)
    f, g = history_operator(b, rng, TGT), history_operator(b, rng, TGT)
    lin = OperatorProcess(a * f.values + c * g.values, TGT)
    assert np.allclose(elementary_integral(lin, b), a * elementary_integral(f, b) + c * elementary_integral(g, b),
                       rtol=0, atol=1e-12)
    parts = sum(elementary_integral(f, b, part=k) for k in ("continuous", "qlc", "accessible"))
    assert np.allclose(parts, elementary_integral(f, b), rtol=0, atol=1e-12)


@given(seeds)
def test_orthogonality_and_brackets(seed):
    rng = np.random.default_rng(seed)
    b = simulate_bundle(random_config(rng), mode="enumerate")
    parts = {k: v.sum(axis=1) for k, v in integral_parts(history_operator(b, rng, TGT), b).items()}
    names = sorted(parts)
    for i, x in enumerate(names):
        for y in names[i + 1:]:
            assert abs(float(b.expect(np.sum(parts[x] * parts[y] * TGT.weights, axis=1)))) < 1e-12
    X = path_values(b)
    assert np.max(np.abs(quadratic_variation(X) - coordinate_brackets(X))) < 1e-12
    assert abs(bdg_check(b, 2.0)[2] - 1) < 1e-12


def test_qlc_field_matches_integral():
    b = simulate_bundle(MIXED, mode="enumerate")
    phi = history_operator(b, np.random.default_rng(1), TGT)
    F = qlc_field(phi, b)
    assert np.allclose(compensated_integral(F, b.stream, b.compensator), elementary_integral(phi, b, part="qlc"),
                       rtol=0, atol=1e-13)


# -- increasing paths ---------------------------------------------------------------------------

def test_decompose_increasing():
    inc = np.array([[0.5, 1.0, 0.25]])
    drift = decompose_increasing(AnnotatedIncreasing(inc, np.array(["drift"] * 3)))
    assert np.array_equal(drift[0][0], [0, 0.5, 1.5, 1.75]) and not np.any(drift[1]) and not np.any(drift[2])
    fixed = decompose_increasing(AnnotatedIncreasing(inc, np.array(["fixed"] * 3)))
    assert not np.any(fixed[0]) and not np.any(fixed[1]) and fixed[2][0, -1] == 1.75
    with pytest.raises(UnannotatedIncrement):
        decompose_increasing(AnnotatedIncreasing(inc, np.array(["drift", "other", "fixed"])))


@given(seeds)
def test_bracket_parts_reconstruct(seed):
    rng = np.random.default_rng(seed)
    b = simulate_bundle(random_config(rng), n_paths=40, seed=seed % 997)
    A = bracket_parts(b)
    c, q, a = decompose_increasing(A)
    assert np.allclose(c + q + a, np.concatenate([np.zeros((40, 1)), np.cumsum(A.increments, axis=1)], axis=1),
                       rtol=0, atol=1e-12)


# -- accessible part -------------------------------------------------------------------------

def test_accessible_closed_forms():
    x = np.array([1.0, -2.0])
    cfg = {"grid_n": 2, "H_dim": 2, "accessible": {"times": [0.5], "dists": [
        {"values": [x.tolist(), (-x).tolist()], "probs": [0.5, 0.5]}]}}
    b = simulate_bundle(cfg, mode="enumerate")
    tgt = FiniteMeasureSpace(np.array([1.0, 0.5]))
    phi = OperatorProcess.deterministic(np.broadcast_to(np.eye(2), (2, 2, 2)), tgt)
    p, q = 3.0, 1.5
    n = accessible_norms(phi, b, p, q)
    xq = float(lq_norm(x, q, tgt.weights))
    assert abs(n["S"] - xq) < 1e-12 and abs(n["Dqq"] - xq) < 1e-12 and abs(n["Dpq"] - xq) < 1e-12
    zero = accessible_norms(OperatorProcess.deterministic(np.zeros((2, 2, 2)), tgt), b, p, q)
    assert set(zero.values()) == {0.0}


@given(seeds)
def test_accessible_hilbert_coincide(seed):
    rng = np.random.default_rng(seed)
    b = simulate_bundle(MIXED, mode="enumerate")
    phi = history_operator(b, rng, TGT)
    n = accessible_norms(phi, b, 2.0, 2.0)
    jumps = elementary_integral(phi, b, part="accessible")
    ref = float(b.expect(np.sum(jumps ** 2 * TGT.weights, axis=1))) ** 0.5
    assert all(abs(v - ref) < 1e-12 for v in n.values())


@given(seeds, st.sampled_from([(3.0, 1.5), (1.5, 3.0), (2.5, 2.5)]))
def test_discrete_identification(seed, pq):
    p, q = pq
    rng = np.random.default_rng(seed)
    b = simulate_bundle(MIXED, mode="enumerate")
    phi = history_operator(b, rng, TGT)
    seq = accessible_odd_sequence(phi, b)
    n = accessible_norms(phi, b, p, q)
    assert abs(n["S"] - norm_S(b.space, seq, p, q)) < 1e-12
    assert abs(n["Dqq"] - norm_Dqq(b.space, seq, p, q)) < 1e-12
    assert abs(n["Dpq"] - norm_Dpq(b.space, seq, p, q)) < 1e-12


def test_accessible_mc_close_to_enumeration():
    rng = np.random.default_rng(0)
    A = rng.standard_normal((2, 3, 2))
    fn = (lambda c, M, cnt: A[c][None] * (1 + 0.3 * np.tanh(M[:, :1]))[:, :, None])
    be = simulate_bundle(MIXED, mode="enumerate")
    bm = simulate_bundle(MIXED, n_paths=1500, seed=1)
    ve = accessible_regime(OperatorProcess.from_history(be, fn, TGT), be, 3.0, 1.5)
    vm = accessible_regime(OperatorProcess.from_history(bm, fn, TGT), bm, 3.0, 1.5)
    assert abs(vm / ve - 1) < 0.1


# -- gamma norms ------------------------------------------------------------------------------

def test_gamma_zero_and_rank_one():
    assert gamma_norm_sqfn(np.zeros((3, 2)), 3.0) == 0
    assert gamma_norm_mc(np.zeros((3, 2)), 3.0, 100, 0) == (0.0, 0.0)
    x, h = np.array([1.0, -2.0, 0.5]), np.array([0.6, 0.8])
    R = np.outer(x, h)
    xq = float(lq_norm(x, 3.0))
    assert abs(gamma_norm_sqfn(R, 3.0) - xq) < 1e-12
    est, se = gamma_norm_mc(R, 3.0, 20_000, 1)
    assert abs(est - xq) <= 3 * se
    with pytest.raises(ConfigInvalid):
        gamma_norm_mc(R, 3.0, 1, 0)


def test_gamma_diagonal_quadrature():
    a, b, q = 1.0, 2.0, 4.0
    t, w = np.polynomial.hermite_e.hermegauss(60)
    w = w / w.sum()
    g1, g2 = np.meshgrid(t, t)
    ref = float(np.sqrt(np.sum(np.outer(w, w) * np.sqrt(a ** 4 * g1 ** 4 + b ** 4 * g2 ** 4))))
    est, se = gamma_norm_mc(np.diag([a, b]), q, 40_000, 2)
    assert abs(est - ref) <= 3 * se


@given(seeds, st.sampled_from([1.5, 2.0, 3.0, 4.0]))
def test_gamma_band(seed, q):
    rng = np.random.default_rng(seed)
    R = rng.standard_normal((3, 4))
    est, _ = gamma_norm_mc(R, q, 400, seed % 1000)
    ratio = est / gamma_norm_sqfn(R, q)
    assert 0.5 < ratio < 2.0


def test_continuous_norm_examples():
    b = simulate_bundle({"grid_n": 3, "continuous": {"state_coef": 0.7}}, mode="enumerate")
    tgt = FiniteMeasureSpace(np.ones(1))
    zero = OperatorProcess.deterministic(np.zeros((3, 1, 1)), tgt)
    assert continuous_part_norm(zero, b, 3.0, 1.5) == 0
    phi = OperatorProcess.from_history(b, lambda c, M, cnt: (1 + M[:, :1])[:, :, None], tgt)
    I = elementary_integral(phi, b, part="continuous")
    assert abs(continuous_part_norm(phi, b, 2.0, 2.0) - float(b.expect(I[:, 0] ** 2)) ** 0.5) < 1e-12


def test_continuous_norm_mc_backend():
    b = simulate_bundle({"grid_n": 2, "H_dim": 2, "continuous": {"G": [[1.0, 0.2], [0.0, 0.8]]}}, mode="enumerate")
    phi = history_operator(b, np.random.default_rng(3), TGT)
    s = continuous_part_norm(phi, b, 3.0, 2.0)
    m = continuous_part_norm(phi, b, 3.0, 2.0, backend="mc", trials=4000)
    assert abs(m / s - 1) < 0.05
    with pytest.raises(ConfigInvalid):
        continuous_part_norm(phi, b, 3.0, 2.0, backend="other")


# -- reports ----------------------------------------------------------------------------------

def test_main_si_continuous_hilbert():
    b = simulate_bundle({"grid_n": 3, "continuous": {"state_coef": 0.5}}, mode="enumerate")
    tgt = FiniteMeasureSpace(np.ones(1))
    phis = [OperatorProcess.deterministic(np.zeros((3, 1, 1)), tgt),
            OperatorProcess.from_history(b, lambda c, M, cnt: (1 + np.abs(M[:, :1]))[:, :, None], tgt)]
    rep = main_si_report(phis, b, 2.0, 2.0)
    assert [r["instance_id"] for r in rep["rows"]] == [1]
    row = rep["rows"][0]
    assert abs(row["ratio_end"] - 1) < 1e-12 and 1 - 1e-12 <= row["ratio_sup"] <= 2


def test_bdg_zero_and_band():
    b = simulate_bundle({"grid_n": 2}, mode="enumerate")
    assert bdg_check(b, 2.0)[2] is None
    m = simulate_bundle(MIXED, mode="enumerate")
    lhs, rhs, ratio = bdg_check(m, 4.0)
    assert 1 / 3 < ratio < 3
