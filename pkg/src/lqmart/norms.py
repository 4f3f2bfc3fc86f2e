"""Burkholder-Rosenthal norm family, sum/intersection norms and the regime table.

Three component norms act on a sequence ``x[i, omega, s]``:

* ``S``   : ``(E ||(sum_i A_i|x_i|^2)^(1/2)||_q^p)^(1/p)``
* ``Dqq`` : ``(E (sum_i A_i ||x_i||_q^q)^(p/q))^(1/p)``
* ``Dpq`` : ``(E sum_i A_i ||x_i||_q^p)^(1/p)``

where ``A_i`` is a *predictor*: the conditional expectation ``E_{i-1}`` for
martingale differences, the plain expectation for independent sequences,
or multiplication by compensator masses for random-measure integrands.
Intersections are maxima; sums are infima over feasible decompositions,
computed by :func:`minimize_sum`.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence, Union

import numpy as np
from scipy.optimize import minimize

from .errors import BadExponent, EvenIndexNonzero, ShapeMismatch, SolverDiverged
from .filtered_space import (FiniteMeasureSpace, FilteredSpace, RandomLqSequence, is_mds, lq_norm, mds_project,
                             random_mds, tree_space)
from .rng import stream

__all__ = [
    "RegimeNormSpec",
    "REGIMES",
    "select_regime",
    "regime_expression",
    "Geometry",
    "mds_geometry",
    "rosenthal_geometry",
    "weighted_geometry",
    "DecompositionCertificate",
    "component_value",
    "evaluate",
    "minimize_sum",
    "SolverOptions",
    "equivalence_report",
    "random_instance",
    "ratio_summary",
    "norm_S",
    "norm_Dqq",
    "norm_Dpq",
    "rosenthal_norm_S",
    "rosenthal_regime_norm",
    "sum_norm",
    "regime_norm",
    "regime_formula",
    "martingale_moment",
    "odd_regime_norm",
    "verify_independence",
]

Expr = Union[str, tuple]
BASE_KINDS = ("S", "Dqq", "Dpq")


# -- regime table ------------------------------------------------------------

@dataclass(frozen=True)
class Regime:
    name: str
    test: Callable[[float, float], bool]
    expr: Expr


REGIMES: tuple[Regime, ...] = (
    Regime("2<=q<=p", lambda p, q: 2 <= q <= p, ("max", "S", "Dqq", "Dpq")),
    Regime("2<=p<=q", lambda p, q: 2 <= p <= q, ("max", "S", ("sum", "Dqq", "Dpq"))),
    Regime("1<p<2<=q", lambda p, q: p < 2 <= q, ("sum", ("max", "S", "Dqq"), "Dpq")),
    Regime("1<q<2<=p", lambda p, q: q < 2 <= p, ("max", ("sum", "S", "Dqq"), "Dpq")),
    Regime("1<q<=p<=2", lambda p, q: q <= p <= 2, ("sum", "S", ("max", "Dqq", "Dpq"))),
    Regime("1<p<=q<=2", lambda p, q: p <= q <= 2, ("sum", "S", "Dqq", "Dpq")),
)


def _check_pq(p: float, q: float, open_interval: bool = True) -> None:
    lo_ok = (lambda e: e > 1) if open_interval else (lambda e: e >= 1)
    for name, e in (("p", p), ("q", q)):
        if not (lo_ok(e) and np.isfinite(e)):
            raise BadExponent(f"{name} = {e} outside the admissible range")


def select_regime(p: float, q: float) -> int:
    """Index of the first table row whose condition holds."""
    _check_pq(p, q)
    for k, r in enumerate(REGIMES):
        if r.test(p, q):
            return k
    raise BadExponent(f"no regime for p={p}, q={q}")  # pragma: no cover


def regime_expression(p: float, q: float) -> Expr:
    return REGIMES[select_regime(p, q)].expr


@dataclass(frozen=True)
class RegimeNormSpec:
    """Exponents, their conjugates and the selected regime row."""

    p: float
    q: float

    def __post_init__(self) -> None:
        _check_pq(self.p, self.q)

    @property
    def p_conj(self) -> float:
        return self.p / (self.p - 1)

    @property
    def q_conj(self) -> float:
        return self.q / (self.q - 1)

    @property
    def regime(self) -> int:
        return select_regime(self.p, self.q)

    @property
    def name(self) -> str:
        return REGIMES[self.regime].name

    @property
    def expr(self) -> Expr:
        return REGIMES[self.regime].expr

    def dual(self) -> "RegimeNormSpec":
        return RegimeNormSpec(self.p_conj, self.q_conj)


# -- predictors and geometry -------------------------------------------------

class _CondPredictor:
    """``A_i = E_{i-1}``, with dense averaging matrices for small spaces."""

    def __init__(self, space: FilteredSpace, n_steps: int):
        self.space = space
        n = space.n_samples
        self.dense = n <= 512
        self.mats = []
        if self.dense:
            for i in range(n_steps):
                lab = space.labels(i - 1)
                same = lab[:, None] == lab[None, :]
                mass = space.block_mass(i - 1)[lab]
                self.mats.append(same * space.probs[None, :] / mass[:, None])

    def apply(self, i: int, X: np.ndarray, kind: str = "") -> np.ndarray:
        if self.dense:
            return self.mats[i] @ X
        return self.space.cond_exp(X, i - 1)

    def ones(self, i: int, kind: str = "") -> np.ndarray:
        return np.ones(self.space.n_samples)


class _MeanPredictor:
    """``A_i = E`` for every ``i`` (independent-increment setting)."""

    def __init__(self, probs: np.ndarray):
        self.probs = probs

    def apply(self, i: int, X: np.ndarray, kind: str = "") -> np.ndarray:
        return np.broadcast_to(np.tensordot(self.probs, X, axes=(0, 0)), X.shape).copy()

    def ones(self, i: int, kind: str = "") -> np.ndarray:
        return np.ones(self.probs.size)


class _WeightPredictor:
    """``A_i`` multiplies by a nonnegative weight ``m[kind][i, omega]``.

    ``masses`` is either one array of shape (n_steps, n_samples) used for
    every norm or a dict keyed by ``"S"``, ``"Dqq"``, ``"Dpq"``.
    """

    def __init__(self, masses):
        if isinstance(masses, dict):
            self.m = {k: np.asarray(v, dtype=float) for k, v in masses.items()}
        else:
            arr = np.asarray(masses, dtype=float)
            self.m = {k: arr for k in BASE_KINDS}

    def apply(self, i: int, X: np.ndarray, kind: str = "S") -> np.ndarray:
        w = self.m[kind][i]
        return X * w.reshape(w.shape + (1,) * (X.ndim - 1))

    def ones(self, i: int, kind: str = "Dpq") -> np.ndarray:
        return self.m[kind][i]


@dataclass
class Geometry:
    """Everything a component norm needs besides the sequence itself.

    Attributes
    ----------
    probs : ndarray (n_samples,)
    weights : ndarray (n_points,)
        Weights of S.
    predictor : object
        Supplies ``apply(i, X, kind)`` and ``ones(i, kind)``.
    project : callable
        Orthogonal projection (in the ``probs * weights`` inner product)
        onto the admissible decomposition components.
    """

    probs: np.ndarray
    weights: np.ndarray
    predictor: object
    project: Callable[[np.ndarray], np.ndarray]
    dense_ok: bool = True

    def W(self, shape) -> np.ndarray:
        return np.broadcast_to(self.probs[None, :, None] * self.weights[None, None, :], shape)


def mds_geometry(space: FilteredSpace, weights, n_steps: int) -> Geometry:
    pred = _CondPredictor(space, n_steps)

    if pred.dense:
        delta = []
        for i in range(n_steps):
            lab = space.labels(i)
            same = lab[:, None] == lab[None, :]
            Ei = same * space.probs[None, :] / space.block_mass(i)[lab][:, None]
            delta.append(Ei - pred.mats[i] @ Ei)
        D = np.stack(delta) if delta else np.zeros((0, space.n_samples, space.n_samples))

        def project(x: np.ndarray) -> np.ndarray:
            return np.matmul(D, x)
    else:
        def project(x: np.ndarray) -> np.ndarray:
            out = np.empty_like(x)
            for i in range(x.shape[0]):
                a = space.cond_exp(x[i], i)
                out[i] = a - space.cond_exp(a, i - 1)
            return out

    return Geometry(space.probs, np.asarray(weights, dtype=float), pred, project)


def rosenthal_geometry(space: FilteredSpace, weights) -> Geometry:
    return Geometry(space.probs, np.asarray(weights, dtype=float), _MeanPredictor(space.probs), lambda x: x)


def weighted_geometry(probs, weights, masses, project: Callable | None = None) -> Geometry:
    return Geometry(np.asarray(probs, dtype=float), np.asarray(weights, dtype=float),
                    _WeightPredictor(masses), project if project is not None else (lambda x: x))


# -- component norms with gradients -----------------------------------------

def _pow(a: np.ndarray, e: float) -> np.ndarray:
    """``a**e`` for ``a >= 0`` with the convention ``0**e = 0`` for every ``e``."""
    pos = a > 0
    out = np.zeros_like(a)
    out[pos] = a[pos] ** e
    return out


def component_value(kind: str, geom: Geometry, x: np.ndarray, p: float, q: float, grad: bool = False):
    """Value (and optionally Euclidean gradient) of one component norm."""
    P, w, A = geom.probs, geom.weights, geom.predictor
    n = x.shape[0]
    if kind == "S":
        sq = x * x
        V = sum((A.apply(i, sq[i], "S") for i in range(n)), np.zeros(x.shape[1:]))
        Q = (V if q == 2 else _pow(V, q / 2)) @ w
        Q = _pow(Q, 1.0 / q)
        Np = P @ _pow(Q, p)
        N = Np ** (1.0 / p) if Np > 0 else 0.0
        if not grad:
            return N
        g = np.zeros_like(x)
        if N == 0:
            return N, g
        # dN/dV per unit probability
        dV = (N ** (1 - p)) * 0.5 * (_pow(Q, p - q))[:, None] * w[None, :] * _pow(V, q / 2 - 1)
        for i in range(n):
            g[i] = 2 * x[i] * P[:, None] * A.apply(i, dV, "S")
        return N, g
    if kind == "Dqq":
        nq = _pow(np.abs(x), q) @ w  # (n, omega)
        a = sum((A.apply(i, nq[i], "Dqq") for i in range(n)), np.zeros(x.shape[1]))
        Np = P @ _pow(a, p / q)
        N = Np ** (1.0 / p) if Np > 0 else 0.0
        if not grad:
            return N
        g = np.zeros_like(x)
        if N == 0:
            return N, g
        da = (N ** (1 - p)) / q * _pow(a, p / q - 1)
        inner = q * w[None, :] * _pow(np.abs(x), q - 1) * np.sign(x)
        for i in range(n):
            g[i] = (P * A.apply(i, da, "Dqq"))[:, None] * inner[i]
        return N, g
    if kind == "Dpq":
        nrm = lq_norm(x, q, w)  # (n, omega)
        r = _pow(nrm, p)
        Np = sum(P @ A.apply(i, r[i], "Dpq") for i in range(n)) if n else 0.0
        N = Np ** (1.0 / p) if Np > 0 else 0.0
        if not grad:
            return N
        g = np.zeros_like(x)
        if N == 0:
            return N, g
        for i in range(n):
            coef = (N ** (1 - p)) * P * A.ones(i, "Dpq") * _pow(nrm[i], p - q)
            g[i] = coef[:, None] * w[None, :] * _pow(np.abs(x[i]), q - 1) * np.sign(x[i])
        return N, g
    raise ValueError(f"unknown component norm {kind!r}")


def _is_base(e: Expr) -> bool:
    return isinstance(e, str) or hasattr(e, "value_grad")


def _base_value(e, geom: Geometry, x: np.ndarray, p: float, q: float, grad: bool = False):
    if isinstance(e, str):
        return component_value(e, geom, x, p, q, grad)
    return e.value_grad(x, grad)


def _term_value(e: Expr, geom: Geometry, x: np.ndarray, p: float, q: float, grad: bool = False):
    """Value of a base norm or an intersection (max) of base norms."""
    if _is_base(e):
        return _base_value(e, geom, x, p, q, grad)
    if e[0] != "max":
        raise ValueError("sum terms must be base norms or maxima of base norms")
    vals = [_term_value(c, geom, x, p, q, grad) for c in e[1:]]
    if not grad:
        return max(vals)
    k = int(np.argmax([v[0] for v in vals]))
    return vals[k]


# -- sum-norm solver ---------------------------------------------------------

@dataclass
class DecompositionCertificate:
    """Feasible decomposition attaining the reported sum-norm value."""

    components: list = field(repr=False)
    component_norms: list
    total: float
    iterations: int
    gap_estimate: float
    terms: list

    def residual(self, target: np.ndarray) -> float:
        if not self.components:
            return 0.0
        total = sum(np.asarray(getattr(c, "values", c)) for c in self.components)
        return float(np.max(np.abs(total - np.asarray(getattr(target, "values", target)))))


@dataclass
class SolverOptions:
    subgradient_iters: int = 150
    polish_iters: int = 300
    smoothing_rounds: int = 5
    random_starts: int = 1
    seed: int = 0


def _objective(terms, geom, xs, p, q, grad=False):
    if not grad:
        return sum(_term_value(t, geom, x, p, q) for t, x in zip(terms, xs))
    out = [_term_value(t, geom, x, p, q, True) for t, x in zip(terms, xs)]
    return sum(v for v, _ in out), [g for _, g in out]


def _smoothed(terms, geom, xs, p, q, delta):
    """Smoothed objective: norms -> sqrt(N^2 + delta^2), max -> log-sum-exp."""
    total = 0.0
    grads = []
    for t, x in zip(terms, xs):
        kids = [t] if _is_base(t) else list(t[1:])
        vg = [_base_value(k, geom, x, p, q, True) for k in kids]
        vals = np.array([math.sqrt(v * v + delta * delta) for v, _ in vg])
        gs = [(v / s) * g if s > 0 else g for (v, g), s in zip(vg, vals)]
        if len(kids) == 1:
            total += vals[0]
            grads.append(gs[0])
        else:
            m = vals.max()
            e = np.exp((vals - m) / delta)
            wts = e / e.sum()
            total += m + delta * math.log(e.sum())
            grads.append(sum(wt * g for wt, g in zip(wts, gs)))
    return total, grads


def minimize_sum(terms: Sequence[Expr], target: np.ndarray, geom: Geometry, p: float, q: float,
                 opts: SolverOptions | None = None) -> tuple[float, DecompositionCertificate]:
    """Minimize ``sum_j term_j(x_j)`` over admissible ``x_j`` summing to ``target``.

    The search alternates a projected subgradient phase (normalized steps,
    ``1/k`` schedule) with L-BFGS polishing of a smoothed objective whose
    smoothing parameter is driven to zero.  Candidates include every
    trivial decomposition, an even split and random splits; the best
    feasible point ever visited is returned.
    """
    opts = opts or SolverOptions()
    terms = list(terms)
    m = len(terms)
    target = np.asarray(target, dtype=float)
    if m == 1:
        v = _term_value(terms[0], geom, target, p, q)
        return v, DecompositionCertificate([target.copy()], [v], v, 0, 0.0, terms)
    W = geom.W(target.shape)
    sW = np.sqrt(W)
    scale = math.sqrt(float(np.sum(W * target * target)))
    zero = np.zeros_like(target)

    def complete(free):
        return list(free) + [target - sum(free, zero)]

    best = {"val": math.inf, "xs": None}
    n_iter = 0

    def consider(xs):
        val = _objective(terms, geom, xs, p, q)
        if not np.isfinite(val):
            raise SolverDiverged("objective became non-finite")
        if val < best["val"]:
            best["val"], best["xs"] = val, [x.copy() for x in xs]
        return val

    starts = []
    for j in range(m):
        xs = [zero.copy() for _ in range(m)]
        xs[j] = target.copy()
        starts.append(xs)
    starts.append([target / m for _ in range(m)])
    rng = np.random.default_rng(opts.seed)
    for _ in range(opts.random_starts):
        free = [geom.project(rng.standard_normal(target.shape) * target.std()) for _ in range(m - 1)]
        starts.append(complete(free))
    for xs in starts:
        consider(xs)
    if scale == 0:
        v = best["val"]
        return v, DecompositionCertificate(best["xs"], [0.0] * m, v, 0, 0.0, terms)

    def direction(gs):
        return [geom.project((gs[j] - gs[-1]) / W) for j in range(m - 1)]

    # projected subgradient from the best trivial start and the random split
    for xs0 in (best["xs"], starts[-1]):
        free = [x.copy() for x in xs0[:-1]]
        for k in range(1, opts.subgradient_iters + 1):
            n_iter += 1
            xs = complete(free)
            val, gs = _objective(terms, geom, xs, p, q, grad=True)
            if val < best["val"]:
                best["val"], best["xs"] = val, [x.copy() for x in xs]
            d = direction(gs)
            dn = math.sqrt(sum(float(np.sum(W * di * di)) for di in d))
            if dn == 0:
                break
            step = 0.5 * scale / (k * dn)
            free = [f - step * di for f, di in zip(free, d)]
        consider(complete(free))

    # smoothed L-BFGS continuation in whitened coordinates
    before_polish = best["val"]
    shape = target.shape
    size = target.size

    def unpack(u):
        return [geom.project(u[j * size:(j + 1) * size].reshape(shape) / sW) for j in range(m - 1)]

    delta = 1e-2 * scale
    for _ in range(opts.smoothing_rounds):
        def fun(u, delta=delta):
            free = unpack(u)
            xs = complete(free)
            val, gs = _smoothed(terms, geom, xs, p, q, delta)
            grad = np.concatenate([(sW * geom.project((gs[j] - gs[-1]) / W)).ravel() for j in range(m - 1)])
            return val, grad

        u0 = np.concatenate([(sW * x).ravel() for x in best["xs"][:-1]])
        res = minimize(fun, u0, jac=True, method="L-BFGS-B",
                       options={"maxiter": opts.polish_iters, "gtol": 1e-12, "ftol": 1e-15})
        n_iter += int(res.nit)
        consider(complete(unpack(res.x)))
        delta *= 0.1
    xs = best["xs"]
    norms = [_term_value(t, geom, x, p, q) for t, x in zip(terms, xs)]
    cert = DecompositionCertificate(xs, norms, best["val"], n_iter, max(0.0, before_polish - best["val"]), terms)
    return best["val"], cert


def evaluate(expr: Expr, geom: Geometry, x: np.ndarray, p: float, q: float,
             opts: SolverOptions | None = None) -> float:
    """Value of a regime expression tree on ``x``."""
    if _is_base(expr):
        return _base_value(expr, geom, x, p, q)
    op, kids = expr[0], expr[1:]
    if op == "max":
        return max(evaluate(k, geom, x, p, q, opts) for k in kids)
    if op == "sum":
        return minimize_sum(kids, x, geom, p, q, opts)[0]
    raise ValueError(f"unknown operator {op!r}")


# -- public operations on sequences ----------------------------------------

def _geom_for(seq: RandomLqSequence) -> Geometry:
    return mds_geometry(seq.space, seq.target.weights, seq.n_steps)


def _check_norm_exponents(p: float, q: float) -> None:
    _check_pq(p, q, open_interval=False)


def norm_S(space: FilteredSpace, seq: RandomLqSequence, p: float, q: float) -> float:
    """``(E ||(sum_i E_{i-1}|f_i|^2)^(1/2)||_q^p)^(1/p)``."""
    _check_norm_exponents(p, q)
    return component_value("S", _geom_for(seq), seq.values, p, q)


def norm_Dqq(space: FilteredSpace, seq: RandomLqSequence, p: float, q: float) -> float:
    """``(E (sum_i E_{i-1}||f_i||_q^q)^(p/q))^(1/p)``."""
    _check_norm_exponents(p, q)
    return component_value("Dqq", _geom_for(seq), seq.values, p, q)


def norm_Dpq(space: FilteredSpace, seq: RandomLqSequence, p: float, q: float) -> float:
    """``(sum_i E||f_i||_q^p)^(1/p)``."""
    _check_norm_exponents(p, q)
    return component_value("Dpq", _geom_for(seq), seq.values, p, q)


def rosenthal_norm_S(space: FilteredSpace, seq: RandomLqSequence, q: float) -> float:
    """``||(sum_i E|f_i|^2)^(1/2)||_q`` with unconditional expectations."""
    if not q >= 1:
        raise BadExponent(f"q = {q} must be >= 1")
    V = np.einsum("k,iks->s", space.probs, seq.values ** 2)
    return float(lq_norm(np.sqrt(V), q, seq.target.weights))


def rosenthal_regime_norm(space: FilteredSpace, seq: RandomLqSequence, spec: RegimeNormSpec,
                          opts: SolverOptions | None = None) -> float:
    """Regime norm built from the independent-increment norms.

    Decompositions range over arbitrary sequences (no martingale constraint).
    """
    geom = rosenthal_geometry(space, seq.target.weights)
    return evaluate(spec.expr, geom, seq.values, spec.p, spec.q, opts)


def sum_norm(space: FilteredSpace, seq: RandomLqSequence, component_norms: Sequence[Expr], p: float, q: float,
             tol: float = 1e-9, opts: SolverOptions | None = None) -> tuple[float, DecompositionCertificate]:
    """Infimum of the summed component norms over martingale decompositions.

    Parameters
    ----------
    component_norms : list
        Two or three entries, each ``"S"``, ``"Dqq"``, ``"Dpq"`` or an
        intersection ``("max", ...)`` of those.
    tol : float
        Feasibility tolerance of the returned certificate.
    """
    _check_pq(p, q)
    if not 1 <= len(component_norms) <= 3:
        raise ValueError("between one and three component norms are supported")
    geom = _geom_for(seq)
    val, cert = minimize_sum(component_norms, seq.values, geom, p, q, opts)
    cert.components = [seq.with_values(c) for c in cert.components]
    if np.max(np.abs(sum(c.values for c in cert.components) - seq.values), initial=0.0) > tol:
        raise SolverDiverged("decomposition lost feasibility")
    return val, cert


def regime_norm(space: FilteredSpace, seq: RandomLqSequence, spec: RegimeNormSpec,
                opts: SolverOptions | None = None) -> float:
    """Regime-table combination of the three component norms for ``spec``."""
    return evaluate(spec.expr, _geom_for(seq), seq.values, spec.p, spec.q, opts)


def regime_formula(space: FilteredSpace, seq: RandomLqSequence, row: int, p: float, q: float,
                   opts: SolverOptions | None = None) -> float:
    """Evaluate table row ``row`` at ``(p, q)`` regardless of which row (p, q) selects."""
    return evaluate(REGIMES[row].expr, _geom_for(seq), seq.values, p, q, opts)


def martingale_moment(space: FilteredSpace, seq: RandomLqSequence, p: float, q: float) -> float:
    """``(E ||sum_i d_i||_q^p)^(1/p)``."""
    _check_norm_exponents(p, q)
    r = lq_norm(seq.total(), q, seq.target.weights)
    m = r.max(initial=0.0)
    if m == 0:
        return 0.0
    return float(m * (space.probs @ (r / m) ** p) ** (1.0 / p))


def odd_regime_norm(space: FilteredSpace, seq: RandomLqSequence, spec: RegimeNormSpec,
                    opts: SolverOptions | None = None, tol: float = 0.0) -> float:
    """Regime norm of a sequence supported on odd indices."""
    even = seq.values[0::2]
    if even.size and np.max(np.abs(even)) > tol:
        raise EvenIndexNonzero("odd-index sequence has a nonzero even entry")
    return regime_norm(space, seq, spec, opts)


def verify_independence(space: FilteredSpace, seq: RandomLqSequence, tol: float = 1e-12) -> tuple[bool, float]:
    """Whether the entries are mean-zero and mutually independent.

    Compares the joint law of the entry values with the product of the
    marginals, exactly on the finite space.
    """
    n = seq.n_steps
    if n == 0:
        return True, 0.0
    keys = []
    for i in range(n):
        _, inv = np.unique(seq.values[i], axis=0, return_inverse=True)
        keys.append(inv.reshape(-1))
    P = space.probs
    marg = [np.bincount(k, P) for k in keys]
    joint: dict = {}
    for idx in range(space.n_samples):
        key = tuple(int(k[idx]) for k in keys)
        joint[key] = joint.get(key, 0.0) + P[idx]
    gap = 0.0
    for key in itertools.product(*[range(len(mg)) for mg in marg]):
        prod = float(np.prod([marg[i][key[i]] for i in range(n)]))
        gap = max(gap, abs(joint.get(key, 0.0) - prod))
    mean_gap = float(np.max(np.abs(np.tensordot(P, seq.values, axes=(0, 1)))))
    gap = max(gap, mean_gap)
    return gap <= tol, gap


# -- ensembles ---------------------------------------------------------------

def ratio_summary(ratios) -> dict:
    """``{min, max, spread}`` of positive ratios; ``None`` entries when empty."""
    r = np.asarray(list(ratios), dtype=float)
    if r.size == 0:
        return {"min": None, "max": None, "spread": None}
    return {"min": float(r.min()), "max": float(r.max()), "spread": float(r.max() / r.min())}


def random_instance(generator: dict, rng: np.random.Generator) -> tuple[FilteredSpace, RandomLqSequence]:
    """Random MDS on a tree space.

    ``generator`` keys: ``branching`` (default ``[2, 2]``), ``n_points``
    (default 2), ``random_probs`` (default true), ``decay``, a per-step
    scale factor (default 1), and ``scale``, an overall factor (default 1).
    """
    branching = list(generator.get("branching", [2, 2]))
    space = tree_space(branching, rng=rng if generator.get("random_probs", True) else None)
    target = FiniteMeasureSpace(rng.uniform(0.5, 2.0, size=int(generator.get("n_points", 2))))
    scale = float(generator.get("scale", 1.0)) * float(generator.get("decay", 1.0)) ** np.arange(len(branching))
    return space, random_mds(space, target, rng, scale=scale)


def equivalence_report(generator: dict, spec: RegimeNormSpec, n_instances: int, seed: int,
                       opts: SolverOptions | None = None) -> dict:
    """Ratios ``martingale_moment / regime_norm`` over seeded random instances.

    Instance ``i`` draws from its own substream of ``seed``, so instances do
    not depend on the ensemble size.  Instances with a zero right side are
    skipped (0/0 is undefined).
    """
    rows, skipped = [], []
    for i in range(int(n_instances)):
        space, seq = random_instance(generator, stream(seed, 1, i))
        lhs = martingale_moment(space, seq, spec.p, spec.q)
        rhs = regime_norm(space, seq, spec, opts)
        if rhs == 0:
            skipped.append(i)
            continue
        rows.append({"instance_id": i, "lhs": lhs, "rhs": rhs, "ratio": lhs / rhs})
    summary = ratio_summary(row["ratio"] for row in rows)
    summary.update(seed=int(seed), p=spec.p, q=spec.q, regime=spec.name)
    return {"rows": rows, "skipped": skipped, "summary": summary}
