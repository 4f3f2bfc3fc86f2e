"""Duality tools for sequences of L^q-valued random variables.

* :func:`duality_map` : exact norming vector of a functional on weighted ``L^q``.
* :func:`hsq_norm` : ``(E s_q(f)^p)^(1/p)`` with the conditional square function
  ``s_q(f) = (sum_k E_{k-1} ||f_k||_q^q)^(1/q)``.
* :func:`hsq_dual_witness` : explicit adapted sequence nearly norming ``g``.
* :func:`dual_norm_bruteforce` : numerical lower bound for a dual norm by
  multistart ratio ascent.
* :func:`reverse_dual_doob_check` and :func:`sum_intersection_duality_check`.

Every pairing is ``<f, g> = sum_omega P(omega) sum_k sum_s w_s f_k g_k``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .errors import BadExponent, DimensionCap, NegativeEntry, ShapeMismatch, SolverDiverged, ZeroInput, ZeroVector
from .filtered_space import FilteredSpace, RandomLqSequence, lq_norm
from .norms import (
    Geometry,
    SolverOptions,
    _CondPredictor,
    _is_base,
    _pow,
    _term_value,
    component_value,
    minimize_sum,
    mds_geometry,
)

__all__ = [
    "duality_map",
    "hsq_norm",
    "hsq_partial_sums",
    "hsq_dual_witness",
    "pairing",
    "PrimalNorm",
    "DualNormReport",
    "dual_norm_bruteforce",
    "reverse_dual_doob_check",
    "VectorNorm",
    "lr_norm",
    "sequence_norm",
    "sum_intersection_duality_check",
    "mean_value_gap",
]


def _conj(r: float) -> float:
    if r == 1:
        return math.inf
    if math.isinf(r):
        return 1.0
    return r / (r - 1)


# -- duality map -----------------------------------------------------------

def duality_map(x_star, q_conj: float, weights=None) -> np.ndarray:
    """Unit vector of weighted ``L^q`` norming ``x_star`` in ``L^{q'}``.

    Returns ``x`` with ``||x||_q = 1`` and ``sum_s w_s x_s x*_s = ||x*||_{q'}``,
    namely ``x = sign(x*) |x*|^(q'-1) / ||x*||_{q'}^(q'-1)``.

    Parameters
    ----------
    x_star : array-like (n_points,)
    q_conj : float
        Exponent ``q' > 1`` of the space holding ``x_star``.
    weights : array-like, optional
        Point masses; unit weights by default.
    """
    if not q_conj > 1 or not np.isfinite(q_conj):
        raise BadExponent(f"q' = {q_conj} must lie in (1, inf)")
    xs = np.atleast_1d(np.asarray(x_star, dtype=float))
    w = np.ones(xs.shape[-1]) if weights is None else np.asarray(weights, dtype=float)
    nrm = float(lq_norm(xs, q_conj, w))
    if nrm == 0:
        raise ZeroVector("the duality map is undefined at zero")
    u = xs / nrm
    return np.sign(u) * np.abs(u) ** (q_conj - 1)


# -- H^{s_q}_p -------------------------------------------------------------

def _adapted_geometry(space: FilteredSpace, weights, n_steps: int) -> Geometry:
    """Predictor ``E_{k-1}``, admissible set = adapted sequences."""
    pred = _CondPredictor(space, n_steps)

    def project(x: np.ndarray) -> np.ndarray:
        return np.stack([space.cond_exp(x[k], k) for k in range(x.shape[0])]) if x.shape[0] else x

    return Geometry(space.probs, np.asarray(weights, dtype=float), pred, project)


def _free_geometry(space: FilteredSpace, weights, n_steps: int) -> Geometry:
    pred = _CondPredictor(space, n_steps)
    return Geometry(space.probs, np.asarray(weights, dtype=float), pred, lambda x: x)


def hsq_partial_sums(space: FilteredSpace, seq: RandomLqSequence, q: float) -> np.ndarray:
    """``s_q^n(f)`` for every ``n``, shape (n_steps, n_samples)."""
    if not q >= 1:
        raise BadExponent(f"q = {q} must be >= 1")
    nq = _pow(np.abs(seq.values), q) @ seq.target.weights
    terms = np.stack([space.cond_exp(nq[k], k - 1) for k in range(seq.n_steps)]) if seq.n_steps \
        else np.zeros((0, space.n_samples))
    return _pow(np.cumsum(terms, axis=0), 1.0 / q)


def hsq_norm(space: FilteredSpace, seq: RandomLqSequence, p: float, q: float) -> float:
    """``(E s_q(f)^p)^(1/p)`` by exact enumeration."""
    if not (p >= 1 and q >= 1 and np.isfinite(p) and np.isfinite(q)):
        raise BadExponent(f"exponents ({p}, {q}) must be finite and >= 1")
    geom = _free_geometry(space, seq.target.weights, seq.n_steps)
    return component_value("Dqq", geom, seq.values, p, q)


def pairing(space: FilteredSpace, f: RandomLqSequence, g: RandomLqSequence) -> float:
    """``E sum_k <f_k, g_k>``."""
    if f.values.shape != g.values.shape:
        raise ShapeMismatch(f"shapes {f.values.shape} and {g.values.shape} differ")
    if f.values.shape[1] != space.n_samples:
        raise ShapeMismatch("sequences live on a different sample space")
    w = g.target.weights
    return float(np.einsum("k,iks,s,iks->", space.probs, f.values, w, g.values))


def hsq_dual_witness(space: FilteredSpace, g: RandomLqSequence, p: float, q: float) -> RandomLqSequence:
    """Adapted ``h`` with ``<h, g>`` comparable to ``||g||`` in the dual exponents.

    ``g`` is measured in ``H^{s_{q'}}_{p'}``.  With ``s^k = s_{q'}^k(g)`` and
    ``N = ||g||``:

    * ``p <= q``: ``h_k = (s^k)^(p'-q') sign(g_k)|g_k|^(q'-1) / N^(p'-1)``.
      Then ``||h|| <= 1`` and ``<h, g> >= (q'/p') N``.
    * ``p > q``: ``h_k = E_{k-1}[s^(p'-q')] sign(g_k)|g_k|^(q'-1) / N^(p'-1)``,
      the gradient of ``N`` at ``g``.  Then ``<h, g> = N`` exactly and
      ``||h|| <= p/q``.

    Either way ``<h, g> / ||h|| >= min(q/p, q'/p') N``.
    """
    if not (p > 1 and q > 1):
        raise BadExponent("witness needs p, q > 1")
    pc, qc = p / (p - 1), q / (q - 1)
    N = hsq_norm(space, g, pc, qc)
    if N == 0:
        raise ZeroInput("g has zero dual norm")
    s = hsq_partial_sums(space, g, qc)  # (n, omega)
    core = np.sign(g.values) * _pow(np.abs(g.values), qc - 1)
    if p <= q:
        v = _pow(s, pc - qc) / N ** (pc - 1)
    else:
        total = s[-1]
        tail = _pow(total, pc - qc)
        v = np.stack([space.cond_exp(tail, k - 1) for k in range(g.n_steps)]) / N ** (pc - 1)
    return g.with_values(v[:, :, None] * core)


# -- brute-force dual norms -------------------------------------------------

@dataclass(frozen=True)
class PrimalNorm:
    """Norm to dualize: an expression over base norms plus the admissible set.

    ``expr`` is ``"S"``, ``"Dqq"``, ``"Dpq"``, a :class:`VectorNorm`, or a
    ``("max"| "sum", ...)`` tree of those.  ``admissible`` is ``"adapted"``,
    ``"mds"`` or ``"any"``.
    """

    expr: object
    p: float
    q: float
    admissible: str = "adapted"

    @classmethod
    def hsq(cls, p: float, q: float) -> "PrimalNorm":
        return cls("Dqq", p, q, "adapted")

    @classmethod
    def l2(cls) -> "PrimalNorm":
        return cls("Dpq", 2.0, 2.0, "any")


@dataclass
class DualNormReport:
    value: float
    certificate: np.ndarray = field(repr=False)
    iterations: int
    converged: bool

    def to_json(self) -> str:
        return json.dumps({"value": self.value, "certificate": np.asarray(self.certificate).tolist(),
                           "iterations": self.iterations, "converged": self.converged})


def _geometry_for(space: FilteredSpace, weights, n_steps: int, admissible: str) -> Geometry:
    if admissible == "adapted":
        return _adapted_geometry(space, weights, n_steps)
    if admissible == "mds":
        return mds_geometry(space, weights, n_steps)
    if admissible == "any":
        return _free_geometry(space, weights, n_steps)
    raise ValueError(f"unknown admissible set {admissible!r}")


def _free_dimension(space: FilteredSpace, n_steps: int, n_points: int, admissible: str) -> int:
    if admissible == "any":
        return n_steps * space.n_samples * n_points
    blocks = [space.n_blocks(k) for k in range(n_steps)]
    if admissible == "mds":
        prev = [1] + blocks[:-1]
        return sum(b - a for a, b in zip(prev, blocks)) * n_points
    return sum(blocks) * n_points


def _has_sum(e) -> bool:
    return not _is_base(e) and (e[0] == "sum" or any(_has_sum(k) for k in e[1:]))


def _lift(expr, counter: list):
    """Parametrize a norm tree by free blocks whose total is the argument.

    Every sum node gets one block per summand, so the value at the total is an
    infimum over blocks; maximizing a ratio over all blocks then needs no
    inner solve.  Returns (blocks, evaluator) where ``evaluator(xs, geom, p, q)``
    yields (value, {block: gradient}).
    """
    if not _has_sum(expr):
        b = counter[0]
        counter[0] += 1

        def ev(xs, geom, p, q):
            v, gr = _term_value(expr, geom, xs[b], p, q, True)
            return v, {b: gr}
        return [b], ev
    op, kids = expr[0], expr[1:]
    if op == "sum":
        built = [_lift(k, counter) for k in kids]

        def ev(xs, geom, p, q):
            val, grads = 0.0, {}
            for _, e in built:
                v, gr = e(xs, geom, p, q)
                val += v
                for k, gk in gr.items():
                    grads[k] = grads[k] + gk if k in grads else gk
            return val, grads
        return [b for bl, _ in built for b in bl], ev
    summy = [k for k in kids if _has_sum(k)]
    if len(summy) != 1:
        raise ValueError("an intersection may contain at most one sum")
    blocks, inner = _lift(summy[0], counter)
    plain = [k for k in kids if not _has_sum(k)]

    def ev(xs, geom, p, q):
        x = sum(xs[b] for b in blocks)
        cands = [inner(xs, geom, p, q)]
        for k in plain:
            v, gr = _term_value(k, geom, x, p, q, True)
            cands.append((v, {b: gr for b in blocks}))
        return max(cands, key=lambda c: c[0])
    return blocks, ev


def _ratio_ascent(expr, gvals: np.ndarray, geom: Geometry, p: float, q: float,
                  n_starts: int, budget: int, tol: float, seed: int):
    counter = [0]
    blocks, ev = _lift(expr, counter)
    nb = counter[0]
    shape = gvals.shape
    size = gvals.size
    W = geom.W(shape)
    sW = np.sqrt(W)
    pair_grad = W * gvals
    rng = np.random.default_rng(seed)

    def unpack(u):
        return [geom.project(u[j * size:(j + 1) * size].reshape(shape) / sW) for j in range(nb)]

    def fun(u):
        xs = unpack(u)
        f = sum(xs)
        num = float(np.sum(pair_grad * f))
        den, grads = ev(xs, geom, p, q)
        if not den > 0:
            return 0.0, np.zeros_like(u)
        val = num / den
        out = []
        for j in range(nb):
            gj = pair_grad / den - num * grads.get(j, 0.0) / den ** 2
            out.append((sW * geom.project(gj / W)).ravel())
        return -val, -np.concatenate(out)

    # g spread evenly; g in a single block with the others frozen at zero
    # (the faces where a summand vanishes are kinks of the ratio); random points
    free = [None] * (nb * size)
    starts = [([gvals / nb for _ in range(nb)], free)]
    if nb > 1:
        for i in range(nb):
            bounds = [None if j == i else (0.0, 0.0) for j in range(nb) for _ in range(size)]
            starts.append(([gvals if j == i else 0 * gvals for j in range(nb)], bounds))
    while len(starts) < n_starts:
        starts.append(([rng.standard_normal(shape) for _ in range(nb)], free))
    results = []
    iters = 0
    for x0, bounds in starts:
        u0 = np.concatenate([(sW * geom.project(x)).ravel() for x in x0])
        if not np.any(u0):
            continue
        bounds = [(None, None) if b is None else b for b in bounds]
        res = minimize(fun, u0, jac=True, method="L-BFGS-B", bounds=bounds,
                       options={"maxiter": budget, "gtol": 1e-12, "ftol": 1e-15})
        iters += int(res.nit)
        if not np.isfinite(res.fun):
            raise SolverDiverged("ratio ascent produced a non-finite value")
        xs = unpack(res.x)
        f = sum(xs)
        val, _ = ev(xs, geom, p, q)
        ratio = float(np.sum(pair_grad * f)) / val if val > 0 else 0.0
        results.append((ratio, f / val if val > 0 else f))
    if not results:
        return 0.0, np.zeros(shape), iters, True
    results.sort(key=lambda r: -r[0])
    best = results[0][0]
    agree = sum(1 for r, _ in results if best - r <= tol * max(1.0, abs(best)))
    return best, results[0][1], iters, agree >= 2


def dual_norm_bruteforce(space: FilteredSpace, g: RandomLqSequence, primal: PrimalNorm,
                         tol: float = 1e-6, budget: int = 500, n_starts: int = 16,
                         cap: int = 64, seed: int = 0) -> DualNormReport:
    """Lower bound for ``sup <f, g> / ||f||`` over admissible ``f``.

    Ratio ascent (L-BFGS in whitened coordinates of the admissible subspace)
    from ``n_starts`` starting points, the first being ``g`` itself.  The
    report holds the best ratio, a unit-norm certificate attaining it and a
    flag set when at least two starts agree within ``tol``.
    """
    dim = _free_dimension(space, g.n_steps, g.values.shape[2], primal.admissible)
    if dim > cap:
        raise DimensionCap(f"{dim} free scalars exceed the cap of {cap}")
    geom = _geometry_for(space, g.target.weights, g.n_steps, primal.admissible)
    gv = geom.project(g.values) if primal.admissible != "any" else g.values
    if not np.any(gv):
        return DualNormReport(0.0, np.zeros_like(g.values), 0, True)
    val, cert, iters, conv = _ratio_ascent(primal.expr, gv, geom, primal.p, primal.q,
                                           n_starts, budget, tol, seed)
    return DualNormReport(val, cert, iters, conv)


# -- reverse dual Doob -----------------------------------------------------

def reverse_dual_doob_check(space: FilteredSpace, seq: RandomLqSequence, p: float,
                            level_map=None) -> tuple[float, float, bool]:
    """Compare ``(E|sum f_n|^p)^(1/p)`` with ``p^-1 (E|sum E_n f_n|^p)^(1/p)``.

    Parameters
    ----------
    seq : RandomLqSequence
        Nonnegative entries, not necessarily adapted.  Each entry is summed
        over ``S`` with the target weights, giving scalar variables.
    p : float
        Exponent in ``(0, 1]``.
    level_map : sequence of int, optional
        Level used for entry ``n``; defaults to ``n``.
    """
    if not 0 < p <= 1:
        raise BadExponent(f"p = {p} must lie in (0, 1]")
    if np.any(seq.values < 0):
        raise NegativeEntry("entries must be nonnegative")
    f = seq.values @ seq.target.weights  # (n, omega)
    levels = list(range(seq.n_steps)) if level_map is None else [int(l) for l in level_map]
    if len(levels) != seq.n_steps:
        raise ShapeMismatch("level_map length differs from the sequence length")
    cond = sum((space.cond_exp(f[k], levels[k]) for k in range(seq.n_steps)), np.zeros(space.n_samples))
    P = space.probs
    lhs = float(P @ f.sum(axis=0) ** p) ** (1 / p)
    rhs = float(P @ cond ** p) ** (1 / p) / p
    return lhs, rhs, lhs <= rhs + 1e-12


# -- sums and intersections --------------------------------------------------

class VectorNorm:
    """A norm on arrays ``x[i, omega, s]`` with value, gradient and its dual."""

    def value_grad(self, x: np.ndarray, grad: bool = False):  # pragma: no cover - interface
        raise NotImplementedError

    def dual(self) -> "VectorNorm":  # pragma: no cover - interface
        raise NotImplementedError

    def __call__(self, x: np.ndarray) -> float:
        return self.value_grad(x)


class _Lr(VectorNorm):
    def __init__(self, r: float, W: np.ndarray):
        self.r, self.W = float(r), W

    def value_grad(self, x, grad=False):
        W, r = self.W, self.r
        if math.isinf(r):
            a = np.where(W > 0, np.abs(x), 0.0)
            k = np.unravel_index(np.argmax(a), a.shape)
            v = float(a[k])
            if not grad:
                return v
            g = np.zeros_like(x)
            if v > 0:
                g[k] = np.sign(x[k])
            return v, g
        s = float(np.sum(W * np.abs(x) ** r))
        v = s ** (1 / r) if s > 0 else 0.0
        if not grad:
            return v
        if v == 0:
            return v, np.zeros_like(x)
        return v, W * _pow(np.abs(x), r - 1) * np.sign(x) * v ** (1 - r)

    def dual(self):
        return _Lr(_conj(self.r), self.W)


class _SeqNorm(VectorNorm):
    def __init__(self, kind: str, geom: Geometry, p: float, q: float):
        self.kind, self.geom, self.p, self.q = kind, geom, p, q

    def value_grad(self, x, grad=False):
        return component_value(self.kind, self.geom, x, self.p, self.q, grad)

    def dual(self):
        if self.kind != "Dpq":
            raise ValueError("closed-form dual only for Dpq")
        return _SeqNorm("Dpq", self.geom, _conj(self.p), _conj(self.q))


def lr_norm(space: FilteredSpace, weights, r: float, n_steps: int = 1) -> VectorNorm:
    """``(sum P w |x|^r)^(1/r)``; ``r = inf`` gives the maximum over the support."""
    if not r >= 1:
        raise BadExponent(f"r = {r} must be >= 1")
    W = space.probs[None, :, None] * np.asarray(weights, dtype=float)[None, None, :]
    return _Lr(r, np.broadcast_to(W, (n_steps,) + W.shape[1:]))


def sequence_norm(space: FilteredSpace, weights, kind: str, p: float, q: float, n_steps: int) -> VectorNorm:
    return _SeqNorm(kind, _free_geometry(space, weights, n_steps), p, q)


def sum_intersection_duality_check(space: FilteredSpace, couple, g: RandomLqSequence,
                                   tol: float = 1e-6, admissible: str = "any", cap: int = 64,
                                   opts: SolverOptions | None = None, seed: int = 0) -> dict:
    """Check ``(X cap Y)* = X* + Y*`` and ``(X + Y)* = X* cap Y*`` numerically.

    Brute-force ratio ascent gives the left sides; the right sides use the
    closed-form duals of ``X`` and ``Y``, combined by the sum-norm solver
    and by a maximum.
    """
    X, Y = couple
    dim = _free_dimension(space, g.n_steps, g.values.shape[2], admissible)
    if dim > cap:
        raise DimensionCap(f"{dim} free scalars exceed the cap of {cap}")
    geom = _geometry_for(space, g.target.weights, g.n_steps, admissible)
    gv = g.values
    Xd, Yd = X.dual(), Y.dual()
    if not np.any(gv):
        d_int = s_dual = d_sum = i_dual = 0.0
    else:
        d_int = _ratio_ascent(("max", X, Y), gv, geom, 1.0, 1.0, 16, 500, tol, seed)[0]
        d_sum = _ratio_ascent(("sum", X, Y), gv, geom, 1.0, 1.0, 16, 500, tol, seed)[0]
        s_dual = minimize_sum([Xd, Yd], gv, geom, 1.0, 1.0, opts)[0]
        i_dual = float(max(Xd(gv), Yd(gv)))
        s_dual = float(s_dual)
    gap_int = abs(d_int - s_dual)
    gap_sum = abs(d_sum - i_dual)
    scale = max(1.0, s_dual, i_dual)
    return {"dual_of_intersection": float(d_int), "sum_of_duals": float(s_dual),
            "dual_of_sum": float(d_sum), "intersection_of_duals": float(i_dual),
            "gap_intersection": float(gap_int), "gap_sum": float(gap_sum),
            "holds": bool(gap_int <= tol * scale and gap_sum <= tol * scale)}


def mean_value_gap(x, alpha):
    """``alpha (x - 1) x^(alpha-1) - (x^alpha - 1)``, nonnegative for ``x, alpha >= 1``."""
    x = np.asarray(x, dtype=float)
    return alpha * (x - 1) * x ** (alpha - 1) - (x ** alpha - 1)
