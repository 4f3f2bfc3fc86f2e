"""Decoupled tangent sequences on finite filtered spaces.

Given an adapted sequence ``d_0, ..., d_{n-1}`` the product construction
enumerates samples ``(omega, a_0, ..., a_{n-1})`` where ``a_i`` is a level-``i``
atom inside the level-``i-1`` atom of ``omega``, drawn with its conditional
probability and independently across ``i``.  Then ``e_i = d_i(a_i)``.

* the product filtration at level ``i`` is generated by
  ``(F_i(omega), a_0, ..., a_i)``;
* ``G`` is generated by ``omega``.

Probabilities are tracked as exact rationals so that tangency and the
conditional-independence condition verify with gap exactly zero.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np

from .errors import NotAdapted, ProductTooLarge, ShapeMismatch
from .filtered_space import FilteredSpace, RandomLqSequence, lq_norm

__all__ = [
    "DecoupledPair",
    "decouple",
    "verify_tangency",
    "verify_ci",
    "decoupling_ratio",
    "tangent_under_map",
    "tangent_law",
]

PRODUCT_CAP = 10**6
EXACT_CAP = 200_000


@dataclass
class DecoupledPair:
    """Original and tangent sequences on a common product space.

    Attributes
    ----------
    product_space : FilteredSpace
        Level ``i`` for ``i < n`` is the product filtration; one extra final
        level separates every product sample.
    original, tangent : RandomLqSequence
    g_labels : ndarray (n_samples,)
        Atom labels of ``G``.
    exact_probs : list of Fraction, optional
        Exact product probabilities; floats are used when absent.
    """

    product_space: FilteredSpace
    original: RandomLqSequence
    tangent: RandomLqSequence
    g_labels: np.ndarray
    exact_probs: list | None = field(default=None, repr=False)

    @property
    def n_steps(self) -> int:
        return self.original.n_steps


def _children(space: FilteredSpace, n: int):
    """For each level ``i < n`` and each level-(i-1) block, its level-i blocks."""
    kids = []
    for i in range(n):
        up = space.labels(i - 1)
        lab = space.labels(i)
        d: dict[int, list[int]] = {}
        for b_up, b in sorted(set(zip(up.tolist(), lab.tolist()))):
            d.setdefault(b_up, []).append(b)
        kids.append(d)
    return kids


def product_size(space: FilteredSpace, n: int) -> int:
    kids = _children(space, n)
    total = 0
    for w in range(space.n_samples):
        m = 1
        for i in range(n):
            m *= len(kids[i][int(space.labels(i - 1)[w])])
        total += m
    return total


def decouple(space: FilteredSpace, seq: RandomLqSequence, cap: int = PRODUCT_CAP,
             tol: float = 1e-12) -> DecoupledPair:
    """Decoupled tangent sequence of an adapted ``seq`` by product enumeration."""
    if seq.adaptedness_gap() > tol:
        raise NotAdapted("decoupling needs an adapted sequence")
    n = seq.n_steps
    size = product_size(space, n)
    if size > cap:
        raise ProductTooLarge(f"product space has {size} samples, cap is {cap}")
    kids = _children(space, n)
    exact = size <= EXACT_CAP
    P = space.probs
    # a representative sample and the mass of every block
    rep, mass, mass_x = [], [], []
    for i in range(-1, n):
        lab = space.labels(i)
        nb = int(lab.max()) + 1
        r = np.zeros(nb, dtype=int)
        r[lab[::-1]] = np.arange(space.n_samples)[::-1]
        rep.append(r)
        mass.append(np.bincount(lab, P, minlength=nb))
        if exact:
            mx = [Fraction(0)] * nb
            for w in range(space.n_samples):
                mx[lab[w]] += Fraction(float(P[w]))
            mass_x.append(mx)
    omegas, atoms, probs, probs_x = [], [], [], []
    for w in range(space.n_samples):
        options = [kids[i][int(space.labels(i - 1)[w])] for i in range(n)]
        pw = Fraction(float(P[w])) if exact else None
        for a in itertools.product(*options):
            pr = float(P[w])
            px = pw
            for i, b in enumerate(a):
                pr *= mass[i + 1][b] / mass[i][space.labels(i - 1)[w]]
                if exact:
                    px *= mass_x[i + 1][b] / mass_x[i][space.labels(i - 1)[w]]
            omegas.append(w)
            atoms.append(a)
            probs.append(pr)
            probs_x.append(px)
    omegas = np.asarray(omegas, dtype=int)
    atoms = np.asarray(atoms, dtype=int).reshape(len(omegas), n)
    probs = np.asarray(probs)
    if exact:
        probs = np.array([float(x) for x in probs_x])
    probs = probs / probs.sum()
    N = len(omegas)
    levels = []
    for i in range(n):
        keys = np.column_stack([space.labels(i)[omegas], atoms[:, :i + 1]])
        levels.append(np.unique(keys, axis=0, return_inverse=True)[1].reshape(-1))
    levels.append(np.arange(N))
    pspace = FilteredSpace(probs, levels, check=False)
    orig = seq.values[:, omegas, :]
    tang = np.stack([seq.values[i, rep[i + 1][atoms[:, i]], :] for i in range(n)]) if n \
        else np.zeros((0, N, seq.values.shape[2]))
    return DecoupledPair(pspace, RandomLqSequence(pspace, seq.target, orig),
                         RandomLqSequence(pspace, seq.target, tang), omegas.copy(),
                         list(probs_x) if exact else None)


def _probs(pair: DecoupledPair) -> list:
    if pair.exact_probs is not None:
        return pair.exact_probs
    return [Fraction(float(x)) for x in pair.product_space.probs]


def _keys(values: np.ndarray) -> list:
    return [tuple(row) for row in values.tolist()]


def _laws(labels: np.ndarray, keys: list, probs: list) -> dict:
    """Unnormalized conditional laws: {atom: {value: mass}}."""
    out: dict = {}
    for a, k, pr in zip(labels.tolist(), keys, probs):
        d = out.setdefault(a, {})
        d[k] = d.get(k, 0) + pr
    return out


def _tv(a: dict, b: dict, mass) -> Fraction:
    keys = set(a) | set(b)
    return sum((abs(a.get(k, 0) - b.get(k, 0)) for k in keys), Fraction(0)) / (2 * mass)


def verify_tangency(pair: DecoupledPair) -> tuple[bool, float]:
    """Whether ``d_i`` and ``e_i`` share conditional laws given level ``i-1``.

    Returns the verdict and the worst total-variation gap over atoms.
    """
    sp, probs = pair.product_space, _probs(pair)
    worst = Fraction(0)
    for i in range(pair.n_steps):
        lab = sp.labels(i - 1)
        ld = _laws(lab, _keys(pair.original.values[i]), probs)
        le = _laws(lab, _keys(pair.tangent.values[i]), probs)
        for atom in ld:
            m = sum(ld[atom].values(), Fraction(0))
            worst = max(worst, _tv(ld[atom], le.get(atom, {}), m))
    return worst == 0, float(worst)


def verify_ci(pair: DecoupledPair) -> tuple[bool, float]:
    """Check both parts of the conditional-independence condition exactly.

    * the law of ``e_i`` given level ``i-1`` equals its law given ``G``;
    * given each ``G`` atom, ``(e_0, ..., e_{n-1})`` has the product law.
    """
    sp, probs = pair.product_space, _probs(pair)
    G = np.asarray(pair.g_labels)
    worst = Fraction(0)
    keys = [_keys(pair.tangent.values[i]) for i in range(pair.n_steps)]
    lg = [_laws(G, keys[i], probs) for i in range(pair.n_steps)]
    gmass: dict = {}
    for a, pr in zip(G.tolist(), probs):
        gmass[a] = gmass.get(a, 0) + pr
    for i in range(pair.n_steps):
        lab = sp.labels(i - 1)
        lf = _laws(lab, keys[i], probs)
        fmass = {a: sum(d.values(), Fraction(0)) for a, d in lf.items()}
        # compare normalized laws sample by sample (through distinct atom pairs)
        for a_f, a_g in set(zip(lab.tolist(), G.tolist())):
            u, v = lf[a_f], lg[i][a_g]
            mu, mv = fmass[a_f], gmass[a_g]
            gap = sum((abs(u.get(k, 0) / mu - v.get(k, 0) / mv) for k in set(u) | set(v)), Fraction(0)) / 2
            worst = max(worst, gap)
    if pair.n_steps > 1:
        joint: dict = {}
        for s, a in enumerate(G.tolist()):
            k = tuple(keys[i][s] for i in range(pair.n_steps))
            d = joint.setdefault(a, {})
            d[k] = d.get(k, 0) + probs[s]
        for a, d in joint.items():
            m = gmass[a]
            margs = [{k: v / m for k, v in lg[i][a].items()} for i in range(pair.n_steps)]
            for combo in itertools.product(*[list(mg.items()) for mg in margs]):
                k = tuple(c[0] for c in combo)
                prod = Fraction(1)
                for c in combo:
                    prod *= c[1]
                worst = max(worst, abs(d.get(k, 0) / m - prod))
    return worst == 0, float(worst)


def _moment(space: FilteredSpace, total: np.ndarray, p: float, q: float, w) -> float:
    r = lq_norm(total, q, w)
    m = r.max(initial=0.0)
    return 0.0 if m == 0 else float(m * (space.probs @ (r / m) ** p) ** (1 / p))


def decoupling_ratio(pair: DecoupledPair, p: float, q: float) -> tuple[float, float, float]:
    """``(E||sum d_i||_q^p)^(1/p)``, the same for ``e``, and their ratio."""
    w = pair.original.target.weights
    lhs = _moment(pair.product_space, pair.original.total(), p, q, w)
    rhs = _moment(pair.product_space, pair.tangent.total(), p, q, w)
    ratio = lhs / rhs if rhs > 0 else (1.0 if lhs == 0 else float("inf"))
    return lhs, rhs, ratio


def tangent_under_map(pair: DecoupledPair, maps: Sequence[Callable[[np.ndarray], np.ndarray]]) -> DecoupledPair:
    """Apply value maps ``h_i`` to both sequences.

    Each ``h_i`` receives an array of shape (n_samples, n_points) and acts row
    by row; it must return the same shape.
    """
    if len(maps) != pair.n_steps:
        raise ShapeMismatch("one map per index is required")

    def apply(seq: RandomLqSequence) -> RandomLqSequence:
        out = np.empty_like(seq.values)
        for i, h in enumerate(maps):
            rows = np.stack([np.asarray(h(row), dtype=float) for row in seq.values[i]])
            out[i] = rows.reshape(seq.values[i].shape)
        return seq.with_values(out)

    return DecoupledPair(pair.product_space, apply(pair.original), apply(pair.tangent),
                         pair.g_labels, pair.exact_probs)


def tangent_law(pair: DecoupledPair) -> dict:
    """Joint law of ``(e_0, ..., e_{n-1})`` as a dict of exact masses."""
    probs = _probs(pair)
    keys = [_keys(pair.tangent.values[i]) for i in range(pair.n_steps)]
    out: dict = {}
    for s, pr in enumerate(probs):
        k = tuple(keys[i][s] for i in range(pair.n_steps))
        out[k] = out.get(k, 0) + pr
    return out
