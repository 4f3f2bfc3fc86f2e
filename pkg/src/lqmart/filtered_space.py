"""Finite filtered probability spaces and L^q(S)-valued random sequences.

A :class:`FilteredSpace` is a finite set of samples with positive
probabilities and a chain of refining partitions (levels ``0 .. n-1``).
Level ``-1`` is the trivial partition, so ``E_{-1} = E``.  Conditional
expectations are exact atom-wise weighted averages.

L^q(S) for a finite weighted point set S is modelled by plain arrays whose
last axis runs over the points of a :class:`FiniteMeasureSpace`.
A :class:`RandomLqSequence` stores ``values[i, omega, s]`` with entry ``i``
adapted to level ``i``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Hashable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import (
    BadExponent,
    BadProbabilities,
    LevelOutOfRange,
    NonRefining,
    ShapeMismatch,
)

__all__ = [
    "FiniteMeasureSpace",
    "FilteredSpace",
    "RandomLqSequence",
    "build_filtered_space",
    "dyadic_space",
    "tree_space",
    "conditional_expectation",
    "lq_norm",
    "lp_moment",
    "is_mds",
    "mds_project",
    "random_mds",
    "dumps",
    "loads",
]

PROB_TOL = 1e-12
MDS_TOL = 1e-12


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class FiniteMeasureSpace:
    """Finite point set S with strictly positive weights."""

    weights: np.ndarray
    points: tuple = ()

    def __post_init__(self) -> None:
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        if w.ndim != 1 or w.size == 0:
            raise ShapeMismatch("weights must be a nonempty 1-d array")
        if not np.all(np.isfinite(w)) or np.any(w <= 0):
            raise ValueError("point weights must be strictly positive and finite")
        object.__setattr__(self, "weights", _frozen(w))
        if not self.points:
            object.__setattr__(self, "points", tuple(range(w.size)))
        elif len(self.points) != w.size:
            raise ShapeMismatch("points and weights differ in length")

    @classmethod
    def uniform(cls, n: int) -> "FiniteMeasureSpace":
        return cls(np.ones(n))

    @property
    def n_points(self) -> int:
        return self.weights.size

    def norm(self, v: np.ndarray, q: float) -> np.ndarray:
        """L^q norm along the last axis."""
        return lq_norm(v, q, self.weights)


def lq_norm(v, q: float, weights=None):
    """``(sum_j w_j |v_j|^q)^(1/q)`` along the last axis.

    Parameters
    ----------
    v : array_like
        Values; the last axis runs over the points of S.
    q : float
        Exponent, ``q >= 1``.
    weights : array_like, optional
        Point weights (default all ones).
    """
    if not q >= 1 or not np.isfinite(q):
        raise BadExponent(f"lq_norm needs q >= 1, got {q}")
    v = np.asarray(v, dtype=float)
    w = np.ones(v.shape[-1]) if weights is None else np.asarray(weights, dtype=float)
    a = np.abs(v)
    if q == 1:
        return np.sum(w * a, axis=-1)
    if q == 2:
        return np.sqrt(np.sum(w * a * a, axis=-1))
    # rescale by the max entry to avoid overflow for large q
    m = np.max(a, axis=-1, keepdims=True)
    safe = np.where(m > 0, m, 1.0)
    r = np.sum(w * (a / safe) ** q, axis=-1) ** (1.0 / q)
    return r * np.squeeze(safe, axis=-1)


def _labels_from_blocks(blocks: Sequence[Sequence[Hashable]], index: dict, n: int, level: int) -> np.ndarray:
    lab = np.full(n, -1, dtype=np.int64)
    for b, block in enumerate(blocks):
        for sid in block:
            if sid not in index:
                raise NonRefining(f"level {level}: unknown sample {sid!r}")
            k = index[sid]
            if lab[k] != -1:
                raise NonRefining(f"level {level}: sample {sid!r} in two blocks")
            lab[k] = b
    if np.any(lab < 0):
        raise NonRefining(f"level {level}: blocks do not cover every sample")
    return lab


def _canonical(labels: np.ndarray) -> np.ndarray:
    """Relabel blocks 0, 1, ... in order of first appearance."""
    _, first, inv = np.unique(labels, return_index=True, return_inverse=True)
    order = np.argsort(np.argsort(first))
    return order[inv].astype(np.int64)


class FilteredSpace:
    """Finite probability space with a chain of refining partitions.

    Parameters
    ----------
    probs : array_like
        Strictly positive sample probabilities summing to one.
    labels : sequence of array_like
        ``labels[i][k]`` is the block of sample ``k`` at level ``i``.
    ids : sequence, optional
        Sample identifiers (default ``0 .. n-1``).
    """

    def __init__(self, probs, labels: Sequence, ids: Sequence | None = None, check: bool = True):
        p = np.asarray(probs, dtype=float)
        if p.ndim != 1 or p.size == 0:
            raise BadProbabilities("probabilities must be a nonempty 1-d array")
        if check:
            if not np.all(np.isfinite(p)) or np.any(p <= 0):
                raise BadProbabilities("probabilities must be strictly positive")
            if abs(p.sum() - 1.0) > PROB_TOL:
                raise BadProbabilities(f"probabilities sum to {p.sum()!r}, not 1")
        n = p.size
        labs = []
        for i, lab in enumerate(labels):
            lab = np.asarray(lab, dtype=np.int64)
            if lab.shape != (n,):
                raise NonRefining(f"level {i}: label array has wrong shape")
            labs.append(_canonical(lab))
        if check:
            prev = np.zeros(n, dtype=np.int64)
            for i, lab in enumerate(labs):
                pairs = np.unique(np.stack([lab, prev]), axis=1)
                if pairs.shape[1] != lab.max() + 1:
                    raise NonRefining(f"level {i} does not refine level {i - 1}")
                prev = lab
        for lab in labs:
            lab.setflags(write=False)
        self.probs = _frozen(p)
        self._labels = tuple(labs)
        self._trivial = np.zeros(n, dtype=np.int64)
        self._trivial.setflags(write=False)
        self.ids = tuple(range(n)) if ids is None else tuple(ids)
        self._cache: dict[int, tuple] = {}

    # -- structure -------------------------------------------------------
    @property
    def n_samples(self) -> int:
        return self.probs.size

    @property
    def n_levels(self) -> int:
        return len(self._labels)

    def _check_level(self, level: int) -> None:
        if not -1 <= level < self.n_levels:
            raise LevelOutOfRange(f"level {level} outside -1..{self.n_levels - 1}")

    def labels(self, level: int) -> np.ndarray:
        self._check_level(level)
        return self._trivial if level == -1 else self._labels[level]

    def n_blocks(self, level: int) -> int:
        return int(self.labels(level).max()) + 1

    def partition(self, level: int) -> list[list]:
        lab = self.labels(level)
        return [[self.ids[k] for k in np.flatnonzero(lab == b)] for b in range(lab.max() + 1)]

    def _operator(self, level: int):
        if level not in self._cache:
            lab = self.labels(level)
            k = int(lab.max()) + 1
            n = self.n_samples
            onehot = sp.csr_matrix((np.ones(n), (lab, np.arange(n))), shape=(k, n))
            mass = onehot @ self.probs
            self._cache[level] = (onehot, mass)
        return self._cache[level]

    def block_mass(self, level: int) -> np.ndarray:
        return self._operator(level)[1]

    # -- conditional expectation -----------------------------------------
    def cond_exp(self, X, level: int) -> np.ndarray:
        """``E(X | F_level)``; samples run along axis 0 of ``X``."""
        self._check_level(level)
        X = np.asarray(X, dtype=float)
        if X.shape[0] != self.n_samples:
            raise ShapeMismatch("first axis of X must run over samples")
        if level == -1:
            m = np.tensordot(self.probs, X, axes=(0, 0))
            return np.broadcast_to(m, X.shape).copy()
        onehot, mass = self._operator(level)
        lab = self._labels[level]
        if mass.size == self.n_samples:
            return X.copy()
        flat = X.reshape(self.n_samples, -1)
        avg = (onehot @ (self.probs[:, None] * flat)) / mass[:, None]
        return avg[lab].reshape(X.shape)

    def expect(self, X) -> np.ndarray:
        """Unconditional expectation over axis 0."""
        return np.tensordot(self.probs, np.asarray(X, dtype=float), axes=(0, 0))

    def measurability_gap(self, X, level: int) -> float:
        """Largest deviation of ``X`` from its ``F_level`` conditional expectation."""
        X = np.asarray(X, dtype=float)
        if X.size == 0:
            return 0.0
        return float(np.max(np.abs(X - self.cond_exp(X, level))))

    def relabel(self, perm: Sequence[int]) -> "FilteredSpace":
        """Same space with samples reordered by ``perm`` (new k = old perm[k])."""
        perm = np.asarray(perm)
        return FilteredSpace(self.probs[perm], [lab[perm] for lab in self._labels],
                             [self.ids[k] for k in perm], check=False)

    def __repr__(self) -> str:
        blocks = [self.n_blocks(i) for i in range(self.n_levels)]
        return f"FilteredSpace(n_samples={self.n_samples}, blocks_per_level={blocks})"


def build_filtered_space(probs, partitions: Sequence[Sequence[Sequence[Hashable]]],
                         ids: Sequence[Hashable] | None = None) -> FilteredSpace:
    """Validated filtered space from explicit partitions.

    Parameters
    ----------
    probs : array_like
        Sample probabilities.
    partitions : list of partitions
        ``partitions[i]`` is a list of blocks, each a list of sample ids,
        describing level ``i``.  Each level must refine the previous one.
    ids : sequence, optional
        Sample identifiers; defaults to ``0 .. n-1``.
    """
    p = np.asarray(probs, dtype=float)
    ids = list(range(p.size)) if ids is None else list(ids)
    if len(ids) != p.size:
        raise BadProbabilities("one probability per sample id is required")
    index = {sid: k for k, sid in enumerate(ids)}
    labels = [_labels_from_blocks(blocks, index, p.size, i) for i, blocks in enumerate(partitions)]
    return FilteredSpace(p, labels, ids)


def tree_space(branching: Sequence[int], probs=None, rng: np.random.Generator | None = None) -> FilteredSpace:
    """Space of a rooted tree whose level ``i`` nodes split into ``branching[i]`` children.

    Level ``i`` is the partition by the first ``i + 1`` digits, so the last
    level is the discrete partition.  With ``rng`` and no ``probs`` the
    conditional branch probabilities are drawn from a Dirichlet(2, ..., 2).
    """
    branching = [int(b) for b in branching]
    digits = np.array(np.meshgrid(*[np.arange(b) for b in branching], indexing="ij")).reshape(len(branching), -1).T
    n = digits.shape[0]
    if probs is None:
        if rng is None:
            probs = np.full(n, 1.0 / n)
        else:
            probs = np.ones(n)
            for i, b in enumerate(branching):
                stride = int(np.prod(branching[i + 1:], dtype=np.int64))
                parents = n // (b * stride)
                cond = rng.dirichlet(np.full(b, 2.0), size=parents)  # (parents, b)
                probs = probs * np.repeat(cond.reshape(-1), stride)
            probs = probs / probs.sum()
    labels = []
    for i in range(len(branching)):
        weights = np.cumprod([1] + branching[:i + 1][::-1][:-1])[::-1]
        labels.append(digits[:, :i + 1] @ weights)
    return FilteredSpace(probs, labels)


def dyadic_space(depth: int, probs=None, rng: np.random.Generator | None = None) -> FilteredSpace:
    """Binary tree of the given depth (``2**depth`` leaves, ``depth`` levels)."""
    return tree_space([2] * depth, probs, rng)


def conditional_expectation(space: FilteredSpace, X, i: int) -> np.ndarray:
    """Atom-wise probability-weighted average of ``X`` over the blocks of level ``i``."""
    return space.cond_exp(X, i)


def lp_moment(space: FilteredSpace, Z, p: float) -> float:
    """``(E|Z|^p)^(1/p)`` for a scalar random variable, ``p > 0``."""
    if not p > 0 or not np.isfinite(p):
        raise BadExponent(f"lp_moment needs p > 0, got {p}")
    Z = np.abs(np.asarray(Z, dtype=float))
    if Z.shape != (space.n_samples,):
        raise ShapeMismatch("Z must hold one value per sample")
    m = Z.max(initial=0.0)
    if m == 0:
        return 0.0
    return float(m * (space.probs @ (Z / m) ** p) ** (1.0 / p))


@dataclass(frozen=True)
class RandomLqSequence:
    """Sequence of L^q(S)-valued random variables on a filtered space.

    ``values[i, k, s]`` is the value of entry ``i`` on sample ``k`` at point
    ``s``.  Entry ``i`` is adapted to level ``i``; its predictable
    conditional expectation is taken at level ``i - 1``.
    """

    space: FilteredSpace
    target: FiniteMeasureSpace
    values: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 2:
            v = v[:, :, None]
        if v.ndim != 3 or v.shape[1] != self.space.n_samples or v.shape[2] != self.target.n_points:
            raise ShapeMismatch(
                f"values must have shape (n, {self.space.n_samples}, {self.target.n_points}), got {v.shape}")
        if v.shape[0] > self.space.n_levels:
            raise LevelOutOfRange(f"{v.shape[0]} entries but only {self.space.n_levels} levels")
        object.__setattr__(self, "values", _frozen(v))

    @property
    def n_steps(self) -> int:
        return self.values.shape[0]

    def with_values(self, values) -> "RandomLqSequence":
        return RandomLqSequence(self.space, self.target, values)

    def scaled(self, c: float) -> "RandomLqSequence":
        return self.with_values(c * self.values)

    def total(self) -> np.ndarray:
        """Per-sample sum of all entries, shape (n_samples, n_points)."""
        return self.values.sum(axis=0)

    def adaptedness_gap(self) -> float:
        return max((self.space.measurability_gap(self.values[i], i) for i in range(self.n_steps)), default=0.0)

    def predictable_means(self) -> np.ndarray:
        """``E_{i-1} f_i`` for every ``i``."""
        return np.stack([self.space.cond_exp(self.values[i], i - 1) for i in range(self.n_steps)]) \
            if self.n_steps else self.values.copy()


def is_mds(space: FilteredSpace, seq: RandomLqSequence, tol: float = MDS_TOL) -> tuple[bool, float]:
    """Whether every ``E_{i-1} d_i`` vanishes, with the worst violation."""
    if seq.n_steps == 0:
        return True, 0.0
    viol = float(np.max(np.abs(seq.predictable_means())))
    return viol <= tol, viol


def mds_project(space: FilteredSpace, seq: RandomLqSequence) -> RandomLqSequence:
    """``(E_i f_i - E_{i-1} f_i)_i``, the projection onto martingale differences."""
    out = np.empty_like(seq.values)
    for i in range(seq.n_steps):
        a = space.cond_exp(seq.values[i], i)
        out[i] = a - space.cond_exp(a, i - 1)
    return seq.with_values(out)


def random_mds(space: FilteredSpace, target: FiniteMeasureSpace, rng: np.random.Generator,
               n_steps: int | None = None, scale=1.0) -> RandomLqSequence:
    """Random martingale difference sequence: projected Gaussian noise.

    ``scale`` may be a scalar or an array of per-step scales.
    """
    n = space.n_levels if n_steps is None else n_steps
    raw = rng.standard_normal((n, space.n_samples, target.n_points))
    raw *= np.reshape(np.broadcast_to(scale, (n,)), (n, 1, 1))
    return mds_project(space, RandomLqSequence(space, target, raw))


# -- serialization ---------------------------------------------------------

def to_document(seq: RandomLqSequence) -> dict[str, Any]:
    space = seq.space
    return {
        "probs": space.probs.tolist(),
        "levels": [[[int(k) for k in np.flatnonzero(space.labels(i) == b)] for b in range(space.n_blocks(i))]
                   for i in range(space.n_levels)],
        "weights": seq.target.weights.tolist(),
        "entries": seq.values.tolist(),
    }


def from_document(doc: dict[str, Any]) -> RandomLqSequence:
    space = build_filtered_space(doc["probs"], doc["levels"])
    target = FiniteMeasureSpace(np.array(doc["weights"], dtype=float))
    entries = np.array(doc["entries"], dtype=float).reshape(-1, space.n_samples, target.n_points)
    return RandomLqSequence(space, target, entries)


def dumps(seq: RandomLqSequence) -> str:
    """JSON text; floats use shortest round-trip repr, so reloading is bit-exact."""
    return json.dumps(to_document(seq))


def loads(text: str) -> RandomLqSequence:
    return from_document(json.loads(text))
