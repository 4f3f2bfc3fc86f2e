"""Integer-valued random measures on a time grid and their compensators.

Time ``[0, T]`` is cut into ``grid_n`` cells and the mark space is a finite
weighted set.  Two laws are available.

* Monte Carlo: given the history before cell ``c`` the count of events in
  ``(cell c, mark k)`` is Poisson with mean ``nu[c, k] = lambda_c m_k dt``
  and event times are uniform in the cell.  This is an exact Cox process
  with cell-wise constant predictable intensity, so ``nu`` is its
  compensator in continuous time.
* Exhaustive enumeration: a finite law per (cell, mark) with
  ``P(1) = nu - nu^2``, ``P(2) = nu^2 / 2`` and ``P(0) = 1 - nu + nu^2/2``.
  Mean and variance both equal ``nu`` (needs ``nu <= 1``), so the
  martingale property and the second-moment isometry hold exactly at grid
  scale while the number of outcomes stays finite.

Events are stored sparsely (path, cell, mark, time).  Compensators carry
cell edges, which may differ per path after a time change, and masses.
"""

from __future__ import annotations

import itertools
import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import (
    AtomInTime,
    BadExponent,
    BadRate,
    ConfigInvalid,
    IntensityNotPredictable,
    LipschitzViolated,
    MassExceedsOne,
    NotPredictable,
    ProductTooLarge,
    ShapeMismatch,
)
from .filtered_space import FiniteMeasureSpace, FilteredSpace, lq_norm
from .norms import RegimeNormSpec, SolverOptions, component_value, evaluate, weighted_geometry
from .rng import stream as rng_stream

__all__ = [
    "MarkSpace",
    "MarkedEventStream",
    "Compensator",
    "PredictableField",
    "CellHistory",
    "simulate_poisson_rm",
    "simulate_cox_rm",
    "enumerate_cox_rm",
    "compensated_integral",
    "integral_process",
    "novikov_check",
    "ihat_norms",
    "ihat_regime",
    "time_change",
    "history_space",
    "predictable_projection",
    "compensator_riemann",
    "mainintranmeas_report",
    "stream_to_jsonl",
    "stream_from_jsonl",
    "compensator_to_jsonl",
    "compensator_from_jsonl",
]

CHUNK = 1 << 16
PATH_CAP = 10**6


@dataclass(frozen=True)
class MarkSpace:
    """Finite mark set with positive weights."""

    weights: np.ndarray
    names: tuple = ()

    def __post_init__(self) -> None:
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        if w.size == 0 or np.any(~np.isfinite(w)) or np.any(w <= 0):
            raise ConfigInvalid("mark weights must be a nonempty array of positive numbers")
        object.__setattr__(self, "weights", w)

    @classmethod
    def single(cls) -> "MarkSpace":
        return cls(np.ones(1))

    @property
    def n_marks(self) -> int:
        return self.weights.size


# -- containers ---------------------------------------------------------------

@dataclass
class Compensator:
    """Predictable cell masses ``nu(cell c, mark k)`` per path.

    Attributes
    ----------
    edges : ndarray (1 or n_paths, n_cells + 1)
        Cell boundaries in time.
    mass : ndarray (1 or n_paths, n_cells, n_marks)
    """

    edges: np.ndarray
    mass: np.ndarray

    @property
    def n_cells(self) -> int:
        return self.mass.shape[1]

    @property
    def n_marks(self) -> int:
        return self.mass.shape[2]

    def cumulative(self) -> np.ndarray:
        """``nu([0, t_c] x J)`` at every edge, shape (rows, n_cells + 1)."""
        tot = self.mass.sum(axis=2)
        return np.concatenate([np.zeros((tot.shape[0], 1)), np.cumsum(tot, axis=1)], axis=1)

    def total(self) -> np.ndarray:
        return self.mass.sum(axis=(1, 2))

    def restrict(self, mask) -> "Compensator":
        """Compensator of the measure restricted to the predictable cell set ``mask``."""
        return Compensator(self.edges, self.mass * np.asarray(mask, dtype=float))


@dataclass
class MarkedEventStream:
    """Sparse events of every path.

    ``probs`` holds exact path probabilities in enumeration mode and is
    ``None`` for Monte Carlo streams (uniform weights).
    """

    n_paths: int
    edges: np.ndarray
    n_marks: int
    path: np.ndarray
    cell: np.ndarray
    mark: np.ndarray
    time: np.ndarray
    probs: np.ndarray | None = None
    _dense: np.ndarray | None = field(default=None, repr=False)
    _hist: FilteredSpace | None = field(default=None, repr=False)

    @property
    def n_cells(self) -> int:
        return self.edges.shape[1] - 1

    @property
    def n_events(self) -> int:
        return self.path.size

    @property
    def weights(self) -> np.ndarray:
        if self.probs is not None:
            return self.probs
        return np.full(self.n_paths, 1.0 / self.n_paths)

    def expect(self, values: np.ndarray) -> np.ndarray:
        """Weighted mean over the path axis (axis 0)."""
        return np.tensordot(self.weights, values, axes=(0, 0))

    def counts(self) -> np.ndarray:
        """Dense counts (n_paths, n_cells, n_marks); meant for small streams."""
        if self._dense is None:
            c = np.zeros((self.n_paths, self.n_cells, self.n_marks), dtype=np.int64)
            np.add.at(c, (self.path, self.cell, self.mark), 1)
            self._dense = c
        return self._dense

    def restrict(self, mask) -> "MarkedEventStream":
        """Keep the events whose (path, cell, mark) lies in ``mask``."""
        m = np.asarray(mask, dtype=bool)
        keep = m[self.path if m.shape[0] > 1 else 0, self.cell, self.mark]
        return MarkedEventStream(self.n_paths, self.edges, self.n_marks, self.path[keep], self.cell[keep],
                                 self.mark[keep], self.time[keep], self.probs)


def _sorted_stream(n_paths, edges, n_marks, path, cell, mark, time, probs=None) -> MarkedEventStream:
    order = np.lexsort((time, path))
    return MarkedEventStream(n_paths, edges, n_marks, path[order].astype(np.int64), cell[order].astype(np.int64),
                             mark[order].astype(np.int64), time[order].astype(float), probs)


@dataclass
class PredictableField:
    """Field ``F(path, cell, mark) in L^q(S)``, constant on each cell.

    ``values`` has shape (1 | n_paths, 1 | n_cells, 1 | n_marks, n_points);
    size-one axes broadcast.
    """

    values: np.ndarray
    target: FiniteMeasureSpace

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 4:
            raise ShapeMismatch("field values must have shape (paths, cells, marks, points)")
        if v.shape[3] != self.target.n_points:
            raise ShapeMismatch("last axis must match the target point set")
        self.values = v

    @classmethod
    def constant(cls, c: float = 1.0, target: FiniteMeasureSpace | None = None) -> "PredictableField":
        target = target or FiniteMeasureSpace(np.ones(1))
        return cls(np.full((1, 1, 1, target.n_points), float(c)), target)

    @classmethod
    def deterministic(cls, values, target: FiniteMeasureSpace | None = None) -> "PredictableField":
        """From an array (n_cells, n_marks[, n_points])."""
        v = np.asarray(values, dtype=float)
        if v.ndim == 2:
            v = v[..., None]
        target = target or FiniteMeasureSpace(np.ones(v.shape[-1]))
        return cls(v[None], target)

    @classmethod
    def from_history(cls, stream: MarkedEventStream, fn: Callable, target: FiniteMeasureSpace | None = None
                     ) -> "PredictableField":
        """Build ``F`` cell by cell from the counts strictly before each cell.

        ``fn(history)`` receives a :class:`CellHistory` and returns an array
        broadcastable to (n_paths, n_marks, n_points).
        """
        target = target or FiniteMeasureSpace(np.ones(1))
        counts = stream.counts()
        before = np.zeros((stream.n_paths, stream.n_marks), dtype=np.int64)
        out = np.empty((stream.n_paths, stream.n_cells, stream.n_marks, target.n_points))
        for c in range(stream.n_cells):
            a = np.asarray(fn(CellHistory(c, stream.edges[:, c], before.copy())), dtype=float)
            if a.ndim == 1:
                a = a[:, None, None]
            out[:, c] = np.broadcast_to(a, out.shape[:1] + out.shape[2:])
            before += counts[:, c]
        return cls(out, target)

    def full(self, n_paths: int, n_cells: int, n_marks: int) -> np.ndarray:
        return np.broadcast_to(self.values, (n_paths, n_cells, n_marks, self.target.n_points))

    def at_events(self, stream: MarkedEventStream) -> np.ndarray:
        v = self.values
        p = stream.path if v.shape[0] > 1 else 0
        c = stream.cell if v.shape[1] > 1 else 0
        k = stream.mark if v.shape[2] > 1 else 0
        return np.broadcast_to(v[p, c, k], (stream.n_events, v.shape[3]))


@dataclass
class CellHistory:
    """What a predictable rule may see: cell index, its start and past counts."""

    cell: int
    start: np.ndarray
    counts: np.ndarray  # (n_paths, n_marks) events strictly before the cell


# -- simulation ---------------------------------------------------------------

def _check_grid(T: float, grid_n: int) -> None:
    if not (T > 0 and np.isfinite(T)) or int(grid_n) < 1:
        raise ConfigInvalid("need T > 0 and grid_n >= 1")


def simulate_poisson_rm(T: float, grid_n: int, marks: MarkSpace, rate: float, n_paths: int, seed: int
                        ) -> tuple[MarkedEventStream, Compensator]:
    """Poisson random measure with intensity ``rate * m_k`` per unit time.

    Per mark, the total count of every path is Poisson and the event times
    are uniform on ``[0, T]``.  Paths are generated in fixed-size chunks,
    each with its own random substream.
    """
    _check_grid(T, grid_n)
    if not (rate >= 0 and np.isfinite(rate)):
        raise BadRate(f"rate {rate} must be finite and nonnegative")
    dt = T / grid_n
    if rate * marks.weights.max() * dt > 0.1:
        warnings.warn("expected count per cell exceeds 0.1", stacklevel=2)
    edges = np.linspace(0.0, T, grid_n + 1)[None, :]
    mass = np.broadcast_to(rate * marks.weights * dt, (1, grid_n, marks.n_marks)).copy()
    parts = []
    for start in range(0, n_paths, CHUNK):
        size = min(CHUNK, n_paths - start)
        g = rng_stream(seed, 1, start // CHUNK)
        for k in range(marks.n_marks):
            cnt = g.poisson(rate * marks.weights[k] * T, size=size)
            tot = int(cnt.sum())
            path = np.repeat(np.arange(start, start + size), cnt)
            t = g.uniform(0.0, T, size=tot)
            parts.append((path, t, np.full(tot, k)))
    if parts:
        path = np.concatenate([p[0] for p in parts])
        time = np.concatenate([p[1] for p in parts])
        mark = np.concatenate([p[2] for p in parts])
    else:
        path = time = mark = np.zeros(0)
    cell = np.minimum((time / dt).astype(np.int64), grid_n - 1)
    return _sorted_stream(n_paths, edges, marks.n_marks, path, cell, mark, time), Compensator(edges, mass)


def _intensity_rule(intensity, grid_n: int, max_rate: float):
    """Normalize an intensity specification to ``rule(history) -> (n_paths,)``."""
    if callable(intensity):
        def rule(h: CellHistory):
            return np.asarray(intensity(h), dtype=float)
    else:
        arr = np.asarray(intensity, dtype=float)
        if arr.ndim == 0:
            def rule(h):
                return np.full(h.counts.shape[0], float(arr))
        elif arr.ndim == 1 and arr.size == grid_n:
            def rule(h):
                return np.full(h.counts.shape[0], arr[h.cell])
        else:
            raise IntensityNotPredictable(
                "path-dependent intensities must be given as a rule of the past history")

    def checked(h):
        lam = np.broadcast_to(rule(h), (h.counts.shape[0],))
        if np.any(~np.isfinite(lam)) or np.any(lam < 0):
            raise BadRate("intensity must be finite and nonnegative")
        if np.any(lam > max_rate):
            raise BadRate(f"intensity exceeds the bound {max_rate}")
        return lam
    return checked


def simulate_cox_rm(T: float, grid_n: int, marks: MarkSpace, intensity, n_paths: int, seed: int,
                    max_rate: float = 1e6) -> tuple[MarkedEventStream, Compensator]:
    """Cox random measure driven by a predictable scalar intensity.

    Parameters
    ----------
    intensity : float, array (grid_n,) or callable
        A callable receives a :class:`CellHistory` (past counts only) and
        returns one rate per path.  Mark ``k`` gets rate ``intensity * m_k``.
    """
    _check_grid(T, grid_n)
    rule = _intensity_rule(intensity, grid_n, max_rate)
    dt = T / grid_n
    edges = np.linspace(0.0, T, grid_n + 1)[None, :]
    mass = np.empty((n_paths, grid_n, marks.n_marks))
    before = np.zeros((n_paths, marks.n_marks), dtype=np.int64)
    g = rng_stream(seed, 2)
    ev_path, ev_cell, ev_mark, ev_time = [], [], [], []
    for c in range(grid_n):
        lam = rule(CellHistory(c, edges[:, c], before.copy()))
        mass[:, c, :] = lam[:, None] * marks.weights[None, :] * dt
        cnt = g.poisson(mass[:, c, :])
        before += cnt
        for k in range(marks.n_marks):
            path = np.repeat(np.arange(n_paths), cnt[:, k])
            ev_path.append(path)
            ev_cell.append(np.full(path.size, c))
            ev_mark.append(np.full(path.size, k))
            ev_time.append(edges[0, c] + dt * g.uniform(size=path.size))
    cat = (lambda xs: np.concatenate(xs) if xs else np.zeros(0))
    st = _sorted_stream(n_paths, edges, marks.n_marks, cat(ev_path), cat(ev_cell), cat(ev_mark), cat(ev_time))
    return st, Compensator(edges, mass)


def enumerate_cox_rm(T: float, grid_n: int, marks: MarkSpace, intensity, cap: int = PATH_CAP
                     ) -> tuple[MarkedEventStream, Compensator]:
    """Every outcome of the finite two-moment law, with exact probabilities.

    Cell masses must not exceed one.  Outcomes of probability zero are
    dropped.
    """
    _check_grid(T, grid_n)
    rule = _intensity_rule(intensity, grid_n, math.inf)
    dt = T / grid_n
    K = marks.n_marks
    edges = np.linspace(0.0, T, grid_n + 1)[None, :]
    probs = np.ones(1)
    counts = np.zeros((1, 0, K), dtype=np.int64)
    masses = np.zeros((1, 0, K))
    for c in range(grid_n):
        before = counts.sum(axis=1)
        lam = rule(CellHistory(c, np.full(probs.size, edges[0, c]), before.copy()))
        nu = lam[:, None] * marks.weights[None, :] * dt  # (P, K)
        if np.any(nu > 1 + 1e-15):
            raise BadRate("enumeration needs every cell mass to be at most one")
        nu = np.minimum(nu, 1.0)
        law = np.stack([1 - nu + nu * nu / 2, nu - nu * nu, nu * nu / 2], axis=-1)  # (P, K, 3)
        outcomes = np.array(list(itertools.product(range(3), repeat=K)), dtype=np.int64)  # (O, K)
        pr = np.prod(law[:, np.arange(K)[None, :], outcomes], axis=-1)  # (P, O)
        keep = pr > 0
        pi, oi = np.nonzero(keep)
        if pi.size > cap:
            raise ProductTooLarge(f"enumeration needs {pi.size} paths, cap is {cap}")
        probs = probs[pi] * pr[pi, oi]
        counts = np.concatenate([counts[pi], outcomes[oi][:, None, :]], axis=1)
        masses = np.concatenate([masses[pi], nu[pi][:, None, :]], axis=1)
    P = probs.size
    # place the events of a cell at evenly spaced interior times, marks in order
    p_i, c_i, k_i = np.nonzero(counts)  # row-major: marks in order inside each (path, cell)
    reps = counts[p_i, c_i, k_i]
    path, cell, mark = np.repeat(p_i, reps), np.repeat(c_i, reps), np.repeat(k_i, reps)
    R = counts.sum(axis=2)[path, cell]
    start = np.r_[0, np.flatnonzero((np.diff(path) != 0) | (np.diff(cell) != 0)) + 1] if path.size \
        else np.zeros(0, dtype=np.int64)
    rank = np.arange(path.size) - np.repeat(start, np.diff(np.r_[start, path.size]))
    time = edges[0, cell] + dt * (rank + 1) / (R + 1)
    st = _sorted_stream(P, edges, K, path.astype(np.int64), cell.astype(np.int64), mark.astype(np.int64), time,
                        probs / probs.sum())
    st._dense = counts
    return st, Compensator(edges, masses)


# -- histories and predictability -------------------------------------------

def history_space(stream: MarkedEventStream) -> FilteredSpace:
    """Filtration of the paths: level ``c`` is the history through cell ``c``."""
    if stream._hist is None:
        counts = stream.counts()
        lab = np.zeros(stream.n_paths, dtype=np.int64)
        levels = []
        for c in range(stream.n_cells):
            key = np.column_stack([lab, counts[:, c, :]])
            lab = np.unique(key, axis=0, return_inverse=True)[1].reshape(-1)
            levels.append(lab)
        stream._hist = FilteredSpace(stream.weights, levels, check=False)
    return stream._hist


def predictability_gap(F: PredictableField, stream: MarkedEventStream) -> float:
    """Largest variation of ``F`` inside an atom of the pre-cell history."""
    if F.values.shape[0] == 1:
        return 0.0
    hs = history_space(stream)
    v = F.full(stream.n_paths, stream.n_cells, stream.n_marks)
    gap = 0.0
    for c in range(stream.n_cells):
        lab = hs.labels(c - 1)
        x = v[:, c].reshape(stream.n_paths, -1)
        order = np.argsort(lab, kind="stable")
        sl, sx = lab[order], x[order]
        first = np.r_[0, np.flatnonzero(np.diff(sl)) + 1]
        ref = np.repeat(sx[first], np.diff(np.r_[first, sl.size]), axis=0)
        gap = max(gap, float(np.max(np.abs(sx - ref), initial=0.0)))
    return gap


# -- integrals -----------------------------------------------------------------

def _cell_weights(comp: Compensator, t: float | None) -> np.ndarray:
    """Fraction of each cell inside ``[0, t]``, shape (rows, n_cells)."""
    e = comp.edges
    if t is None:
        return np.ones((e.shape[0], comp.n_cells))
    width = np.diff(e, axis=1)
    return np.clip((t - e[:, :-1]) / np.where(width > 0, width, 1.0), 0.0, 1.0)


def _nu_increments(F: PredictableField, mass: np.ndarray) -> np.ndarray:
    """``F * nu`` on every cell, shape (rows, n_cells, n_points)."""
    if F.values.shape[0] != mass.shape[0] and 1 not in (F.values.shape[0], mass.shape[0]):
        raise ShapeMismatch("field and compensator path counts disagree")
    rows = max(F.values.shape[0], mass.shape[0])
    fv = np.broadcast_to(F.values, (rows,) + mass.shape[1:] + (F.target.n_points,))
    return np.einsum("pcks,pck->pcs", fv, np.broadcast_to(mass, (rows,) + mass.shape[1:]))


def compensated_integral(F: PredictableField, stream: MarkedEventStream, comp: Compensator,
                         t: float | None = None, check: bool = True, parts: bool = False):
    """``(F * mu)_t - (F * nu)_t`` per path, shape (n_paths, n_points).

    With ``parts=True`` returns the two integrals separately.
    """
    if check and predictability_gap(F, stream) > 0:
        raise NotPredictable("field varies within an atom of the pre-cell history")
    S = F.target.n_points
    vals = F.at_events(stream)
    if t is not None:
        inside = stream.time <= t
        vals = vals * inside[:, None]
    mu = np.stack([np.bincount(stream.path, vals[:, s], minlength=stream.n_paths) for s in range(S)], axis=1)
    frac = _cell_weights(comp, t)  # (rows, C)
    m = comp.mass * frac[:, :, None]  # (rows, C, K)
    nu = np.broadcast_to(_nu_increments(F, m).sum(axis=1), mu.shape)
    if parts:
        return mu, nu.copy()
    return mu - nu


def integral_process(F: PredictableField, stream: MarkedEventStream, comp: Compensator,
                     check: bool = True) -> np.ndarray:
    """``(F * mu-bar)`` at every cell edge, shape (n_paths, n_cells + 1, n_points)."""
    if check and predictability_gap(F, stream) > 0:
        raise NotPredictable("field varies within an atom of the pre-cell history")
    S = F.target.n_points
    C = stream.n_cells
    inc = np.zeros((stream.n_paths, C, S))
    vals = F.at_events(stream)
    np.add.at(inc, (stream.path, stream.cell), vals)
    inc = inc - _nu_increments(F, comp.mass)
    out = np.zeros((stream.n_paths, C + 1, S))
    out[:, 1:] = np.cumsum(inc, axis=1)
    return out


def novikov_check(f: PredictableField, stream: MarkedEventStream, comp: Compensator, p: float,
                  mode: str = "upper", constant: float | None = None):
    """Moment of a scalar compensated integral against Novikov-type right sides.

    Modes
    -----
    ``"upper"``
        ``p <= 2``: right side ``E|f|^p * nu``; ``holds`` uses the constant 2
        on the root scale.  ``p > 2``: ``(E|f|^2 * nu)^(p/2) + E|f|^p * nu``;
        ``holds`` needs ``constant`` and is ``None`` otherwise.
    ``"two_sided"``
        Right side ``E|f|^p * nu``; every path must have total mass <= 1.
        ``holds`` checks ``rhs / C <= lhs <= C rhs`` for the given constant.
    ``"comparison"``
        Same right side without the mass restriction (shows how the two
        sides separate when the mass is large).
    """
    if not p >= 1:
        raise BadExponent(f"p = {p} must be >= 1")
    if f.target.n_points != 1:
        raise ShapeMismatch("novikov_check expects a scalar field")
    I = compensated_integral(f, stream, comp)[:, 0]
    lhs = float(stream.expect(np.abs(I) ** p))
    fv = f.full(max(f.values.shape[0], comp.mass.shape[0]), comp.n_cells, comp.n_marks)[..., 0]

    def star_nu(e):
        per = np.sum(np.abs(fv) ** e * comp.mass, axis=(1, 2))
        per = np.broadcast_to(per, (stream.n_paths,))
        return float(stream.expect(per))

    terms = {"E|f|^p*nu": star_nu(p)}
    if mode == "upper":
        if p <= 2:
            rhs = terms["E|f|^p*nu"]
            holds = lhs <= 2.0 ** p * rhs + 1e-12
        else:
            terms["(E|f|^2*nu)^(p/2)"] = star_nu(2) ** (p / 2)
            rhs = terms["E|f|^p*nu"] + terms["(E|f|^2*nu)^(p/2)"]
            holds = None if constant is None else lhs <= constant * rhs + 1e-12
    elif mode in ("two_sided", "comparison"):
        if mode == "two_sided" and np.max(comp.total(), initial=0.0) > 1 + 1e-12:
            raise MassExceedsOne("two-sided bounds need total compensator mass <= 1 on every path")
        rhs = terms["E|f|^p*nu"]
        holds = None if constant is None else (rhs / constant - 1e-12 <= lhs <= constant * rhs + 1e-12)
    else:
        raise ConfigInvalid(f"unknown mode {mode!r}")
    terms["rhs"] = rhs
    return lhs, terms, holds


# -- norms of fields -------------------------------------------------------------

def _ihat_setup(F: PredictableField, stream: MarkedEventStream, comp: Compensator):
    P, C, K = stream.n_paths, comp.n_cells, comp.n_marks
    S = F.target.n_points
    x = F.full(P, C, K).transpose(1, 2, 0, 3).reshape(C * K, P, S)
    m = np.broadcast_to(comp.mass, (P, C, K)).transpose(1, 2, 0).reshape(C * K, P)
    return x, m


def _predictable_projector(stream: MarkedEventStream, K: int, history: FilteredSpace | None = None):
    hs = history if history is not None else history_space(stream)

    def project(x: np.ndarray) -> np.ndarray:
        out = np.empty_like(x)
        for i in range(x.shape[0]):
            out[i] = hs.cond_exp(x[i], i // K - 1)
        return out
    return project


def ihat_norms(F: PredictableField, stream: MarkedEventStream, comp: Compensator, p: float, q: float
               ) -> dict:
    """The three field norms: square function, ``q``-power and ``p``-power sums.

    * ``S``   : ``(E ||(int |F|^2 dnu)^(1/2)||_q^p)^(1/p)``
    * ``Dqq`` : ``(E (int ||F||_q^q dnu)^(p/q))^(1/p)``
    * ``Dpq`` : ``(E int ||F||_q^p dnu)^(1/p)``
    """
    if not (p > 1 and q > 1 and np.isfinite(p) and np.isfinite(q)):
        raise BadExponent("exponents must lie in (1, inf)")
    x, m = _ihat_setup(F, stream, comp)
    geom = weighted_geometry(stream.weights, F.target.weights, m)
    return {k: component_value(k, geom, x, p, q) for k in ("S", "Dqq", "Dpq")}


def ihat_regime(F: PredictableField, stream: MarkedEventStream, comp: Compensator, p: float, q: float,
                opts: SolverOptions | None = None, history: FilteredSpace | None = None) -> float:
    """Regime combination of the three field norms; sums range over predictable splits.

    ``history`` overrides the path filtration (level ``c`` = information
    through cell ``c``); by default it is generated by the stream itself.
    """
    spec = RegimeNormSpec(p, q)
    x, m = _ihat_setup(F, stream, comp)
    geom = weighted_geometry(stream.weights, F.target.weights, m,
                             _predictable_projector(stream, comp.n_marks, history))
    return evaluate(spec.expr, geom, x, p, q, opts)


# -- time change -----------------------------------------------------------------

def time_change(stream: MarkedEventStream, comp: Compensator):
    """Reparametrize time by ``A_t = nu([0, t] x J) + t``.

    Cells keep their masses and indexes; only the edges and event times move
    (linearly inside each cell).  Returns the new stream and compensator, the
    new edges ``A(t_c)`` and the inverse map ``tau(s, path)``.
    """
    width = np.diff(comp.edges, axis=1)
    if np.any(width < 0):
        raise AtomInTime("cell edges must be nondecreasing")
    tot = comp.mass.sum(axis=2)
    if np.any((np.broadcast_to(width, np.broadcast(width, tot).shape) == 0)
              & (np.broadcast_to(tot, np.broadcast(width, tot).shape) > 0)):
        raise AtomInTime("positive mass on a cell of zero length")
    A = comp.edges + comp.cumulative()  # (rows, C+1)
    new_w = np.diff(A, axis=1)
    rows_e = A.shape[0]
    pe = stream.path if rows_e > 1 else np.zeros_like(stream.path)
    we = np.broadcast_to(width, (rows_e, width.shape[1]))
    old0 = np.broadcast_to(comp.edges, (rows_e, comp.edges.shape[1]))[pe, stream.cell]
    frac = np.where(we[pe, stream.cell] > 0, (stream.time - old0) / np.where(we[pe, stream.cell] > 0,
                                                                              we[pe, stream.cell], 1.0), 0.0)
    new_t = A[pe, stream.cell] + frac * new_w[pe, stream.cell]
    st = MarkedEventStream(stream.n_paths, A, stream.n_marks, stream.path, stream.cell, stream.mark, new_t,
                           stream.probs, stream._dense, stream._hist)
    new_comp = Compensator(A, comp.mass)
    old_edges = np.broadcast_to(comp.edges, A.shape)

    def tau(s: float, path: int = 0) -> float:
        r = path if rows_e > 1 else 0
        return float(np.interp(s, A[r], old_edges[r]))

    return st, new_comp, A, tau


def density(comp: Compensator) -> np.ndarray:
    """Compensator mass per unit time on every cell."""
    w = np.diff(comp.edges, axis=1)
    tot = comp.mass.sum(axis=2)
    return np.where(w > 0, tot / np.where(w > 0, w, 1.0), np.where(tot > 0, np.inf, 0.0))


# -- discretizations ---------------------------------------------------------------

def _coarse_ratio(stream: MarkedEventStream, m: int) -> tuple[int, int]:
    e = stream.edges
    if e.shape[0] != 1:
        raise ConfigInvalid("dyadic discretizations need common cell edges")
    T = float(e[0, -1] - e[0, 0])
    n_coarse = int(math.floor(2 ** m * T + 1e-12))
    per = stream.n_cells / (2 ** m * T)
    if abs(per - round(per)) > 1e-9 or round(per) < 1:
        raise ConfigInvalid("grid does not refine the dyadic level")
    return int(round(per)), n_coarse


def predictable_projection(process, stream: MarkedEventStream, m: int) -> np.ndarray:
    """Replace values on each dyadic cell by their mean given the history at its start.

    ``process`` has shape (n_paths, n_cells) and holds the value on each
    grid cell.
    """
    X = np.asarray(process, dtype=float)
    if X.shape[:2] != (stream.n_paths, stream.n_cells):
        raise ShapeMismatch("process must have shape (n_paths, n_cells)")
    per, n_coarse = _coarse_ratio(stream, m)
    hs = history_space(stream)
    out = X.copy()
    for j in range(n_coarse):
        lo, hi = j * per, (j + 1) * per
        out[:, lo:hi] = hs.cond_exp(X[:, lo:hi], lo - 1)
    return out


def compensator_riemann(F_edges, stream: MarkedEventStream, m: int, lipschitz: float,
                        tol: float = 1e-12) -> np.ndarray:
    """``sum_n E[F((n+1)/2^m) - F(n/2^m) | history at n/2^m]`` per path.

    ``F_edges`` holds an increasing predictable functional at every cell
    edge, shape (n_paths, n_cells + 1), with ``F(0) = 0`` and Lipschitz
    constant ``lipschitz``.
    """
    Fv = np.asarray(F_edges, dtype=float)
    if Fv.shape != (stream.n_paths, stream.n_cells + 1):
        raise ShapeMismatch("F must be given at every cell edge")
    dt = np.diff(stream.edges[0])
    inc = np.diff(Fv, axis=1)
    if np.max(np.abs(Fv[:, 0]), initial=0.0) > tol or np.any(inc < -tol) \
            or np.any(inc > lipschitz * dt[None, :] * (1 + 1e-12) + tol):
        raise LipschitzViolated("F must start at zero, increase and be Lipschitz")
    per, n_coarse = _coarse_ratio(stream, m)
    hs = history_space(stream)
    out = np.zeros(stream.n_paths)
    for n in range(n_coarse):
        lo, hi = n * per, (n + 1) * per
        out += hs.cond_exp(Fv[:, hi] - Fv[:, lo], lo - 1)
    return out


# -- equivalence report --------------------------------------------------------------

def mainintranmeas_report(fields: Sequence[PredictableField], stream: MarkedEventStream, comp: Compensator,
                          p: float, q: float, opts: SolverOptions | None = None) -> dict:
    """Ratios of integral moments to the regime field norm.

    For each nonzero field: ``(E sup_c ||(F * mu-bar)_{t_c}||^p)^(1/p)`` over grid
    times, the endpoint moment, and both divided by :func:`ihat_regime`.
    """
    rows = []
    for idx, F in enumerate(fields):
        if not np.any(F.values):
            continue
        proc = integral_process(F, stream, comp)
        nrm = lq_norm(proc, q, F.target.weights)  # (P, C+1)
        lhs_sup = float(stream.expect(nrm.max(axis=1) ** p)) ** (1 / p)
        lhs_end = float(stream.expect(nrm[:, -1] ** p)) ** (1 / p)
        rhs = ihat_regime(F, stream, comp, p, q, opts)
        rows.append({"instance_id": idx, "lhs_sup": lhs_sup, "lhs_end": lhs_end, "rhs": rhs,
                     "ratio_sup": lhs_sup / rhs, "ratio_end": lhs_end / rhs})
    out = {"p": p, "q": q, "regime": RegimeNormSpec(p, q).name, "rows": rows}
    if rows:
        for key in ("ratio_sup", "ratio_end"):
            r = np.array([row[key] for row in rows])
            out[key] = {"min": float(r.min()), "max": float(r.max()), "spread": float(r.max() / r.min())}
    return out


# -- serialization ----------------------------------------------------------------------

def stream_to_jsonl(stream: MarkedEventStream) -> str:
    """One line per path: ``{"events": [[t, mark], ...]}``."""
    starts = np.searchsorted(stream.path, np.arange(stream.n_paths + 1))
    lines = []
    for p in range(stream.n_paths):
        sl = slice(starts[p], starts[p + 1])
        ev = [[float(t), int(k)] for t, k in zip(stream.time[sl], stream.mark[sl])]
        lines.append(json.dumps({"events": ev}))
    return "\n".join(lines) + "\n"


def stream_from_jsonl(text: str, edges, n_marks: int, probs=None) -> MarkedEventStream:
    rows = [json.loads(line) for line in text.splitlines() if line.strip()]
    edges = np.atleast_2d(np.asarray(edges, dtype=float))
    path, cell, mark, time = [], [], [], []
    for p, row in enumerate(rows):
        e = edges[p if edges.shape[0] > 1 else 0]
        for t, k in row["events"]:
            c = int(np.clip(np.searchsorted(e, t, side="left") - 1, 0, e.size - 2))
            path.append(p)
            cell.append(c)
            mark.append(int(k))
            time.append(float(t))
    return _sorted_stream(len(rows), edges, n_marks, np.array(path, dtype=np.int64), np.array(cell, dtype=np.int64),
                          np.array(mark, dtype=np.int64), np.array(time, dtype=float),
                          None if probs is None else np.asarray(probs, dtype=float))


def compensator_to_jsonl(comp: Compensator) -> str:
    """One line per row: ``{"cells": [[t0, t1, mark, mass], ...]}``."""
    lines = []
    for r in range(comp.mass.shape[0]):
        e = comp.edges[r if comp.edges.shape[0] > 1 else 0]
        cells = [[float(e[c]), float(e[c + 1]), k, float(comp.mass[r, c, k])]
                 for c in range(comp.n_cells) for k in range(comp.n_marks)]
        lines.append(json.dumps({"cells": cells}))
    return "\n".join(lines) + "\n"


def compensator_from_jsonl(text: str) -> Compensator:
    rows = [json.loads(line)["cells"] for line in text.splitlines() if line.strip()]
    n_marks = 1 + max(int(c[2]) for r in rows for c in r)
    n_cells = len(rows[0]) // n_marks
    edges = np.zeros((len(rows), n_cells + 1))
    mass = np.zeros((len(rows), n_cells, n_marks))
    for r, cells in enumerate(rows):
        for i, (t0, t1, k, m) in enumerate(cells):
            c = i // n_marks
            edges[r, c], edges[r, c + 1] = t0, t1
            mass[r, c, int(k)] = m
    if np.all(edges == edges[:1]):
        edges = edges[:1]
    return Compensator(edges, mass)
