"""Simulated H-valued martingales with three canonical parts and their integrals.

Each grid cell ``(t_c, t_{c+1}]`` is split into two sub-steps.

a. a continuous-type increment ``sqrt(dt) sigma_c G xi`` with a Rademacher
   vector ``xi``, together with compensated jumps ``sum_k (N_k - nu_k) x_k``
   whose counts follow the random-measure laws (Poisson counts for Monte
   Carlo, the finite two-moment law for enumeration);
b. if ``t_{c+1}`` is a scheduled time, an accessible jump ``a_c zeta`` with
   ``zeta`` drawn from a finite centred law.

The scales ``sigma_c``, jump rates and ``a_c`` are predictable (they see the
path strictly before the sub-step).  The filtration has levels ``2c`` (after
sub-step a) and ``2c+1`` (after sub-step b), so ``F_{tau-}`` of an accessible
time is level ``2c``.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import (
    BadExponent,
    ConfigInvalid,
    NotConditionallyCentered,
    NotPredictable,
    ProductTooLarge,
    ShapeMismatch,
    UnannotatedIncrement,
)
from .filtered_space import FiniteMeasureSpace, FilteredSpace, RandomLqSequence, lq_norm
from .norms import (
    RegimeNormSpec,
    SolverOptions,
    component_value,
    evaluate,
    norm_Dpq,
    norm_Dqq,
    norm_S,
    odd_regime_norm,
    weighted_geometry,
)
from .random_measure import Compensator, MarkedEventStream, PredictableField, ihat_regime
from .rng import stream as rng_stream

__all__ = [
    "BundleConfig",
    "PathBundle",
    "OperatorProcess",
    "simulate_bundle",
    "elementary_integral",
    "integral_parts",
    "integral_process",
    "path_values",
    "quadratic_variation",
    "coordinate_brackets",
    "AnnotatedIncreasing",
    "bracket_parts",
    "decompose_increasing",
    "jump_measure",
    "accessible_norms",
    "accessible_odd_sequence",
    "accessible_regime",
    "gamma_norm_mc",
    "gamma_norm_sqfn",
    "continuous_part_norm",
    "qlc_field",
    "main_si_report",
    "bdg_check",
]

PATH_CAP = 10**6


# -- configuration -------------------------------------------------------------

@dataclass
class BundleConfig:
    """Parameters of a simulated martingale.

    ``continuous``: ``{"G": HxH matrix, "state_coef": b}`` with scale
    ``1 + b tanh(|M|)``.  ``qlc_jumps``: ``{"rate", "marks": K x H,
    "mark_weights", "state_coef": a}`` with rate ``rate (1 + a tanh(count))``.
    ``accessible``: ``{"times": grid times, "dists": [{"values", "probs"}],
    "state_coef": b}`` with scale ``1 + b tanh(|M|)``.  Missing parts are off.
    """

    grid_n: int
    T: float = 1.0
    H_dim: int = 1
    S_weights: tuple = (1.0,)
    continuous: dict | None = None
    qlc_jumps: dict | None = None
    accessible: dict | None = None

    def __post_init__(self) -> None:
        if int(self.grid_n) < 1 or not (self.T > 0) or int(self.H_dim) < 1:
            raise ConfigInvalid("need grid_n >= 1, T > 0 and H_dim >= 1")
        H = self.H_dim
        if self.continuous is not None:
            G = np.asarray(self.continuous.get("G", np.eye(H)), dtype=float)
            if G.shape != (H, H):
                raise ConfigInvalid("continuous.G must be H_dim x H_dim")
            if self.continuous.get("state_coef", 0.0) < 0:
                raise ConfigInvalid("state coefficients must be nonnegative")
        if self.qlc_jumps is not None:
            q = self.qlc_jumps
            marks = np.asarray(q.get("marks", []), dtype=float)
            if marks.ndim != 2 or marks.shape[1] != H or marks.shape[0] == 0:
                raise ConfigInvalid("qlc_jumps.marks must be a K x H_dim array")
            w = np.asarray(q.get("mark_weights", np.ones(marks.shape[0])), dtype=float)
            if w.shape != (marks.shape[0],) or np.any(w <= 0):
                raise ConfigInvalid("mark weights must be positive, one per mark")
            if not q.get("rate", 0.0) >= 0 or q.get("state_coef", 0.0) < 0:
                raise ConfigInvalid("rate and state coefficient must be nonnegative")
        if self.accessible is not None:
            a = self.accessible
            times = list(a.get("times", []))
            dists = list(a.get("dists", []))
            if len(dists) not in (1, len(times)):
                raise ConfigInvalid("give one jump law per time or a single shared law")
            edges = np.linspace(0.0, self.T, self.grid_n + 1)
            for t in times:
                if not np.any(np.isclose(edges[1:], t, rtol=0, atol=1e-12)):
                    raise ConfigInvalid(f"accessible time {t} is not a positive grid time")
            for d in dists:
                v = np.asarray(d["values"], dtype=float)
                pr = np.asarray(d["probs"], dtype=float)
                if v.ndim != 2 or v.shape[1] != H or pr.shape != (v.shape[0],):
                    raise ConfigInvalid("jump law values must be J x H_dim with J probabilities")
                if np.any(pr <= 0) or abs(pr.sum() - 1) > 1e-12:
                    raise ConfigInvalid("jump law probabilities must be positive and sum to one")
                if np.max(np.abs(pr @ v)) > 1e-12:
                    raise NotConditionallyCentered("accessible jump law has nonzero mean")

    @classmethod
    def from_dict(cls, d: dict) -> "BundleConfig":
        try:
            S = d.get("S", {}).get("weights", [1.0]) if isinstance(d.get("S"), dict) else [1.0]
            return cls(int(d["grid_n"]), float(d.get("T", 1.0)), int(d.get("H_dim", 1)), tuple(S),
                       d.get("continuous"), d.get("qlc_jumps"), d.get("accessible"))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigInvalid(str(exc)) from exc

    @classmethod
    def from_json(cls, text: str) -> "BundleConfig":
        return cls.from_dict(json.loads(text))

    # derived pieces
    @property
    def dt(self) -> float:
        return self.T / self.grid_n

    @property
    def edges(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.grid_n + 1)

    def G(self) -> np.ndarray:
        return np.asarray(self.continuous.get("G", np.eye(self.H_dim)), dtype=float)

    def marks(self) -> np.ndarray:
        if self.qlc_jumps is None:
            return np.zeros((0, self.H_dim))
        return np.asarray(self.qlc_jumps["marks"], dtype=float)

    def mark_weights(self) -> np.ndarray:
        m = self.marks()
        return np.asarray(self.qlc_jumps.get("mark_weights", np.ones(m.shape[0])), dtype=float) \
            if self.qlc_jumps else np.zeros(0)

    def schedule(self) -> dict:
        """Cell index -> (values, probs) of the accessible jump at its right end."""
        if self.accessible is None:
            return {}
        edges = self.edges
        out = {}
        dists = self.accessible.get("dists", [])
        for n, t in enumerate(self.accessible.get("times", [])):
            c = int(np.argmin(np.abs(edges[1:] - t)))
            d = dists[n if len(dists) > 1 else 0]
            out[c] = (np.asarray(d["values"], dtype=float), np.asarray(d["probs"], dtype=float))
        return out


# -- bundle --------------------------------------------------------------------

@dataclass
class PathBundle:
    """Increments of the three parts on every path.

    Arrays indexed ``[path, cell, h]``; ``probs`` is ``None`` for Monte Carlo.
    """

    config: BundleConfig
    probs: np.ndarray | None
    cont: np.ndarray
    sigma: np.ndarray
    qlc: np.ndarray
    counts: np.ndarray
    nu: np.ndarray
    acc: np.ndarray
    acc_scale: np.ndarray
    space: FilteredSpace | None = None
    stream: MarkedEventStream | None = field(default=None, repr=False)

    @property
    def n_paths(self) -> int:
        return self.cont.shape[0]

    @property
    def n_cells(self) -> int:
        return self.cont.shape[1]

    @property
    def weights(self) -> np.ndarray:
        return self.probs if self.probs is not None else np.full(self.n_paths, 1.0 / self.n_paths)

    def expect(self, values) -> np.ndarray:
        return np.tensordot(self.weights, np.asarray(values, dtype=float), axes=(0, 0))

    def cell_history(self) -> FilteredSpace | None:
        """Filtration indexed by cells: level ``c`` is the information through cell ``c``."""
        if self.space is None:
            return None
        return FilteredSpace(self.space.probs, [self.space.labels(2 * c + 1) for c in range(self.n_cells)],
                             check=False)

    @property
    def compensator(self) -> Compensator:
        return Compensator(self.config.edges[None, :], self.nu)

    @property
    def bracket_c(self) -> np.ndarray:
        """Predictable bracket increments of the continuous part, (paths, cells)."""
        if self.config.continuous is None:
            return np.zeros((self.n_paths, self.n_cells))
        return self.config.dt * self.sigma ** 2 * float(np.sum(self.config.G() ** 2))


def _state_scale(coef: float, M: np.ndarray) -> np.ndarray:
    return 1.0 + coef * np.tanh(np.linalg.norm(M, axis=-1))


def simulate_bundle(config: BundleConfig | dict, n_paths: int | None = None, seed: int = 0,
                    mode: str = "mc", cap: int = PATH_CAP) -> PathBundle:
    """Simulate (``mode="mc"``) or enumerate (``mode="enumerate"``) a bundle.

    Enumeration returns every outcome with its exact probability and the
    filtration of the two sub-steps.
    """
    cfg = config if isinstance(config, BundleConfig) else BundleConfig.from_dict(config)
    if mode not in ("mc", "enumerate"):
        raise ConfigInvalid(f"unknown mode {mode!r}")
    enum = mode == "enumerate"
    if not enum and (n_paths is None or n_paths < 1):
        raise ConfigInvalid("Monte Carlo mode needs n_paths >= 1")
    H, C, dt = cfg.H_dim, cfg.grid_n, cfg.dt
    marks, mw = cfg.marks(), cfg.mark_weights()
    K = marks.shape[0]
    sched = cfg.schedule()
    g = None if enum else rng_stream(seed, 3)
    P = 1 if enum else n_paths
    probs = np.ones(1) if enum else None
    M = np.zeros((P, H))
    total_count = np.zeros(P)
    lab = np.zeros(P, dtype=np.int64)
    cols = {k: [] for k in ("cont", "sigma", "qlc", "counts", "nu", "acc", "acc_scale")}
    levels = []
    xis = np.array(list(itertools.product((-1.0, 1.0), repeat=H)))
    qout = np.array(list(itertools.product(range(3), repeat=K)), dtype=np.int64).reshape(3 ** K, K)

    def expand(idx):
        nonlocal M, total_count, lab, probs
        M, total_count, lab = M[idx], total_count[idx], lab[idx]
        levels[:] = [l[idx] for l in levels]
        for k in cols:
            cols[k] = [a[idx] for a in cols[k]]

    for c in range(C):
        # sub-step a: continuous increment and compensated jumps
        sig = _state_scale(cfg.continuous.get("state_coef", 0.0), M) if cfg.continuous else np.zeros(M.shape[0])
        if K:
            rate = cfg.qlc_jumps.get("rate", 0.0) * (1 + cfg.qlc_jumps.get("state_coef", 0.0) * np.tanh(total_count))
            nu = rate[:, None] * mw[None, :] * dt
        else:
            nu = np.zeros((M.shape[0], 0))
        if enum:
            nxi = xis.shape[0] if cfg.continuous else 1
            if K and np.any(nu > 1 + 1e-15):
                raise ConfigInvalid("enumeration needs every jump cell mass to be at most one")
            nu_c = np.minimum(nu, 1.0)
            law = np.stack([1 - nu_c + nu_c ** 2 / 2, nu_c - nu_c ** 2, nu_c ** 2 / 2], axis=-1) if K \
                else np.ones((M.shape[0], 0, 3))
            qp = np.prod(law[:, np.arange(K)[None, :], qout], axis=-1) if K else np.ones((M.shape[0], 1))
            nq = qp.shape[1]
            pr = (qp / nxi)[:, None, :] * np.ones((1, nxi, 1))  # (P, xi, q)
            pi, xi_i, qi = np.nonzero(pr > 0)
            if pi.size > cap:
                raise ProductTooLarge(f"enumeration needs {pi.size} paths, cap is {cap}")
            probs = probs[pi] * pr[pi, xi_i, qi]
            sig, nu = sig[pi], nu[pi]
            expand(pi)
            xi = xis[xi_i] if cfg.continuous else np.zeros((pi.size, H))
            cnt = qout[qi] if K else np.zeros((pi.size, 0), dtype=np.int64)
            key = np.column_stack([lab, xi_i, qi])
        else:
            xi = g.choice((-1.0, 1.0), size=(P, H)) if cfg.continuous else np.zeros((P, H))
            cnt = g.poisson(nu) if K else np.zeros((P, 0), dtype=np.int64)
            key = None
        dc = math.sqrt(dt) * sig[:, None] * (xi @ cfg.G().T) if cfg.continuous else np.zeros_like(xi)
        dq = (cnt - nu) @ marks if K else np.zeros_like(xi)
        M = M + dc + dq
        total_count = total_count + cnt.sum(axis=1)
        if enum:
            lab = np.unique(key, axis=0, return_inverse=True)[1].reshape(-1)
            levels.append(lab)
        # sub-step b: accessible jump at the cell end
        P_now = M.shape[0]
        if c in sched:
            vals, pj = sched[c]
            a = _state_scale(cfg.accessible.get("state_coef", 0.0), M)
            if enum:
                J = pj.size
                idx = np.repeat(np.arange(P_now), J)
                ji = np.tile(np.arange(J), P_now)
                probs = probs[idx] * pj[ji]
                expand(idx)
                dc, dq, sig, nu, cnt, a = dc[idx], dq[idx], sig[idx], nu[idx], cnt[idx], a[idx]
                key = np.column_stack([lab, ji])
            else:
                ji = g.choice(pj.size, size=P_now, p=pj)
            da = a[:, None] * vals[ji]
        else:
            a = np.zeros(P_now)
            da = np.zeros((P_now, H))
            key = lab[:, None] if enum else None
        M = M + da
        if enum:
            lab = np.unique(key, axis=0, return_inverse=True)[1].reshape(-1)
            levels.append(lab)
            if probs.size > cap:
                raise ProductTooLarge(f"enumeration needs {probs.size} paths, cap is {cap}")
        for k, v in (("cont", dc), ("sigma", sig), ("qlc", dq), ("counts", cnt), ("nu", nu), ("acc", da),
                     ("acc_scale", a)):
            cols[k].append(v)
    stack = {k: np.stack(v, axis=1) if v else None for k, v in cols.items()}
    Pn = M.shape[0]
    if C == 0:  # pragma: no cover - guarded by config validation
        raise ConfigInvalid("grid_n must be positive")
    space = FilteredSpace(probs / probs.sum(), levels, check=False) if enum else None
    b = PathBundle(cfg, None if not enum else probs / probs.sum(), stack["cont"], stack["sigma"], stack["qlc"],
                   stack["counts"].reshape(Pn, C, K), stack["nu"].reshape(Pn, C, K), stack["acc"],
                   stack["acc_scale"], space)
    b.stream = _events(b, seed)
    return b


def _events(b: PathBundle, seed: int) -> MarkedEventStream:
    """Jump events of the quasi-left continuous part, as a mark stream."""
    cfg = b.config
    edges = cfg.edges
    K = b.counts.shape[2]
    p_i, c_i, k_i = np.nonzero(b.counts) if K else (np.zeros(0, dtype=int),) * 3
    reps = b.counts[p_i, c_i, k_i] if K else np.zeros(0, dtype=int)
    path = np.repeat(p_i, reps)
    cell = np.repeat(c_i, reps)
    mark = np.repeat(k_i, reps)
    if b.probs is None:
        u = rng_stream(seed, 4).uniform(size=path.size)
    else:
        # evenly spaced interior times inside each cell, in mark order
        order = np.lexsort((mark, cell, path))
        path, cell, mark = path[order], cell[order], mark[order]
        grp = np.r_[0, np.flatnonzero((np.diff(path) != 0) | (np.diff(cell) != 0)) + 1, path.size]
        u = np.empty(path.size)
        for lo, hi in zip(grp[:-1], grp[1:]):
            u[lo:hi] = np.arange(1, hi - lo + 1) / (hi - lo + 1)
    time = edges[cell] + cfg.dt * u
    order = np.lexsort((time, path))
    st = MarkedEventStream(b.n_paths, edges[None, :], K, path[order], cell[order], mark[order], time[order],
                           b.probs)
    st._dense = b.counts.astype(np.int64)
    st._hist = b.cell_history()
    return st


# -- operator processes and integrals ----------------------------------------------

@dataclass
class OperatorProcess:
    """Elementary predictable ``Phi``: a matrix ``H -> L^q(S)`` per (path, cell).

    ``values`` has shape (1 | n_paths, n_cells, n_points, H_dim).
    """

    values: np.ndarray
    target: FiniteMeasureSpace

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 4 or v.shape[2] != self.target.n_points:
            raise ShapeMismatch("operator values must have shape (paths, cells, points, H)")
        self.values = v

    @classmethod
    def deterministic(cls, values, target: FiniteMeasureSpace | None = None) -> "OperatorProcess":
        v = np.asarray(values, dtype=float)
        target = target or FiniteMeasureSpace(np.ones(v.shape[-2]))
        return cls(v[None], target)

    @classmethod
    def from_history(cls, bundle: PathBundle, fn: Callable, target: FiniteMeasureSpace) -> "OperatorProcess":
        """``fn(c, M_c, counts_before)`` returns (n_paths, n_points, H) from the path at ``t_c``."""
        Mv = path_values(bundle)[:, 0::2]  # value at every cell start
        before = np.concatenate([np.zeros_like(bundle.counts[:, :1]), np.cumsum(bundle.counts, axis=1)[:, :-1]],
                                axis=1)
        out = np.stack([np.broadcast_to(np.asarray(fn(c, Mv[:, c], before[:, c]), dtype=float),
                                        (bundle.n_paths, target.n_points, bundle.config.H_dim))
                        for c in range(bundle.n_cells)], axis=1)
        return cls(out, target)

    def full(self, n_paths: int) -> np.ndarray:
        return np.broadcast_to(self.values, (n_paths,) + self.values.shape[1:])

    def scaled(self, a: float) -> "OperatorProcess":
        return OperatorProcess(a * self.values, self.target)


def _check_predictable(phi: OperatorProcess, bundle: PathBundle, tol: float = 1e-10) -> None:
    if phi.values.shape[0] == 1 or bundle.space is None:
        return
    v = phi.full(bundle.n_paths)
    for c in range(bundle.n_cells):
        x = v[:, c].reshape(bundle.n_paths, -1)
        if bundle.space.measurability_gap(x, 2 * c - 1) > tol * max(1.0, float(np.max(np.abs(x)))):
            raise NotPredictable(f"operator on cell {c} is not known at the cell start")


def path_values(bundle: PathBundle) -> np.ndarray:
    """``M`` after every sub-step: shape (paths, 2 * n_cells + 1, H)."""
    inc = np.empty((bundle.n_paths, 2 * bundle.n_cells, bundle.config.H_dim))
    inc[:, 0::2] = bundle.cont + bundle.qlc
    inc[:, 1::2] = bundle.acc
    out = np.zeros((bundle.n_paths, 2 * bundle.n_cells + 1, bundle.config.H_dim))
    out[:, 1:] = np.cumsum(inc, axis=1)
    return out


def integral_parts(phi: OperatorProcess, bundle: PathBundle, check: bool = True) -> dict:
    """Per-cell increments of ``Phi . M^c``, ``Phi . M^q`` and ``Phi . M^a``, each (paths, cells, S)."""
    if check:
        _check_predictable(phi, bundle)
    v = phi.full(bundle.n_paths)
    if v.shape[1] != bundle.n_cells or v.shape[3] != bundle.config.H_dim:
        raise ShapeMismatch("operator does not match the bundle grid or H")
    return {name: np.einsum("pcsh,pch->pcs", v, getattr(bundle, attr))
            for name, attr in (("continuous", "cont"), ("qlc", "qlc"), ("accessible", "acc"))}


def _cells_until(bundle: PathBundle, t: float | None) -> int:
    if t is None:
        return bundle.n_cells
    return int(np.searchsorted(bundle.config.edges[1:], t + 1e-12, side="right"))


def elementary_integral(phi: OperatorProcess, bundle: PathBundle, t: float | None = None,
                        part: str | None = None, check: bool = True) -> np.ndarray:
    """``(Phi . M)_t`` per path, shape (paths, S); ``part`` selects one canonical part."""
    parts = integral_parts(phi, bundle, check)
    n = _cells_until(bundle, t)
    names = [part] if part else list(parts)
    return sum(parts[k][:, :n].sum(axis=1) for k in names)


def integral_process(phi: OperatorProcess, bundle: PathBundle, check: bool = True) -> np.ndarray:
    """``Phi . M`` after every sub-step, shape (paths, 2 * n_cells + 1, S)."""
    parts = integral_parts(phi, bundle, check)
    inc = np.empty((bundle.n_paths, 2 * bundle.n_cells, phi.target.n_points))
    inc[:, 0::2] = parts["continuous"] + parts["qlc"]
    inc[:, 1::2] = parts["accessible"]
    out = np.zeros((bundle.n_paths, 2 * bundle.n_cells + 1, phi.target.n_points))
    out[:, 1:] = np.cumsum(inc, axis=1)
    return out


# -- brackets -----------------------------------------------------------------------

def quadratic_variation(path, weights=None) -> np.ndarray:
    """Running sum of squared increments of a vector path (paths, times, dim).

    ``weights`` weighs the coordinates (``L^2(S)`` with point masses).
    """
    X = np.asarray(path, dtype=float)
    d = np.diff(X, axis=1)
    w = np.ones(X.shape[2]) if weights is None else np.asarray(weights, dtype=float)
    sq = (d * d) @ w
    out = np.zeros(X.shape[:2])
    out[:, 1:] = np.cumsum(sq, axis=1)
    return out


def coordinate_brackets(path, weights=None) -> np.ndarray:
    """``sum_n w_n [<M, h_n>]``: brackets of each coordinate, summed."""
    X = np.asarray(path, dtype=float)
    w = np.ones(X.shape[2]) if weights is None else np.asarray(weights, dtype=float)
    total = np.zeros(X.shape[:2])
    for n in range(X.shape[2]):
        total = total + w[n] * quadratic_variation(X[:, :, n:n + 1])
    return total


SOURCES = ("drift", "random", "fixed")


@dataclass
class AnnotatedIncreasing:
    """Increments of an increasing path with the source of each increment."""

    increments: np.ndarray  # (paths, n)
    sources: np.ndarray  # (n,) or (paths, n) of source names


def bracket_parts(bundle: PathBundle) -> AnnotatedIncreasing:
    """``[M]`` increments on the sub-step grid, tagged by source.

    Continuous part: its predictable bracket (drift).  Jumps of the quasi-left
    continuous part: ``sum N_k |x_k|^2`` (random times).  Accessible part:
    ``|Delta M^a|^2`` (fixed times).  Each sub-step of cell ``c`` carries at most two
    sources, so the increments are split into three sub-columns per cell.
    """
    marks = bundle.config.marks()
    jumps = bundle.counts @ np.sum(marks ** 2, axis=1) if marks.size else np.zeros((bundle.n_paths, bundle.n_cells))
    fixed = np.sum(bundle.acc ** 2, axis=2)
    inc = np.stack([bundle.bracket_c, jumps, fixed], axis=2).reshape(bundle.n_paths, -1)
    src = np.tile(np.array(SOURCES), bundle.n_cells)
    return AnnotatedIncreasing(inc, src)


def decompose_increasing(A: AnnotatedIncreasing) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Split an annotated increasing path into drift, random-time and fixed-time parts.

    Returns three running sums of shape (paths, n + 1) that add up to ``A``.
    """
    inc = np.asarray(A.increments, dtype=float)
    src = np.broadcast_to(np.asarray(A.sources, dtype=object), inc.shape)
    known = np.isin(src, SOURCES)
    if np.any(~known & (inc != 0)):
        raise UnannotatedIncrement("nonzero increment without a recognised source")
    if np.any(inc < 0):
        raise UnannotatedIncrement("increments of an increasing path must be nonnegative")
    out = []
    for s in SOURCES:
        part = np.where(src == s, inc, 0.0)
        run = np.zeros((inc.shape[0], inc.shape[1] + 1))
        run[:, 1:] = np.cumsum(part, axis=1)
        out.append(run)
    return tuple(out)


def jump_measure(bundle: PathBundle) -> tuple[MarkedEventStream, Compensator, np.ndarray]:
    """Jump measure of the quasi-left continuous part: stream, compensator and mark values."""
    return bundle.stream, bundle.compensator, bundle.config.marks()


# -- accessible part ------------------------------------------------------------------

def _acc_pieces(phi: OperatorProcess, bundle: PathBundle):
    """Per scheduled cell: values ``a Phi v_j`` (paths, J, S) and probabilities."""
    v = phi.full(bundle.n_paths)
    out = []
    for c, (vals, pj) in sorted(bundle.config.schedule().items()):
        x = bundle.acc_scale[:, c, None, None] * np.einsum("psh,jh->pjs", v[:, c], vals)
        out.append((c, x, pj))
    return out


def accessible_norms(phi: OperatorProcess, bundle: PathBundle, p: float, q: float) -> dict:
    """Norms of the jumps ``d_n = Phi Delta M^a`` from their conditional laws.

    Given the information just before a scheduled time the jump is
    ``a Phi v_j`` with probability ``pi_j``, so every conditional moment is
    a finite sum.
    """
    if not (p > 1 and q > 1):
        raise BadExponent("exponents must lie in (1, inf)")
    w = phi.target.weights
    V = np.zeros((bundle.n_paths, phi.target.n_points))
    Aq = np.zeros(bundle.n_paths)
    Bp = np.zeros(bundle.n_paths)
    for _, x, pj in _acc_pieces(phi, bundle):
        V += np.einsum("j,pjs->ps", pj, x * x)
        nr = lq_norm(x, q, w)  # (P, J)
        Aq += nr ** q @ pj
        Bp += nr ** p @ pj
    S = float(bundle.expect(lq_norm(np.sqrt(V), q, w) ** p)) ** (1 / p)
    Dqq = float(bundle.expect(Aq ** (p / q))) ** (1 / p)
    Dpq = float(bundle.expect(Bp)) ** (1 / p)
    return {"S": S, "Dqq": Dqq, "Dpq": Dpq}


def accessible_odd_sequence(phi: OperatorProcess, bundle: PathBundle) -> RandomLqSequence:
    """Jumps of ``Phi . M^a`` as an odd-index martingale difference sequence."""
    if bundle.space is None:
        raise ConfigInvalid("the discrete identification needs an enumerated bundle")
    acc = integral_parts(phi, bundle)["accessible"]  # (P, C, S)
    vals = np.zeros((2 * bundle.n_cells, bundle.n_paths, phi.target.n_points))
    vals[1::2] = acc.transpose(1, 0, 2)
    return RandomLqSequence(bundle.space, phi.target, vals)


def accessible_regime(phi: OperatorProcess, bundle: PathBundle, p: float, q: float,
                      opts: SolverOptions | None = None) -> float:
    """Regime value of the accessible part.

    Enumerated bundles use the odd-index sequence on the bundle filtration.
    Monte Carlo bundles decompose each jump as a function of its law index
    per path (coordinates ``sqrt(pi_j) x_j``, centred by projection).
    """
    spec = RegimeNormSpec(p, q)
    if bundle.space is not None:
        seq = accessible_odd_sequence(phi, bundle)
        return odd_regime_norm(bundle.space, seq, spec, opts)
    pieces = _acc_pieces(phi, bundle)
    if not pieces:
        return 0.0
    ys, mS, mq, mp, blocks = [], [], [], [], []
    start = 0
    for _, x, pj in pieces:
        r = np.sqrt(pj)
        for j in range(pj.size):
            ys.append(r[j] * x[:, j])
            mS.append(np.ones(bundle.n_paths))
            mq.append(np.full(bundle.n_paths, pj[j] ** (1 - q / 2)))
            mp.append(np.full(bundle.n_paths, pj[j] ** (1 - p / 2)))
        blocks.append((start, start + pj.size, r))
        start += pj.size
    y = np.stack(ys)

    def project(z: np.ndarray) -> np.ndarray:
        out = z.copy()
        for lo, hi, r in blocks:
            coef = np.einsum("j,jps->ps", r, z[lo:hi])
            out[lo:hi] -= r[:, None, None] * coef[None]
        return out

    geom = weighted_geometry(bundle.weights, phi.target.weights,
                             {"S": np.stack(mS), "Dqq": np.stack(mq), "Dpq": np.stack(mp)}, project)
    return evaluate(spec.expr, geom, y, p, q, opts)


# -- gamma norms and the continuous part ------------------------------------------------

def gamma_norm_sqfn(R, q: float, weights=None) -> float:
    """``||(sum_n |R h_n|^2)^(1/2)||_q`` for a matrix ``R`` of shape (n_points, H)."""
    R = np.asarray(R, dtype=float)
    w = np.ones(R.shape[0]) if weights is None else np.asarray(weights, dtype=float)
    return float(lq_norm(np.sqrt(np.sum(R * R, axis=1)), q, w))


def gamma_norm_mc(R, q: float, trials: int, seed: int, weights=None) -> tuple[float, float]:
    """Monte Carlo ``(E ||sum_n g_n R h_n||_q^2)^(1/2)`` with its standard error."""
    if trials < 2:
        raise ConfigInvalid("need at least two trials")
    R = np.asarray(R, dtype=float)
    w = np.ones(R.shape[0]) if weights is None else np.asarray(weights, dtype=float)
    gam = rng_stream(seed, 5).standard_normal((trials, R.shape[1]))
    sq = lq_norm(gam @ R.T, q, w) ** 2
    m = float(sq.mean())
    if m == 0:
        return 0.0, 0.0
    se = float(sq.std(ddof=1) / math.sqrt(trials))
    return math.sqrt(m), se / (2 * math.sqrt(m))


def _continuous_operator(phi: OperatorProcess, bundle: PathBundle, t: float | None = None) -> np.ndarray:
    """``Phi q_M^(1/2)`` against ``d[M^c]`` per path: (paths, S, cells * H)."""
    cfg = bundle.config
    if cfg.continuous is None:
        return np.zeros((bundle.n_paths, phi.target.n_points, 0))
    n = _cells_until(bundle, t)
    v = phi.full(bundle.n_paths)[:, :n]  # (P, n, S, H)
    scale = math.sqrt(cfg.dt) * bundle.sigma[:, :n]  # (P, n)
    R = np.einsum("pcsh,hk,pc->pcsk", v, cfg.G(), scale)
    return R.transpose(0, 2, 1, 3).reshape(bundle.n_paths, phi.target.n_points, -1)


def continuous_part_norm(phi: OperatorProcess, bundle: PathBundle, p: float, q: float, t: float | None = None,
                         backend: str = "sqfn", trials: int = 2000, seed: int = 0) -> float:
    """``(E ||Phi q^(1/2) 1_[0,t]||_gamma^p)^(1/p)`` for the continuous part."""
    R = _continuous_operator(phi, bundle, t)
    w = phi.target.weights
    if backend == "sqfn":
        g = lq_norm(np.sqrt(np.sum(R * R, axis=2)), q, w)
    elif backend == "mc":
        g = np.array([gamma_norm_mc(R[k], q, trials, seed, w)[0] for k in range(bundle.n_paths)])
    else:
        raise ConfigInvalid(f"unknown backend {backend!r}")
    return float(bundle.expect(g ** p)) ** (1 / p)


def qlc_field(phi: OperatorProcess, bundle: PathBundle) -> PredictableField:
    """``Phi_H(cell, mark k) = Phi x_k`` as a field on the jump measure."""
    marks = bundle.config.marks()
    v = phi.values  # (rows, C, S, H)
    F = np.einsum("rcsh,kh->rcks", v, marks)
    return PredictableField(F, phi.target)


# -- reports ---------------------------------------------------------------------------

def main_si_report(phis: Sequence[OperatorProcess], bundle: PathBundle, p: float, q: float,
                   opts: SolverOptions | None = None) -> dict:
    """Ratios of integral moments to the three-part right side, one row per operator.

    The right side adds the continuous-part gamma norm, the regime norm of
    the jump field and the accessible regime value.
    """
    rows = []
    hist = bundle.cell_history()
    for idx, phi in enumerate(phis):
        if not np.any(phi.values):
            continue
        proc = integral_process(phi, bundle)
        nrm = lq_norm(proc, q, phi.target.weights)
        lhs_sup = float(bundle.expect(nrm.max(axis=1) ** p)) ** (1 / p)
        lhs_end = float(bundle.expect(nrm[:, -1] ** p)) ** (1 / p)
        cont = continuous_part_norm(phi, bundle, p, q)
        jumps = ihat_regime(qlc_field(phi, bundle), bundle.stream, bundle.compensator, p, q, opts, hist) \
            if bundle.counts.shape[2] else 0.0
        acc = accessible_regime(phi, bundle, p, q, opts)
        jumps, acc = float(jumps), float(acc)
        rhs = cont + jumps + acc
        rows.append({"instance_id": idx, "lhs_sup": lhs_sup, "lhs_end": lhs_end, "continuous": cont,
                     "jumps": jumps, "accessible": acc, "rhs": rhs,
                     "ratio_sup": lhs_sup / rhs, "ratio_end": lhs_end / rhs})
    out = {"p": p, "q": q, "regime": RegimeNormSpec(p, q).name, "rows": rows}
    if rows:
        for key in ("ratio_sup", "ratio_end"):
            r = np.array([row[key] for row in rows])
            out[key] = {"min": float(r.min()), "max": float(r.max()), "spread": float(r.max() / r.min())}
    return out


def bdg_check(bundle: PathBundle, p: float, t: float | None = None):
    """``(E|M_t|^p)^(1/p)`` against ``(E [M]_t^(p/2))^(1/p)``; ``None`` for the zero martingale."""
    X = path_values(bundle)
    n = 2 * _cells_until(bundle, t)
    X = X[:, :n + 1]
    qv = quadratic_variation(X)[:, -1]
    lhs = float(bundle.expect(np.linalg.norm(X[:, -1], axis=1) ** p)) ** (1 / p)
    rhs = float(bundle.expect(qv ** (p / 2))) ** (1 / p)
    if rhs == 0:
        return lhs, rhs, None
    return lhs, rhs, lhs / rhs
