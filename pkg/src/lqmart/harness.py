"""Batch experiment runner with seeded instances and regression baselines.

A config file is JSON::

    {"seed": 0, "experiments": [{"kind": "br-equivalence", "exponents": [[3, 1.5]],
                                 "n_instances": 200, ...}, ...]}

Each experiment yields one report per exponent pair (or per ``p`` for the
scalar kinds).  A report is a list of rows ``(instance_id, lhs, rhs, ratio)``
plus a summary ``{min, max, spread, seed, p, q, regime}`` and the outcome of
the experiment's built-in assertions.
"""

from __future__ import annotations

import csv
import datetime as _dt
import hashlib
import io
import json
import math
import os
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .decoupling import decouple, decoupling_ratio, verify_ci, verify_tangency
from .duality import (PrimalNorm, dual_norm_bruteforce, hsq_dual_witness, hsq_norm, pairing,
                      reverse_dual_doob_check)
from .errors import AssertionFailed, ConfigInvalid, HashMismatch, LabError
from .filtered_space import FiniteMeasureSpace, RandomLqSequence, random_mds, tree_space
from .integrator import (OperatorProcess, accessible_odd_sequence, accessible_regime, main_si_report,
                         simulate_bundle)
from .norms import (RegimeNormSpec, SolverOptions, martingale_moment, random_instance, ratio_summary,
                    regime_norm, rosenthal_regime_norm, verify_independence)
from .random_measure import (MarkSpace, PredictableField, enumerate_cox_rm,
                             mainintranmeas_report, novikov_check, simulate_cox_rm, simulate_poisson_rm)
from .rng import stream

__all__ = [
    "KINDS",
    "CLAIMS",
    "THREADS_ENV",
    "Report",
    "Comparison",
    "load_config",
    "validate_config",
    "config_hash",
    "run_experiment",
    "run_config",
    "write_report",
    "baseline_update",
    "compare_to_baseline",
    "load_store",
    "save_store",
    "run",
]

THREADS_ENV = "LQMART_THREADS"
BAND_SLACK = 0.10

KINDS = ("br-equivalence", "rosenthal", "decoupling", "novikov", "random-measure-equivalence", "main-si",
         "duality-suite")

# plain statements of what each report checks
CLAIMS = {
    "br-equivalence": "L^q-valued martingale moment is equivalent to the regime combination of the "
                      "conditional square-function and power-sum norms",
    "rosenthal": "for independent mean-zero L^q-valued entries the moment is equivalent to the regime "
                 "combination of the unconditional norms",
    "decoupling": "the tangent sequence has the same one-step conditional laws and is conditionally "
                  "independent given the original sample",
    "novikov": "moment of a compensated scalar integral against compensator power sums",
    "random-measure-equivalence": "running-maximum moment of a compensated L^q-valued integral against a "
                                  "random measure is equivalent to the regime combination of field norms",
    "main-si": "running-maximum moment of an H-valued stochastic integral is equivalent to the continuous "
               "gamma norm plus the jump-field and accessible-jump regime values",
    "main-si/accessible": "moment of an integral against jumps at predictable times is equivalent to the "
                          "regime combination of its jump norms",
    "duality-suite": "the dual of the conditional square-function space is the conjugate-exponent space, "
                     "with lower constant min(q/p, q'/p') and upper constant 1",
    "duality-suite/reverse-doob": "for exponents at most one the moment of a sum of nonnegative variables "
                                  "is at most 1/p times the moment of the sum of their conditional means",
}

_NEEDS_EXPONENTS = {"br-equivalence", "rosenthal", "decoupling", "random-measure-equivalence", "main-si",
                    "duality-suite"}


# -- configuration -----------------------------------------------------------------

def load_config(path: str | os.PathLike) -> dict:
    try:
        cfg = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigInvalid(f"cannot read config {path}: {exc}") from exc
    return validate_config(cfg)


def _exponent(e, name: str, lo: float = 1.0, closed: bool = False) -> float:
    try:
        v = float(e)
    except (TypeError, ValueError) as exc:
        raise ConfigInvalid(f"{name} must be a number") from exc
    ok = (v >= lo if closed else v > lo) and math.isfinite(v)
    if not ok:
        raise ConfigInvalid(f"{name} = {e} is out of range")
    return v


def validate_config(cfg) -> dict:
    """Check kinds, required fields and exponent ranges; fill default names."""
    if not isinstance(cfg, dict):
        raise ConfigInvalid("config must be a JSON object")
    exps = cfg.get("experiments", [])
    if not isinstance(exps, list):
        raise ConfigInvalid("experiments must be a list")
    if not isinstance(cfg.get("seed", 0), int):
        raise ConfigInvalid("seed must be an integer")
    names = set()
    for k, e in enumerate(exps):
        if not isinstance(e, dict) or e.get("kind") not in KINDS:
            raise ConfigInvalid(f"experiment {k}: kind must be one of {', '.join(KINDS)}")
        e.setdefault("name", f"{e['kind']}-{k}")
        if e["name"] in names:
            raise ConfigInvalid(f"duplicate experiment name {e['name']!r}")
        names.add(e["name"])
        kind = e["kind"]
        if kind in _NEEDS_EXPONENTS:
            pairs = e.get("exponents")
            if not isinstance(pairs, list) or not pairs:
                raise ConfigInvalid(f"{e['name']}: exponents must be a nonempty list of [p, q] pairs")
            for pq in pairs:
                if not (isinstance(pq, (list, tuple)) and len(pq) == 2):
                    raise ConfigInvalid(f"{e['name']}: each exponent entry must be [p, q]")
                _exponent(pq[0], "p")
                _exponent(pq[1], "q")
        if kind == "novikov":
            if "rate" not in e or not isinstance(e.get("p_values"), list) or not e["p_values"]:
                raise ConfigInvalid(f"{e['name']}: novikov needs rate and a nonempty p_values list")
            for p in e["p_values"]:
                _exponent(p, "p", closed=True)
            if float(e["rate"]) < 0:
                raise ConfigInvalid(f"{e['name']}: rate must be nonnegative")
        if kind == "duality-suite":
            for p in e.get("reverse_doob_p", []):
                if not 0 < float(p) <= 1:
                    raise ConfigInvalid(f"{e['name']}: reverse Doob exponents lie in (0, 1]")
        n = e.get("n_instances", 0)
        if not isinstance(n, int) or n < 0:
            raise ConfigInvalid(f"{e['name']}: n_instances must be a nonnegative integer")
        if kind == "main-si" and e.get("family", "full") not in ("full", "accessible"):
            raise ConfigInvalid(f"{e['name']}: family must be 'full' or 'accessible'")
        if kind == "random-measure-equivalence" and e.get("mode", "enumerate") not in ("enumerate", "mc"):
            raise ConfigInvalid(f"{e['name']}: mode must be 'enumerate' or 'mc'")
    return cfg


def config_hash(experiment: dict) -> str:
    """Git-style blob hash of the experiment config with its seed removed."""
    body = json.dumps({k: v for k, v in experiment.items() if k != "seed"}, sort_keys=True,
                      separators=(",", ":")).encode()
    return hashlib.sha1(b"blob %d\0" % len(body) + body).hexdigest()


def _solver(e: dict) -> SolverOptions | None:
    s = e.get("solver")
    if s is None:
        return None
    try:
        return SolverOptions(**s)
    except TypeError as exc:
        raise ConfigInvalid(f"bad solver options: {exc}") from exc


def _threads() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError as exc:
        raise ConfigInvalid(f"{THREADS_ENV} must be an integer, got {raw!r}") from exc


def _map(fn: Callable, items: Sequence) -> list:
    """Ordered map, threaded when the thread count exceeds one."""
    n = _threads()
    if n == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


# -- reports -------------------------------------------------------------------------

@dataclass
class Report:
    """One ratio table with its summary and assertion outcomes."""

    experiment: str
    kind: str
    claim: str
    p: float
    q: float | None
    regime: str
    seed: int
    config_hash: str
    rows: list = field(default_factory=list)
    skipped: list = field(default_factory=list)
    assertions: list = field(default_factory=list)  # (name, ok, detail)

    @property
    def key(self) -> str:
        return f"{self.experiment}|p={_fmt(self.p)}|q={_fmt(self.q)}|{self.regime}"

    @property
    def ok(self) -> bool:
        return all(a[1] for a in self.assertions)

    def summary(self) -> dict:
        out = ratio_summary(r["ratio"] for r in self.rows)
        out.update(seed=self.seed, p=self.p, q=self.q, regime=self.regime)
        return out

    def to_dict(self) -> dict:
        return {"experiment": self.experiment, "kind": self.kind, "claim": self.claim,
                "config_hash": self.config_hash, "summary": self.summary(), "skipped": self.skipped,
                "assertions": [{"name": a[0], "ok": bool(a[1]), "detail": a[2]} for a in self.assertions]}

    def add_row(self, i: int, lhs: float, rhs: float, **extra) -> None:
        if rhs == 0:
            self.skipped.append(int(i))
            return
        row = {"instance_id": int(i), "lhs": float(lhs), "rhs": float(rhs), "ratio": float(lhs) / float(rhs)}
        row.update({k: float(v) for k, v in extra.items()})
        self.rows.append(row)

    def check(self, name: str, ok: bool, detail: str = "") -> None:
        self.assertions.append((name, bool(ok), detail))


def _fmt(x) -> str:
    if x is None:
        return "none"
    return repr(float(x))


def _ratios_positive(rep: Report) -> None:
    bad = [r["instance_id"] for r in rep.rows if not (math.isfinite(r["ratio"]) and r["ratio"] > 0)]
    rep.check("ratios finite and positive", not bad, f"bad instances {bad}" if bad else "")


def _is22(p, q) -> bool:
    return p == 2 and q == 2


# -- experiment kinds -----------------------------------------------------------------

def _run_br(e, seed, pq, rep, opts):
    spec = RegimeNormSpec(*pq)
    gen = e.get("generator", {})

    def one(i):
        space, seq = random_instance(gen, stream(seed, 1, i))
        return martingale_moment(space, seq, *pq), regime_norm(space, seq, spec, opts)

    for i, (l, r) in enumerate(_map(one, range(e.get("n_instances", 0)))):
        rep.add_row(i, l, r)
    _ratios_positive(rep)
    if _is22(*pq):
        dev = max((abs(r["ratio"] - 1) for r in rep.rows), default=0.0)
        rep.check("p = q = 2 ratios equal one", dev <= e.get("tolerance", {}).get("collapse", 1e-9), f"{dev:.3g}")


def _independent_instance(e, rng):
    n, k = int(e.get("n_steps", 3)), int(e.get("n_values", 2))
    S = int(e.get("n_points", 2))
    laws = rng.dirichlet(np.full(k, 2.0), size=n)
    digits = np.stack(np.unravel_index(np.arange(k ** n), (k,) * n), axis=1)
    probs = np.prod(laws[np.arange(n)[None, :], digits], axis=1)
    space = tree_space([k] * n, probs=probs / probs.sum())
    target = FiniteMeasureSpace(rng.uniform(0.5, 2.0, size=S))
    vals = rng.standard_normal((n, k, S))
    vals -= np.einsum("ik,iks->is", laws, vals)[:, None, :]
    seq = RandomLqSequence(space, target, np.stack([vals[i][digits[:, i]] for i in range(n)]))
    return space, seq


def _run_rosenthal(e, seed, pq, rep, opts):
    spec = RegimeNormSpec(*pq)
    worst = 0.0

    def one(i):
        space, seq = _independent_instance(e, stream(seed, 2, i))
        gap = verify_independence(space, seq, tol=1e-12)[1]
        return martingale_moment(space, seq, *pq), rosenthal_regime_norm(space, seq, spec, opts), gap

    for i, (l, r, g) in enumerate(_map(one, range(e.get("n_instances", 0)))):
        rep.add_row(i, l, r)
        worst = max(worst, g)
    rep.check("entries independent and mean zero", worst <= 1e-12, f"{worst:.3g}")
    _ratios_positive(rep)
    if _is22(*pq):
        dev = max((abs(r["ratio"] - 1) for r in rep.rows), default=0.0)
        rep.check("p = q = 2 ratios equal one", dev <= 1e-9, f"{dev:.3g}")


def _run_decoupling(e, seed, pq, rep, opts):
    max_steps = int(e.get("max_steps", 3))
    worst_t = worst_c = 0.0

    def one(i):
        rng = stream(seed, 3, i)
        n = int(rng.integers(1, max_steps + 1))
        space = tree_space([int(rng.integers(2, 4)) for _ in range(n)], rng=rng)
        target = FiniteMeasureSpace(rng.uniform(0.5, 2.0, size=int(e.get("n_points", 2))))
        pair = decouple(space, random_mds(space, target, rng))
        return decoupling_ratio(pair, *pq), verify_tangency(pair)[1], verify_ci(pair)[1]

    for i, ((l, r, _), t, c) in enumerate(_map(one, range(e.get("n_instances", 0)))):
        rep.add_row(i, l, r)
        worst_t, worst_c = max(worst_t, t), max(worst_c, c)
    rep.check("tangency gap zero", worst_t == 0, f"{worst_t:.3g}")
    rep.check("conditional independence gap zero", worst_c == 0, f"{worst_c:.3g}")
    _ratios_positive(rep)


def _run_novikov(e, seed, p, rep, opts):
    st, comp = simulate_poisson_rm(float(e.get("T", 1.0)), int(e.get("grid_n", 64)), MarkSpace.single(),
                                   float(e["rate"]), int(e.get("n_paths", 10000)), stream_seed(seed, 4))
    f = PredictableField.constant(1.0)
    lhs, terms, _ = novikov_check(f, st, comp, p)
    rep.add_row(0, lhs, terms["rhs"])
    expected = {float(k): float(v) for k, v in e.get("expected", {}).items()}
    if p in expected:
        tol = float(e.get("tolerance", {}).get("relative", 0.02))
        err = abs(lhs - expected[p]) / expected[p]
        rep.check(f"E|1*mu-bar|^{_fmt(p)} = {expected[p]:g} within {tol:g}", err <= tol,
                  f"estimate {lhs:.6g}, relative error {err:.3g}")


def stream_seed(seed: int, *path: int) -> int:
    """Integer seed derived from a substream, for APIs that take a seed."""
    return int(stream(seed, *path).integers(0, 2**63 - 1))


def _rm_fields(st, e, rng_seed, n):
    S = int(e.get("n_points", 2))
    target = FiniteMeasureSpace(np.ones(S))
    out = []
    for i in range(n):
        rng = stream(rng_seed, 5, i)
        A = rng.standard_normal((st.n_cells, st.n_marks, S))
        b = rng.uniform(-0.8, 0.8)
        out.append(PredictableField.from_history(
            st, lambda h, A=A, b=b: A[h.cell][None] * (1 + b * np.tanh(h.counts.sum(-1) - 0.5))[:, None, None],
            target))
    return out


def _run_rm(e, seed, pq, rep, opts):
    marks = MarkSpace(np.asarray(e.get("mark_weights", [1.0]), dtype=float))
    it = e.get("intensity", {})
    base, coef, cap = float(it.get("base", 0.8)), float(it.get("state_coef", 0.0)), float(it.get("cap", 1.0))

    def lam(h):
        return np.minimum(base * (1 + coef * np.tanh(h.counts.sum(axis=-1))), cap)

    T, grid = float(e.get("T", 1.0)), int(e.get("grid_n", 2))
    if e.get("mode", "enumerate") == "enumerate":
        st, comp = enumerate_cox_rm(T, grid, marks, lam)
    else:
        st, comp = simulate_cox_rm(T, grid, marks, lam, int(e.get("n_paths", 2000)), stream_seed(seed, 6))
    fields = _rm_fields(st, e, seed, e.get("n_instances", 0))
    res = mainintranmeas_report(fields, st, comp, *pq, opts)
    for row in res["rows"]:
        rep.add_row(row["instance_id"], row["lhs_sup"], row["rhs"], lhs_end=row["lhs_end"])
    _ratios_positive(rep)
    if _is22(*pq) and e.get("mode", "enumerate") == "enumerate":
        dev = max((abs(r["lhs_end"] / r["rhs"] - 1) for r in rep.rows), default=0.0)
        rep.check("p = q = 2 endpoint isometry", dev <= 1e-9, f"{dev:.3g}")
        lo = min((r["ratio"] for r in rep.rows), default=1.0)
        hi = max((r["ratio"] for r in rep.rows), default=1.0)
        rep.check("p = q = 2 running maximum within [1, 2]", lo >= 1 - 1e-9 and hi <= 2, f"[{lo:.4g}, {hi:.4g}]")


def _bundle_config(e, rng, family):
    """Random small bundle config for one instance."""
    H = int(e.get("H_dim", 1))
    grid = int(e.get("grid_n", 1 if family == "full" else 2))
    J = int(e.get("jump_values", 2))
    vals = rng.standard_normal((J, H))
    pj = rng.dirichlet(np.full(J, 2.0))
    vals -= pj @ vals
    times = [float(t) for t in np.linspace(0, 1, grid + 1)[1:]]
    cfg = {"grid_n": grid, "T": 1.0, "H_dim": H,
           "accessible": {"times": times, "dists": [{"values": vals.tolist(), "probs": pj.tolist()}],
                          "state_coef": float(rng.uniform(0, 1))}}
    if family == "full":
        cfg["continuous"] = {"G": (rng.standard_normal((H, H)) * 0.8).tolist(), "state_coef": float(rng.uniform(0, 1))}
        cfg["qlc_jumps"] = {"rate": float(rng.uniform(0.2, 0.9)), "marks": rng.standard_normal((1, H)).tolist(),
                            "state_coef": float(rng.uniform(0, 1))}
    return cfg


def _random_phi(bundle, rng, S):
    A = rng.standard_normal((bundle.n_cells, S, bundle.config.H_dim))
    c = rng.uniform(-0.8, 0.8)
    return OperatorProcess.from_history(
        bundle, lambda k, M, cnt: A[k][None] * (1 + c * np.tanh(M[:, 0]))[:, None, None],
        FiniteMeasureSpace(np.ones(S)))


def _run_main_si(e, seed, pq, rep, opts):
    family = e.get("family", "full")
    S = int(e.get("n_points", 2))
    p, q = pq

    def one(i):
        rng = stream(seed, 7, i)
        bundle = simulate_bundle(_bundle_config(e, rng, family), mode="enumerate")
        phi = _random_phi(bundle, rng, S)
        if family == "accessible":
            seq = accessible_odd_sequence(phi, bundle)
            return martingale_moment(bundle.space, seq, p, q), accessible_regime(phi, bundle, p, q, opts), None
        res = main_si_report([phi], bundle, p, q, opts)["rows"]
        if not res:
            return 0.0, 0.0, None
        return res[0]["lhs_sup"], res[0]["rhs"], res[0]["lhs_end"]

    for i, (l, r, end) in enumerate(_map(one, range(e.get("n_instances", 0)))):
        if end is None:
            rep.add_row(i, l, r)
        else:
            rep.add_row(i, l, r, lhs_end=end)
    _ratios_positive(rep)
    if _is22(p, q) and family == "accessible":
        dev = max((abs(r["ratio"] - 1) for r in rep.rows), default=0.0)
        rep.check("p = q = 2 accessible isometry", dev <= 1e-9, f"{dev:.3g}")
    if _is22(p, q) and family == "full":
        ends = [r["lhs_end"] / r["rhs"] for r in rep.rows]
        ok = all(1 / math.sqrt(3) - 1e-9 <= x <= 1 + 1e-9 for x in ends)
        rep.check("p = q = 2 endpoint ratio within [3^-1/2, 1]", ok)


def _run_duality(e, seed, pq, rep, opts):
    p, q = pq
    pc, qc = p / (p - 1), q / (q - 1)
    lo = min(q / p, qc / pc)
    max_steps, max_dim = int(e.get("max_steps", 3)), int(e.get("max_dim", 3))
    tol = float(e.get("tolerance", {}).get("band", 1e-6))
    bad_band, bad_wit, unconverged = [], [], []

    def one(i):
        rng = stream(seed, 8, i)
        n = int(rng.integers(1, max_steps + 1))
        d = int(rng.integers(1, max_dim + 1))
        space = tree_space([2] * n, rng=rng)
        target = FiniteMeasureSpace(rng.uniform(0.5, 2.0, size=d))
        raw = rng.standard_normal((n, space.n_samples, d))
        g = RandomLqSequence(space, target, np.stack([space.cond_exp(raw[k], k) for k in range(n)]))
        N = hsq_norm(space, g, pc, qc)
        res = dual_norm_bruteforce(space, g, PrimalNorm.hsq(p, q), seed=int(rng.integers(2**31)))
        h = hsq_dual_witness(space, g, p, q)
        wit = pairing(space, h, g) / hsq_norm(space, h, p, q)
        return res.value, N, wit, res.converged

    for i, (val, N, wit, conv) in enumerate(_map(one, range(e.get("n_instances", 0)))):
        rep.add_row(i, val, N, witness=wit)
        if not (lo * N - tol <= val <= N + tol):
            bad_band.append(i)
        if wit < lo * N - tol:
            bad_wit.append(i)
        if not conv:
            unconverged.append(i)
    rep.check(f"dual norm within [{lo:.4g} |g| - tol, |g| + tol]", not bad_band, f"failing {bad_band}")
    rep.check("witness certifies the lower constant", not bad_wit, f"failing {bad_wit}")
    rep.check("brute force converged", not unconverged, f"unconverged {unconverged}")


def _run_reverse_doob(e, seed, p, rep):
    n_inst = int(e.get("reverse_doob_instances", 200))
    bad = []
    for i in range(n_inst):
        rng = stream(seed, 9, i)
        n = int(rng.integers(1, 4))
        space = tree_space([int(rng.integers(2, 4)) for _ in range(n)], rng=rng)
        target = FiniteMeasureSpace(rng.uniform(0.5, 2.0, size=int(rng.integers(1, 3))))
        vals = rng.exponential(size=(n, space.n_samples, target.n_points))
        vals *= rng.random(vals.shape) < 0.7  # sparse entries
        lhs, rhs, holds = reverse_dual_doob_check(space, RandomLqSequence(space, target, vals), p)
        rep.add_row(i, lhs, rhs)
        if not holds:
            bad.append(i)
    rep.check("lhs <= rhs / p on every instance", not bad, f"failing {bad}")


_RUNNERS = {"br-equivalence": _run_br, "rosenthal": _run_rosenthal, "decoupling": _run_decoupling,
            "random-measure-equivalence": _run_rm, "main-si": _run_main_si, "duality-suite": _run_duality}


def run_experiment(e: dict, seed: int) -> list[Report]:
    """All reports of one validated experiment."""
    seed = int(e.get("seed", seed))
    name, kind = e["name"], e["kind"]
    h = config_hash(e)
    # instance streams are keyed by the experiment name so experiments are independent
    base = stream_seed(seed, zlib.crc32(name.encode()))
    opts = _solver(e)
    reports = []
    if kind == "novikov":
        for p in e["p_values"]:
            rep = Report(name, kind, CLAIMS[kind], float(p), None, "scalar", seed, h)
            _run_novikov(e, base, float(p), rep, opts)
            reports.append(rep)
        return reports
    claim_key = kind + ("/accessible" if kind == "main-si" and e.get("family") == "accessible" else "")
    for pq in e["exponents"]:
        p, q = float(pq[0]), float(pq[1])
        rep = Report(name, kind, CLAIMS[claim_key], p, q, RegimeNormSpec(p, q).name, seed, h)
        _RUNNERS[kind](e, base, (p, q), rep, opts)
        reports.append(rep)
    if kind == "duality-suite":
        for p in e.get("reverse_doob_p", []):
            rep = Report(name, kind, CLAIMS["duality-suite/reverse-doob"], float(p), None, "reverse-doob", seed, h)
            _run_reverse_doob(e, base, float(p), rep)
            reports.append(rep)
    return reports


def run_config(cfg: dict, seed: int | None = None) -> list[Report]:
    cfg = validate_config(cfg)
    s = int(cfg.get("seed", 0) if seed is None else seed)
    out = []
    for e in cfg["experiments"]:
        e = dict(e)
        if seed is not None:
            e["seed"] = s
        out.extend(run_experiment(e, s))
    return out


# -- output ---------------------------------------------------------------------------

def _slug(rep: Report) -> str:
    tag = f"p{_fmt(rep.p)}_q{_fmt(rep.q)}" if rep.q is not None else f"p{_fmt(rep.p)}"
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in f"{rep.experiment}__{tag}")


def csv_text(rep: Report, timestamp: str | None = None) -> str:
    """CSV with header comments; the body depends only on the rows."""
    buf = io.StringIO()
    if timestamp is not None:
        buf.write(f"# generated {timestamp}\n")
    buf.write(f"# claim: {rep.claim}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["instance_id", "lhs", "rhs", "ratio"])
    for r in rep.rows:
        w.writerow([r["instance_id"], repr(r["lhs"]), repr(r["rhs"]), repr(r["ratio"])])
    return buf.getvalue()


def write_report(rep: Report, out_dir: str | os.PathLike, timestamp: str | None = None) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = _slug(rep)
    c = out / f"{stem}.csv"
    j = out / f"{stem}.json"
    with open(c, "w", newline="") as fh:
        fh.write(csv_text(rep, timestamp))
    with open(j, "w", newline="") as fh:
        fh.write(json.dumps(rep.summary(), indent=2, sort_keys=True) + "\n")
    return c, j


# -- baselines ------------------------------------------------------------------------

def load_store(path: str | os.PathLike | None) -> dict:
    if path is None or not Path(path).exists():
        return {"entries": {}}
    try:
        store = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigInvalid(f"baseline file {path} is not JSON") from exc
    store.setdefault("entries", {})
    return store


def save_store(store: dict, path: str | os.PathLike) -> None:
    Path(path).write_text(json.dumps(store, indent=2, sort_keys=True) + "\n")


def baseline_update(reports: Sequence[Report], store: dict, force: bool = False,
                    slack: float = BAND_SLACK) -> dict:
    """Record or widen the ratio band of every report.

    A changed config hash needs ``force``.  Widening an existing band by
    more than ``slack`` (relative, at either end) also needs ``force``.
    """
    entries = {k: dict(v) for k, v in store.get("entries", {}).items()}
    for rep in reports:
        s = rep.summary()
        if s["min"] is None:
            continue
        if not (s["min"] > 0 and math.isfinite(s["max"])):
            raise AssertionFailed(f"{rep.key}: ratio band must be positive and finite")
        old = entries.get(rep.key)
        new = {"min": s["min"], "max": s["max"], "spread": s["spread"], "seed": rep.seed,
               "config_hash": rep.config_hash}
        if old is None or force:
            if old is not None and old["config_hash"] == rep.config_hash:
                new["min"], new["max"] = min(old["min"], s["min"]), max(old["max"], s["max"])
                new["spread"] = new["max"] / new["min"]
            entries[rep.key] = new
            continue
        if old["config_hash"] != rep.config_hash:
            raise HashMismatch(f"{rep.key}: config changed since the baseline was recorded (use --force)")
        lo, hi = min(old["min"], s["min"]), max(old["max"], s["max"])
        if lo < old["min"] / (1 + slack) or hi > old["max"] * (1 + slack):
            raise AssertionFailed(f"{rep.key}: band would widen by more than {slack:.0%} (use --force)")
        entries[rep.key] = {"min": lo, "max": hi, "spread": hi / lo, "seed": old["seed"],
                            "config_hash": old["config_hash"]}
    return {"entries": entries}


@dataclass
class Comparison:
    ok: bool
    diffs: list
    warnings: list


def compare_to_baseline(reports: Sequence[Report], store: dict, slack: float = BAND_SLACK) -> Comparison:
    """Every ratio must lie in its stored band inflated by ``slack``."""
    entries = store.get("entries", {})
    warnings, diffs = [], []
    if not entries:
        return Comparison(True, [], ["baseline store is empty; nothing compared"])
    for rep in reports:
        band = entries.get(rep.key)
        if band is None:
            if rep.rows:
                warnings.append(f"{rep.key}: no baseline entry")
            continue
        lo, hi = band["min"] / (1 + slack), band["max"] * (1 + slack)
        for r in rep.rows:
            if not lo <= r["ratio"] <= hi:
                diffs.append({"key": rep.key, "instance_id": r["instance_id"], "ratio": r["ratio"],
                              "band": [lo, hi]})
    return Comparison(not diffs, diffs, warnings)


# -- entry point ------------------------------------------------------------------------

def run(config_path: str | os.PathLike, out: str | os.PathLike = "reports", seed: int | None = None,
        baseline: str | os.PathLike | None = None, update_baseline: bool = False, force: bool = False,
        log: Callable[[str], None] = print) -> int:
    """Run a config file; 0 when every assertion holds, 1 on failures, 2 on a bad config."""
    try:
        cfg = load_config(config_path)
        stamp = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
        reports = run_config(cfg, seed)
        index = []
        for rep in reports:
            write_report(rep, out, stamp)
            index.append(rep.to_dict())
            for name, ok, detail in rep.assertions:
                log(f"{'PASS' if ok else 'FAIL'} {rep.key}: {name}" + (f" ({detail})" if detail else ""))
        failed = [r.key for r in reports if not r.ok]
        comparison = None
        if baseline is not None:
            store = load_store(baseline)
            if update_baseline:
                save_store(baseline_update(reports, store, force), baseline)
                log(f"baseline {baseline} updated")
            else:
                comparison = compare_to_baseline(reports, store)
                for w in comparison.warnings:
                    log(f"WARNING {w}")
                for d in comparison.diffs:
                    log(f"FAIL {d['key']} instance {d['instance_id']}: ratio {d['ratio']:.6g} outside "
                        f"[{d['band'][0]:.6g}, {d['band'][1]:.6g}]")
        Path(out).mkdir(parents=True, exist_ok=True)
        summary = {"reports": index, "failed": failed,
                   "baseline_ok": None if comparison is None else comparison.ok}
        (Path(out) / "run_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        if failed or (comparison is not None and not comparison.ok):
            raise AssertionFailed(f"{len(failed)} report(s) failed assertions")
        return 0
    except ConfigInvalid as exc:
        log(f"config error: {exc}")
        return 2
    except (AssertionFailed, HashMismatch) as exc:
        log(f"assertion failed: {exc}")
        return 1
    except LabError as exc:
        log(f"error: {type(exc).__name__}: {exc}")
        return 1
