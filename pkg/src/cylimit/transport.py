"""Discrete Kantorovich problem between the skeleton and the dual simplex.

Cost is ``c(x, p) = 1/2 |x_hat - p_hat|^2`` in reduced coordinates.  Because
``<x, p> = p_0 + <x_hat, p_hat>`` on the simplex, this differs from the
full pairing ``-<x, p>`` only by terms depending on one side, which are
absorbed by the dual potentials (see :mod:`cylimit.potential`).
"""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import ot
import scipy.sparse as sp
from scipy.optimize import linprog
from scipy.sparse.csgraph import connected_components
from scipy.special import logsumexp

from cylimit.geometry import lift_p
from cylimit.measures import DiscreteMeasure

log = logging.getLogger(__name__)

MAX_LP_ENTRIES = 25_000_000


class TransportError(RuntimeError):
    pass


class Infeasible(TransportError):
    pass


class ResourceLimit(TransportError):
    pass


class NonConvergence(TransportError):
    pass


class NumericalUnderflow(TransportError):
    pass


@dataclass(frozen=True)
class CostSpec:
    """Quadratic cost on reduced coordinates of both measures."""

    convention: str = "reduced"

    def matrix(self, mu: DiscreteMeasure, nu: DiscreteMeasure) -> np.ndarray:
        return self.pairwise(mu.reduced, nu.reduced)

    @staticmethod
    def pairwise(xs: np.ndarray, ps: np.ndarray) -> np.ndarray:
        xs = np.asarray(xs, dtype=float)
        ps = np.asarray(ps, dtype=float)
        sq = (xs**2).sum(1)[:, None] + (ps**2).sum(1)[None, :] - 2.0 * xs @ ps.T
        return 0.5 * np.maximum(sq, 0.0)

    @staticmethod
    def pointwise(xs: np.ndarray, ps: np.ndarray) -> np.ndarray:
        return 0.5 * ((np.asarray(xs) - np.asarray(ps)) ** 2).sum(-1)


@dataclass
class SolverReport:
    backend: str
    iterations: int = 0
    eps_final: float | None = None
    duality_gap: float = 0.0
    dual_violation: float = 0.0
    marginal_error: float = 0.0
    elapsed: float = 0.0
    levels: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


@dataclass
class TransportPlan:
    coupling: sp.csr_matrix
    mu: DiscreteMeasure
    nu: DiscreteMeasure
    achieved_cost: float
    f: np.ndarray
    g: np.ndarray
    report: SolverReport
    cost: CostSpec = field(default_factory=CostSpec)

    @property
    def row_sums(self) -> np.ndarray:
        return np.asarray(self.coupling.sum(axis=1)).ravel()

    @property
    def col_sums(self) -> np.ndarray:
        return np.asarray(self.coupling.sum(axis=0)).ravel()

    @property
    def duality_gap(self) -> float:
        return self.report.duality_gap

    def to_csv(self, path: str | Path) -> None:
        coo = self.coupling.tocoo()
        order = np.lexsort((coo.col, coo.row))
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["i", "j", "mass"])
            for k in order:
                writer.writerow([int(coo.row[k]), int(coo.col[k]), f"{coo.data[k]:.17g}"])


def _check_masses(mu: DiscreteMeasure, nu: DiscreteMeasure) -> None:
    a, b = mu.total_mass, nu.total_mass
    if abs(a - b) > 1e-9 * max(a, b, 1.0):
        raise Infeasible(f"total masses differ: {a} vs {b}")


def _check_size(mu, nu, limit):
    if len(mu) * len(nu) > limit:
        raise ResourceLimit(f"{len(mu)} x {len(nu)} exceeds the {limit}-entry cap")


def _support_components(G, a, b, rel_tol):
    """Connected components of the bipartite graph of plan entries above ``rel_tol`` times the largest atom."""
    n1, n2 = G.shape
    S = sp.csr_matrix(G > rel_tol * max(a.max(), b.max()))
    graph = sp.bmat([[None, S], [S.T, None]], format="csr")
    _, lab = connected_components(graph, directed=False)
    return lab[:n1], lab[n1:]


def centre_duals(G, C, f, g, a, b, rel_tol=1e-12):
    """Pick a canonical optimal dual pair when the plan's support splits into several components.

    On each support component the duals are fixed up to a constant, and the
    relative constants of different components may move freely as long as
    ``f_i + g_j <= C_ij`` keeps holding across components.  Network simplex
    returns an endpoint of that range, which breaks symmetries of the instance.
    Here the offsets maximise the smallest cross-component slack instead.
    Zero-mass atoms are then reset to the c-transform of the other side.
    """
    f = np.array(f, dtype=float)
    g = np.array(g, dtype=float)
    live_r, live_c = a > 0, b > 0
    rl, cl = _support_components(G, a, b, rel_tol)
    comps = np.unique(rl[live_r])
    K = len(comps)
    if K > 1:
        pos = {c: k for k, c in enumerate(comps)}
        rk = np.array([pos.get(c, -1) for c in rl])
        ck = np.array([pos.get(c, -1) for c in cl])
        slack = C - f[:, None] - g[None, :]
        S = np.full((K, K), np.inf)
        for i in range(K):
            rows = slack[(rk == i) & live_r]
            for j in range(K):
                cols = (ck == j) & live_c
                if i != j and cols.any():
                    S[i, j] = rows[:, cols].min()
        # variables (t_0 .. t_{K-1}, r): maximise r subject to t_i - t_j + r <= S_ij
        pairs = [(i, j) for i in range(K) for j in range(K) if i != j and np.isfinite(S[i, j])]
        A = np.zeros((len(pairs), K + 1))
        rhs = np.empty(len(pairs))
        for row, (i, j) in enumerate(pairs):
            A[row, i] += 1.0
            A[row, j] -= 1.0
            A[row, K] = 1.0
            rhs[row] = S[i, j]
        c = np.zeros(K + 1)
        c[K] = -1.0
        bounds = [(0.0, 0.0)] + [(None, None)] * (K - 1) + [(None, None)]
        res = linprog(c, A_ub=A, b_ub=rhs, bounds=bounds, method="highs")
        if res.status == 0 and res.x[K] >= 0:
            t = res.x[:K]
            f[rk >= 0] += t[rk[rk >= 0]]
            g[ck >= 0] -= t[ck[ck >= 0]]
        else:
            log.warning("dual centring skipped (linprog status %s)", res.status)
    if (~live_c).any() and live_r.any():
        g[~live_c] = np.min(C[np.ix_(live_r, ~live_c)] - f[live_r, None], axis=0)
    if (~live_r).any():
        f[~live_r] = np.min(C[~live_r] - g[None, :], axis=1)
    return f, g


def solve_exact(
    mu: DiscreteMeasure,
    nu: DiscreteMeasure,
    cost: CostSpec | None = None,
    max_entries: int = MAX_LP_ENTRIES,
) -> TransportPlan:
    """Exact optimal plan via the network simplex (POT ``emd``)."""
    cost = cost or CostSpec()
    _check_masses(mu, nu)
    _check_size(mu, nu, max_entries)
    t0 = time.perf_counter()
    a = np.ascontiguousarray(mu.weights)
    b = np.ascontiguousarray(nu.weights) * (a.sum() / nu.weights.sum())
    C = cost.matrix(mu, nu)
    G, info = ot.emd(a, b, C, numItermax=50_000_000, log=True)
    if info.get("result_code", 1) != 1:
        raise TransportError(f"network simplex stopped: {info.get('warning')}")
    f = np.asarray(info["u"], dtype=float)
    g = np.asarray(info["v"], dtype=float)
    f, g = centre_duals(G, C, f, g, a, b)
    # the simplex duals are defined up to a constant; centre on the source side
    shift = float(a @ f) / a.sum()
    f, g = f - shift, g + shift
    achieved = float(np.sum(G * C))
    gap = achieved - float(a @ f + b @ g)
    report = SolverReport(
        backend="exact",
        iterations=int(info.get("iterations", 0) or 0) if "iterations" in info else 0,
        duality_gap=gap,
        dual_violation=float(max(0.0, np.max(f[:, None] + g[None, :] - C))),
        marginal_error=float(np.abs(G.sum(1) - a).sum() + np.abs(G.sum(0) - b).sum()),
        elapsed=time.perf_counter() - t0,
    )
    return TransportPlan(sp.csr_matrix(G), mu, nu, achieved, f, g, report, cost)


def default_eps_schedule(start: float = 0.1, stop: float = 1e-3, factor: float = 2.0) -> list[float]:
    eps = [start]
    while eps[-1] / factor > stop * (1 + 1e-12):
        eps.append(eps[-1] / factor)
    if eps[-1] > stop:
        eps.append(stop)
    return eps


def round_to_marginals(P: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Project a positive matrix onto the transport polytope (row/column rescale, then dump the residual)."""
    r = P.sum(1)
    P = P * np.minimum(a / np.where(r > 0, r, 1.0), 1.0)[:, None]
    c = P.sum(0)
    P = P * np.minimum(b / np.where(c > 0, c, 1.0), 1.0)[None, :]
    er = a - P.sum(1)
    ec = b - P.sum(0)
    s = er.sum()
    if s > 0:
        P = P + np.outer(er, ec) / s
    return P


def _log_update(h_other, log_w_other, C, eps, axis):
    """Exact log-domain c-transform step: ``-eps * LSE(log w + (h - C)/eps)``."""
    if axis == 1:
        z = (h_other[None, :] - C) / eps + log_w_other[None, :]
    else:
        z = (h_other[:, None] - C) / eps + log_w_other[:, None]
    return -eps * logsumexp(z, axis=axis)


def solve_entropic(
    mu: DiscreteMeasure,
    nu: DiscreteMeasure,
    cost: CostSpec | None = None,
    eps_schedule: list[float] | None = None,
    max_iter: int = 10_000,
    tol: float = 1e-8,
    inner_tol: float = 1e-6,
    absorb_at: float = 1e10,
    check_every: int = 10,
    max_entries: int = 60_000_000,
) -> TransportPlan:
    """Log-stabilised Sinkhorn with epsilon scaling.

    Potentials ``f, g`` are kept in the log domain; between absorptions the
    scaling vectors act on the stabilised kernel ``exp((f + g - C)/eps)``,
    which keeps every entry of interest near 1.  The last level must reach
    ``tol`` in row-marginal L1 error, earlier levels ``inner_tol``.  The final
    plan is rounded onto the transport polytope.
    """
    cost = cost or CostSpec()
    _check_masses(mu, nu)
    _check_size(mu, nu, max_entries)
    eps_schedule = list(eps_schedule or default_eps_schedule())
    if any(e <= 0 for e in eps_schedule):
        raise ValueError("epsilon values must be positive")
    if any(e2 >= e1 for e1, e2 in zip(eps_schedule, eps_schedule[1:])):
        raise ValueError("epsilon schedule must be strictly decreasing")

    t0 = time.perf_counter()
    a = np.asarray(mu.weights, dtype=float)
    b = np.asarray(nu.weights, dtype=float) * (a.sum() / nu.weights.sum())
    a_pos, b_pos = a > 0, b > 0
    log_a = np.where(a_pos, np.log(np.where(a_pos, a, 1.0)), -np.inf)
    log_b = np.where(b_pos, np.log(np.where(b_pos, b, 1.0)), -np.inf)
    C = cost.matrix(mu, nu)
    f = np.zeros(len(a))
    g = np.zeros(len(b))
    report = SolverReport(backend="entropic")
    total_iter = 0

    def kernel(eps):
        with np.errstate(under="ignore"):
            return np.exp((f[:, None] + g[None, :] - C) / eps)

    for level, eps in enumerate(eps_schedule):
        last = level == len(eps_schedule) - 1
        goal = tol if last else inner_tol
        K = kernel(eps)
        u = np.ones(len(a))
        v = np.ones(len(b))
        err = np.inf
        it = 0
        for it in range(1, max_iter + 1):
            Kv = K @ (b * v)
            if np.any(Kv[a_pos] <= 0) or not np.all(np.isfinite(Kv)):
                f = f + eps * np.log(np.where(u > 0, u, 1.0))
                g = g + eps * np.log(np.where(v > 0, v, 1.0))
                f = _log_update(g, log_b, C, eps, axis=1)
                if not np.all(np.isfinite(f[a_pos])):
                    raise NumericalUnderflow(f"row potentials not finite at eps={eps}")
                K = kernel(eps)
                u = np.ones(len(a))
                v = np.ones(len(b))
                Kv = K @ (b * v)
            u = np.where(a_pos, 1.0 / np.where(Kv > 0, Kv, 1.0), 0.0)
            Ku = K.T @ (a * u)
            if np.any(Ku[b_pos] <= 0) or not np.all(np.isfinite(Ku)):
                f = f + eps * np.log(np.where(u > 0, u, 1.0))
                g = _log_update(f, log_a, C, eps, axis=0)
                if not np.all(np.isfinite(g[b_pos])):
                    raise NumericalUnderflow(f"column potentials not finite at eps={eps}")
                K = kernel(eps)
                u = np.ones(len(a))
                Ku = K.T @ (a * u)
            v = np.where(b_pos, 1.0 / np.where(Ku > 0, Ku, 1.0), 0.0)
            if max(np.abs(u).max(), np.abs(v).max()) > absorb_at or (
                min(u[a_pos].min(), v[b_pos].min()) < 1.0 / absorb_at
            ):
                f = f + eps * np.log(np.where(u > 0, u, 1.0))
                g = g + eps * np.log(np.where(v > 0, v, 1.0))
                K = kernel(eps)
                u = np.ones(len(a))
                v = np.ones(len(b))
            if it % check_every == 0:
                row = a * u * (K @ (b * v))
                err = float(np.abs(row - a).sum())
                if err < goal:
                    break
        with np.errstate(divide="ignore"):
            f = f + eps * np.where(u > 0, np.log(np.where(u > 0, u, 1.0)), 0.0)
            g = g + eps * np.where(v > 0, np.log(np.where(v > 0, v, 1.0)), 0.0)
        total_iter += it
        report.levels.append({"eps": eps, "iterations": it, "marginal_error": err})
        log.debug("eps=%g iterations=%d row error=%.3g", eps, it, err)
        if last and err >= goal:
            raise NonConvergence(
                f"Sinkhorn hit {max_iter} iterations at eps={eps} with marginal error {err:.3g}"
            )

    eps = eps_schedule[-1]
    # zero-mass atoms never get a meaningful scaling; give them the soft c-transform
    if not np.all(b_pos):
        g[~b_pos] = _log_update(f[a_pos], log_a[a_pos], C[np.ix_(a_pos, ~b_pos)], eps, axis=0)
    if not np.all(a_pos):
        f[~a_pos] = _log_update(g[b_pos], log_b[b_pos], C[np.ix_(~a_pos, b_pos)], eps, axis=1)
    with np.errstate(under="ignore"):
        P = a[:, None] * b[None, :] * np.exp((f[:, None] + g[None, :] - C) / eps)
    P = round_to_marginals(P, a, b)
    achieved = float(np.sum(P * C))
    # c-transform of g gives a feasible dual pair, hence a certified gap
    f_feas = np.min(C - g[None, :], axis=1)
    report.iterations = total_iter
    report.eps_final = eps
    report.duality_gap = achieved - float(a @ f_feas + b @ g)
    report.dual_violation = float(max(0.0, np.max(f[:, None] + g[None, :] - C)))
    report.marginal_error = float(np.abs(P.sum(1) - a).sum() + np.abs(P.sum(0) - b).sum())
    report.elapsed = time.perf_counter() - t0
    P[P < 1e-300] = 0.0
    return TransportPlan(sp.csr_matrix(P), mu, nu, achieved, f, g, report, cost)


# ---------------------------------------------------------------- Brenier map


@dataclass(frozen=True)
class BrenierMap:
    """Barycentric projection of a plan.

    ``reduced[i]`` is the image of source point ``x[i]`` in reduced dual
    coordinates; ``p`` holds the canonical lifts.  Rows of skipped (zero-mass)
    atoms are NaN.
    """

    x: np.ndarray
    reduced: np.ndarray
    p: np.ndarray
    mass: np.ndarray
    skipped: tuple[int, ...]

    def __len__(self):
        return len(self.x)


def brenier_map(plan: TransportPlan) -> BrenierMap:
    P = plan.coupling
    rows = np.asarray(P.sum(axis=1)).ravel()
    targets = plan.nu.reduced
    with np.errstate(invalid="ignore", divide="ignore"):
        T = np.asarray(P @ targets) / rows[:, None]
    skipped = tuple(int(i) for i in np.flatnonzero(rows <= 0))
    if skipped:
        log.warning("skipping %d zero-mass source atoms", len(skipped))
        T[list(skipped)] = np.nan
    p = lift_p(T)
    return BrenierMap(plan.mu.points, T, p, rows, skipped)


def cyclical_monotonicity_check(plan: TransportPlan, trials: int, seed: int | None = 0) -> float:
    """Smallest sampled value of ``c(x,p') + c(x',p) - c(x,p) - c(x',p')``, clamped above at 0."""
    coo = plan.coupling.tocoo()
    keep = coo.data > 0
    rows, cols = coo.row[keep], coo.col[keep]
    if len(rows) < 2 or trials <= 0:
        return 0.0
    rng = np.random.default_rng(seed)
    s = rng.integers(0, len(rows), size=(trials, 2))
    xs = plan.mu.reduced
    ps = plan.nu.reduced
    i, j = rows[s[:, 0]], cols[s[:, 0]]
    i2, j2 = rows[s[:, 1]], cols[s[:, 1]]
    c = CostSpec.pointwise
    delta = c(xs[i], ps[j2]) + c(xs[i2], ps[j]) - c(xs[i], ps[j]) - c(xs[i2], ps[j2])
    return float(min(0.0, delta.min()))
