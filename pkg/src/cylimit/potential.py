"""Convex potential, its Legendre transforms, the MA-type measure and FS approximants.

Pairings here are the full ``(m+1)``-coordinate ones, ``<x, p> = sum x_i p_i``:
``u*(p) = max_x <x, p> - u(x)`` over the simplex grid and
``u**(x) = max_p <p, x> - u*(p)`` over the dual grid.  The second one extends
``u`` off the simplex.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from cylimit.geometry import (
    DualGrid,
    DualPoint,
    LatticeIndex,
    ProblemConfig,
    SimplexPoint,
    dual_lattice,
    reduce_p,
    simplex_cells,
    weight_W,
    weight_W_reduced,
)
from cylimit.measures import C1_closed_form, composite_simplex_rule, infer_resolution
from cylimit.transport import BrenierMap, TransportPlan

_CHUNK = 4_000_000


class PotentialError(ValueError):
    pass


class MissingDuals(PotentialError):
    pass


class EmptyTerms(PotentialError):
    pass


class MalformedTerm(PotentialError):
    pass


def max_affine(slopes: np.ndarray, offsets: np.ndarray, queries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``max_j <slopes_j, q> - offsets_j`` for each query row, with the maximiser index."""
    slopes = np.asarray(slopes, dtype=float)
    offsets = np.asarray(offsets, dtype=float)
    queries = np.atleast_2d(np.asarray(queries, dtype=float))
    best = np.empty(len(queries))
    arg = np.empty(len(queries), dtype=np.int64)
    step = max(1, _CHUNK // max(1, len(slopes)))
    for s in range(0, len(queries), step):
        vals = queries[s : s + step] @ slopes.T - offsets[None, :]
        arg[s : s + step] = np.argmax(vals, axis=1)
        best[s : s + step] = vals[np.arange(len(vals)), arg[s : s + step]]
    return best, arg


@dataclass(frozen=True)
class ConvexPotential:
    """Grid samples of ``u`` on the simplex and of ``u*`` on the dual grid.

    ``shift`` is the constant added to the raw dual-derived values to reach
    ``min u = 0``; ``raw_u`` keeps those values before the convexification pass.
    """

    cfg: ProblemConfig
    x: np.ndarray
    u: np.ndarray
    dual: DualGrid
    u_star: np.ndarray
    shift: float = 0.0
    raw_u: np.ndarray | None = None

    @property
    def N(self) -> int:
        return infer_resolution(self.x)

    @classmethod
    def from_grid_values(
        cls,
        cfg: ProblemConfig,
        x: np.ndarray,
        u: np.ndarray,
        dual: DualGrid,
        convexify: bool = True,
        normalize: bool = True,
    ) -> "ConvexPotential":
        x = np.asarray(x, dtype=float)
        raw = np.asarray(u, dtype=float)
        shift = 0.0
        if normalize:
            shift = -float(raw.min())
            raw = raw + shift
        u_star, _ = max_affine(x, raw, dual.p)
        vals = raw
        if convexify:
            vals, _ = max_affine(dual.p, u_star, x)
            if normalize:
                extra = -float(vals.min())
                vals, u_star, raw, shift = vals + extra, u_star - extra, raw + extra, shift + extra
        return cls(cfg, x, vals, dual, u_star, shift, raw)

    def to_csv(self, path: str | Path, bmap: BrenierMap | None = None, labels=None) -> None:
        m = self.cfg.m
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            head = [f"x{i}" for i in range(m + 1)] + ["u"]
            head += [f"T{i}" for i in range(m + 1)] + ["chamber"]
            writer.writerow(head)
            for i, row in enumerate(self.x):
                T = bmap.p[i] if bmap is not None else [np.nan] * (m + 1)
                lab = "" if labels is None else labels[i]
                writer.writerow(
                    [f"{v:.17g}" for v in row] + [f"{self.u[i]:.17g}"] + [f"{v:.17g}" for v in T] + [lab]
                )

    def dual_to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([f"p{i}" for i in range(self.cfg.m + 1)] + ["u_star"])
            for row, v in zip(self.dual.p, self.u_star):
                writer.writerow([f"{c:.17g}" for c in row] + [f"{v:.17g}"])


def potential_from_duals(plan: TransportPlan, dual: DualGrid | None = None) -> ConvexPotential:
    """Recover ``u`` from the source potential ``f``: ``u(x) = |x_hat|^2/2 - f(x)``.

    ``dual`` must be the grid the target measure was built on; when omitted
    the grid attached by :func:`cylimit.measures.target_measure` is used.
    """
    if plan.f is None or plan.g is None:
        raise MissingDuals("plan carries no dual potentials")
    if plan.mu.kind != "simplex" or plan.nu.kind != "dual":
        raise PotentialError("expected a simplex-to-dual plan")
    dual = dual or plan.nu.grid
    if dual is None:
        raise PotentialError("target measure carries no dual grid; pass it explicitly")
    x = plan.mu.points
    x_hat = plan.mu.reduced
    u_raw = 0.5 * (x_hat**2).sum(1) - plan.f
    return ConvexPotential.from_grid_values(dual.cfg, x, u_raw, dual)


def dual_values_from_duals(plan: TransportPlan, shift: float = 0.0) -> np.ndarray:
    """``u*(p) = |p_hat|^2/2 - g(p) + p_0`` (plus the normalisation shift) on the target support."""
    p_hat = plan.nu.reduced
    return 0.5 * (p_hat**2).sum(1) - plan.g + plan.nu.points[:, 0] - shift


def _as_queries(q, m: int) -> tuple[np.ndarray, bool]:
    if isinstance(q, DualPoint):
        q = q.p
    elif isinstance(q, SimplexPoint):
        q = q.x
    arr = np.asarray(q, dtype=float)
    single = arr.ndim == 1
    arr = np.atleast_2d(arr)
    if arr.shape[1] != m + 1:
        raise PotentialError(f"expected points with {m + 1} coordinates")
    return arr, single


def legendre_dual(pot: ConvexPotential, p):
    """``u*(p) = max over simplex grid of <x, p> - u(x)``."""
    q, single = _as_queries(p, pot.cfg.m)
    vals, _ = max_affine(pot.x, pot.u, q)
    return float(vals[0]) if single else vals


def double_legendre(pot: ConvexPotential, x):
    """``u**(x) = max over dual grid of <p, x> - u*(p)``; ``x`` may leave the simplex."""
    q, single = _as_queries(x, pot.cfg.m)
    vals, _ = max_affine(pot.dual.p, pot.u_star, q)
    return float(vals[0]) if single else vals


def double_legendre_with_argmax(pot: ConvexPotential, x) -> tuple[np.ndarray, np.ndarray]:
    q, _ = _as_queries(x, pot.cfg.m)
    vals, arg = max_affine(pot.dual.p, pot.u_star, q)
    return vals, pot.dual.p[arg]


def idempotence_error(pot: ConvexPotential, use_raw: bool = True) -> float:
    """``max |u** - u|`` over the simplex grid (against the raw dual-derived ``u`` by default)."""
    ref = pot.raw_u if (use_raw and pot.raw_u is not None) else pot.u
    return float(np.max(np.abs(double_legendre(pot, pot.x) - ref)))


def lipschitz_u(pot: ConvexPotential) -> float:
    """A priori Lipschitz bound of ``u`` in reduced coordinates: the largest ``|p_hat|`` on the dual simplex."""
    return float(np.max(np.linalg.norm(pot.dual.reduced, axis=1)))


def lipschitz_u_star(pot: ConvexPotential) -> float:
    """Measured Lipschitz constant of ``u*`` along lattice edges of the dual grid (full coordinates)."""
    steps = pot.dual.steps
    index = LatticeIndex(steps)
    best = 0.0
    h = pot.dual.spacing
    for j in range(pot.cfg.m + 1):
        nb = steps.copy()
        nb[:, j] += 1
        idx = index.lookup(nb)
        ok = idx >= 0
        if np.any(ok):
            best = max(best, float(np.max(np.abs(pot.u_star[ok] - pot.u_star[idx[ok]]))) / h)
    return best


# ------------------------------------------------------------- MA-type measure


def _image_integrals(images: np.ndarray, cfg: ProblemConfig, subdivisions: int) -> np.ndarray:
    """``int W dp`` over the simplices spanned by ``images`` (shape (C, m+1, m), reduced coords)."""
    m = cfg.m
    if m == 1:
        lo = np.minimum(images[:, 0, 0], images[:, 1, 0])
        hi = np.maximum(images[:, 0, 0], images[:, 1, 0])
        # W is polynomial on each side of p_hat = 0; integrate both pieces exactly
        nodes, weights = np.polynomial.legendre.leggauss(max(1, (cfg.n - cfg.m) // 2 + 1))
        total = np.zeros(len(images))
        for a, b in ((lo, np.minimum(hi, 0.0)), (np.maximum(lo, 0.0), hi)):
            length = np.maximum(b - a, 0.0)
            pts = (a + b)[:, None] / 2 + length[:, None] / 2 * nodes[None, :]
            vals = weight_W_reduced(pts[..., None], cfg)
            total += length / 2 * (vals @ weights)
        return total
    t, w = composite_simplex_rule(m, max(cfg.n - m, 1), subdivisions)
    v0 = images[:, 0, :]
    edges = images[:, 1:, :] - v0[:, None, :]
    vol = np.abs(np.linalg.det(edges))
    pts = v0[:, None, :] + np.einsum("qi,cij->cqj", t, edges)
    vals = weight_W_reduced(pts, cfg)
    return vol * (vals @ w)


def ma_cell_measures(
    pot: ConvexPotential, bmap: BrenierMap, cfg: ProblemConfig | None = None, subdivisions: int = 3
) -> np.ndarray:
    """Per grid cell, ``int W dp`` over the gradient image of the cell.

    The image of a small simplex is approximated by the simplex spanned by
    the map values at its vertices.
    """
    cfg = cfg or pot.cfg
    N = infer_resolution(pot.x)
    cells = simplex_cells(cfg.m, N)
    T = bmap.reduced
    if len(T) != len(pot.x):
        raise PotentialError("map and potential live on different grids")
    images = T[cells]  # (C, m+1, m)
    bad = np.any(~np.isfinite(images), axis=(1, 2))
    out = np.zeros(len(cells))
    if np.any(~bad):
        out[~bad] = _image_integrals(images[~bad], cfg, subdivisions)
    return out


def ma_measure(
    pot: ConvexPotential,
    region: Iterable[int] | np.ndarray | None,
    bmap: BrenierMap,
    cfg: ProblemConfig | None = None,
    cell_values: np.ndarray | None = None,
) -> float:
    """``Mu(E) = int_{grad u(E)} W dp`` for a set ``E`` of grid cells (``None`` means all of them)."""
    vals = ma_cell_measures(pot, bmap, cfg) if cell_values is None else cell_values
    if region is None:
        return float(vals.sum())
    region = np.asarray(list(region) if not isinstance(region, np.ndarray) else region)
    if region.size == 0:
        return 0.0
    if region.dtype == bool:
        return float(vals[region].sum())
    return float(vals[np.unique(region.astype(np.int64))].sum())


def ma_density_ratio(pot: ConvexPotential, bmap: BrenierMap, cfg: ProblemConfig | None = None) -> np.ndarray:
    """``Mu(cell) / (C1 mu_0(cell))`` per cell; equal to 1 for an exact solution."""
    cfg = cfg or pot.cfg
    N = infer_resolution(pot.x)
    mu0_cell = 1.0 / N**cfg.m  # m! times reduced volume 1/(m! N^m)
    return ma_cell_measures(pot, bmap, cfg) / (C1_closed_form(cfg) * mu0_cell)


def ma_density_fd(pot: ConvexPotential, stencil: int = 8) -> tuple[np.ndarray, np.ndarray]:
    """For m = 1: ``u'' W(u') / C1`` from centred differences of ``u`` in ``x_0``.

    ``stencil`` is the half-width in grid steps.  An exact transport plan
    makes ``u`` piecewise affine on the scale of the target lattice, so a
    one-step second difference mostly measures that faceting.
    Returns the stencil centres and the ratios (1 for an exact solution).
    """
    if pot.cfg.m != 1:
        raise PotentialError("finite-difference density is only defined for m = 1")
    if stencil < 1:
        raise PotentialError(f"stencil must be >= 1, got {stencil}")
    order = np.argsort(pot.x[:, 0])
    x = pot.x[order, 0]
    u = pot.u[order]
    if len(x) <= 2 * stencil:
        raise PotentialError("grid too coarse for the requested stencil")
    h = stencil / (len(x) - 1)
    upp = (u[2 * stencil :] - 2 * u[stencil:-stencil] + u[: -2 * stencil]) / h**2
    up = (u[2 * stencil :] - u[: -2 * stencil]) / (2 * h)
    # u'(x_0) = p_0 - p_1, i.e. p_hat = -u'
    W = weight_W_reduced(-up[:, None], pot.cfg)
    return x[stencil:-stencil], upp * W / C1_closed_form(pot.cfg)


# -------------------------------------------------------------- FS approximants


def fs_lattice(cfg: ProblemConfig, k: int) -> np.ndarray:
    """Points of the dual complex with coordinates in ``(1/k) Z``."""
    if k < 1:
        raise PotentialError(f"k must be >= 1, got {k}")
    steps, _ = dual_lattice(cfg, k)
    return -steps / k


def fs_approximant(pot: ConvexPotential, k: int, x):
    """``max over p in (1/k)-lattice of <p, x> - u*(p)`` with ``u*`` evaluated exactly."""
    lattice = fs_lattice(pot.cfg, k)
    ustar = legendre_dual(pot, lattice)
    q, single = _as_queries(x, pot.cfg.m)
    vals, _ = max_affine(lattice, np.atleast_1d(ustar), q)
    return float(vals[0]) if single else vals


def _check_terms(terms, degrees: Sequence[int] | None, bound: int | None, m: int | None):
    if not terms:
        raise EmptyTerms("empty term list")
    L = []
    A = []
    for l_vec, a in terms:
        l_vec = np.asarray(l_vec)
        if l_vec.ndim != 1 or (m is not None and len(l_vec) != m + 1):
            raise MalformedTerm(f"exponent vector {l_vec} has the wrong shape")
        if not np.all(l_vec == np.round(l_vec)) or l_vec.min() != 0:
            raise MalformedTerm(f"exponent vector {tuple(l_vec)} must be nonnegative integers with a zero entry")
        if degrees is not None and bound is not None:
            if float(np.dot(degrees, l_vec)) > bound:
                raise MalformedTerm(f"sum d_i l_i = {np.dot(degrees, l_vec)} exceeds {bound}")
        L.append(l_vec.astype(float))
        A.append(float(a))
    return np.array(L), np.array(A)


def tropical_valuation(terms, x, degrees: Sequence[int] | None = None, degree_bound: int | None = None):
    """``-log|s|`` on the skeleton: ``min over terms of <l, x> + a``."""
    if not terms:
        raise EmptyTerms("empty term list")
    xs, single = _as_queries(x, len(np.asarray(terms[0][0])) - 1)
    L, A = _check_terms(terms, degrees, degree_bound, xs.shape[1] - 1)
    vals = np.min(xs @ L.T + A[None, :], axis=1)
    return float(vals[0]) if single else vals


def fs_potential_from_terms(groups, l: int, x, degrees: Sequence[int] | None = None):
    """``(1/l) max over groups (terms, c) and terms (l_vec, a) of -<l_vec, x> + c - a``."""
    if l < 1:
        raise PotentialError(f"l must be >= 1, got {l}")
    if not groups:
        raise EmptyTerms("no sections given")
    first = np.asarray(groups[0][0][0][0]) if groups[0][0] else None
    if first is None:
        raise EmptyTerms("empty term list")
    xs, single = _as_queries(x, len(first) - 1)
    best = np.full(len(xs), -np.inf)
    for terms, c in groups:
        L, A = _check_terms(terms, degrees, l, xs.shape[1] - 1)
        vals = np.max(-(xs @ L.T) + float(c) - A[None, :], axis=1) / l
        best = np.maximum(best, vals)
    return float(best[0]) if single else best


def fs_error_table(pot: ConvexPotential, ks: Sequence[int] = (4, 8, 16, 32)) -> list[dict]:
    """Sandwich data: ``min`` and ``max`` of ``phi_k - u`` over the grid for each ``k``."""
    rows = []
    for k in ks:
        diff = fs_approximant(pot, k, pot.x) - pot.u
        rows.append({"k": int(k), "min": float(diff.min()), "max": float(diff.max()), "sup_error": float(-diff.min())})
    return rows
