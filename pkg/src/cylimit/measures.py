"""Source and target measures, and the normalisation constant C1."""
from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.special import roots_jacobi

from cylimit.geometry import (
    DualGrid,
    LatticeIndex,
    ProblemConfig,
    barycentric_grid,
    barycentric_lattice,
    reduce_p,
    simplex_cells,
    weight_W,
)


class MeasureError(ValueError):
    pass


class EmptyGrid(MeasureError):
    pass


class ZeroMass(MeasureError):
    pass


@dataclass(frozen=True)
class DiscreteMeasure:
    """Weighted point cloud.

    ``kind`` is ``"simplex"`` for points of the skeleton (rows are barycentric
    ``x``) and ``"dual"`` for canonical dual representatives ``p``.
    """

    points: np.ndarray
    weights: np.ndarray
    kind: str = "simplex"
    grid: DualGrid | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        w = np.asarray(self.weights, dtype=float).ravel()
        if len(pts) != len(w):
            raise MeasureError(f"{len(pts)} points but {len(w)} weights")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise MeasureError("weights must be finite and nonnegative")
        if self.kind not in ("simplex", "dual"):
            raise MeasureError(f"unknown measure kind {self.kind!r}")
        if len(np.unique(np.round(pts, 12), axis=0)) != len(pts):
            raise MeasureError("duplicate support points")
        pts.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    def __len__(self):
        return len(self.weights)

    @property
    def total_mass(self) -> float:
        return float(self.weights.sum())

    @property
    def reduced(self) -> np.ndarray:
        if self.kind == "simplex":
            return self.points[:, 1:]
        return reduce_p(self.points)

    def to_csv(self, path: str | Path) -> None:
        dim = self.points.shape[1]
        name = "x" if self.kind == "simplex" else "p"
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([f"{name}{i}" for i in range(dim)] + ["weight"])
            for row, w in zip(self.points, self.weights):
                writer.writerow([f"{v:.17g}" for v in row] + [f"{w:.17g}"])


# ------------------------------------------------------------------------- C1


def C1_closed_form(cfg: ProblemConfig) -> float:
    """``(d_0 + ... + d_m) / (d_0 ... d_m) * (n-m)! / n!``."""
    return (
        sum(cfg.degrees)
        / math.prod(cfg.degrees)
        * math.factorial(cfg.n - cfg.m)
        / math.factorial(cfg.n)
    )


@lru_cache(maxsize=None)
def simplex_rule(m: int, degree: int) -> tuple[np.ndarray, np.ndarray]:
    """Collapsed Gauss-Jacobi rule on ``{t >= 0, sum t <= 1}`` in R^m.

    Exact for polynomials of total degree ``degree``; weights sum to ``1/m!``.
    """
    q = max(1, math.ceil((degree + 1) / 2))
    axes_nodes, axes_weights = [], []
    for i in range(m):
        alpha = m - 1 - i
        s, w = roots_jacobi(q, alpha, 0)
        axes_nodes.append((1 + s) / 2)
        axes_weights.append(w / 2 ** (alpha + 1))
    grids = np.meshgrid(*axes_nodes, indexing="ij")
    wgrids = np.meshgrid(*axes_weights, indexing="ij")
    xi = np.stack([g.ravel() for g in grids], axis=1)
    w = np.prod(np.stack([g.ravel() for g in wgrids], axis=1), axis=1)
    t = np.empty_like(xi)
    rem = np.ones(len(xi))
    for i in range(m):
        t[:, i] = rem * xi[:, i]
        rem = rem * (1 - xi[:, i])
    return t, w


def composite_simplex_rule(m: int, degree: int, resolution: int) -> tuple[np.ndarray, np.ndarray]:
    """:func:`simplex_rule` applied on every cell of a Freudenthal subdivision."""
    t, w = simplex_rule(m, degree)
    lattice = barycentric_lattice(m, resolution)[:, 1:] / resolution
    cells = simplex_cells(m, resolution)
    v0 = lattice[cells[:, 0]]  # (C, m)
    edges = lattice[cells[:, 1:]] - v0[:, None, :]  # (C, m, m)
    pts = v0[:, None, :] + np.einsum("qi,cij->cqj", t, edges)
    vol = np.abs(np.linalg.det(edges)) if m > 1 else np.abs(edges[:, 0, 0])
    wts = vol[:, None] * w[None, :]
    return pts.reshape(-1, m), wts.ravel()


def integrate_over_dual(
    cfg: ProblemConfig,
    resolution: int,
    integrand: Callable[[np.ndarray], np.ndarray],
    degree: int,
) -> float:
    """Integrate ``integrand(p)`` (canonical representatives, shape (Q, m+1)) over the dual complex."""
    t, w = composite_simplex_rule(cfg.m, degree, resolution)
    total = 0.0
    for k in range(cfg.m + 1):
        free = [j for j in range(cfg.m + 1) if j != k]
        d_free = np.array([cfg.degrees[j] for j in free], dtype=float)
        p = np.zeros((len(t), cfg.m + 1))
        p[:, free] = -t / d_free
        total += float(w @ integrand(p)) / float(np.prod(d_free))
    return total


def C1_quadrature(
    cfg: ProblemConfig,
    resolution: int,
    weight: Callable[[np.ndarray], np.ndarray] | None = None,
) -> float:
    """Composite quadrature of W over each dual cell.

    W restricted to a cell is a polynomial of degree n-m, so the rule is exact
    up to rounding.  ``weight`` overrides W (e.g. ``lambda p: 1`` for the
    Lebesgue volume of the complex).
    """
    if resolution < 1:
        raise MeasureError(f"resolution must be >= 1, got {resolution}")
    if weight is None:
        return integrate_over_dual(cfg, resolution, lambda p: weight_W(p, cfg), cfg.n - cfg.m)

    def flat(p):
        return np.broadcast_to(np.asarray(weight(p), dtype=float), (len(p),))

    return integrate_over_dual(cfg, resolution, flat, max(cfg.n - cfg.m, 2))


# ------------------------------------------------------------------- measures


def infer_resolution(grid: np.ndarray) -> int:
    grid = np.asarray(grid, dtype=float)
    pos = grid[grid > 1e-12]
    N = int(round(1.0 / pos.min()))
    if not np.allclose(grid * N, np.round(grid * N), atol=1e-9):
        raise MeasureError("points do not form a barycentric lattice")
    return N


def lumped_simplex_weights(m: int, N: int) -> np.ndarray:
    """Lattice-cell volumes of :func:`barycentric_grid` points (unnormalised).

    Every Freudenthal cell gives ``1/(m+1)`` of its volume to each vertex,
    so interior points share one common weight and boundary points get the
    trapezoid-type reduction.  For m >= 3 the Freudenthal triangulation is
    not symmetric, so counts are averaged over coordinate permutations.
    """
    cells = simplex_cells(m, N)
    counts = np.bincount(cells.ravel(), minlength=math.comb(N + m, m)).astype(float)
    if m >= 3:
        lattice = barycentric_lattice(m, N)
        index = LatticeIndex(lattice)
        perms = list(itertools.permutations(range(m + 1)))
        counts = sum(counts[index.lookup(lattice[:, list(s)])] for s in perms) / len(perms)
    return counts / (m + 1)


def source_measure(grid) -> DiscreteMeasure:
    """Normalised Lebesgue measure on the simplex, discretised on a full barycentric grid."""
    grid = np.atleast_2d(np.asarray(grid, dtype=float))
    if grid.size == 0:
        raise EmptyGrid("source grid is empty")
    m = grid.shape[1] - 1
    N = infer_resolution(grid)
    full = barycentric_grid(m, N)
    if len(full) != len(grid):
        raise MeasureError(f"grid has {len(grid)} points, the N={N} lattice has {len(full)}")
    lumped = lumped_simplex_weights(m, N)
    keys = np.round(grid * N).astype(np.int64)
    idx = LatticeIndex(np.round(full * N).astype(np.int64)).lookup(keys)
    if np.any(idx < 0):
        raise MeasureError("grid contains points off the barycentric lattice")
    w = lumped[idx]
    return DiscreteMeasure(grid, w / w.sum(), "simplex")


def _box_halfspace_volume(lo: np.ndarray, hi: np.ndarray, w: np.ndarray, c: float) -> np.ndarray:
    """Volume of ``prod [lo_j, hi_j] ∩ {w . y <= c}`` for ``w > 0`` (rows independent)."""
    m = lo.shape[1]
    # canonical coordinate order so symmetric inputs give bitwise-equal output
    order = np.lexsort((hi, lo, np.broadcast_to(w, lo.shape)), axis=1) if m > 1 else None
    if order is not None:
        lo = np.take_along_axis(lo, order, axis=1)
        hi = np.take_along_axis(hi, order, axis=1)
        w = np.take_along_axis(np.broadcast_to(w, lo.shape), order, axis=1)
    else:
        w = np.broadcast_to(w, lo.shape)
    inside = np.sum(w * hi, axis=1) <= c
    out = np.prod(np.sort(hi - lo, axis=1), axis=1)
    cut = ~inside
    if np.any(cut):
        l, h, ww = lo[cut], hi[cut], w[cut]
        acc = np.zeros(len(l))
        for mask in range(1 << m):
            bits = np.array([(mask >> j) & 1 for j in range(m)], dtype=bool)
            v = np.where(bits, h, l)
            acc += (-1) ** int(bits.sum()) * np.maximum(c - np.sum(ww * v, axis=1), 0.0) ** m
        out[cut] = np.maximum(acc, 0.0) / (math.factorial(m) * np.prod(ww, axis=1))
    return out


def dual_cell_volumes(grid: DualGrid) -> np.ndarray:
    """Volume owned by each dual grid point: its lattice box clipped to every cell containing it."""
    cfg = grid.cfg
    h = grid.spacing
    vol = np.zeros(len(grid))
    for k in range(cfg.m + 1):
        free = [j for j in range(cfg.m + 1) if j != k]
        mask = grid.in_cell(k)
        y = grid.steps[mask][:, free] * h
        lo = np.maximum(y - h / 2, 0.0)
        hi = y + h / 2
        w = np.array([cfg.degrees[j] for j in free], dtype=float)
        vol[mask] += _box_halfspace_volume(lo, hi, w, 1.0)
    return vol


def target_measure(grid: DualGrid, cfg: ProblemConfig | None = None) -> DiscreteMeasure:
    """``W(p) dp`` on the dual complex, normalised to a probability measure."""
    cfg = grid.cfg if cfg is None else cfg
    if len(grid) == 0:
        raise EmptyGrid("dual grid is empty")
    w = weight_W(grid.p, cfg) * dual_cell_volumes(grid)
    total = w.sum()
    if total <= 0:
        raise ZeroMass("all target weights vanish")
    return DiscreteMeasure(grid.p, w / total, "dual", grid)
