"""Wall-chamber structure induced by the gradient map."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from cylimit.geometry import (
    LatticeIndex,
    ProblemConfig,
    dual_cell_halfspaces,
    dual_simplex_halfspaces,
    simplex_cells,
)
from cylimit.measures import infer_resolution, source_measure
from cylimit.potential import ConvexPotential, double_legendre
from cylimit.transport import BrenierMap

WALL = -1
UNRESOLVED = -2
DEFAULT_DELTA_WALL = 0.02


class EmptyChamber(ValueError):
    pass


def cell_depths(p_hat: np.ndarray, cfg: ProblemConfig) -> np.ndarray:
    """Signed distance (positive inside) of reduced points to each closed cell, shape (Q, m+1)."""
    p_hat = np.atleast_2d(p_hat)
    out = np.empty((len(p_hat), cfg.m + 1))
    for k in range(cfg.m + 1):
        A, b = dual_cell_halfspaces(cfg, k)
        out[:, k] = np.min(b[None, :] - p_hat @ A.T, axis=1)
    return out


def simplex_depth(p_hat: np.ndarray, cfg: ProblemConfig) -> np.ndarray:
    A, b = dual_simplex_halfspaces(cfg)
    return np.min(b[None, :] - np.atleast_2d(p_hat) @ A.T, axis=1)


@dataclass(frozen=True)
class ChamberMap:
    """Per-point labels: ``k >= 0`` for chamber ``k``, :data:`WALL` or :data:`UNRESOLVED`.

    ``walls[i]`` lists the cells within ``delta_wall`` of a wall point.
    ``wall_cells`` indexes grid simplices whose vertex labels differ.
    """

    x: np.ndarray
    labels: np.ndarray
    walls: dict
    wall_cells: np.ndarray
    delta_wall: float
    cfg: ProblemConfig

    def chamber(self, k: int) -> np.ndarray:
        return self.labels == k

    @property
    def unresolved_fraction(self) -> float:
        return float(np.mean(self.labels == UNRESOLVED))

    def label_names(self) -> list[str]:
        names = []
        for i, lab in enumerate(self.labels):
            if lab >= 0:
                names.append(f"chamber{lab}")
            elif lab == WALL:
                names.append("wall:" + "|".join(str(k) for k in sorted(self.walls[i])))
            else:
                names.append("unresolved")
        return names

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([f"x{i}" for i in range(self.cfg.m + 1)] + ["label"])
            for row, name in zip(self.x, self.label_names()):
                writer.writerow([f"{v:.17g}" for v in row] + [name])

    def wall_cells_to_csv(self, path: str | Path) -> None:
        N = infer_resolution(self.x)
        cells = simplex_cells(self.cfg.m, N)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["cell"] + [f"v{i}" for i in range(self.cfg.m + 1)])
            for c in self.wall_cells:
                writer.writerow([int(c)] + [int(v) for v in cells[c]])


def classify(
    grid: np.ndarray,
    bmap: BrenierMap,
    delta_wall: float = DEFAULT_DELTA_WALL,
    cfg: ProblemConfig | None = None,
) -> ChamberMap:
    """Label each grid point by the dual cell containing its gradient image."""
    if cfg is None:
        raise ValueError("cfg is required")
    grid = np.asarray(grid, dtype=float)
    T = bmap.reduced
    depths = cell_depths(T, cfg)
    outer = simplex_depth(T, cfg)
    labels = np.full(len(grid), WALL, dtype=np.int64)
    walls = {}
    finite = np.all(np.isfinite(T), axis=1)
    for i in range(len(grid)):
        if not finite[i] or outer[i] < -delta_wall:
            labels[i] = UNRESOLVED
            continue
        inside = np.flatnonzero(depths[i] >= delta_wall)
        if len(inside) == 1:
            labels[i] = inside[0]
        else:
            walls[i] = frozenset(int(k) for k in np.flatnonzero(depths[i] > -delta_wall))
    N = infer_resolution(grid)
    cells = simplex_cells(cfg.m, N)
    lab = labels[cells]
    wall_cells = np.flatnonzero(np.any(lab != lab[:, :1], axis=1))
    return ChamberMap(grid, labels, walls, wall_cells, float(delta_wall), cfg)


def wall_fraction(cmap: ChamberMap) -> float:
    """Normalised-Lebesgue mass of the wall and unresolved labels."""
    w = source_measure(cmap.x).weights
    return float(w[cmap.labels < 0].sum())


def wall_crossings_1d(cmap: ChamberMap, bmap: BrenierMap) -> list[float]:
    """For m = 1: positions (in ``x_0``) where the gradient crosses the common vertex of the two cells.

    The crossing is located by linear interpolation of the map between the
    neighbouring grid points where its reduced coordinate changes sign.
    """
    if cmap.cfg.m != 1:
        raise ValueError("wall positions are only extracted for m = 1")
    x0 = cmap.x[:, 0]
    order = np.argsort(x0)
    x0 = x0[order]
    t = bmap.reduced[order, 0]
    out = []
    for i in range(len(t) - 1):
        a, b = t[i], t[i + 1]
        if a == 0.0 and (i == 0 or t[i - 1] != 0.0):
            out.append(float(x0[i]))
        elif a * b < 0:
            out.append(float(x0[i] + (x0[i + 1] - x0[i]) * a / (a - b)))
    return out


def wall_location_1d(cmap: ChamberMap, bmap: BrenierMap) -> float:
    roots = wall_crossings_1d(cmap, bmap)
    if not roots:
        raise EmptyChamber("no wall crossing found")
    return roots[int(np.argmin([abs(r - np.median(roots)) for r in roots]))]


def interior_points(cmap: ChamberMap, k: int, margin: float) -> np.ndarray:
    """Indices of chamber-``k`` points at distance >= ``margin`` from every other label and from the boundary."""
    mask = cmap.labels == k
    if not np.any(mask):
        raise EmptyChamber(f"chamber {k} is empty")
    x = cmap.x
    ok = mask & np.all(x >= margin - 1e-12, axis=1)
    others = x[~mask]
    idx = np.flatnonzero(ok)
    if len(others) and len(idx):
        xr = x[idx, 1:]
        orr = others[:, 1:]
        dist = np.sqrt(np.maximum(
            (xr**2).sum(1)[:, None] + (orr**2).sum(1)[None, :] - 2 * xr @ orr.T, 0.0
        )).min(axis=1)
        idx = idx[dist >= margin - 1e-12]
    return idx


def independence_check(
    pot: ConvexPotential,
    cmap: ChamberMap,
    k: int,
    s,
    margin: float = 0.1,
) -> float:
    """``max |u**(x + s e_k) - u**(x)|`` over chamber-``k`` interior points and the given offsets."""
    idx = interior_points(cmap, k, margin)
    if len(idx) == 0:
        raise EmptyChamber(f"chamber {k} has no points at depth {margin}")
    x = cmap.x[idx]
    base = double_legendre(pot, x)
    worst = 0.0
    for off in np.atleast_1d(s):
        if off == 0:
            continue
        shifted = x.copy()
        shifted[:, k] += off
        worst = max(worst, float(np.max(np.abs(double_legendre(pot, shifted) - base))))
    return worst


def permuted_indices(x: np.ndarray, sigma) -> np.ndarray:
    """Index map ``i -> j`` with ``x[j] = sigma . x[i]``, where ``(sigma . x)_i = x_{sigma(i)}``."""
    N = infer_resolution(x)
    keys = np.round(x * N).astype(np.int64)
    idx = LatticeIndex(keys).lookup(keys[:, list(sigma)])
    if np.any(idx < 0):
        raise ValueError("grid is not closed under the permutation")
    return idx


def label_agreement(cmap: ChamberMap, sigma) -> float:
    """Fraction of chamber-labelled points whose label moves to ``sigma^{-1}(k)`` at ``sigma . x``."""
    idx = permuted_indices(cmap.x, sigma)
    inv = np.argsort(sigma)
    lab = cmap.labels
    classified = lab >= 0
    if not np.any(classified):
        return 1.0
    expected = np.where(lab >= 0, inv[np.maximum(lab, 0)], lab)
    return float(np.mean(lab[idx][classified] == expected[classified]))
