"""Independent references: the explicit m = 1 solution and brute-force comparators."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.spatial import cKDTree

from cylimit.chambers import permuted_indices
from cylimit.geometry import DualGrid, ProblemConfig, dual_grid
from cylimit.measures import DiscreteMeasure, target_measure
from cylimit.potential import ConvexPotential
from cylimit.transport import BrenierMap


class DomainError(ValueError):
    pass


class DegreeMismatch(ValueError):
    pass


def _require_m1(cfg: ProblemConfig) -> None:
    if cfg.m != 1:
        raise DomainError(f"the explicit solution needs m = 1, got m = {cfg.m}")


def _check_unit(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if np.any(~np.isfinite(x)) or np.any(x < 0) or np.any(x > 1):
        raise DomainError("x must lie in [0, 1]")
    return x


def _root(base, exponent):
    return np.power(np.maximum(base, 0.0), exponent)


@dataclass(frozen=True)
class M1ClosedForm:
    """Explicit solution for m = 1 in the variable ``x = x_0``.

    The gradient image is ``u'(x) = p_0 - p_1``.  It runs from ``-1/d_0`` at
    ``x = 0`` to ``1/d_1`` at ``x = 1`` and vanishes at the kink ``x_star``.
    """

    cfg: ProblemConfig

    def __post_init__(self):
        _require_m1(self.cfg)

    @property
    def x_star(self) -> float:
        d0, d1 = self.cfg.degrees
        return d1 / (d0 + d1)

    def uprime(self, x):
        return m1_uprime(x, self.cfg)

    def u(self, x, quad_n: int = 32):
        return m1_u(x, self.cfg, quad_n)

    def rhs(self) -> float:
        """Constant right-hand side ``1/(n d_0) + 1/(n d_1)`` of the ODE."""
        d0, d1 = self.cfg.degrees
        n = self.cfg.n
        return 1.0 / (n * d0) + 1.0 / (n * d1)

    def to_csv(self, path: str | Path, samples: int = 1001) -> None:
        xs = np.linspace(0.0, 1.0, samples)
        up = m1_uprime(xs, self.cfg)
        u = m1_u(xs, self.cfg)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["x", "u", "uprime"])
            for row in zip(xs, u, up):
                writer.writerow([f"{v:.17g}" for v in row])


def m1_uprime(x, cfg: ProblemConfig):
    """Two-branch closed form of ``u'``; scalars map to floats, arrays to arrays."""
    _require_m1(cfg)
    xa = _check_unit(x)
    d0, d1 = cfg.degrees
    n = cfg.n
    xs = d1 / (d0 + d1)
    left = (-1.0 + _root((d0 + d1) * np.minimum(xa, xs) / d1, 1.0 / n)) / d0
    right = (1.0 - _root((d0 + d1) * (1.0 - np.maximum(xa, xs)) / d0, 1.0 / n)) / d1
    out = np.where(xa <= xs, left, right)
    return float(out) if out.ndim == 0 else out


def _graded_integral(a: float, b: float, f, quad_n: int, nodes: int = 5) -> float:
    """Integral of ``f`` from ``a`` to ``b`` on panels graded cubically towards ``b``.

    The endpoints of [0, 1] are where ``u'`` is only Holder, so panels shrink
    like ``(j/quad_n)^3`` as they approach ``b``.
    """
    if a == b:
        return 0.0
    t = 1.0 - (1.0 - np.arange(quad_n + 1) / quad_n) ** 3
    edges = a + (b - a) * t
    s, w = leggauss(nodes)
    lo, hi = edges[:-1], edges[1:]
    mid, half = (lo + hi) / 2, (hi - lo) / 2
    pts = mid[:, None] + half[:, None] * s[None, :]
    return float(np.sum(half[:, None] * w[None, :] * f(pts)))


def m1_u(x, cfg: ProblemConfig, quad_n: int = 32):
    """``u(x) = integral of u'`` from ``x_star`` to ``x`` (so ``u(x_star) = 0 = min u``)."""
    _require_m1(cfg)
    xa = _check_unit(x)
    if quad_n < 1:
        raise DomainError(f"quad_n must be >= 1, got {quad_n}")
    xs = cfg.degrees[1] / sum(cfg.degrees)

    def up(t):
        return m1_uprime(np.clip(t, 0.0, 1.0), cfg)

    flat = np.atleast_1d(xa).ravel()
    vals = np.array([_graded_integral(xs, float(v), up, quad_n) for v in flat])
    if xa.ndim == 0:
        return float(vals[0])
    return vals.reshape(xa.shape)


def m1_u_antiderivative(x, cfg: ProblemConfig):
    """Closed-form antiderivative of :func:`m1_uprime`, pinned to 0 at ``x_star``."""
    _require_m1(cfg)
    xa = _check_unit(x)
    d0, d1 = cfg.degrees
    n = cfg.n
    xs = d1 / (d0 + d1)
    a = (d0 + d1) / d1
    b = (d0 + d1) / d0
    r = 1.0 + 1.0 / n

    def left(t):
        return (-t + _root(a * t, r) / (a * r)) / d0

    def right(t):
        return (t + _root(b * (1.0 - t), r) / (b * r)) / d1

    out = np.where(xa <= xs, left(np.minimum(xa, xs)) - left(xs), right(np.maximum(xa, xs)) - right(xs))
    return float(out) if out.ndim == 0 else out


def m1_ode_residual(x, cfg: ProblemConfig, h: float = 1e-5) -> np.ndarray:
    """Relative residual of the m = 1 ODE, with ``u''`` from central differences of ``u'``.

    Left of ``x_star`` the identity is ``(1 + d_0 u')^(n-1) u'' = rhs``; right
    of it the mirrored form ``(1 - d_1 u')^(n-1) u'' = rhs`` holds.
    """
    _require_m1(cfg)
    xa = np.atleast_1d(_check_unit(x))
    if np.any(xa - h < 0) or np.any(xa + h > 1):
        raise DomainError("finite-difference stencil leaves [0, 1]")
    oracle = M1ClosedForm(cfg)
    d0, d1 = cfg.degrees
    up = m1_uprime(xa, cfg)
    upp = (m1_uprime(xa + h, cfg) - m1_uprime(xa - h, cfg)) / (2 * h)
    factor = np.where(xa <= oracle.x_star, 1.0 + d0 * up, 1.0 - d1 * up)
    lhs = factor ** (cfg.n - 1) * upp
    return lhs / oracle.rhs() - 1.0


# --------------------------------------------------------------- comparators


@dataclass(frozen=True)
class Histogram:
    bins: np.ndarray
    pushed: np.ndarray
    target: np.ndarray
    tv: float


def _assign(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    _, idx = cKDTree(centers).query(points)
    return idx


def pushforward_histogram(
    bmap: BrenierMap,
    mu: DiscreteMeasure,
    dual_bins: DualGrid | int,
    cfg: ProblemConfig,
    nu: DiscreteMeasure | None = None,
) -> Histogram:
    """Bin ``T_# mu`` and ``nu`` on the Voronoi cells (in reduced coordinates) of a coarse dual grid.

    ``nu`` defaults to the target measure on a grid eight times finer than
    the bins.  Source atoms without an image are counted as lost mass.
    """
    bins = dual_grid(cfg, dual_bins) if isinstance(dual_bins, (int, np.integer)) else dual_bins
    if nu is None:
        nu = target_measure(dual_grid(cfg, 8 * bins.N), cfg)
    centers = bins.reduced
    T = np.asarray(bmap.reduced, dtype=float)
    ok = np.all(np.isfinite(T), axis=1)
    pushed = np.bincount(_assign(T[ok], centers), weights=mu.weights[ok], minlength=len(centers))
    target = np.bincount(_assign(nu.reduced, centers), weights=nu.weights, minlength=len(centers))
    lost = float(mu.weights[~ok].sum())
    tv = 0.5 * (float(np.abs(pushed - target).sum()) + lost)
    return Histogram(bins.p, pushed, target, tv)


def symmetry_check(pot: ConvexPotential, sigma, cfg: ProblemConfig | None = None) -> float:
    """``max |u(sigma . x) - u(x)|`` over the simplex grid, ``(sigma . x)_i = x_{sigma(i)}``."""
    cfg = cfg or pot.cfg
    sigma = [int(s) for s in sigma]
    if sorted(sigma) != list(range(cfg.m + 1)):
        raise DegreeMismatch(f"{sigma} is not a permutation of 0..{cfg.m}")
    if any(cfg.degrees[s] != cfg.degrees[i] for i, s in enumerate(sigma)):
        raise DegreeMismatch(f"permutation {sigma} does not preserve degrees {cfg.degrees}")
    idx = permuted_indices(pot.x, sigma)
    return float(np.max(np.abs(pot.u[idx] - pot.u)))
