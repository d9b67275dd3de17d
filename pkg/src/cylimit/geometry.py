"""Simplex, dual simplicial complex and the gradient weight.

Points of the skeleton simplex live in R^{m+1} with barycentric coordinates
``x = (x_0, ..., x_m)``.  Gradients live in the quotient
``R^{m+1} / R(1, ..., 1)``; we represent a class by its canonical
representative (maximum entry equal to zero), which is exactly a point of
the complex ``Delta^v = U_k Delta^v_k``.

Reduced coordinates used for transport costs:

* ``x_hat = (x_1, ..., x_m)`` (drop ``x_0``),
* ``p_hat = (p_1 - p_0, ..., p_m - p_0)``,

so that ``<x, p> = p_0 + <x_hat, p_hat>`` for every ``x`` on the simplex.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

EXACT_TOL = 1e-12
FLOAT_TOL = 1e-9


class GeometryError(ValueError):
    pass


class ConfigError(GeometryError):
    """Invalid degeneration data; ``field`` names the offending entry."""

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


class OutOfCone(GeometryError):
    pass


class IndexOutOfRange(GeometryError, IndexError):
    pass


@dataclass(frozen=True)
class ProblemConfig:
    """Degeneration data: CY dimension ``n``, skeleton dimension ``m``, degrees."""

    n: int
    m: int
    degrees: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "degrees", tuple(self.degrees))
        for name in ("n", "m"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, np.integer)):
                raise ConfigError(f"{name} must be an integer, got {v!r}", name)
        if self.m < 1:
            raise ConfigError(f"m must be >= 1, got {self.m}", "m")
        if self.m > self.n - 1:
            raise ConfigError(
                f"need 1 <= m <= n-1 (intermediate complex structure limit), got n={self.n}, m={self.m}",
                "m",
            )
        if len(self.degrees) != self.m + 1:
            raise ConfigError(
                f"expected m+1={self.m + 1} degrees, got {len(self.degrees)}", "degrees"
            )
        for d in self.degrees:
            if isinstance(d, bool) or not isinstance(d, (int, np.integer)) or d < 1:
                raise ConfigError(f"degrees must be positive integers, got {d!r}", "degrees")

    @property
    def d(self) -> np.ndarray:
        return np.asarray(self.degrees, dtype=float)

    @property
    def d_max(self) -> int:
        return max(self.degrees)

    def to_dict(self) -> dict:
        return {"n": int(self.n), "m": int(self.m), "degrees": [int(d) for d in self.degrees]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, data: dict) -> "ProblemConfig":
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        degrees = data.get("degrees", data.get("d"))
        for key, val in (("n", data.get("n")), ("m", data.get("m")), ("degrees", degrees)):
            if val is None:
                raise ConfigError(f"missing field {key!r}", key)
        if not isinstance(degrees, (list, tuple)):
            raise ConfigError("degrees must be a list of integers", "degrees")
        return cls(n=data["n"], m=data["m"], degrees=tuple(degrees))

    @classmethod
    def from_json(cls, text: str | Path) -> "ProblemConfig":
        if isinstance(text, Path):
            text = text.read_text()
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class SimplexPoint:
    x: tuple[float, ...]

    def __post_init__(self):
        x = tuple(float(v) for v in self.x)
        object.__setattr__(self, "x", x)
        if abs(sum(x) - 1.0) > EXACT_TOL * max(1, len(x)) or min(x) < -EXACT_TOL:
            raise GeometryError(f"{x} is not a point of the simplex")

    @property
    def reduced(self) -> np.ndarray:
        return np.asarray(self.x[1:])


@dataclass(frozen=True)
class DualPoint:
    """Canonical representative of a point of the dual complex."""

    p: tuple[float, ...]
    cell: int

    @property
    def reduced(self) -> np.ndarray:
        return reduce_p(np.asarray(self.p))

    @property
    def p0(self) -> float:
        return self.p[0]


def reduce_x(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return x[..., 1:]


def reduce_p(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    return p[..., 1:] - p[..., :1]


def lift_x(x_hat: np.ndarray) -> np.ndarray:
    x_hat = np.asarray(x_hat, dtype=float)
    x0 = 1.0 - x_hat.sum(axis=-1, keepdims=True)
    return np.concatenate([x0, x_hat], axis=-1)


def lift_p(p_hat: np.ndarray) -> np.ndarray:
    """Canonical representative of the class with reduced coordinates ``p_hat``."""
    p_hat = np.asarray(p_hat, dtype=float)
    zero = np.zeros(p_hat.shape[:-1] + (1,))
    full = np.concatenate([zero, p_hat], axis=-1)
    return full - full.max(axis=-1, keepdims=True)


def canonicalize(q, cfg: ProblemConfig, tol: float = FLOAT_TOL) -> DualPoint:
    q = np.asarray(q, dtype=float)
    if q.shape != (cfg.m + 1,):
        raise GeometryError(f"expected a vector of length {cfg.m + 1}, got shape {q.shape}")
    k = int(np.argmax(q))
    p = q - q[k]
    s = float(cfg.d @ p)
    if s < -1.0 - tol:
        raise OutOfCone(f"sum d_i p_i = {s} < -1 for {tuple(p)}")
    return DualPoint(tuple(float(v) for v in p), k)


def weight_W(p, cfg: ProblemConfig):
    """``(1 + sum d_i p_i)^(n-m)`` evaluated at canonical representatives.

    Accepts a :class:`DualPoint` or an array whose last axis has length m+1.
    """
    if isinstance(p, DualPoint):
        p = np.asarray(p.p)
    p = np.asarray(p, dtype=float)
    # sorted summation keeps values bitwise invariant under degree-preserving permutations
    base = np.maximum(1.0 + np.sort(p * cfg.d, axis=-1).sum(axis=-1), 0.0)
    out = base ** (cfg.n - cfg.m)
    return float(out) if out.ndim == 0 else out


def weight_W_reduced(p_hat, cfg: ProblemConfig):
    return weight_W(lift_p(p_hat), cfg)


def dual_vertex(i: int, cfg: ProblemConfig) -> DualPoint:
    if not 0 <= i <= cfg.m:
        raise IndexOutOfRange(f"vertex index {i} outside 0..{cfg.m}")
    p = [0.0] * (cfg.m + 1)
    p[i] = -1.0 / cfg.degrees[i]
    return DualPoint(tuple(p), 1 if i == 0 else 0)


# ---------------------------------------------------------------- simplex grid


def _compositions(total: int, parts: int):
    """Compositions of ``total`` into ``parts`` nonnegative parts, reverse lexicographic."""
    if parts == 1:
        yield (total,)
        return
    for first in range(total, -1, -1):
        for rest in _compositions(total - first, parts - 1):
            yield (first,) + rest


def barycentric_lattice(m: int, N: int) -> np.ndarray:
    """Integer points ``a`` with ``sum a = N``, shape ``(C(N+m, m), m+1)``."""
    if N < 1:
        raise GeometryError(f"resolution must be >= 1, got {N}")
    return np.array(list(_compositions(N, m + 1)), dtype=np.int64)


def barycentric_grid(m: int, N: int) -> np.ndarray:
    """Points ``x`` of the simplex with ``N x`` integral, in reverse lexicographic order."""
    return barycentric_lattice(m, N) / N


class LatticeIndex:
    """Row lookup for integer lattice vectors."""

    def __init__(self, keys: np.ndarray):
        keys = np.asarray(keys, dtype=np.int64)
        self._base = int(keys.max()) + 2 if keys.size else 2
        codes = self._encode(keys)
        self._order = np.argsort(codes, kind="stable")
        self._sorted = codes[self._order]
        if np.any(np.diff(self._sorted) == 0):
            raise GeometryError("duplicate lattice points")

    def _encode(self, keys):
        keys = np.asarray(keys, dtype=np.int64)
        code = np.zeros(keys.shape[:-1], dtype=np.int64)
        for j in range(keys.shape[-1]):
            code = code * self._base + keys[..., j]
        return code

    def lookup(self, keys: np.ndarray) -> np.ndarray:
        """Indices of ``keys`` (-1 where absent)."""
        keys = np.asarray(keys, dtype=np.int64)
        valid = np.all((keys >= 0) & (keys < self._base - 1), axis=-1)
        codes = self._encode(np.where(valid[..., None], keys, 0))
        pos = np.searchsorted(self._sorted, codes)
        pos = np.clip(pos, 0, len(self._sorted) - 1)
        hit = valid & (self._sorted[pos] == codes)
        return np.where(hit, self._order[pos], -1)


def simplex_cells(m: int, N: int) -> np.ndarray:
    """Freudenthal triangulation of the lattice simplex.

    Returns an integer array ``(N**m, m+1)`` of vertex indices into
    :func:`barycentric_grid` ``(m, N)``.  Each small simplex has reduced volume
    ``1 / (m! N^m)``.
    """
    lattice = barycentric_lattice(m, N)
    index = LatticeIndex(lattice)
    # Cumulative coordinates s_j = a_j + ... + a_m map the lattice simplex
    # unimodularly onto {N >= s_1 >= ... >= s_m >= 0}, a union of Kuhn simplices.
    bases = np.array(list(itertools.product(range(N), repeat=m)), dtype=np.int64).reshape(-1, m)
    cells = []
    for perm in itertools.permutations(range(m)):
        verts = [bases]
        cur = bases.copy()
        for j in perm:
            cur = cur.copy()
            cur[:, j] += 1
            verts.append(cur)
        verts = np.stack(verts, axis=1)  # (B, m+1, m)
        ok = np.all(verts[..., 0] <= N, axis=1) & np.all(verts[..., -1] >= 0, axis=1)
        if m > 1:
            ok &= np.all(np.diff(verts, axis=2) <= 0, axis=(1, 2))
        verts = verts[ok]
        a = np.empty(verts.shape[:2] + (m + 1,), dtype=np.int64)
        a[..., 0] = N - verts[..., 0]
        a[..., 1:m] = verts[..., :-1] - verts[..., 1:]
        a[..., m] = verts[..., -1]
        cells.append(index.lookup(a))
    cells = np.concatenate(cells, axis=0)
    cells = cells[np.lexsort(cells.T[::-1])]
    assert len(cells) == N**m and np.all(cells >= 0)
    return cells


# ------------------------------------------------------------------- dual grid


def _bounded_vectors(weights: list[int], budget: int) -> np.ndarray:
    """Nonnegative integer vectors ``i`` with ``sum w_j i_j <= budget``."""
    if not weights:
        return np.zeros((1, 0), dtype=np.int64)
    out = []
    w0 = weights[0]
    for i0 in range(budget // w0 + 1):
        rest = _bounded_vectors(weights[1:], budget - w0 * i0)
        out.append(np.hstack([np.full((len(rest), 1), i0, dtype=np.int64), rest]))
    return np.vstack(out)


@dataclass(frozen=True)
class DualGrid:
    """Lattice samples of the dual complex, one cell at a time, deduplicated.

    ``steps[q]`` is an integer vector with ``p = -steps * spacing``; ``cells``
    holds the smallest index ``k`` with ``p_k = 0``.
    """

    cfg: ProblemConfig
    N: int
    steps: np.ndarray
    cells: np.ndarray
    spacing: float = field(repr=False)

    def __len__(self):
        return len(self.steps)

    @cached_property
    def p(self) -> np.ndarray:
        return -self.steps * self.spacing

    @cached_property
    def reduced(self) -> np.ndarray:
        return reduce_p(self.p)

    @property
    def p0(self) -> np.ndarray:
        return self.p[:, 0]

    def points(self) -> list[DualPoint]:
        return [DualPoint(tuple(row), int(c)) for row, c in zip(self.p, self.cells)]

    def in_cell(self, k: int) -> np.ndarray:
        """Mask of points lying in the closed cell ``k`` (``p_k = 0``)."""
        return self.steps[:, k] == 0


def dual_lattice(cfg: ProblemConfig, denominator: int) -> tuple[np.ndarray, np.ndarray]:
    """Points of the dual complex in ``(1/denominator) Z^{m+1}``.

    Returns ``(steps, cells)`` with ``p = -steps / denominator``, enumerated cell
    by cell and deduplicated on shared faces (first occurrence kept).
    """
    m = cfg.m
    blocks = []
    for k in range(m + 1):
        free = [j for j in range(m + 1) if j != k]
        vec = _bounded_vectors([cfg.degrees[j] for j in free], denominator)
        full = np.zeros((len(vec), m + 1), dtype=np.int64)
        full[:, free] = vec
        blocks.append(full)
    steps = np.vstack(blocks)
    _, first = np.unique(steps, axis=0, return_index=True)
    steps = steps[np.sort(first)]
    cells = np.argmax(steps == 0, axis=1)
    return steps, cells


def dual_grid(cfg: ProblemConfig, N: int) -> DualGrid:
    """Dual complex sampled at spacing ``1/(N d_max)`` in every free coordinate."""
    if N < 1:
        raise GeometryError(f"resolution must be >= 1, got {N}")
    denominator = N * cfg.d_max
    steps, cells = dual_lattice(cfg, denominator)
    return DualGrid(cfg, N, steps, cells, 1.0 / denominator)


def dual_cell_halfspaces(cfg: ProblemConfig, k: int) -> tuple[np.ndarray, np.ndarray]:
    """H-representation ``A p_hat <= b`` of the image cell in reduced coordinates."""
    m = cfg.m
    d = cfg.d
    # full = (0, p_hat); the representative with p_k = 0 is full - full_k.
    E = np.vstack([np.zeros((1, m)), np.eye(m)])  # full = E @ p_hat
    rows, rhs = [], []
    for j in range(m + 1):
        if j != k:
            rows.append(E[j] - E[k])  # p_j - p_k <= 0
            rhs.append(0.0)
    rows.append(-(d @ E - d.sum() * E[k]))  # sum d_j (p_j - p_k) >= -1
    rhs.append(1.0)
    A = np.array(rows)
    norms = np.linalg.norm(A, axis=1)
    return A / norms[:, None], np.array(rhs) / norms


def dual_simplex_halfspaces(cfg: ProblemConfig) -> tuple[np.ndarray, np.ndarray]:
    """H-representation of the whole image simplex (convex hull of the vertices)."""
    verts = reduce_p(np.array([dual_vertex(i, cfg).p for i in range(cfg.m + 1)]))
    centroid = verts.mean(axis=0)
    rows, rhs = [], []
    for i in range(cfg.m + 1):
        face = np.delete(verts, i, axis=0)
        if cfg.m == 1:
            normal = np.array([1.0])
        else:
            diffs = face[1:] - face[0]
            _, _, vt = np.linalg.svd(diffs)
            normal = vt[-1]
        off = normal @ face[0]
        if normal @ centroid > off:
            normal, off = -normal, -off
        rows.append(normal)
        rhs.append(off)
    A = np.array(rows)
    b = np.array(rhs)
    norms = np.linalg.norm(A, axis=1)
    return A / norms[:, None], b / norms


def dual_volume(cfg: ProblemConfig) -> float:
    """Lebesgue volume of the dual complex (sum over cells)."""
    total = 0.0
    for k in range(cfg.m + 1):
        total += 1.0 / math.prod(d for j, d in enumerate(cfg.degrees) if j != k)
    return total / math.factorial(cfg.m)
