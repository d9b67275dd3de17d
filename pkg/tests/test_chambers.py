import itertools

import numpy as np
import pytest

from cylimit.chambers import (
    DEFAULT_DELTA_WALL,
    UNRESOLVED,
    WALL,
    ChamberMap,
    EmptyChamber,
    cell_depths,
    classify,
    independence_check,
    interior_points,
    label_agreement,
    wall_fraction,
    wall_location_1d,
)
from cylimit.geometry import ProblemConfig, barycentric_grid
from cylimit.potential import double_legendre
from cylimit.transport import BrenierMap, solve_exact

from conftest import Solved

X_STAR = 2 / 3


def _at(grid, x0):
    return int(np.argmin(np.abs(grid[:, 0] - x0)))


@pytest.fixture(scope="module")
def cmap_m1(m1_exact, cfg_m1):
    return classify(m1_exact.grid, m1_exact.bmap, DEFAULT_DELTA_WALL, cfg_m1)


# ------------------------------------------------------------------- classify


def test_cell_depths_signs(cfg_m1):
    # p_hat = 0 is the shared vertex of the two cells; cell 0 is [-1/2, 0] and cell 1 is [0, 1]
    d = cell_depths(np.array([[0.0], [-0.25], [0.5]]), cfg_m1)
    assert np.allclose(d[0], 0.0)
    assert d[1, 0] > 0 > d[1, 1]
    assert d[2, 1] > 0 > d[2, 0]


def test_classify_examples(cmap_m1, m1_exact):
    grid = m1_exact.grid
    assert cmap_m1.labels[_at(grid, 1 / 3)] == 1
    assert cmap_m1.labels[_at(grid, 5 / 6)] == 0
    assert cmap_m1.labels[_at(grid, X_STAR)] == WALL
    assert cmap_m1.walls[_at(grid, X_STAR)] == frozenset({0, 1})


def test_wall_within_one_grid_cell(cmap_m1, m1_exact):
    assert abs(wall_location_1d(cmap_m1, m1_exact.bmap) - X_STAR) <= 1 / 400


def test_wall_position_converges(cfg_m1):
    for N in (50, 100, 200):
        inst = Solved(cfg_m1, N, solve_exact)
        cmap = classify(inst.grid, inst.bmap, DEFAULT_DELTA_WALL, cfg_m1)
        assert abs(wall_location_1d(cmap, inst.bmap) - X_STAR) <= 1 / N


def test_labels_cover_grid_and_wall_cells(cmap_m1):
    labs = cmap_m1.labels
    assert set(np.unique(labs)) <= {UNRESOLVED, WALL, 0, 1}
    assert cmap_m1.unresolved_fraction == 0.0
    # the wall band has two edges, each producing one cell with differing corner labels
    assert len(cmap_m1.wall_cells) == 2


def test_unresolved_and_nan_images(cfg_m1):
    grid = barycentric_grid(1, 4)
    T = np.array([[-0.3], [5.0], [np.nan], [0.0], [0.7]])
    bmap = BrenierMap(grid, T, np.zeros((5, 2)), np.full(5, 0.2), ())
    cmap = classify(grid, bmap, 0.02, cfg_m1)
    assert list(cmap.labels) == [0, UNRESOLVED, UNRESOLVED, WALL, 1]
    assert cmap.label_names() == ["chamber0", "unresolved", "unresolved", "wall:0|1", "chamber1"]


def test_classify_requires_cfg(m1_small):
    with pytest.raises(ValueError):
        classify(m1_small.grid, m1_small.bmap, 0.02)


# -------------------------------------------------------------- wall fraction


def test_wall_fraction_bound(cmap_m1):
    assert wall_fraction(cmap_m1) <= 0.05


def test_wall_fraction_refinement_halves(cfg_m1, m1_exact, cmap_m1):
    coarse = Solved(cfg_m1, 200, solve_exact)
    wf_coarse = wall_fraction(classify(coarse.grid, coarse.bmap, DEFAULT_DELTA_WALL, cfg_m1))
    ratio = wf_coarse / wall_fraction(cmap_m1)
    assert 1.3 <= ratio <= 3


def test_wall_fraction_is_the_tolerance_band(cmap_m1, cfg_m1):
    """At fixed tolerance the band is |x - x*| < delta / u''(x*), and u''(x*) = C1 = 1/2 here."""
    band = 2 * DEFAULT_DELTA_WALL / 0.5
    assert wall_fraction(cmap_m1) == pytest.approx(band, abs=2 / 400)


def test_wall_fraction_shrinks_with_tolerance(cfg_m1):
    """With the tolerance tied to the grid spacing the wall mass halves under refinement."""
    fracs = []
    for N in (100, 200):
        inst = Solved(cfg_m1, N, solve_exact)
        fracs.append(wall_fraction(classify(inst.grid, inst.bmap, 2.0 / N, cfg_m1)))
    assert 1.3 <= fracs[0] / fracs[1] <= 3


def test_all_chamber_map_has_zero_wall_fraction(cfg_m1):
    grid = barycentric_grid(1, 10)
    cmap = ChamberMap(grid, np.zeros(len(grid), dtype=np.int64), {}, np.array([], dtype=np.int64), 0.02, cfg_m1)
    assert wall_fraction(cmap) == 0.0


# ----------------------------------------------------------------- stability


def test_labels_stable_under_tolerance_halving(cmap_m1, m1_exact, cfg_m1):
    half = classify(m1_exact.grid, m1_exact.bmap, DEFAULT_DELTA_WALL / 2, cfg_m1)
    a, b = cmap_m1.labels, half.labels
    chambers = a >= 0
    assert np.array_equal(a[chambers], b[chambers])
    changed = np.flatnonzero(a != b)
    assert len(changed) > 0
    # every change happens inside the coarser wall layer
    assert np.all(a[changed] == WALL)


def test_m1_chambers_are_intervals(cmap_m1, m1_exact):
    order = np.argsort(m1_exact.grid[:, 0])
    labs = cmap_m1.labels[order]
    for k in (0, 1):
        where = np.flatnonzero(labs == k)
        assert len(where) > 0
        assert np.all(np.diff(where) == 1)
    # chamber 1 sits left of the wall, chamber 0 right of it
    assert np.flatnonzero(labs == 1).max() < np.flatnonzero(labs == 0).min()


def test_m2_labels_permute(m2_entropic, cfg_m2):
    cmap = classify(m2_entropic.grid, m2_entropic.bmap, DEFAULT_DELTA_WALL, cfg_m2)
    for k in range(3):
        assert cmap.chamber(k).sum() > 0
    for sigma in itertools.permutations(range(3)):
        assert label_agreement(cmap, sigma) >= 0.95
    assert label_agreement(cmap, (0, 1, 2)) == 1.0


# --------------------------------------------------------------- independence


def test_independence_in_chamber_interior(cmap_m1, m1_exact):
    slack = 0.05 * m1_exact.dual.spacing
    dev = independence_check(m1_exact.pot, cmap_m1, 1, [0.05, -0.05], margin=0.1)
    assert dev <= 5e-3 + slack


def test_independence_zero_offset(cmap_m1, m1_exact):
    assert independence_check(m1_exact.pot, cmap_m1, 1, 0.0, margin=0.1) == 0.0


def test_other_chamber_depends_on_coordinate(cmap_m1, m1_exact):
    """In chamber 0 the active slopes have p_1 <= -delta_wall, so moving along e_1 changes u**."""
    s = 0.05
    idx = interior_points(cmap_m1, 0, 0.1)
    x = m1_exact.grid[idx]
    shifted = x.copy()
    shifted[:, 1] += s
    dev = np.max(np.abs(double_legendre(m1_exact.pot, shifted) - double_legendre(m1_exact.pot, x)))
    assert dev >= DEFAULT_DELTA_WALL * s > 0


def test_independence_empty_chamber(cfg_m1):
    grid = barycentric_grid(1, 10)
    cmap = ChamberMap(grid, np.zeros(len(grid), dtype=np.int64), {}, np.array([], dtype=np.int64), 0.02, cfg_m1)
    with pytest.raises(EmptyChamber):
        independence_check(None, cmap, 1, 0.05)


# ------------------------------------------------------------------------ CSV


def test_chamber_csv(tmp_path, cfg_m1):
    grid = barycentric_grid(1, 4)
    T = np.array([[-0.3], [-0.2], [0.0], [0.3], [0.7]])
    bmap = BrenierMap(grid, T, np.zeros((5, 2)), np.full(5, 0.2), ())
    cmap = classify(grid, bmap, 0.02, cfg_m1)
    cmap.to_csv(tmp_path / "chambers.csv")
    lines = (tmp_path / "chambers.csv").read_text().splitlines()
    assert lines[0] == "x0,x1,label"
    assert lines[1] == "1,0,chamber0"
    assert lines[3] == "0.5,0.5,wall:0|1"
    cmap.wall_cells_to_csv(tmp_path / "walls.csv")
    walls = (tmp_path / "walls.csv").read_text().splitlines()
    assert walls[0] == "cell,v0,v1"
    assert len(walls) == 1 + len(cmap.wall_cells) == 3
