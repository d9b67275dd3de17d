import numpy as np
import pytest
import scipy.sparse as sp
from scipy.optimize import linprog

from cylimit.geometry import ProblemConfig, barycentric_grid, dual_grid
from cylimit.measures import DiscreteMeasure, source_measure, target_measure
from cylimit.transport import (
    CostSpec,
    Infeasible,
    NonConvergence,
    ResourceLimit,
    brenier_map,
    cyclical_monotonicity_check,
    default_eps_schedule,
    round_to_marginals,
    solve_entropic,
    solve_exact,
)


def _line(ts, weights=None):
    """Measure on the segment, stored as simplex points (1 - t, t) so that reduced = t."""
    ts = np.asarray(ts, dtype=float)
    w = np.full(len(ts), 1.0 / len(ts)) if weights is None else np.asarray(weights, dtype=float)
    return DiscreteMeasure(np.stack([1 - ts, ts], axis=1), w / w.sum(), "simplex")


def _random_pair(rng, n1, n2, dim=2):
    x = rng.dirichlet(np.ones(dim + 1), size=n1)
    y = rng.dirichlet(np.ones(dim + 1), size=n2)
    a = rng.uniform(0.5, 1.5, n1)
    b = rng.uniform(0.5, 1.5, n2)
    return DiscreteMeasure(x, a / a.sum()), DiscreteMeasure(y, b / b.sum())


# ---------------------------------------------------------------- exact LP


def test_single_atom():
    mu = _line([0.3])
    nu = _line([0.8])
    for solver in (solve_exact, solve_entropic):
        plan = solver(mu, nu)
        assert plan.coupling.toarray() == pytest.approx(np.array([[1.0]]))
        assert plan.achieved_cost == pytest.approx(0.5 * 0.5**2, abs=1e-12)


def test_identity_two_atoms():
    mu = _line([0.1, 0.9])
    plan = solve_exact(mu, mu)
    assert np.allclose(plan.coupling.toarray(), np.diag([0.5, 0.5]))
    assert plan.achieved_cost == pytest.approx(0.0, abs=1e-15)
    assert cyclical_monotonicity_check(plan, 100) == 0.0
    bm = brenier_map(plan)
    assert np.allclose(bm.reduced[:, 0], [0.1, 0.9])


def test_exact_matches_linprog(rng):
    mu, nu = _random_pair(rng, 7, 9)
    C = CostSpec().matrix(mu, nu)
    n1, n2 = C.shape
    A_eq = np.vstack([np.kron(np.eye(n1), np.ones(n2)), np.kron(np.ones(n1), np.eye(n2))])
    res = linprog(C.ravel(), A_eq=A_eq, b_eq=np.concatenate([mu.weights, nu.weights]), method="highs")
    plan = solve_exact(mu, nu)
    assert plan.achieved_cost == pytest.approx(res.fun, abs=1e-12)
    assert abs(plan.duality_gap) <= 1e-9 * max(plan.achieved_cost, 1e-12) + 1e-15
    f, g = plan.f, plan.g
    assert np.all(f[:, None] + g[None, :] <= C + 1e-12)
    P = plan.coupling.toarray()
    on = P > 0
    assert np.allclose((f[:, None] + g[None, :])[on], C[on], atol=1e-12)


def test_exact_duals_are_centred_between_components():
    """Two atoms mapped to themselves: the support splits in two and both cross slacks come out equal."""
    mu = _line([0.0, 1.0])
    plan = solve_exact(mu, mu)
    C = CostSpec().matrix(mu, mu)
    f, g = plan.f, plan.g
    assert np.allclose(f + g, 0.0, atol=1e-15)
    assert C[0, 1] - f[0] - g[1] == pytest.approx(C[1, 0] - f[1] - g[0], abs=1e-14)
    assert C[0, 1] - f[0] - g[1] == pytest.approx(0.5, abs=1e-14)


def test_exact_duals_fill_zero_mass_atoms():
    mu = _line([0.2, 0.8])
    nu = _line([0.0, 0.5, 1.0], weights=[0.5, 0.0, 0.5])
    plan = solve_exact(mu, nu)
    C = CostSpec().matrix(mu, nu)
    # the zero-mass column is the c-transform of f: tight somewhere, feasible everywhere
    col = C[:, 1] - plan.f
    assert plan.g[1] == pytest.approx(col.min(), abs=1e-15)
    assert np.all(plan.f[:, None] + plan.g[None, :] <= C + 1e-14)


def test_exact_monotone_on_line():
    """Uniform to uniform on [0, 1]: the plan is a diagonal band and the map is within 1/N of the identity."""
    N = 50
    mu = _line(np.linspace(0, 1, N + 1))
    nu = _line(np.linspace(0, 1, 2 * N + 1))
    plan = solve_exact(mu, nu)
    P = plan.coupling.toarray()
    # monotone support: each row starts at or after the column where the previous row ends
    first = np.array([np.flatnonzero(r > 0).min() for r in P])
    last = np.array([np.flatnonzero(r > 0).max() for r in P])
    assert np.all(first[1:] >= last[:-1])
    bm = brenier_map(plan)
    assert np.max(np.abs(bm.reduced[:, 0] - mu.reduced[:, 0])) <= 1 / N


def test_marginals_and_positivity(rng):
    mu, nu = _random_pair(rng, 30, 40)
    for plan in (solve_exact(mu, nu), solve_entropic(mu, nu)):
        P = plan.coupling.toarray()
        assert np.all(P >= 0)
        assert np.allclose(plan.row_sums, mu.weights, rtol=1e-8, atol=0)
        assert np.allclose(plan.col_sums, nu.weights, rtol=1e-8, atol=0)
        assert plan.report.marginal_error <= 1e-7


def test_errors(rng):
    mu, nu = _random_pair(rng, 3, 3)
    bad = DiscreteMeasure(nu.points, nu.weights * 2)
    with pytest.raises(Infeasible):
        solve_exact(mu, bad)
    with pytest.raises(Infeasible):
        solve_entropic(mu, bad)
    with pytest.raises(ResourceLimit):
        solve_exact(mu, nu, max_entries=5)
    with pytest.raises(ResourceLimit):
        solve_entropic(mu, nu, max_entries=5)
    with pytest.raises(ValueError):
        solve_entropic(mu, nu, eps_schedule=[0.1, 0.2])
    with pytest.raises(ValueError):
        solve_entropic(mu, nu, eps_schedule=[0.1, 0.0])


def test_entropic_nonconvergence():
    mu, nu = _random_pair(np.random.default_rng(1), 40, 40)
    with pytest.raises(NonConvergence):
        solve_entropic(mu, nu, eps_schedule=[1e-3], max_iter=2, check_every=1)


# ---------------------------------------------------------------- entropic


def test_entropic_line_blur():
    N = 100
    eps = 1e-3
    mu = _line(np.linspace(0, 1, N + 1))
    plan = solve_entropic(mu, mu, eps_schedule=default_eps_schedule(stop=eps))
    bm = brenier_map(plan)
    inner = slice(10, -10)
    dev = np.abs(bm.reduced[inner, 0] - mu.reduced[inner, 0])
    assert np.max(dev) <= max(1 / N, 3 * np.sqrt(eps))


def test_entropic_cost_bounds(rng):
    mu, nu = _random_pair(rng, 50, 50)
    exact = solve_exact(mu, nu)
    ent = solve_entropic(mu, nu)
    eps = ent.report.eps_final
    assert ent.achieved_cost >= exact.achieved_cost - 1e-10
    assert ent.achieved_cost - exact.achieved_cost <= eps * np.log(50 * 50) + 1e-6
    assert ent.report.duality_gap >= -1e-10


def test_permutation_equivariance(rng):
    mu, nu = _random_pair(rng, 12, 15)
    s1 = rng.permutation(12)
    s2 = rng.permutation(15)
    mu2 = DiscreteMeasure(mu.points[s1], mu.weights[s1])
    nu2 = DiscreteMeasure(nu.points[s2], nu.weights[s2])
    a = solve_exact(mu, nu)
    b = solve_exact(mu2, nu2)
    assert a.achieved_cost == pytest.approx(b.achieved_cost, abs=1e-14)
    # random weights and positions make the LP nondegenerate, so the optimal plan is unique
    assert np.allclose(a.coupling.toarray()[np.ix_(s1, s2)], b.coupling.toarray(), atol=1e-14)


def test_round_to_marginals(rng):
    P = rng.uniform(size=(5, 6))
    a = rng.dirichlet(np.ones(5))
    b = rng.dirichlet(np.ones(6))
    R = round_to_marginals(P, a, b)
    assert np.all(R >= 0)
    assert np.allclose(R.sum(1), a, atol=1e-15)
    assert np.allclose(R.sum(0), b, atol=1e-15)


def test_entropic_zero_mass_atoms():
    cfg = ProblemConfig(3, 1, (1, 2))
    mu = source_measure(barycentric_grid(1, 20))
    nu = target_measure(dual_grid(cfg, 20), cfg)
    assert np.any(nu.weights == 0)
    plan = solve_entropic(mu, nu)
    assert np.all(np.isfinite(plan.g))
    assert plan.report.dual_violation < 0.05


# ------------------------------------------------------------- map / checks


def test_brenier_images_in_hull(m1_small, cfg_m1):
    T = m1_small.bmap.reduced[:, 0]
    assert np.all(T >= -0.5 - 1e-10) and np.all(T <= 1.0 + 1e-10)
    p = m1_small.bmap.p
    assert np.all(p <= 1e-12) and np.allclose(p.max(axis=1), 0)


def test_brenier_skips_zero_rows():
    mu = DiscreteMeasure(np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([1.0, 0.0]))
    nu = _line([0.5])
    plan = solve_exact(mu, nu)
    bm = brenier_map(plan)
    assert bm.skipped == (1,)
    assert np.isnan(bm.reduced[1, 0])


def test_cyclical_monotonicity_detects_swap():
    mu = _line([0.0, 1.0])
    plan = solve_exact(mu, mu)
    swapped = type(plan)(
        sp.csr_matrix(np.array([[0.0, 0.5], [0.5, 0.0]])), mu, mu, 1.0, plan.f, plan.g, plan.report
    )
    # c(x,p') + c(x',p) - c(x,p) - c(x',p') = 0 - 0.5 - 0.5 < 0
    assert cyclical_monotonicity_check(swapped, 200, seed=0) == pytest.approx(-1.0)
    assert cyclical_monotonicity_check(plan, 200) == 0.0


def test_exact_plan_is_cyclically_monotone(m1_exact):
    assert cyclical_monotonicity_check(m1_exact.plan, 10_000, seed=3) >= -1e-9


def test_plan_csv(tmp_path):
    mu = _line([0.1, 0.9])
    plan = solve_exact(mu, mu)
    plan.to_csv(tmp_path / "plan.csv")
    assert (tmp_path / "plan.csv").read_text().splitlines() == ["i,j,mass", "0,0,0.5", "1,1,0.5"]
    report = plan.report.to_json()
    assert '"backend": "exact"' in report
