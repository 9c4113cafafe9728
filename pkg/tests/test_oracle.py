import numpy as np
import pytest

from beliefpic.errors import InfeasibleHorizon, InvalidArgument, PositivityViolation
from beliefpic.model import scalar_model
from beliefpic.oracle import cole_hopf_check, hjb_residual, lqg_solve, pde_bounds, solve_scalar_pde

QUERY = (-2.0, 2.0)


def pde(model, dmu, dt, scheme="crank_nicolson", Sigma0=1.0):
    lo, hi = pde_bounds(model, *QUERY)
    J = int(round((hi - lo) / dmu)) + 1
    return solve_scalar_pde(model, [[Sigma0]], lo, hi, J, int(round(model.T / dt)), scheme=scheme)


def interior(grid):
    return (grid.mu >= QUERY[0] - 1e-12) & (grid.mu <= QUERY[1] + 1e-12)


def pde_lqg_error(model, grid, lqg):
    mask = interior(grid)
    return float(np.max(np.abs(grid.value[0, mask] - lqg.value(0.0, grid.mu[mask]))))


@pytest.mark.parametrize("scheme", ["crank_nicolson", "explicit"])
def test_zero_cost_psi_is_one(scheme):
    grid = pde(scalar_model(), 0.1, 0.001, scheme)
    np.testing.assert_allclose(grid.psi, 1.0, atol=1e-12)


def test_constant_terminal_cost():
    m = scalar_model(lam=0.5, phi=(0.0, 0.0, 2.0))
    grid = pde(m, 0.1, 0.01)
    np.testing.assert_allclose(grid.psi, np.exp(-4.0), rtol=1e-12)


def test_terminal_slice(quad_model):
    grid = pde(quad_model, 0.05, 0.01)
    Sigma_T = grid.Sigma_t[-1]
    np.testing.assert_allclose(grid.psi[-1], np.exp(-(grid.mu ** 2 + Sigma_T)), rtol=1e-14)
    assert np.all(grid.psi > 0)


def test_pde_matches_lqg(quad_model):
    grid = pde(quad_model, 0.02, 0.001)
    lqg = lqg_solve(quad_model, [[1.0]], substeps=10)
    assert pde_lqg_error(quad_model, grid, lqg) <= max(1e-3, 5 * 0.02 ** 2)


def test_schemes_agree(quad_model):
    dmu = 0.05
    cn = pde(quad_model, dmu, 0.001)
    ex = pde(quad_model, dmu, 0.001, "explicit")
    assert np.max(np.abs(cn.psi - ex.psi)) <= 5 * dmu ** 2


def test_explicit_cfl_enforced(quad_model):
    with pytest.raises(InvalidArgument):
        pde(quad_model, 0.01, 0.01, "explicit")


def test_grid_refinement_order():
    # nonzero Sigma cost and linear term keep the solution away from any symmetric cancellation
    m = scalar_model(lam=0.8, q=(1.0, 0.3, 0.0), phi=(3.0, -0.5, 0.0))
    lqg = lqg_solve(m, [[1.0]], substeps=20)
    coarse = pde_lqg_error(m, pde(m, 0.2, 0.02), lqg)
    fine = pde_lqg_error(m, pde(m, 0.1, 0.01), lqg)
    print(f"PDE vs LQG error {coarse:.3e} -> {fine:.3e}, factor {coarse / fine:.2f}")
    assert coarse / fine >= 3


def test_pde_rejects_infeasible_horizon():
    with pytest.raises(InfeasibleHorizon):
        pde(scalar_model(lam=2.0, T=1.0), 0.1, 0.01)


def test_pde_csv(tmp_path, quad_model):
    m = quad_model.replace(T=0.1)
    grid = solve_scalar_pde(m, [[1.0]], -1.0, 1.0, 5, 2)
    grid.to_csv(tmp_path / "p.csv")
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines[0] == "t,mu,psi,value"
    assert len(lines) == 1 + 3 * 5


def test_lqg_constant_terminal_cost():
    m = scalar_model(phi=(0.0, 0.0, 1.7), q=(0.0, 0.0, 0.4), T=0.5, dt=0.01)
    sol = lqg_solve(m, [[1.0]])
    np.testing.assert_allclose(sol.c, 1.7 + 0.4 * (0.5 - sol.times), atol=1e-12)
    assert not np.any(sol.P)
    assert not np.any(sol.b)


def test_lqg_scalar_riccati():
    m = scalar_model(phi=(1.0, 0.0, 0.0), lam=0.7, T=1.0, dt=0.01)
    sol = lqg_solve(m, [[1.0]])
    np.testing.assert_allclose(sol.P[:, 0, 0], 1.0 / (1.0 + (1.0 - sol.times)), atol=1e-10)


def test_lqg_symmetric_psd_multivariate():
    from beliefpic.model import Affine, ModelSpec, QuadraticCost, SensingCost

    rng = np.random.default_rng(0)
    n = 2
    S = rng.standard_normal((n, n))
    m = ModelSpec(A=rng.standard_normal((n, n)) * 0.3, B=np.eye(n), H=np.eye(n), sigma_o=np.eye(2), R_a=np.eye(n),
                  lam=1.0, sensing=Affine([rng.standard_normal((2, n)) for _ in range(4)]),
                  q=QuadraticCost(S @ S.T, np.zeros(n)), phi=QuadraticCost(np.eye(n), np.ones(n)),
                  rho=SensingCost(0.1 * np.eye(4)), T=0.2, dt=0.02)
    sol = lqg_solve(m, np.eye(n) * 2.0)
    for P in sol.P:
        assert np.linalg.norm(P - P.T) < 1e-12
        assert np.min(np.linalg.eigvalsh(P)) >= -1e-12


def test_lqg_feedback_and_psi(quad_model):
    sol = lqg_solve(quad_model, [[1.0]], substeps=4)
    k = sol.index(0.5)
    assert sol.feedback(0.5, [1.0])[0] == pytest.approx(-(sol.P[k, 0, 0] + sol.b[k, 0]))
    assert sol.psi(0.5, np.array([0.3]))[0] == pytest.approx(np.exp(-sol.value(0.5, np.array([0.3]))[0]))
    with pytest.raises(InvalidArgument):
        sol.index(0.123456)


def test_hjb_residual_zero_value():
    m = scalar_model()
    times = np.linspace(0, 1, 11)
    mu = np.linspace(-1, 1, 9)
    assert not np.any(hjb_residual(np.zeros((11, 9)), times, mu, m, [[1.0]]))


def test_hjb_residual_lqg_is_first_order_in_time(quad_model):
    mu = np.linspace(-2, 2, 81)

    def worst(dt):
        m = quad_model.replace(dt=dt)
        sol = lqg_solve(m, [[1.0]], substeps=4)
        V = np.array([sol.value(t, mu) for t in sol.times])
        return np.max(np.abs(hjb_residual(V, sol.times, mu, m, [[1.0]])))

    r1, r2 = worst(0.02), worst(0.01)
    # dmu^2 = 0.0025 contributes only through third and higher mu-derivatives, which vanish for quadratic V
    assert r1 / r2 == pytest.approx(2.0, rel=0.15)


def test_hjb_residual_pde_refinement(quad_model):
    def worst(dmu, dt):
        g = pde(quad_model, dmu, dt)
        mask = interior(g)
        keep = np.flatnonzero(mask)
        sl = slice(keep[0], keep[-1] + 1)
        return np.max(np.abs(hjb_residual(g.value[:, sl], g.times, g.mu[sl], quad_model, [[1.0]])))

    r1, r2 = worst(0.1, 0.02), worst(0.05, 0.01)
    assert r1 / r2 >= 1.8


def test_hjb_residual_coarse_grid_rejected():
    with pytest.raises(InvalidArgument):
        hjb_residual(np.zeros((3, 3)), np.linspace(0, 1, 3), np.linspace(0, 1, 3), scalar_model(), [[1.0]])


def test_cole_hopf_trivial():
    assert cole_hopf_check(np.ones((4, 5)), np.zeros((4, 5)), lam=1.0) == 0.0
    lam, c = 0.5, 1.3
    assert cole_hopf_check(np.full((3, 3), np.exp(-c / lam)), np.full((3, 3), c), lam=lam) == pytest.approx(0.0, abs=1e-15)


def test_cole_hopf_pde_vs_lqg(quad_model):
    dmu = 0.02
    grid = pde(quad_model, dmu, 0.001)
    lqg = lqg_solve(quad_model, [[1.0]], substeps=10)
    mask = interior(grid)
    V = np.array([lqg.value(t, grid.mu[mask]) for t in lqg.times])
    rows = [grid.index(t) for t in lqg.times]
    assert cole_hopf_check(grid.psi[rows][:, mask], V, lam=quad_model.lam) <= max(1e-3, 5 * dmu ** 2)


def test_cole_hopf_errors():
    with pytest.raises(InvalidArgument):
        cole_hopf_check(np.ones(3), np.zeros(3))
    with pytest.raises(InvalidArgument):
        cole_hopf_check(np.ones(3), np.zeros(4), lam=1.0)
    with pytest.raises(PositivityViolation):
        cole_hopf_check(np.zeros(3), np.zeros(3), lam=1.0)
