import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from beliefpic.covariance import (Belief, feasibility_horizon, matching_target, propagate_cov, riccati_rhs,
                                  selector, solve_matching)
from beliefpic.errors import InvalidArgument, MatchingInfeasible
from beliefpic.model import (Affine, ModelSpec, QuadraticCost, Scaled, SensingCost, scalar_model, sensing_D)

from conftest import random_spd


def scaled_model(C0, B, R_a=None, lam=1.0, n=2):
    B = np.atleast_2d(B)
    return ModelSpec(A=np.zeros((n, n)), B=B, H=np.eye(n), sigma_o=np.eye(len(C0)),
                     R_a=np.eye(B.shape[1]) if R_a is None else R_a, lam=lam, sensing=Scaled(C0),
                     q=QuadraticCost.zero(n), phi=QuadraticCost.zero(n), T=1.0, dt=0.1)


def test_belief_validation():
    Belief([0.0], [[1.0]])
    with pytest.raises(InvalidArgument):
        Belief([0.0], [[0.0]])
    with pytest.raises(InvalidArgument):
        Belief([0.0, 0.0], [[1.0, 0.5], [0.0, 1.0]])
    with pytest.raises(InvalidArgument):
        Belief([0.0], np.eye(2))


def test_riccati_rhs_examples():
    assert riccati_rhs(0.0, [[5.0]], 0.0, scalar_model()) == pytest.approx(1.0)
    assert riccati_rhs(0.0, [[1.0]], 1.0, scalar_model()) == pytest.approx(0.0)
    m = ModelSpec(A=np.eye(2), B=np.eye(2), H=np.zeros((2, 2)), sigma_o=[[1.0]], R_a=np.eye(2), lam=1.0,
                  sensing=Scaled([[1.0, 0.0]]), q=QuadraticCost.zero(2), phi=QuadraticCost.zero(2), T=1.0, dt=0.1)
    np.testing.assert_allclose(riccati_rhs(0.0, np.eye(2), 0.0, m), 2 * np.eye(2))


def test_matching_target_examples():
    assert matching_target(scalar_model())[0, 0] == 1.0
    assert matching_target(scalar_model(lam=2.0))[0, 0] == 2.0
    assert matching_target(scalar_model(B=0.0))[0, 0] == 0.0


@pytest.mark.parametrize("Sigma,lam", [(1.0, 1.0), (2.0, 4.0)])
def test_scalar_matching_pair(Sigma, lam):
    sol = solve_matching(scalar_model(lam=lam).sensing, [[Sigma]], scalar_model(lam=lam))
    assert sol.status == "Solutions"
    assert [float(u[0]) for u in sol.solutions] == pytest.approx([1.0, -1.0], abs=1e-15)


def test_scaled_rank_one_is_empty():
    m = scaled_model([[1.0, 0.0]], np.eye(2))
    sol = solve_matching(m.sensing, np.eye(2), m)
    assert sol.empty
    assert sol.residual > 0.1
    with pytest.raises(MatchingInfeasible):
        selector(0.0, np.eye(2), m)


def test_scaled_proportional_is_solved():
    m = scaled_model([[1.0, 0.0]], np.array([[1.0], [0.0]]), R_a=[[1.0]])
    sol = solve_matching(m.sensing, np.eye(2), m)
    assert len(sol.solutions) == 2
    for u in sol.solutions:
        np.testing.assert_allclose(sensing_D(m.sensing, np.eye(2), u, m.R_o), matching_target(m), atol=1e-12)


def test_selector_examples():
    assert selector(0.0, [[1.0]], scalar_model())[0] == 1.0
    assert selector(0.0, [[1.0]], scalar_model(R_s=1.0))[0] == 1.0


@settings(max_examples=60, deadline=None)
@given(st.floats(0.05, 20.0), st.floats(0.1, 10.0), st.floats(0.1, 10.0), st.floats(0.1, 10.0))
def test_scalar_selector_times_sigma_is_constant(Sigma, lam, R_o, R_a):
    m = scalar_model(lam=lam, R_o=R_o, R_a=R_a)
    u = selector(0.0, [[Sigma]], m)[0]
    assert u > 0
    assert u * Sigma == pytest.approx(np.sqrt(lam * m.R_o[0, 0] / R_a), rel=1e-13)
    assert np.array_equal(selector(0.0, [[Sigma]], m), selector(0.0, [[Sigma]], m))


def test_affine_matching_residual_bound():
    rng = np.random.default_rng(3)
    n = 2
    C_list = [rng.standard_normal((2, n)) for _ in range(4)]
    m = ModelSpec(A=np.zeros((n, n)), B=np.eye(n), H=np.eye(n), sigma_o=np.eye(2), R_a=np.eye(n), lam=1.0,
                  sensing=Affine(C_list), q=QuadraticCost.zero(n), phi=QuadraticCost.zero(n),
                  rho=SensingCost(np.eye(4)), T=1.0, dt=0.1)
    Sigma = random_spd(rng, n)
    sol = solve_matching(m.sensing, Sigma, m)
    Dstar = matching_target(m)
    assert sol.solutions
    for u in sol.solutions:
        res = np.linalg.norm(sensing_D(m.sensing, Sigma, u, m.R_o) - Dstar)
        assert res <= 1e-8 * max(1.0, np.linalg.norm(Dstar))
    u1, u2 = selector(0.0, Sigma, m), selector(0.0, Sigma, m)
    assert np.array_equal(u1, u2)


def test_frozen_covariance():
    path = propagate_cov([[1.0]], scalar_model(), "selector")
    assert path.feasible
    assert np.all(path.Sigmas[:, 0, 0] == 1.0)


def test_linear_schedule():
    path = propagate_cov([[1.0]], scalar_model(lam=0.5), "selector")
    np.testing.assert_allclose(path.Sigmas[:, 0, 0], 1.0 + 0.5 * path.times, atol=1e-12)


def test_selector_feasible_until_t_star():
    m = scalar_model(lam=2.0, T=5.0)
    path = propagate_cov([[1.0]], m, "selector")
    assert not path.feasible
    assert abs(path.feasible_until - 1.0) <= 2 * m.dt
    assert np.all(np.linalg.eigvalsh(path.Sigmas[path.times < path.feasible_until - 1e-12]) > 0)


def test_selector_mode_rhs_cancels():
    m = scalar_model(lam=0.7, H=1.3)
    path = propagate_cov([[2.0]], m, "selector")
    Dstar, Q = matching_target(m), m.Q
    for t, S, u in zip(path.times[:-1], path.Sigmas[:-1], path.u_s):
        np.testing.assert_allclose(riccati_rhs(t, S, u, m), Q - Dstar, atol=1e-8)


@pytest.mark.parametrize("lam,T,u_max,Sigma0,expected", [
    (2.0, 5.0, None, 1.0, 1.0),
    (1.0, 5.0, None, 1.0, 5.0),
    (1.0, 5.0, 1.0, 2.0, 5.0),
    (2.0, 5.0, 1.0, 3.0, (3.0 - np.sqrt(2.0)) / 1.0),
])
def test_feasibility_horizon(lam, T, u_max, Sigma0, expected):
    m = scalar_model(lam=lam, T=T)
    assert feasibility_horizon([[Sigma0]], m, u_max=u_max) == pytest.approx(expected, rel=1e-14)


def test_feasibility_horizon_matches_propagation():
    # a per-interval drift sequence bypasses the closed form and forces numerical propagation
    m = scalar_model(lam=2.0, T=5.0, dt=0.01).replace(A=np.zeros((500, 1, 1)))
    closed = feasibility_horizon([[1.0]], scalar_model(lam=2.0, T=5.0))
    numeric = propagate_cov([[1.0]], m, "selector").feasible_until
    assert abs(numeric - closed) <= 2 * m.dt


def test_rk4_fourth_order():
    def endpoint(dt):
        m = scalar_model(A=-0.8, H=1.0, T=1.0, dt=dt)
        return propagate_cov([[1.0]], m, "fixed", u=[0.9]).Sigmas[-1, 0, 0]

    e1 = endpoint(0.1) - endpoint(0.0125)
    e2 = endpoint(0.05) - endpoint(0.0125)
    # error ratio for fourth order between dt and dt/2 is about 16
    assert abs(e1) / abs(e2) > 10


def test_diffusion_only_exact():
    m = scalar_model(T=1.0, dt=0.1, H=1.5)
    path = propagate_cov([[0.5]], m, "fixed", u=[0.0])
    np.testing.assert_allclose(path.Sigmas[:, 0, 0], 0.5 + 2.25 * path.times, atol=1e-13)


def test_schedule_mode_and_csv(tmp_path):
    m = scalar_model(T=0.3, dt=0.1)
    path = propagate_cov([[1.0]], m, "schedule", u=[[1.0], [0.5], [0.0]])
    assert path.u_s[:, 0].tolist() == [1.0, 0.5, 0.0]
    path.to_csv(tmp_path / "c.csv")
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0] == "t,Sigma_00,u_s_0,feasible"
    assert len(lines) == 5
    with pytest.raises(InvalidArgument):
        propagate_cov([[1.0]], m, "schedule", u=[[1.0]])
    with pytest.raises(InvalidArgument):
        propagate_cov([[1.0]], m, "bogus")
