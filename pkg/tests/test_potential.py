import numpy as np
import pytest

from ergostop import (
    RewardSpec,
    simulate,
    solve_discounted_potential,
    solve_resolvent,
    solve_zero_potential,
    verify_c_assumptions,
)
from ergostop.errors import ParameterError
from ergostop.potential import DISCOUNTED, RESOLVENT, ZERO, potential_by_time_integration


def test_quadratic_closed_form(ou, grid, measure):
    # A (x^2 - 1)/2 = -(x^2 - 1) for OU(1, 0, sqrt 2), and the solution has mu-mean zero
    q = solve_zero_potential(ou, grid, lambda x: x**2, measure)
    win = grid.window(-3, 3)
    np.testing.assert_allclose(q.values[win], ((grid.x**2 - 1) / 2)[win], atol=2e-4)
    assert q.mu_f == pytest.approx(1.0, abs=1e-4)
    assert q.kind == ZERO and q.residual < 1e-8


def test_zero_potential_against_time_integration(ou, grid, measure):
    q = solve_zero_potential(ou, grid, np.tanh, measure).values
    oracle = potential_by_time_integration(ou, grid, np.tanh, measure, T_max=25.0, dt=1e-2)
    win = grid.window(-3, 3)
    np.testing.assert_allclose(q[win], oracle[win], atol=1e-3)


def test_resolvent_tends_to_zero_potential(ou, grid, measure):
    q = solve_zero_potential(ou, grid, np.tanh, measure).values
    win = grid.window(-3, 3)
    errs = [np.max(np.abs(solve_resolvent(ou, grid, np.tanh, measure, a).values - q)[win]) for a in (0.1, 0.01, 0.001)]
    assert errs[0] > errs[1] > errs[2] and errs[2] < 1e-2


def test_dispatch(ou, grid, measure):
    zero = solve_discounted_potential(ou, grid, np.tanh, 0.0, measure)
    assert zero.kind == ZERO
    const = solve_discounted_potential(ou, grid, np.tanh, 0.3, measure)
    ref = solve_resolvent(ou, grid, np.tanh, measure, 0.3)
    assert const.kind == RESOLVENT and np.array_equal(const.values, ref.values)
    var = solve_discounted_potential(ou, grid, np.tanh, lambda x: 0.5 * (1 + np.tanh(x)), measure)
    assert var.kind == DISCOUNTED and var.residual < 1e-8
    assert var.lower_bound <= 0


def test_constant_reward_gives_zero(ou, grid, measure):
    q = solve_zero_potential(ou, grid, lambda x: 0 * x + 2.5, measure)
    assert np.all(q.values == 0.0) and q.mu_f == 2.5


def test_parameter_errors(ou, grid, measure):
    with pytest.raises(ParameterError):
        solve_resolvent(ou, grid, np.tanh, measure, 0.0)
    with pytest.raises(ParameterError):
        solve_discounted_potential(ou, grid, np.tanh, -1.0, measure)


def test_assumptions_supported_case(ou, grid, measure):
    # f = x^2 - 1.5: mu(f) = -0.5 and q = (x^2 - 1)/2 has an interior minimum
    rewards = RewardSpec.from_strings("x^2 - 1.5", "0")
    q = solve_zero_potential(ou, grid, rewards.f, measure)
    ens = simulate(ou, rewards, 1.0, 2.0, 1e-2, 4000, seed=4)
    rep = verify_c_assumptions(q, ou, rewards, ens, sigma_times=(1.0, 2.0))
    assert rep.status["C3 (mu(f) < 0)"] == "PASS"
    assert rep.status["C1 (q bounded below)"].startswith("PASS")
    assert rep.status["C2 (martingale identity)"] == "PASS"
    assert abs(rep.argmin_x) < 0.05 and rep.argmin_interior
    assert len(list(rep.lines())) >= 6


def test_assumptions_boundary_minimum_is_inconclusive(ou, grid, measure):
    rewards = RewardSpec.from_strings("x", "0")
    q = solve_zero_potential(ou, grid, rewards.f, measure)
    rep = verify_c_assumptions(q, ou, rewards)
    assert rep.status["C1 (q bounded below)"].startswith("INCONCLUSIVE")
    assert rep.status["C3 (mu(f) < 0)"].startswith("FAIL")
    assert rep.status["C2 (martingale identity)"].startswith("INCONCLUSIVE")
    assert rep.L_touches_boundary
