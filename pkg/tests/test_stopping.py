import math

import numpy as np
import pytest

from ergostop import (
    DiffusionModel,
    Grid,
    RewardSpec,
    SolverConfig,
    gamma_and_M,
    ou_model,
    solve_finite_horizon,
    solve_infinite_horizon,
    solve_zero_potential,
    stopping_rule,
    tau_T_limit_check,
)
from ergostop.errors import ConfigError, ErgodicityError, ParameterError
from ergostop.expr import constant
from ergostop.models import build_generator
from ergostop.stopping import CONVERGED, NONCONVERGED, _undiscounted_policy_solve, regime_of


def test_never_stopping_reward_is_horizon(ou, grid):
    rewards = RewardSpec.from_strings("1", "0")
    s = solve_finite_horizon(ou, grid, rewards, 3.0, SolverConfig())
    np.testing.assert_allclose(s.w, 3.0, atol=1e-10)


def test_constant_discount_annuity(ou, grid):
    alpha, T, dt = 0.5, 4.0, 1e-3
    s = solve_finite_horizon(ou, grid, RewardSpec.from_strings("1", "0", "0.5"), T, SolverConfig(dt=dt))
    # implicit Euler annuity and its continuous limit
    n = round(T / dt)
    discrete = (1 - (1 + alpha * dt) ** (-n)) / alpha
    np.testing.assert_allclose(s.w, discrete, atol=1e-9)
    assert discrete == pytest.approx((1 - math.exp(-alpha * T)) / alpha, abs=1e-3)


def test_perpetual_put_closed_form():
    # log-price of geometric Brownian motion, payoff (K - e^x)^+, discount r
    r, sig, K = 0.1, 0.3, 1.0
    model = DiffusionModel(constant(r - 0.5 * sig**2), constant(sig), -3.0, 3.0, "log-gbm")
    grid = Grid.with_spacing(-3, 3, 0.005)
    rewards = RewardSpec(constant(0.0), lambda x: np.maximum(K - np.exp(x), 0.0), constant(r))
    s = solve_infinite_horizon(model, grid, rewards, SolverConfig(tol_w=1e-8, T_max=400))
    gam = 2 * r / sig**2
    s_star = K * gam / (1 + gam)
    S = np.exp(grid.x)
    exact = np.where(S <= s_star, K - S, (K - s_star) * (S / s_star) ** (-gam))
    win = grid.window(-1, 1)
    assert s.status == CONVERGED and s.regime.startswith("uniformly discounted")
    np.testing.assert_allclose(s.w[win], exact[win], atol=2e-4)
    (lo, hi), = s.free_boundary()
    assert lo - grid.dx <= math.log(s_star) <= hi + grid.dx


def test_zero_discount_non_ergodic_rejected():
    model = DiffusionModel(constant(0.1), constant(1.0), -3.0, 3.0)
    with pytest.raises(ErgodicityError):
        solve_infinite_horizon(model, Grid(-3, 3, 61), RewardSpec.from_strings("0", "0"), SolverConfig())


def test_arctan_on_wide_domain_reaches_pi_over_2():
    # truncation at x = 8 caps w by arctan(8); pushing the upper end out recovers pi/2
    model = ou_model(x_hi=60.0)
    grid = Grid.with_spacing(-8, 60, 0.0125)
    s = solve_infinite_horizon(model, grid, RewardSpec.from_strings("0", "arctan(x)"), SolverConfig(T_max=400, window=(-2, 2)))
    assert s.converged
    assert np.max(np.abs(s.w - math.pi / 2)[grid.window(-2, 2)]) <= 0.02
    assert not s.mask[1:-1].any()


def test_arctan_truncated_value_is_sup_of_obstacle(ou, grid):
    s = solve_infinite_horizon(ou, grid, RewardSpec.from_strings("0", "arctan(x)"), SolverConfig(T_max=400))
    np.testing.assert_allclose(s.w, math.atan(8.0), atol=1e-10)
    assert s.ladder_w is not None and s.ladder_w[400] < s.w[400]


def test_value_dominates_obstacle_and_history(tanh_surface):
    s = tanh_surface
    assert np.all(s.w >= s.g - 1e-12)
    assert s.history and all(len(h) == 3 for h in s.history)
    assert s.regime.startswith("vanishing discount")


def test_nonconverged_status(ou, grid):
    s = solve_infinite_horizon(ou, grid, RewardSpec.from_strings("x", "0"), SolverConfig(T_max=10))
    assert s.status == NONCONVERGED and not s.converged


def test_monotonicity_precheck():
    model = ou_model(theta=50.0)
    with pytest.raises(ConfigError):
        solve_infinite_horizon(model, Grid.with_spacing(-8, 8, 0.5), RewardSpec.from_strings("0", "0", "1"))


def test_solver_config_validation(ou, grid):
    with pytest.raises(ConfigError):
        SolverConfig(dt=-1)
    with pytest.raises(ConfigError):
        SolverConfig(window=(-9, 0)).window_for(grid)


def test_regime_table():
    assert regime_of(-1, 0.5, False).startswith("dichotomy")
    assert regime_of(-1, 0, True).startswith("vanishing")
    assert regime_of(1, 0, True).startswith("divergence")
    assert regime_of(0, 0, True).startswith("unclassified")


def test_stopping_rule_slack(tanh_surface):
    tight = stopping_rule(tanh_surface, 0.0)
    loose = stopping_rule(tanh_surface, 0.1)
    g = tanh_surface.grid
    assert np.all(tight.mask_on(g) <= loose.mask_on(g))
    with pytest.raises(ParameterError):
        stopping_rule(tanh_surface, -0.1)


def test_gamma_routes_and_bound(ou, grid, measure, tanh_arctan):
    pot = solve_zero_potential(ou, grid, tanh_arctan.f, measure)
    cert = gamma_and_M(ou, grid, tanh_arctan, None, SolverConfig(), pot)
    assert cert.d == pytest.approx(0.5 * pot.mu_f)
    assert cert.source == "dp+potential"
    # the DP value is the smallest supersolution; the potential route can only be larger
    assert np.all(cert.gamma_dp <= cert.gamma_potential + 1e-6)
    assert np.all(cert.gamma >= -1e-10) and np.all(cert.M > 0)
    np.testing.assert_allclose(cert.M, (cert.gamma + 2 * cert.g_norm + 1) / (-cert.d))
    with pytest.raises(ParameterError):
        gamma_and_M(ou, grid, tanh_arctan, 0.1)


def test_tau_T_masks_shrink(ou, grid, tanh_arctan):
    rep = tau_T_limit_check(ou, grid, tanh_arctan, SolverConfig(), (1.0, 2.0, 4.0, 8.0))
    assert rep.monotone and rep.stabilised
    with pytest.raises(ParameterError):
        tau_T_limit_check(ou, grid, tanh_arctan, SolverConfig(), (2.0, 1.0))


def test_interval_solver_matches_direct_solve(ou, grid, tanh_arctan):
    import scipy.sparse as sp
    import scipy.sparse.linalg as spla

    s = tanh_arctan.on(grid)
    gen = build_generator(ou, grid)
    stop = (np.abs(grid.x) < 0.5) | (grid.x > 3)
    w = _undiscounted_policy_solve(gen, stop, s.f, s.g)
    B = -gen.matrix()
    M = sp.diags(stop.astype(float)) + sp.diags((~stop).astype(float)) @ B
    direct = spla.spsolve(M.tocsc(), np.where(stop, s.g, s.f))
    np.testing.assert_allclose(w, direct, atol=1e-8)
