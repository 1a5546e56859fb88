"""Randomised invariants of the discretisation and the solvers."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from ergostop import Grid, RewardSpec, SolverConfig, build_generator, ou_model, solve_finite_horizon, stationary_density
from ergostop.models import gaussian_tv, mu_integral
from ergostop.simulator import wilson_interval

ou_params = st.tuples(
    st.floats(min_value=0.3, max_value=3.0),   # theta
    st.floats(min_value=-1.0, max_value=1.0),  # m
    st.floats(min_value=0.5, max_value=2.0),   # sigma
)


@settings(max_examples=25, deadline=None)
@given(ou_params)
def test_generator_kills_constants_and_measure_is_invariant(params):
    theta, m, sigma = params
    model = ou_model(theta, m, sigma, x_lo=-10, x_hi=10)
    grid = Grid.with_spacing(-10, 10, 0.02)
    gen = build_generator(model, grid)
    np.testing.assert_allclose(gen.apply(np.ones(grid.n_nodes)), 0.0, atol=1e-8)
    meas = stationary_density(model, grid)
    assert meas.integrate(np.ones(grid.n_nodes)) == pytest.approx(1.0, abs=1e-9)
    # mu(A phi) = 0 for a smooth test function, up to discretisation error
    phi = np.tanh(grid.x - m)
    assert abs(mu_integral(meas, gen.apply(phi))) < 1e-3
    # the reflected law is the Gaussian truncated to the domain
    sd = sigma / np.sqrt(2 * theta)
    mean = stats.truncnorm.mean((-10 - m) / sd, (10 - m) / sd, loc=m, scale=sd)
    assert mu_integral(meas, grid.x) == pytest.approx(mean, abs=1e-4)


@settings(max_examples=20, deadline=None)
@given(
    st.floats(min_value=-0.5, max_value=0.5),
    st.floats(min_value=0.0, max_value=0.5),
)
def test_value_is_monotone_in_obstacle(shift, extra):
    model = ou_model(x_lo=-5, x_hi=5)
    grid = Grid.with_spacing(-5, 5, 0.05)
    cfg = SolverConfig(dt=0.02)
    low = solve_finite_horizon(model, grid, RewardSpec.from_strings(f"tanh(x) - 0.5 + {shift!r}", "arctan(x)"), 2.0, cfg)
    high = solve_finite_horizon(
        model, grid, RewardSpec.from_strings(f"tanh(x) - 0.5 + {shift!r}", f"arctan(x) + {extra!r}"), 2.0, cfg
    )
    assert np.all(low.w >= low.g - 1e-12)
    assert np.all(high.w >= low.w - 1e-12)
    assert np.all(high.w - low.w <= extra + 1e-9)


@settings(max_examples=10, deadline=None)
@given(st.floats(min_value=0.5, max_value=3.0))
def test_value_nondecreasing_in_horizon_without_discount(T):
    model = ou_model(x_lo=-5, x_hi=5)
    grid = Grid.with_spacing(-5, 5, 0.05)
    rewards = RewardSpec.from_strings("tanh(x)", "arctan(x)")
    short = solve_finite_horizon(model, grid, rewards, T, SolverConfig(dt=0.05))
    longer = solve_finite_horizon(model, grid, rewards, T + 0.5, SolverConfig(dt=0.05))
    assert np.all(longer.w >= short.w - 1e-10)


@settings(max_examples=60, deadline=None)
@given(
    st.floats(min_value=-3, max_value=3),
    st.floats(min_value=0.2, max_value=3),
    st.floats(min_value=-3, max_value=3),
    st.floats(min_value=0.2, max_value=3),
)
def test_gaussian_tv_is_a_symmetric_distance(m1, s1, m2, s2):
    d = gaussian_tv(m1, s1, m2, s2)
    assert 0.0 <= d <= 1.0
    assert d == pytest.approx(gaussian_tv(m2, s2, m1, s1), abs=1e-12)
    assert gaussian_tv(m1, s1, m1, s1) == pytest.approx(0.0, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(min_value=1, max_value=5000), st.data())
def test_wilson_interval_covers_point_estimate(n, data):
    k = data.draw(st.integers(min_value=0, max_value=n))
    lo, hi = wilson_interval(k, n)
    assert 0.0 <= lo <= k / n <= hi <= 1.0
