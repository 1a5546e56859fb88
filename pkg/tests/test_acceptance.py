"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The lines are collected by ``conftest.pytest_terminal_summary`` and printed
at the end of the run; run this file alone with ``pytest tests/test_acceptance.py``.
"""

import math
import sys
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from ergostop import (
    SolverConfig,
    dichotomy_experiment,
    ergodicity_profile,
    evaluate_rule,
    gamma_and_M,
    large_deviation_estimate,
    perturb,
    simulate,
    solve_infinite_horizon,
    solve_resolvent,
    solve_zero_potential,
    stopping_rule,
    supermartingale_check,
    time_average,
    transformed_problem,
    vi_residual,
)
from ergostop.config import bundled_configs, load
from ergostop.expr import parse
from ergostop.stopping import CONVERGED, DIVERGED
from ergostop.verification import TimeSpec, bellman_inequality_check

# starts used for the Monte Carlo criteria: x = 0 lies in the stopping set of
# the tanh/arctan problem, so two continuation-region starts are added
STARTS = (0.0, 3.0, -0.5)


def record(n, title, ok, detail):
    line = f"criterion {n:2d} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def test_criterion_01_arctan_example():
    cfg = load("arctan")
    model, grid, rewards = cfg.model(), cfg.grid(), cfg.rewards()
    assert grid.dx <= 0.02 + 1e-12 and cfg.solver.tol_w == 1e-4
    t0 = time.perf_counter()
    surface = solve_infinite_horizon(model, grid, rewards, cfg.solver)
    elapsed = time.perf_counter() - t0
    err = float(np.max(np.abs(surface.w - math.pi / 2)[grid.window(-2, 2)]))
    interior = int(surface.mask[1:-1].sum())
    ok = surface.status == CONVERGED and err <= 0.02 and interior == 0 and elapsed <= 60
    record(1, "arctan example", ok,
           f"status {surface.status}, max|w - pi/2| on [-2,2] = {err:.4f} (tol 0.02), "
           f"interior stopping nodes {interior}, {elapsed:.1f}s")


def test_criterion_02_divergence_regime():
    cfg = load("diverge")
    t0 = time.perf_counter()
    surface = solve_infinite_horizon(cfg.model(), cfg.grid(), cfg.rewards(), cfg.solver)
    elapsed = time.perf_counter() - t0
    slope = surface.growth_slope
    ok = surface.status == DIVERGED and slope is not None and 0.9 <= slope <= 1.1 and elapsed <= 60
    record(2, "divergence regime", ok, f"status {surface.status}, slope of w_T(0) = {slope:.4f}, {elapsed:.1f}s")


def test_criterion_03_potential_oracles(ou, grid, measure):
    theta = ou.ou[0]
    win = grid.window(-3, 3)
    x = grid.x
    q = solve_zero_potential(ou, grid, lambda y: y, measure).values
    errs = {"q": _rel_sup(q[win], x[win] / theta)}
    for alpha in (0.5, 0.1):
        qa = solve_resolvent(ou, grid, lambda y: y, measure, alpha).values
        errs[f"q_{alpha:g}"] = _rel_sup(qa[win], x[win] / (theta + alpha))
    ok = all(e <= 0.01 for e in errs.values())
    record(3, "potential oracles", ok, ", ".join(f"{k} rel err {v:.2e}" for k, v in errs.items()) + " (tol 1e-2)")


def _rel_sup(a, b):
    return float(np.max(np.abs(a - b)) / np.max(np.abs(b)))


def test_criterion_04_transformed_problem(ou, grid, measure, tanh_arctan, tanh_surface):
    pot = solve_zero_potential(ou, grid, tanh_arctan.f, measure)
    rep = transformed_problem(ou, grid, tanh_arctan, tanh_surface, pot, SolverConfig(), window=(-2, 2))
    ok = rep.discrepancy <= 0.02 * rep.scale
    record(4, "transformed problem", ok,
           f"sup|(w - q) - w_hat| = {rep.discrepancy:.3e} vs 2% of {rep.scale:.3f} = {0.02 * rep.scale:.3e}")


@pytest.fixture(scope="module")
def tanh_ensembles(ou, tanh_arctan):
    return {x0: simulate(ou, tanh_arctan, x0, 60.0, 1e-3, 10_000, seed=11 + i) for i, x0 in enumerate(STARTS)}


def test_criterion_05_bound_chain(ou, grid, measure, tanh_arctan, tanh_surface, tanh_ensembles):
    pot = solve_zero_potential(ou, grid, tanh_arctan.f, measure)
    cert = gamma_and_M(ou, grid, tanh_arctan, None, SolverConfig(), pot)
    rule = stopping_rule(tanh_surface)
    parts, ok = [], True
    for x0, ens in tanh_ensembles.items():
        ev = evaluate_rule(ens, tanh_arctan, rule, 60.0)
        bound = cert.at(x0)
        good = ev.tau.mean <= bound + ev.tau.half_width
        ok &= good
        parts.append(f"x0={x0:g}: E[tau*] = {ev.tau.mean:.3f} +- {ev.tau.half_width:.3f} <= M = {bound:.3f}")
    record(5, "bound chain", ok, "; ".join(parts))


def test_criterion_06_eps_optimality(tanh_arctan, tanh_surface, tanh_ensembles):
    parts, ok = [], True
    for x0, ens in tanh_ensembles.items():
        w0 = tanh_surface.value_at(x0)
        best = evaluate_rule(ens, tanh_arctan, stopping_rule(tanh_surface), 60.0).payoff
        parts.append(f"x0={x0:g} tau*: {best.mean:.4f} +- {best.half_width:.4f}")
        for eps in (0.05, 0.1, 0.2):
            ev = evaluate_rule(ens, tanh_arctan, stopping_rule(tanh_surface, eps), 60.0)
            good = ev.payoff.mean >= w0 - eps - ev.payoff.half_width - 0.01
            ok &= good
            parts.append(f"x0={x0:g} eps={eps:g}: {ev.payoff.mean:.4f} vs w={w0:.4f}")
    record(6, "eps-optimality", ok, "; ".join(parts))


def test_criterion_07_complementarity():
    parts, ok = [], True
    for name, path in bundled_configs().items():
        cfg = load(path)
        model, grid, rewards = cfg.model(), cfg.grid(), cfg.rewards()
        surface = solve_infinite_horizon(model, grid, rewards, cfg.solver)
        if not surface.converged:
            parts.append(f"{name}: {surface.status}, skipped")
            continue
        tol_c = 10 * cfg.solver.tol_w
        rep = vi_residual(model, grid, rewards, surface.w, tol_c)
        cont = np.flatnonzero(~surface.mask[1:-1]) + 1
        center = float(grid.x[cont[np.argmin(np.abs(grid.x[cont] - cfg.simulation.x0))]])
        bad = vi_residual(model, grid, rewards, perturb(surface, center), tol_c)
        ok &= rep.passed and not bad.passed
        parts.append(f"{name}: {'PASS' if rep.passed else 'FAIL'} (worst {max(rep.worst_continuation, rep.worst_stopping):.1e}), "
                     f"injected {'FAIL' if not bad.passed else 'PASS'}")
    record(7, "complementarity", ok, "; ".join(parts))


def test_criterion_08_supermartingale_bellman(ou, grid, tanh_arctan, tanh_surface):
    rule = stopping_rule(tanh_surface)
    checkpoints = (0.5, 1.0, 2.0, 5.0)
    parts, ok = [], True
    for i, x0 in enumerate((3.0, -0.5)):
        ens = simulate(ou, tanh_arctan, x0, 5.0, 1e-3, 10_000, seed=31 + i)
        sup = supermartingale_check(ens, tanh_arctan, grid, tanh_surface.w, checkpoints)
        mart = supermartingale_check(ens, tanh_arctan, grid, tanh_surface.w, checkpoints, stop_rule=rule)
        pairs = [
            (TimeSpec.fixed(1.0), TimeSpec.fixed(5.0)),
            (TimeSpec.fixed(5.0), TimeSpec.fixed(1.0)),
            (TimeSpec.fixed(1.0), TimeSpec.entry(rule, 5.0)),
            (TimeSpec.entry(rule, 1.0), TimeSpec.fixed(5.0)),
            (TimeSpec.zero(), TimeSpec.entry(rule, 5.0)),
        ]
        bell = bellman_inequality_check(grid, tanh_arctan, tanh_surface.w, ens, pairs)
        ok &= sup.nonincreasing and mart.constant and bell.passed
        parts.append(f"x0={x0:g}: nonincreasing {sup.nonincreasing}, stopped constant {mart.constant}, "
                     f"Bellman {sum(p.passed for p in bell.pairs)}/{len(bell.pairs)}")
    record(8, "supermartingale and Bellman", ok, "; ".join(parts))


def test_criterion_09_ergodicity_profile(ou, grid):
    theta = ou.ou[0]
    prof = ergodicity_profile(ou, grid, (1.0, 2.0, 3.0), np.linspace(1.0, 6.0, 11))
    ok = bool(np.all(prof.slopes <= -0.9 * theta) and np.all(prof.r_squared >= 0.95))
    record(9, "ergodicity profile", ok,
           "slopes " + ", ".join(f"{s:.3f}" for s in prof.slopes)
           + f" (<= {-0.9 * theta:g}); min R^2 {prof.fit_quality:.4f}")


def test_criterion_10_lln(ou, tanh_arctan):
    ens = simulate(ou, tanh_arctan, 0.0, 1000.0, 1e-2, 100, seed=5)
    est = time_average(ens, np.tanh, [1000.0]).estimates[0]
    ok = abs(est.mean) <= 0.05
    record(10, "law of large numbers", ok, f"mean time average of tanh at t=1000: {est.mean:+.4f} (tol 0.05)")


def test_criterion_11_large_deviations(ou):
    from ergostop import RewardSpec

    rewards = RewardSpec.from_strings("0", "0", "0.5*(1 + tanh(x))")
    times = (5.0, 10.0, 20.0, 40.0)
    parts, ok = [], True
    for label, phi, target in (("tanh", np.tanh, 0.0), ("r", parse("0.5*(1 + tanh(x))"), 0.5)):
        tab = large_deviation_estimate(ou, rewards, phi, target, 0.1, 0.0, times, 10_000, seed=7)
        good = tab.ci_separated_decrease and tab.rate is not None and tab.rate > 0
        ok &= good
        parts.append(f"{label}: freq " + ", ".join(f"{f:.4f}" for f in tab.freq)
                     + f", rate {tab.rate if tab.rate is None else round(tab.rate, 4)}, separated {tab.ci_separated_decrease}")
    record(11, "large deviations", ok, "; ".join(parts))


def test_criterion_12_dichotomy():
    cfg = load("dichotomy")
    model, grid, rewards = cfg.model(), cfg.grid(), cfg.rewards()
    rep = dichotomy_experiment(model, grid, rewards, cfg.solver, x0=0.0, n_paths=10_000, T_cap=60.0, seed=3)
    undisc = load("diverge")
    div = solve_infinite_horizon(undisc.model(), undisc.grid(), undisc.rewards(), undisc.solver)
    lo, hi = rep.payoff.ci
    ok = (
        abs(rep.mu_r - 0.5) < 1e-6
        and rep.surface.converged
        and rep.decay_rate is not None
        and rep.decay_rate >= 0.2
        and rep.value_matches_mc
        and div.status == DIVERGED
        and 0.9 <= div.growth_slope <= 1.1
    )
    record(12, "dichotomy", ok,
           f"mu(r) = {rep.mu_r:.4f}, decay rate {rep.decay_rate:.3f}, w(0) = {rep.value_at_x0:.4f} in MC CI "
           f"[{lo:.4f}, {hi:.4f}]; r = 0 run {div.status} with slope {div.growth_slope:.3f}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
