"""Independent checks of solved value surfaces.

* discrete complementarity min(-A w + r w - f, w - g) = 0 node by node, the
  numerical surrogate for the viscosity-solution property of the monotone
  scheme (not a test-function certification);
* Monte Carlo Bellman inequalities for concrete pairs of stopping times;
* the positive-mean-discount dichotomy experiment.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import NotApplicableError, ParameterError
from .models import (
    DiffusionModel,
    Grid,
    RewardSpec,
    build_generator,
    mu_integral,
    stationary_density,
)
from .simulator import (
    Estimate,
    PathEnsemble,
    StoppingRule,
    Z99_ONE_SIDED,
    _stop_scan,
    evaluate_rule,
    large_deviation_estimate,
    simulate,
)
from .stopping import SolverConfig, ValueSurface, solve_infinite_horizon, stopping_rule

CONTINUATION = "continuation"
STOPPING = "stopping"
BAND = "boundary-band"


@dataclass(frozen=True)
class ComplementarityReport:
    grid: Grid
    rho: np.ndarray      # -A w + r w - f
    delta: np.ndarray    # w - g
    classes: np.ndarray  # per-node class label
    tol_c: float
    tol_s: float
    worst_continuation: float  # max |rho| on continuation nodes outside the band
    worst_stopping: float      # most negative rho on stopping nodes outside the band (0 if none)
    worst_band: float          # max |min(rho, delta)| inside the band
    passed: bool

    @property
    def violations(self) -> np.ndarray:
        bad = np.zeros(self.grid.n_nodes, dtype=bool)
        cont = self.classes == CONTINUATION
        stop = self.classes == STOPPING
        bad |= cont & (np.abs(self.rho) > self.tol_c)
        bad |= stop & (self.rho < -self.tol_c)
        bad |= self.delta < -self.tol_s
        return bad

    def rows(self):
        for x, r, d, c in zip(self.grid.x, self.rho, self.delta, self.classes):
            yield float(x), float(r), float(d), str(c)


def vi_residual(
    model: DiffusionModel,
    grid: Grid,
    rewards: RewardSpec,
    w,
    tol_c: float,
    tol_s: Optional[float] = None,
) -> ComplementarityReport:
    """Classify nodes and check both sign conditions outside a one-node band.

    A node is stopping when w - g <= tol_s, continuation otherwise.  The band
    is the continuation node adjacent to each edge of the stopping set.
    """
    w = grid.check(w.w if isinstance(w, ValueSurface) else w, "w")
    tol_s = tol_c if tol_s is None else tol_s
    s = rewards.on(grid)
    gen = build_generator(model, grid)
    rho = -gen.apply(w) + s.r * w - s.f
    delta = w - s.g
    stop = delta <= tol_s
    classes = np.where(stop, STOPPING, CONTINUATION).astype(object)
    edge = np.zeros_like(stop)
    edge[:-1] |= ~stop[:-1] & stop[1:]
    edge[1:] |= ~stop[1:] & stop[:-1]
    classes[edge] = BAND

    cont = classes == CONTINUATION
    stp = classes == STOPPING
    worst_c = float(np.max(np.abs(rho[cont]))) if cont.any() else 0.0
    worst_s = float(max(0.0, -np.min(rho[stp]))) if stp.any() else 0.0
    band = classes == BAND
    worst_b = float(np.max(np.abs(np.minimum(rho, delta)[band]))) if band.any() else 0.0
    outside = ~band
    comp = np.minimum(rho, delta)[outside]
    passed = (
        worst_c <= tol_c
        and worst_s <= tol_c
        and bool(np.all(delta >= -tol_s))
        and bool(np.all(np.abs(comp) <= max(tol_c, tol_s)))
    )
    return ComplementarityReport(grid, rho, delta, classes.astype(str), tol_c, tol_s, worst_c, worst_s, worst_b, passed)


def perturb(surface: ValueSurface, center: float, width: float = 0.5, amplitude: float = 0.1) -> np.ndarray:
    """w plus a tent of height ``amplitude`` at ``center``, applied on continuation nodes only."""
    x = surface.grid.x
    bump = np.maximum(0.0, 1.0 - np.abs(x - center) / width)
    bump[surface.mask] = 0.0
    return surface.w + amplitude * bump


@dataclass(frozen=True)
class TimeSpec:
    """A stopping time for the Bellman check: a fixed time, a rule entry (optionally capped) or zero."""

    kind: str
    t: float = 0.0
    rule: Optional[StoppingRule] = None

    @classmethod
    def fixed(cls, t):
        return cls("fixed", float(t))

    @classmethod
    def zero(cls):
        return cls("fixed", 0.0)

    @classmethod
    def entry(cls, rule, cap=None):
        return cls("rule", math.inf if cap is None else float(cap), rule)

    def label(self):
        if self.kind == "fixed":
            return f"{self.t:g}"
        cap = "" if math.isinf(self.t) else f" ^ {self.t:g}"
        return f"{self.rule.description or 'rule'}{cap}"


def _resolve(ens: PathEnsemble, rewards: RewardSpec, when: TimeSpec):
    """Per-path step, finiteness, state, alpha and running integral at the time."""
    if when.kind == "fixed":
        rule, cap = StoppingRule.never(), when.t
    else:
        rule, cap = when.rule, min(when.t, ens.T)
    integral = np.zeros(ens.n)

    def accumulate(blk, active):
        integral[:] += (np.where(active, np.exp(-blk.alpha), 0.0) * rewards.f(blk.x) * ens.dt).sum(axis=1)

    scan = _stop_scan(ens, rule, cap, accumulate)
    finite = np.ones(ens.n, dtype=bool) if (when.kind == "fixed" or not math.isinf(when.t)) else scan.entered
    return scan.stop_step, finite, scan.x_stop, scan.alpha_stop, integral


@dataclass(frozen=True)
class BellmanPair:
    sigma: str
    tau: str
    left: Estimate
    right: Estimate
    gap: Estimate   # paired right - left
    passed: bool


@dataclass(frozen=True)
class BellmanReport:
    pairs: tuple

    @property
    def passed(self) -> bool:
        return all(p.passed for p in self.pairs)


def bellman_inequality_check(
    grid: Grid,
    rewards: RewardSpec,
    w,
    ens: PathEnsemble,
    pairs: Sequence[tuple],
) -> BellmanReport:
    """Check E[left] <= E[right] for each (sigma, tau) pair.

    left  = int_0^sigma e^-alpha f + e^-alpha_sigma g(X_sigma)
    right = int_0^(sigma ^ tau) e^-alpha f + 1{sigma < tau} e^-alpha_sigma g(X_sigma)
            + 1{sigma >= tau} e^-alpha_tau w(X_tau)
    sigma must be bounded (fixed, or a rule capped at a finite time).  The
    pair passes unless right - left is negative at one-sided 99%.
    """
    w = grid.check(w.w if isinstance(w, ValueSurface) else w, "w")
    out = []
    for sigma, tau in pairs:
        if sigma.kind == "rule" and math.isinf(sigma.t):
            raise ParameterError("sigma must be a bounded stopping time")
        s_step, _, s_x, s_a, s_int = _resolve(ens, rewards, sigma)
        t_step, t_fin, t_x, t_a, t_int = _resolve(ens, rewards, tau)
        left = s_int + np.exp(-s_a) * rewards.g(s_x)
        sigma_first = ~t_fin | (s_step < t_step)
        right = np.where(
            sigma_first,
            s_int + np.exp(-s_a) * rewards.g(s_x),
            t_int + np.exp(-t_a) * grid.interp(w, t_x),
        )
        gap = Estimate.of(right - left)
        ok = gap.mean + Z99_ONE_SIDED * gap.stderr >= 0.0
        out.append(BellmanPair(sigma.label(), tau.label(), Estimate.of(left), Estimate.of(right), gap, bool(ok)))
    return BellmanReport(tuple(out))


@dataclass(frozen=True)
class DichotomyReport:
    mu_r: float
    eps: float
    lam: float
    surface: ValueSurface
    decay_rate: Optional[float]
    value_at_x0: float
    payoff: Estimate            # common rule, discount e^-alpha
    payoff_modified: Estimate   # common rule, discount e^-(alpha v lam t)
    difference: Estimate        # paired payoff - payoff_modified
    bound: float                # |f| (n + C/rho e^(-rho n)) + |g|
    bound_constants: dict
    deviation: object           # DeviationTable for r against mu(r)
    sensitivity: dict           # eps -> mean payoff difference

    @property
    def value_matches_mc(self) -> bool:
        lo, hi = self.payoff.ci
        return lo <= self.value_at_x0 <= hi

    @property
    def bound_holds(self) -> bool:
        return abs(self.difference.mean) - self.difference.half_width <= self.bound


def dichotomy_experiment(
    model: DiffusionModel,
    grid: Grid,
    rewards: RewardSpec,
    config: SolverConfig = SolverConfig(),
    *,
    x0: float = 0.0,
    eps: Optional[float] = None,
    n_paths: int = 10_000,
    T_cap: float = 60.0,
    sim_dt: float = 1e-2,
    ld_times: Sequence[float] = (5.0, 10.0, 20.0, 40.0),
    ld_paths: int = 10_000,
    seed: int = 0,
) -> DichotomyReport:
    """Horizon ladder, modified-discount comparison and large deviations of r.

    ``eps`` defaults to mu(r)/2; the payoff difference is also reported at
    mu(r)/4 and 3 mu(r)/4.
    """
    s = rewards.on(grid)
    measure = stationary_density(model, grid)
    mu_r = mu_integral(measure, s.r)
    if not mu_r > 0:
        raise NotApplicableError(
            f"mu(r) = {mu_r:.3g}: not the positive-mean-discount regime; use the vanishing-discount path"
        )
    eps = 0.5 * mu_r if eps is None else float(eps)
    if not 0 < eps < mu_r:
        raise ParameterError("eps must lie in (0, mu(r))")
    lam = mu_r - eps

    surface = solve_infinite_horizon(model, grid, rewards, config)
    rule = stopping_rule(surface, 0.0)
    ens = simulate(model, rewards, x0, T_cap, sim_dt, n_paths, seed)
    plain = evaluate_rule(ens, rewards, rule, T_cap)
    sens = {}
    modified = None
    for e in sorted({0.25 * mu_r, 0.5 * mu_r, 0.75 * mu_r, eps}):
        mod = evaluate_rule(ens, rewards, rule, T_cap, discount_floor=mu_r - e)
        sens[e] = float(np.mean(plain.per_path_payoff - mod.per_path_payoff))
        if e == eps:
            modified = mod
    diff = Estimate.of(plain.per_path_payoff - modified.per_path_payoff)

    table = large_deviation_estimate(
        model, rewards, rewards.r, mu_r, eps, x0, ld_times, ld_paths, seed + 1, dt=sim_dt,
    )
    consts = _deviation_constants(table)
    n_int = math.floor(consts["S"]) + 1
    bound = s.f_norm * (n_int + consts["C"] / consts["rho"] * math.exp(-consts["rho"] * n_int)) + s.g_norm
    consts["n"] = n_int
    return DichotomyReport(
        mu_r, eps, lam, surface, surface.decay_rate, surface.value_at(x0),
        plain.payoff, modified.payoff, diff, bound, consts, table, sens,
    )


def _deviation_constants(table) -> dict:
    """Pessimistic C, rho, S with P{A_t} <= C e^(-rho t) for t >= S, from Wilson upper limits."""
    t = table.times
    hi = np.maximum(table.ci_hi, 1e-300)
    slope = np.polyfit(t, np.log(hi), 1)[0]
    rho = max(-slope, 1e-6)
    C = float(np.max(hi * np.exp(rho * t)))
    return {"C": C, "rho": float(rho), "S": float(t[0])}
