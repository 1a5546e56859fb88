"""Finite- and infinite-horizon optimal stopping on the grid.

Backward induction uses one implicit Euler step followed by projection on
the obstacle,

    (I + dt (r - A)) v = w_prev + dt f,     w = max(v, g),

which is monotone whenever the generator stencil is (an M-matrix), so
``w_T`` is nondecreasing in ``T`` node by node.  The infinite-horizon value
is reached by growing the horizon until successive values agree on a
compact window.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy import linalg, stats

from .errors import ConfigError, ErgodicityError, NotApplicableError, ParameterError, SolverError
from .models import (
    DiffusionModel,
    Grid,
    RewardSpec,
    SampledRewards,
    build_generator,
    mu_integral,
    stationary_density,
)
from .potential import ZERO, PotentialFunction
from .simulator import StoppingRule

logger = logging.getLogger(__name__)

CONVERGED = "converged"
DIVERGED = "diverged"          # nonconvergence where theory predicts w = infinity
NONCONVERGED = "nonconverged"  # nonconvergence without that excuse


@dataclass(frozen=True)
class SolverConfig:
    dt: float = 1e-2
    dT: float = 1.0
    tol_w: float = 1e-4
    T_max: float = 200.0
    window: Optional[tuple] = None  # default: the domain minus its outer 20% on each side
    x_ref: float = 0.0
    polish: bool = True   # finish a converged ladder with policy iteration on the discrete VI
    max_polish: int = 5000

    def __post_init__(self):
        if min(self.dt, self.dT, self.tol_w, self.T_max) <= 0:
            raise ConfigError("solver dt, dT, tol_w and T_max must all be positive")

    def window_for(self, grid: Grid) -> tuple:
        if self.window is None:
            span = grid.x_hi - grid.x_lo
            return grid.x_lo + 0.2 * span, grid.x_hi - 0.2 * span
        a, b = self.window
        if not grid.x_lo < a < b < grid.x_hi:
            raise ConfigError(f"window [{a}, {b}] must lie strictly inside [{grid.x_lo}, {grid.x_hi}]")
        return float(a), float(b)


@dataclass(frozen=True)
class ValueSurface:
    grid: Grid
    w: np.ndarray
    g: np.ndarray
    T_final: float
    status: str = CONVERGED
    history: tuple = ()            # (T, sup-window |w_T - w_(T - dT)|, w_T(x_ref))
    slabs: dict = field(default_factory=dict, compare=False)  # horizon -> w_T
    regime: str = ""
    decay_rate: Optional[float] = None   # fitted rate of the Cauchy differences
    growth_slope: Optional[float] = None  # fitted slope of w_T(x_ref) against T
    ladder_w: Optional[np.ndarray] = field(default=None, compare=False)  # last slice before polishing
    polish_iterations: int = 0

    @property
    def converged(self) -> bool:
        return self.status == CONVERGED

    @property
    def mask(self) -> np.ndarray:
        return self.g >= self.w

    def free_boundary(self):
        """Pairs of bracketing nodes at each edge of the stopping mask."""
        m = self.mask
        edges = np.flatnonzero(m[1:] != m[:-1])
        x = self.grid.x
        return [(float(x[i]), float(x[i + 1])) for i in edges]

    def value_at(self, x0: float) -> float:
        return float(self.grid.interp(self.w, x0))


class _Stepper:
    """Pre-factorised implicit step with obstacle projection."""

    def __init__(self, gen, sampled: SampledRewards, dt: float):
        n = gen.grid.n_nodes
        M = sp.identity(n, format="csc") + dt * (sp.diags(sampled.r) - gen.matrix())
        self.lu = spla.splu(M.tocsc())
        self.dtf = dt * sampled.f
        self.g = sampled.g

    def __call__(self, w):
        return np.maximum(self.lu.solve(w + self.dtf), self.g)


def _prepare(model, grid, sampled, config):
    gen = build_generator(model, grid)
    if not gen.monotone:
        raise ConfigError(
            f"generator stencil is not monotone at dx = {grid.dx:.4g}; refine the grid "
            "(need 0.5 sigma^2 / dx >= |b| / 2 at every interior node)"
        )
    return gen


def _steps(T, dt):
    n = int(math.ceil(T / dt - 1e-9))
    return n, (T / n if n else dt)


def solve_finite_horizon(
    model: DiffusionModel,
    grid: Grid,
    rewards,
    T: float,
    config: SolverConfig = SolverConfig(),
    store: Sequence[float] = (),
) -> ValueSurface:
    """w_T at t = 0 by backward induction from w(., T) = g.

    ``store`` lists intermediate horizons whose slices are kept in ``slabs``.
    """
    if T < 0:
        raise ParameterError("horizon must be nonnegative")
    sampled = rewards.on(grid) if isinstance(rewards, RewardSpec) else rewards
    gen = _prepare(model, grid, sampled, config)
    w = sampled.g.copy()
    if T == 0:
        return ValueSurface(grid, w, sampled.g, 0.0, slabs={0.0: w.copy()})
    n, h = _steps(T, config.dt)
    step = _Stepper(gen, sampled, h)
    want = {int(round(s / h)): s for s in store}
    slabs = {0.0: w.copy()} if 0 in want else {}
    for k in range(1, n + 1):
        w = step(w)
        if k in want:
            slabs[want[k]] = w.copy()
    return ValueSurface(grid, w, sampled.g, T, slabs=slabs)


def regime_of(mu_f: float, mu_r: float, undiscounted: bool, tol: float = 1e-10) -> str:
    """Classify by the stationary means; values within ``tol`` of zero count as zero."""
    if mu_r > tol:
        return "dichotomy (mu(r) > 0)"
    if mu_f < -tol:
        return "vanishing discount (mu(f) < 0)"
    if mu_f > tol and undiscounted:
        return "divergence expected (mu(f) > 0, r = 0)"
    return "unclassified (mu(f) >= 0, mu(r) = 0)"


def solve_infinite_horizon(
    model: DiffusionModel,
    grid: Grid,
    rewards,
    config: SolverConfig = SolverConfig(),
    store: Sequence[float] = (),
) -> ValueSurface:
    """Grow the horizon by ``dT`` until the window Cauchy difference drops below ``tol_w``.

    Nonconvergence is returned, not raised: status ``diverged`` when the
    regime predicts an infinite value, ``nonconverged`` otherwise.
    """
    sampled = rewards.on(grid) if isinstance(rewards, RewardSpec) else rewards
    gen = _prepare(model, grid, sampled, config)
    try:
        measure = stationary_density(model, grid)
    except ErgodicityError:
        # a uniformly positive discount needs no invariant law
        if not np.min(sampled.r) > 0:
            raise
        regime = "uniformly discounted (no invariant law on this domain)"
    else:
        mu_f = mu_integral(measure, sampled.f)
        mu_r = mu_integral(measure, sampled.r)
        regime = regime_of(mu_f, mu_r, sampled.undiscounted, 1e-10 * max(1.0, sampled.f_norm, sampled.r_norm))
    a, b = config.window_for(grid)
    win = grid.window(a, b)
    ref = grid.nearest(config.x_ref)

    n_per, h = _steps(config.dT, config.dt)
    step = _Stepper(gen, sampled, h)
    w = sampled.g.copy()
    T = 0.0
    history = []
    want = sorted(store)
    slabs = {}
    converged = False
    while T < config.T_max - 1e-9:
        prev = w
        for _ in range(n_per):
            w = step(w)
        T += config.dT
        diff = float(np.max(np.abs(w - prev)[win]))
        history.append((T, diff, float(w[ref])))
        for s in want:
            if abs(s - T) < 1e-9:
                slabs[s] = w.copy()
        if diff < config.tol_w:
            converged = True
            break

    if converged:
        status = CONVERGED
    elif regime.startswith("divergence"):
        status = DIVERGED
    else:
        status = NONCONVERGED
    decay, growth = _fit_history(history)
    if not converged:
        logger.info("horizon ladder stopped at T_max = %g without meeting tol_w (%s)", config.T_max, status)
    ladder_w, iters = None, 0
    if converged and config.polish:
        polished, iters = _policy_iteration(gen, sampled, w, config.max_polish)
        if polished is not None:
            ladder_w, w = w, polished
    return ValueSurface(
        grid, w, sampled.g, T, status, tuple(history), slabs, regime, decay, growth,
        ladder_w, iters,
    )


def _policy_iteration(gen, sampled, w0, max_iter):
    """Howard iteration for min((r - A) w - f, w - g) = 0 started from ``w0``.

    Returns (None, k) if a policy system turns singular (e.g. r = 0 with an
    empty stopping set) or the policy keeps changing after ``max_iter`` sweeps.
    When rounding makes the policy cycle (ill-conditioned continuation solves
    far in the tails), the cycle member with the smallest complementarity
    residual is returned.
    """
    B = (sp.diags(sampled.r) - gen.matrix()).tocsr()
    n = len(w0)
    eye = sp.identity(n, format="csr")
    undiscounted = not np.any(sampled.r > 0)
    w = w0.copy()
    stop = None
    seen = {}
    iterates = []
    for k in range(1, max_iter + 1):
        new = (w - sampled.g) <= (B @ w - sampled.f)
        if stop is not None and np.array_equal(new, stop):
            return np.maximum(w, sampled.g), k - 1
        key = np.packbits(new).tobytes()
        if key in seen:
            cycle = iterates[seen[key]:]
            resid = [np.max(np.abs(np.minimum(B @ v - sampled.f, v - sampled.g))) for v in cycle]
            best = cycle[int(np.argmin(resid))]
            logger.warning("policy iteration cycles with period %d; residual floor %.3g", len(cycle), min(resid))
            return np.maximum(best, sampled.g), k - 1
        seen[key] = len(iterates)
        iterates.append(w)
        stop = new
        if not stop.any() and not np.any(sampled.r > 0):
            return None, k
        if undiscounted:
            w = _undiscounted_policy_solve(gen, stop, sampled.f, sampled.g)
        else:
            M = (sp.diags(stop.astype(float)) @ eye + sp.diags((~stop).astype(float)) @ B).tocsc()
            rhs = np.where(stop, sampled.g, sampled.f)
            with np.errstate(all="ignore"):
                w = spla.spsolve(M, rhs)
        if not np.all(np.isfinite(w)):
            return None, k
    logger.warning("policy iteration did not settle in %d sweeps; keeping the ladder value", max_iter)
    return None, max_iter


def _undiscounted_policy_solve(gen, stop, f, g):
    """Solve -A w = f off ``stop`` and w = g on it, for r = 0.

    A continuation run that touches a reflecting end is solved through the
    increments d_i = w_(i+1) - w_i, whose recursion has positive weights; a
    direct solve there loses all accuracy because the escape probability
    through the far tail makes the block nearly singular.  Runs between two
    stopping nodes are ordinary Dirichlet problems.
    """
    lo, up = gen.lower, gen.upper
    n = len(stop)
    w = np.where(stop, g, 0.0).astype(float)
    cont = ~stop
    edges = np.flatnonzero(np.diff(np.concatenate([[0], cont.astype(np.int8), [0]])))
    for a, b in zip(edges[::2], edges[1::2] - 1):
        if a == 0 and b == n - 1:
            raise SolverError("no stopping node: the undiscounted policy system is singular")
        if a == 0:
            d = np.empty(b + 1)   # d[i] = w[i+1] - w[i]
            prev = 0.0
            for i in range(b + 1):
                prev = (lo[i] * prev - f[i]) / up[i]
                d[i] = prev
            w[: b + 1] = w[b + 1] - np.cumsum(d[::-1])[::-1]
        elif b == n - 1:
            e = np.empty(n - a)   # e[i - a] = w[i-1] - w[i]
            prev = 0.0
            for i in range(n - 1, a - 1, -1):
                prev = (up[i] * prev - f[i]) / lo[i]
                e[i - a] = prev
            w[a:] = w[a - 1] - np.cumsum(e)
        else:
            m = b - a + 1
            ab = np.zeros((3, m))
            ab[0, 1:] = -up[a:b]
            ab[1] = -gen.diag[a : b + 1]
            ab[2, :-1] = -lo[a + 1 : b + 1]
            rhs = f[a : b + 1].astype(float).copy()
            rhs[0] += lo[a] * w[a - 1]
            rhs[-1] += up[b] * w[b + 1]
            w[a : b + 1] = linalg.solve_banded((1, 1), ab, rhs)
    return w


def _fit_history(history):
    """Exponential decay rate of Cauchy differences and slope of w_T(x_ref), over the second half."""
    if len(history) < 4:
        return None, None
    h = np.asarray(history)
    tail = h[len(h) // 2:]
    decay = None
    pos = tail[:, 1] > 0
    if pos.sum() >= 3:
        decay = float(-stats.linregress(tail[pos, 0], np.log(tail[pos, 1])).slope)
    growth = float(stats.linregress(tail[:, 0], tail[:, 2]).slope)
    return decay, growth


def stopping_rule(surface: ValueSurface, eps: float = 0.0) -> StoppingRule:
    """First entry into {g >= w - eps}; eps = 0 gives the optimal rule."""
    if eps < 0:
        raise ParameterError("slack must be nonnegative")
    mask = surface.g >= surface.w - eps
    tag = "tau*" if eps == 0 else f"tau_eps (eps = {eps:g})"
    return StoppingRule.from_mask(surface.grid, mask, eps, tag)


@dataclass(frozen=True)
class BoundCertificate:
    """gamma(x) and the expected-stopping-time bound M(x) = (gamma + 2|g| + 1) / (-d)."""

    grid: Grid
    d: float
    gamma: np.ndarray
    M: np.ndarray
    source: str
    gamma_dp: Optional[np.ndarray] = None
    gamma_potential: Optional[np.ndarray] = None
    g_norm: float = 0.0

    def at(self, x0: float) -> float:
        return float(self.grid.interp(self.M, x0))


def gamma_and_M(
    model: DiffusionModel,
    grid: Grid,
    rewards: RewardSpec,
    d: Optional[float] = None,
    config: SolverConfig = SolverConfig(),
    potential: Optional[PotentialFunction] = None,
) -> BoundCertificate:
    """Both routes to gamma; M uses their pointwise minimum.

    DP route: gamma is the value of stopping with running reward f - d and
    terminal reward 0 (same discount).  Potential route (needs ``potential``
    and d in (mu(f), 0)): gamma = q - A.
    """
    sampled = rewards.on(grid)
    measure = stationary_density(model, grid)
    mu_f = mu_integral(measure, sampled.f)
    if d is None:
        if mu_f >= 0:
            raise ParameterError(f"default d = mu(f)/2 needs mu(f) < 0, got {mu_f:.4g}")
        d = 0.5 * mu_f
    if not d < 0:
        raise ParameterError(f"d must be negative, got {d}")

    aux = SampledRewards(sampled.f - d, np.zeros(grid.n_nodes), sampled.r)
    surf = solve_infinite_horizon(model, grid, aux, config)
    gamma_dp = surf.w if surf.converged else None
    if gamma_dp is None:
        logger.warning("DP route for gamma did not converge (%s); falling back", surf.status)

    gamma_pot = None
    if potential is not None:
        if not mu_f < d < 0:
            logger.warning("potential route needs d in (mu(f), 0) = (%.4g, 0); skipped", mu_f)
        elif potential.kind == ZERO and not sampled.undiscounted:
            raise ParameterError("zero-potential given for a discounted problem; use the discounted potential")
        else:
            gamma_pot = potential.values - potential.lower_bound

    routes = [g for g in (gamma_dp, gamma_pot) if g is not None]
    if not routes:
        raise SolverError("no route to gamma: DP did not converge and no usable potential")
    gamma = np.minimum.reduce(routes)
    source = "+".join(n for n, g in (("dp", gamma_dp), ("potential", gamma_pot)) if g is not None)
    M = (gamma + 2.0 * sampled.g_norm + 1.0) / (-d)
    return BoundCertificate(grid, float(d), gamma, M, source, gamma_dp, gamma_pot, sampled.g_norm)


@dataclass(frozen=True)
class TransformedReport:
    w_hat_direct: np.ndarray      # w - q
    w_hat_solved: ValueSurface    # value with running mu(f), terminal g - q
    discrepancy: float            # sup over the window of |direct - solved|
    scale: float                  # |w|_inf + |q|_inf
    mask_mismatch: np.ndarray     # window nodes where the stopping masks disagree
    mismatch_near_boundary: bool  # every mismatch within one node of a free-boundary edge


def transformed_problem(
    model: DiffusionModel,
    grid: Grid,
    rewards: RewardSpec,
    surface: ValueSurface,
    potential: PotentialFunction,
    config: SolverConfig = SolverConfig(),
    window: Optional[tuple] = None,
) -> TransformedReport:
    """Compare w - q with the value of (running mu(f), terminal g - q)."""
    sampled = rewards.on(grid)
    if not sampled.undiscounted:
        raise NotApplicableError("the w - q transformation is for undiscounted problems (r = 0)")
    if potential.kind != ZERO or potential.grid != grid:
        raise NotApplicableError("need a zero-potential on the same grid")
    q = potential.values
    direct = surface.w - q
    aux = SampledRewards(np.full(grid.n_nodes, potential.mu_f), sampled.g - q, sampled.r)
    solved = solve_infinite_horizon(model, grid, aux, config)
    a, b = window or config.window_for(grid)
    win = grid.window(a, b)
    disc = float(np.max(np.abs(direct - solved.w)[win]))
    scale = float(np.max(np.abs(surface.w)) + np.max(np.abs(q)))

    m1 = surface.mask
    m2 = solved.mask
    bad = np.flatnonzero((m1 != m2) & win)
    edges = set()
    for m in (m1, m2):
        for i in np.flatnonzero(m[1:] != m[:-1]):
            edges.update((i - 1, i, i + 1, i + 2))
    near = all(int(i) in edges for i in bad)
    return TransformedReport(direct, solved, disc, scale, bad, near)


@dataclass(frozen=True)
class HorizonMaskReport:
    horizons: tuple
    masks: tuple
    monotone: bool    # each mask contains the next
    stabilised: bool  # the last two masks agree

    @property
    def final(self) -> np.ndarray:
        return self.masks[-1]


def tau_T_limit_check(
    model: DiffusionModel,
    grid: Grid,
    rewards: RewardSpec,
    config: SolverConfig,
    horizons: Sequence[float],
) -> HorizonMaskReport:
    """Stopping masks {g >= w_T} at t = 0 along an ascending horizon ladder."""
    horizons = [float(h) for h in horizons]
    if any(b <= a for a, b in zip(horizons, horizons[1:])):
        raise ParameterError("horizons must be strictly ascending")
    surf = solve_finite_horizon(model, grid, rewards, horizons[-1], config, store=horizons)
    masks = tuple(surf.g >= surf.slabs[h] for h in horizons)
    monotone = all(np.all(m2 <= m1) for m1, m2 in zip(masks, masks[1:]))
    stable = len(masks) < 2 or bool(np.array_equal(masks[-1], masks[-2]))
    return HorizonMaskReport(tuple(horizons), masks, monotone, stable)
