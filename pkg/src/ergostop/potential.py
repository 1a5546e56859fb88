"""Zero-potential, resolvent and discounted potentials on the grid.

All three solve a shifted Poisson problem ``(r - A) q = f - mu(f)`` with the
reflecting generator ``A``:

* zero-potential (r = 0): singular, fixed by ``mu(q) = 0`` through a
  bordered system; the Lagrange multiplier is the compatibility defect
  between the stencil and the speed-density measure and is reported as the
  Poisson residual;
* resolvent (r = alpha > 0 constant);
* discounted (r >= 0, positive somewhere).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ParameterError, SolverError
from .models import (
    DiffusionModel,
    Grid,
    InvariantMeasure,
    RewardSpec,
    build_generator,
    mu_integral,
)

ZERO = "zero-potential"
RESOLVENT = "resolvent"
DISCOUNTED = "discounted"


@dataclass(frozen=True)
class PotentialFunction:
    grid: Grid
    values: np.ndarray
    kind: str
    mu_f: float
    residual: float          # max |r q - A q - (f - mu(f))| over all nodes
    centering: float = 0.0   # q at the stationary mode (the shift vs. a mode-pinned representative)
    alpha: Optional[float] = None

    @property
    def argmin(self) -> int:
        return int(np.argmin(self.values))

    @property
    def lower_bound(self) -> float:
        """A = min q; for the discounted kind A = min(0, min q_r)."""
        m = float(np.min(self.values))
        return min(0.0, m) if self.kind == DISCOUNTED else m


def sample(grid: Grid, f) -> np.ndarray:
    """Grid values of ``f`` given as a callable, a scalar or an array."""
    x = grid.x
    if callable(f):
        return np.broadcast_to(np.asarray(f(x), dtype=float), x.shape).copy()
    if np.ndim(f) == 0:
        return np.full(x.shape, float(f))
    return grid.check(f).copy()


def _centred(grid, f, measure):
    fv = sample(grid, f)
    if measure.grid != grid:
        raise ParameterError("measure lives on a different grid")
    if np.all(fv == fv[0]):
        # constant reward: centre exactly rather than up to quadrature rounding
        return np.zeros_like(fv), float(fv[0])
    mu_f = mu_integral(measure, fv)
    if not math.isfinite(mu_f):
        raise ParameterError("mu(f) is not finite")
    return fv - mu_f, mu_f


def solve_zero_potential(model: DiffusionModel, grid: Grid, f, measure: InvariantMeasure) -> PotentialFunction:
    """Solve A q = -(f - mu(f)) with mu(q) = 0."""
    fhat, mu_f = _centred(grid, f, measure)
    A = build_generator(model, grid).matrix()
    n = grid.n_nodes
    mw = grid.weights * measure.density
    ones = np.ones((n, 1))
    K = sp.bmat([[A, sp.csc_matrix(ones)], [sp.csc_matrix(mw[None, :]), None]], format="csc")
    rhs = np.concatenate([-fhat, [0.0]])
    sol = spla.spsolve(K, rhs)
    if not np.all(np.isfinite(sol)):
        raise SolverError("zero-potential system is singular beyond its constant null space")
    q = sol[:n]
    resid = float(np.max(np.abs(A @ q + fhat)))
    mode = int(np.argmax(measure.density))
    return PotentialFunction(grid, q, ZERO, mu_f, resid, float(q[mode]))


def _solve_shifted(model, grid, fhat, rates, kind, mu_f, alpha=None):
    A = build_generator(model, grid).matrix()
    M = (sp.diags(rates) - A).tocsc()
    q = spla.spsolve(M, fhat)
    if not np.all(np.isfinite(q)):
        raise SolverError(f"{kind} system is singular")
    resid = float(np.max(np.abs(M @ q - fhat)))
    return PotentialFunction(grid, q, kind, mu_f, resid, 0.0, alpha)


def solve_resolvent(model: DiffusionModel, grid: Grid, f, measure: InvariantMeasure, alpha: float) -> PotentialFunction:
    """q_alpha solving (alpha - A) q = f - mu(f)."""
    if not alpha > 0:
        raise ParameterError(f"resolvent rate must be positive, got {alpha}")
    fhat, mu_f = _centred(grid, f, measure)
    return _solve_shifted(model, grid, fhat, np.full(grid.n_nodes, float(alpha)), RESOLVENT, mu_f, alpha)


def solve_discounted_potential(model: DiffusionModel, grid: Grid, f, r, measure: InvariantMeasure) -> PotentialFunction:
    """q_r solving (r - A) q = f - mu(f); r = 0 dispatches to the zero-potential."""
    rv = sample(grid, r)
    if np.any(rv < 0):
        raise ParameterError("discount rate must be nonnegative")
    if np.all(rv == 0):
        return solve_zero_potential(model, grid, f, measure)
    if np.all(rv == rv[0]):
        return solve_resolvent(model, grid, f, measure, float(rv[0]))
    fhat, mu_f = _centred(grid, f, measure)
    return _solve_shifted(model, grid, fhat, rv, DISCOUNTED, mu_f)


def potential_by_time_integration(
    model: DiffusionModel,
    grid: Grid,
    f,
    measure: InvariantMeasure,
    T_max: float,
    dt: float = 1e-2,
) -> np.ndarray:
    """int_0^T_max (P_s f - mu(f)) ds by Crank-Nicolson on the backward equation.

    An independent route to the zero-potential: no linear solve against the
    singular generator, just the semigroup applied to f - mu(f).
    """
    fhat, _ = _centred(grid, f, measure)
    A = build_generator(model, grid).matrix()
    n_steps = max(1, int(math.ceil(T_max / dt)))
    h = T_max / n_steps
    eye = sp.identity(grid.n_nodes, format="csc")
    lu = spla.splu((eye - 0.5 * h * A).tocsc())
    B = (eye + 0.5 * h * A).tocsr()
    u = fhat.copy()
    total = 0.5 * h * u
    for _ in range(n_steps):
        u = lu.solve(B @ u)
        total += h * u
    total -= 0.5 * h * u
    return total


@dataclass(frozen=True)
class AssumptionReport:
    """Numerical evidence for the zero-potential assumptions.

    ``status`` maps an assumption name to PASS / INCONCLUSIVE / FAIL.
    """

    mu_f: float
    lower_bound: float
    argmin_x: float
    argmin_interior: bool
    L_mask: np.ndarray
    L_touches_boundary: bool
    boundary_trend: str
    martingale: tuple  # (label, estimate, target) for each tested sigma
    status: dict

    def lines(self):
        yield f"mu(f) = {self.mu_f:.6g}"
        yield f"A = min q = {self.lower_bound:.6g} at x = {self.argmin_x:.4g}"
        yield f"L = {{f <= mu(f)}} touches boundary: {self.L_touches_boundary}"
        yield f"q boundary trend: {self.boundary_trend}"
        for label, est, target in self.martingale:
            lo, hi = est.ci
            yield f"martingale identity, sigma = {label}: E = {est.mean:.5g} [{lo:.5g}, {hi:.5g}] vs q(x0) = {target:.5g}"
        for k, v in self.status.items():
            yield f"{k}: {v}"


def verify_c_assumptions(
    potential: PotentialFunction,
    model: DiffusionModel,
    rewards: RewardSpec,
    ensemble=None,
    *,
    sigma_times: Sequence[float] = (5.0,),
    stop_rule=None,
) -> AssumptionReport:
    """Check sign of mu(f), the lower bound of q and the martingale identity.

    ``ensemble`` (a PathEnsemble started at the point of interest) enables
    the Monte Carlo test of E[int_0^sigma e^-alpha fhat ds + e^-alpha q(X_sigma)] = q(x0)
    at the fixed ``sigma_times`` and, if ``stop_rule`` is given, at the
    rule's entry time capped at the last sigma.
    """
    from .simulator import supermartingale_check

    grid = potential.grid
    q = potential.values
    fv = rewards.f(grid.x)
    mu_f = potential.mu_f
    L = fv <= mu_f + 1e-12 * max(1.0, abs(mu_f))
    touches = bool(L[0] or L[-1])
    i_min = potential.argmin
    interior = 0 < i_min < grid.n_nodes - 1 and not (q[0] == q[i_min] or q[-1] == q[i_min])
    trend = _boundary_trend(q)

    zero_tol = 1e-10 * max(1.0, float(np.max(np.abs(fv))))
    if mu_f < -zero_tol:
        c3 = "PASS"
    elif mu_f <= zero_tol:
        c3 = "FAIL (mu(f) is zero up to rounding)"
    else:
        c3 = "FAIL"
    status = {"C3 (mu(f) < 0)": c3}
    if interior:
        status["C1 (q bounded below)"] = "PASS (supported: interior arg-min)"
    else:
        status["C1 (q bounded below)"] = "INCONCLUSIVE (arg-min on truncation boundary; enlarge domain)"

    checks = []
    if ensemble is not None:
        fhat_rewards = RewardSpec(lambda x: rewards.f(x) - mu_f, rewards.terminal, rewards.discount)
        target = float(grid.interp(q, ensemble.x0))
        res = supermartingale_check(ensemble, fhat_rewards, grid, q, list(sigma_times))
        for t, est in zip(sigma_times, res.estimates):
            checks.append((f"{t:g}", est, target))
        if stop_rule is not None:
            res = supermartingale_check(ensemble, fhat_rewards, grid, q, [max(sigma_times)], stop_rule=stop_rule)
            checks.append((f"rule ^ {max(sigma_times):g}", res.estimates[0], target))
        ok = all(e.ci[0] <= tgt <= e.ci[1] for _, e, tgt in checks)
        status["C2 (martingale identity)"] = "PASS" if ok else "FAIL"
    else:
        status["C2 (martingale identity)"] = "INCONCLUSIVE (no ensemble supplied)"
    return AssumptionReport(
        mu_f, potential.lower_bound, float(grid.x[i_min]), interior, L, touches, trend,
        tuple(checks), status,
    )


def _boundary_trend(q) -> str:
    n = len(q)
    k = max(2, n // 10)
    left = np.all(np.diff(q[:k]) <= 0)
    right = np.all(np.diff(q[-k:]) >= 0)
    if left and right:
        return "increasing toward both boundaries"
    if right:
        return "increasing toward the right boundary only"
    if left:
        return "increasing toward the left boundary only"
    return "not increasing toward either boundary"
