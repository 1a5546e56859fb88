"""One-dimensional ergodic diffusions on a truncated, reflecting domain.

The generator of ``dX = b(X) dt + sigma(X) dW`` is discretised by central
differences on a uniform grid,

    (A phi)_i = b_i (phi_{i+1} - phi_{i-1}) / (2 dx)
              + 0.5 sigma_i^2 (phi_{i+1} - 2 phi_i + phi_{i-1}) / dx^2,

with ghost-node reflection (phi_{-1} = phi_1) at both ends.  The stationary
density comes from the closed-form speed density rather than from the
stencil, so it is exact at the nodes whenever 2b/sigma^2 is integrated
exactly by the trapezoid rule (e.g. for Ornstein-Uhlenbeck).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy import integrate, stats

from . import expr
from .errors import (
    DimensionError,
    ErgodicityError,
    InsufficientDataError,
    InvalidModelError,
    InvalidRegionError,
)

logger = logging.getLogger(__name__)

SIGMA_MIN = 1e-8
#: mu-mass allowed in the two boundary cells before a truncation warning.
TRUNCATION_MASS_TOL = 1e-8


@dataclass(frozen=True)
class Grid:
    """Uniform nodes ``x_0 < ... < x_N`` spanning ``[x_lo, x_hi]``."""

    x_lo: float
    x_hi: float
    n_nodes: int

    def __post_init__(self):
        if not (self.x_hi > self.x_lo) or self.n_nodes < 3:
            raise InvalidRegionError(
                f"grid needs x_hi > x_lo and at least 3 nodes, got "
                f"[{self.x_lo}, {self.x_hi}] with {self.n_nodes}"
            )

    @classmethod
    def with_spacing(cls, x_lo: float, x_hi: float, dx: float) -> "Grid":
        """Finest uniform grid on [x_lo, x_hi] whose spacing does not exceed ``dx``."""
        if dx <= 0:
            raise InvalidRegionError("dx must be positive")
        n = int(math.ceil((x_hi - x_lo) / dx - 1e-9)) + 1
        return cls(float(x_lo), float(x_hi), max(n, 3))

    @cached_property
    def x(self) -> np.ndarray:
        return np.linspace(self.x_lo, self.x_hi, self.n_nodes)

    @property
    def dx(self) -> float:
        return (self.x_hi - self.x_lo) / (self.n_nodes - 1)

    @cached_property
    def weights(self) -> np.ndarray:
        """Trapezoid quadrature weights."""
        w = np.full(self.n_nodes, self.dx)
        w[0] = w[-1] = 0.5 * self.dx
        return w

    @property
    def interior(self) -> np.ndarray:
        m = np.ones(self.n_nodes, dtype=bool)
        m[0] = m[-1] = False
        return m

    def window(self, a: float, b: float) -> np.ndarray:
        """Boolean mask of the nodes in [a, b] (with a half-ulp of slack)."""
        tol = 1e-9 * self.dx
        return (self.x >= a - tol) & (self.x <= b + tol)

    def nearest(self, x0: float) -> int:
        return int(np.clip(np.rint((x0 - self.x_lo) / self.dx), 0, self.n_nodes - 1))

    def check(self, values, name="grid function") -> np.ndarray:
        values = np.asarray(values, dtype=float)
        if values.shape != (self.n_nodes,):
            raise DimensionError(
                f"{name} has shape {values.shape}, grid has {self.n_nodes} nodes"
            )
        return values

    def interp(self, values, x):
        """Piecewise-linear interpolation of nodal ``values`` at states ``x``."""
        return np.interp(x, self.x, values)


@dataclass(frozen=True)
class DiffusionModel:
    """Drift and volatility of a 1-D diffusion on a truncated domain.

    ``ou`` carries ``(theta, m, sigma)`` for the Ornstein-Uhlenbeck model so
    closed-form oracles (transition law, stationary law) can be used.
    """

    drift: Callable
    volatility: Callable
    x_lo: float
    x_hi: float
    label: str = "custom"
    ou: Optional[tuple] = None

    def __post_init__(self):
        if not self.x_hi > self.x_lo:
            raise InvalidModelError(f"empty domain [{self.x_lo}, {self.x_hi}]")

    def b(self, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(np.asarray(self.drift(x), dtype=float), x.shape)

    def sigma(self, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(np.asarray(self.volatility(x), dtype=float), x.shape)

    def eta(self, x):
        """Radial drift x b(x)/|x|; at x = 0 the magnitude |b(0)| is returned."""
        x = np.asarray(x, dtype=float)
        b = self.b(x)
        out = np.abs(b).astype(float)
        nz = x != 0
        out[nz] = np.sign(x[nz]) * b[nz]
        return out

    def grid(self, dx: float) -> Grid:
        return Grid.with_spacing(self.x_lo, self.x_hi, dx)

    def check_nondegenerate(self, grid: Grid) -> np.ndarray:
        s = self.sigma(grid.x)
        if not np.all(np.isfinite(s)) or np.any(s < SIGMA_MIN):
            i = int(np.argmin(np.where(np.isfinite(s), s, -np.inf)))
            raise InvalidModelError(
                f"volatility must be >= {SIGMA_MIN} on the grid; "
                f"sigma({grid.x[i]:.4g}) = {s[i]:.4g}"
            )
        return s

    def describe(self) -> dict:
        d = {
            "label": self.label,
            "drift": str(self.drift),
            "volatility": str(self.volatility),
            "x_lo": self.x_lo,
            "x_hi": self.x_hi,
        }
        if self.ou is not None:
            d["ou"] = list(self.ou)
        return d


def ou_model(theta=1.0, m=0.0, sigma=math.sqrt(2.0), x_lo=-8.0, x_hi=8.0) -> DiffusionModel:
    if theta <= 0:
        raise InvalidModelError("OU mean-reversion speed theta must be positive")
    if sigma <= 0:
        raise InvalidModelError("OU volatility must be positive")
    return DiffusionModel(
        drift=expr.parse(f"{theta!r}*({m!r} - x)"),
        volatility=expr.constant(sigma),
        x_lo=float(x_lo),
        x_hi=float(x_hi),
        label="ou",
        ou=(float(theta), float(m), float(sigma)),
    )


def double_well_model(sigma=1.0, x_lo=-3.0, x_hi=3.0) -> DiffusionModel:
    """b(x) = x - x^3: bimodal stationary law, not covered by any closed form."""
    return DiffusionModel(
        drift=expr.parse("x - x^3"),
        volatility=expr.constant(sigma),
        x_lo=float(x_lo),
        x_hi=float(x_hi),
        label="double-well",
    )


BUNDLED_MODELS = {"ou": ou_model, "double-well": double_well_model}


@dataclass(frozen=True)
class RewardSpec:
    """Running reward f, terminal reward g and discount rate r >= 0."""

    running: Callable
    terminal: Callable
    discount: Callable = field(default_factory=lambda: expr.constant(0.0))

    def f(self, x):
        return _eval(self.running, x)

    def g(self, x):
        return _eval(self.terminal, x)

    def r(self, x):
        return _eval(self.discount, x)

    def on(self, grid: Grid) -> "SampledRewards":
        f, g, r = self.f(grid.x), self.g(grid.x), self.r(grid.x)
        if np.any(r < 0):
            i = int(np.argmin(r))
            raise InvalidModelError(f"discount rate must be >= 0; r({grid.x[i]:.4g}) = {r[i]:.4g}")
        for name, v in (("f", f), ("g", g), ("r", r)):
            if not np.all(np.isfinite(v)):
                raise InvalidModelError(f"{name} is not finite on the grid")
        return SampledRewards(f, g, r)

    def sup_norms(self, grid: Grid) -> dict:
        s = self.on(grid)
        return {"f": s.f_norm, "g": s.g_norm, "r": s.r_norm}

    def describe(self) -> dict:
        return {"f": str(self.running), "g": str(self.terminal), "r": str(self.discount)}

    @classmethod
    def from_strings(cls, f: str, g: str, r: str = "0") -> "RewardSpec":
        return cls(expr.parse(f), expr.parse(g), expr.parse(r))


def _eval(fn, x):
    x = np.asarray(x, dtype=float)
    return np.broadcast_to(np.asarray(fn(x), dtype=float), x.shape).copy()


@dataclass(frozen=True)
class SampledRewards:
    f: np.ndarray
    g: np.ndarray
    r: np.ndarray

    @property
    def f_norm(self) -> float:
        return float(np.max(np.abs(self.f)))

    @property
    def g_norm(self) -> float:
        return float(np.max(np.abs(self.g)))

    @property
    def r_norm(self) -> float:
        return float(np.max(np.abs(self.r)))

    @property
    def undiscounted(self) -> bool:
        return bool(np.all(self.r == 0))


@dataclass(frozen=True)
class GeneratorStencil:
    """Tridiagonal generator: row i is ``lower[i] phi_{i-1} + diag[i] phi_i + upper[i] phi_{i+1}``.

    ``lower[0]`` and ``upper[-1]`` are zero padding.
    """

    grid: Grid
    lower: np.ndarray
    diag: np.ndarray
    upper: np.ndarray
    monotone: bool

    def apply(self, phi) -> np.ndarray:
        phi = self.grid.check(phi)
        out = self.diag * phi
        out[1:] += self.lower[1:] * phi[:-1]
        out[:-1] += self.upper[:-1] * phi[1:]
        return out

    def matrix(self) -> sp.csc_matrix:
        return sp.diags(
            [self.lower[1:], self.diag, self.upper[:-1]], [-1, 0, 1], format="csc"
        )


def build_generator(model: DiffusionModel, grid: Grid) -> GeneratorStencil:
    """Central-difference generator with reflecting (zero-derivative) boundary rows."""
    if grid.x_lo < model.x_lo - 1e-12 or grid.x_hi > model.x_hi + 1e-12:
        raise InvalidRegionError("grid extends beyond the model domain")
    s = model.check_nondegenerate(grid)
    b = model.b(grid.x)
    dx = grid.dx
    half_var = 0.5 * s**2 / dx**2
    adv = b / (2.0 * dx)
    lower = half_var - adv
    upper = half_var + adv
    diag = -2.0 * half_var
    # ghost node phi_{-1} = phi_1 cancels the drift term and doubles the diffusion coupling
    lower[0] = 0.0
    upper[0] = 2.0 * half_var[0]
    upper[-1] = 0.0
    lower[-1] = 2.0 * half_var[-1]
    monotone = bool(np.all(half_var[1:-1] >= np.abs(adv[1:-1])))
    return GeneratorStencil(grid, lower, diag, upper, monotone)


@dataclass(frozen=True)
class InvariantMeasure:
    grid: Grid
    density: np.ndarray
    #: mu-mass carried by the two boundary cells; a truncation-quality monitor
    edge_mass: float = 0.0

    def integrate(self, phi) -> float:
        return mu_integral(self, phi)


def stationary_density(model: DiffusionModel, grid: Grid) -> InvariantMeasure:
    """Normalised speed density exp(int 2b/sigma^2) / sigma^2 on the grid."""
    s = model.check_nondegenerate(grid)
    b = model.b(grid.x)
    ratio = 2.0 * b / s**2
    potential = integrate.cumulative_trapezoid(ratio, grid.x, initial=0.0)
    log_m = potential - 2.0 * np.log(s)
    if not np.all(np.isfinite(log_m)):
        raise ErgodicityError("speed density overflows on the grid")
    peak = int(np.argmax(log_m))
    if peak in (0, grid.n_nodes - 1) and log_m[peak] > np.min(log_m):
        raise ErgodicityError(
            f"speed density peaks on the truncation boundary (x = {grid.x[peak]:.4g}); "
            "the model does not look ergodic on this domain"
        )
    m = np.exp(log_m - log_m[peak])
    total = float(np.dot(grid.weights, m))
    if not np.isfinite(total) or total <= 0:
        raise ErgodicityError("speed density cannot be normalised")
    density = m / total
    edge = float(grid.weights[0] * density[0] + grid.weights[-1] * density[-1])
    if edge > TRUNCATION_MASS_TOL:
        logger.warning(
            "stationary mass %.3g sits in the boundary cells of [%g, %g]; consider a wider domain",
            edge, grid.x_lo, grid.x_hi,
        )
    return InvariantMeasure(grid, density, edge)


def mu_integral(measure: InvariantMeasure, phi) -> float:
    """Trapezoidal quadrature of ``phi`` against the stationary density."""
    phi = measure.grid.check(phi, "integrand")
    return float(np.dot(measure.grid.weights, measure.density * phi))


def hitting_time_expectation(model: DiffusionModel, grid: Grid, ball) -> np.ndarray:
    """Expected entry time into ``ball = (a, b)``: solves A u = -1 off the ball, u = 0 on it."""
    a, b = ball
    if a > b:
        raise InvalidRegionError(f"ball ({a}, {b}) is empty")
    inside = grid.window(a, b)
    if not np.any(inside & grid.interior):
        raise InvalidRegionError(f"ball [{a}, {b}] contains no interior grid node")
    gen = build_generator(model, grid)
    A = gen.matrix().tolil()
    rhs = -np.ones(grid.n_nodes)
    for i in np.flatnonzero(inside):
        A.rows[i] = [i]
        A.data[i] = [1.0]
        rhs[i] = 0.0
    u = spla.spsolve(A.tocsc(), rhs)
    return np.maximum(u, 0.0)


@dataclass(frozen=True)
class ErgodicityProfile:
    """TV(P_t(x, .), mu) table with a fitted envelope K(x) exp(-rate t)."""

    start_points: np.ndarray
    times: np.ndarray
    tv: np.ndarray          # shape (len(start_points), len(times))
    slopes: np.ndarray      # per-start slope of log TV against t
    r_squared: np.ndarray   # per-start goodness of the log-linear fit
    rate: float             # common rate: the slowest per-start rate
    envelope: np.ndarray    # K(x) at each start point
    method: str

    @property
    def fit_quality(self) -> float:
        return float(np.min(self.r_squared))

    def h(self) -> np.ndarray:
        return np.exp(-self.rate * self.times)

    def rows(self):
        for i, x in enumerate(self.start_points):
            for j, t in enumerate(self.times):
                yield float(t), float(x), float(self.tv[i, j])


def gaussian_tv(m1, s1, m2, s2) -> float:
    """Exact total-variation distance between N(m1, s1^2) and N(m2, s2^2)."""
    if s1 <= 0 or s2 <= 0:
        raise ValueError("standard deviations must be positive")
    if math.isclose(s1, s2, rel_tol=1e-12):
        return float(2.0 * stats.norm.cdf(abs(m1 - m2) / (2.0 * s1)) - 1.0)
    # log p1 - log p2 = a x^2 + b x + c has exactly two real roots
    a = 0.5 / s2**2 - 0.5 / s1**2
    b = m1 / s1**2 - m2 / s2**2
    c = 0.5 * m2**2 / s2**2 - 0.5 * m1**2 / s1**2 + math.log(s2 / s1)
    disc = b * b - 4.0 * a * c
    sq = math.sqrt(max(disc, 0.0))
    lo, hi = sorted(((-b - sq) / (2 * a), (-b + sq) / (2 * a)))
    p1 = stats.norm.cdf(hi, m1, s1) - stats.norm.cdf(lo, m1, s1)
    p2 = stats.norm.cdf(hi, m2, s2) - stats.norm.cdf(lo, m2, s2)
    return float(abs(p1 - p2))


def ou_transition(model: DiffusionModel, x, t):
    """Mean and standard deviation of X_t given X_0 = x for the OU model."""
    theta, m, sigma = model.ou
    mean = m + (x - m) * math.exp(-theta * t)
    var = sigma**2 / (2 * theta) * (1.0 - math.exp(-2 * theta * t))
    return mean, math.sqrt(var)


def ergodicity_profile(
    model: DiffusionModel,
    grid: Grid,
    start_points: Sequence[float],
    times: Sequence[float],
    *,
    n_samples: int = 100_000,
    dt: float = 1e-2,
    seed: int = 0,
    floor: float = 1e-12,
) -> ErgodicityProfile:
    """Tabulate TV distance to the invariant law and fit an exponential envelope.

    OU models use the closed-form Gaussian transition law; other models use
    a Scott's-rule kernel density of ``n_samples`` simulated endpoints.
    Values at or below ``floor`` are treated as unusable for the fit.
    """
    times = np.asarray(times, dtype=float)
    starts = np.asarray(start_points, dtype=float)
    if np.any(np.diff(times) <= 0):
        raise InsufficientDataError("times must be strictly increasing")
    if len(times) < 4:
        raise InsufficientDataError("need at least 4 time points for the rate fit")

    tv = np.empty((len(starts), len(times)))
    if model.ou is not None:
        theta, m, sigma = model.ou
        s_inf = sigma / math.sqrt(2 * theta)
        for i, x in enumerate(starts):
            for j, t in enumerate(times):
                mean, sd = ou_transition(model, x, t)
                tv[i, j] = gaussian_tv(mean, sd, m, s_inf)
        method = "ou-closed-form"
    else:
        tv = _kde_tv_table(model, grid, starts, times, n_samples, dt, seed)
        method = "kde-simulation"

    slopes = np.empty(len(starts))
    r2 = np.empty(len(starts))
    for i in range(len(starts)):
        ok = tv[i] > floor
        if ok.sum() < 4:
            raise InsufficientDataError(
                f"start point {starts[i]:g}: only {int(ok.sum())} usable TV values above {floor:g}"
            )
        fit = stats.linregress(times[ok], np.log(tv[i, ok]))
        slopes[i] = fit.slope
        r2[i] = fit.rvalue**2
    rate = float(max(0.0, -np.max(slopes)))
    envelope = np.max(tv * np.exp(rate * times)[None, :], axis=1)
    return ErgodicityProfile(starts, times, tv, slopes, r2, rate, envelope, method)


def _kde_tv_table(model, grid, starts, times, n_samples, dt, seed):
    from .simulator import simulate  # local import: simulator depends on this module

    measure = stationary_density(model, grid)
    zero = RewardSpec(expr.constant(0.0), expr.constant(0.0))
    tv = np.empty((len(starts), len(times)))
    for i, x in enumerate(starts):
        ens = simulate(model, zero, float(x), float(times[-1]), dt, n_samples, seed + i)
        snaps = ens.snapshots(times)
        for j in range(len(times)):
            kde = stats.gaussian_kde(snaps[:, j], bw_method="scott")
            p = kde(grid.x)
            tv[i, j] = 0.5 * float(np.dot(grid.weights, np.abs(p - measure.density)))
    return tv
