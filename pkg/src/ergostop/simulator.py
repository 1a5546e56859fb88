"""Euler-Maruyama path ensembles and Monte Carlo path functionals.

A :class:`PathEnsemble` is a deterministic recipe: every path ``i`` draws its
Gaussian increments from its own counter-based stream (Philox seeded by
``SeedSequence(seed).spawn``), so path ``i`` is the same whatever the
ensemble size, and paths are regenerated block by block instead of being
held in memory.  All time integrals use left-endpoint rectangles at the
simulation step; stopping is detected at sample points only (no
Brownian-bridge correction).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np
from scipy import stats

from .errors import InvalidRegionError, ParameterError, StepSizeError
from .models import DiffusionModel, Grid, RewardSpec

#: two-sided 99% normal quantile
Z99 = float(stats.norm.ppf(0.995))
#: one-sided 99% normal quantile
Z99_ONE_SIDED = float(stats.norm.ppf(0.99))

_BLOCK_BUDGET = 2_000_000  # states held per block (n_paths * steps)


@dataclass(frozen=True)
class Estimate:
    """Ensemble mean with a two-sided 99% normal confidence interval."""

    mean: float
    stderr: float
    n: int

    @property
    def half_width(self) -> float:
        return Z99 * self.stderr

    @property
    def ci(self):
        return self.mean - self.half_width, self.mean + self.half_width

    @classmethod
    def of(cls, values) -> "Estimate":
        v = np.asarray(values, dtype=float)
        n = v.size
        sd = float(np.std(v, ddof=1)) if n > 1 else 0.0
        return cls(float(np.mean(v)), sd / math.sqrt(n), n)


@dataclass(frozen=True)
class Block:
    """States and accumulated discount at steps ``start .. start + k - 1``."""

    start: int
    times: np.ndarray
    x: np.ndarray       # (n, k)
    alpha: np.ndarray   # (n, k), alpha at the same sample points


@dataclass(frozen=True)
class PathEnsemble:
    """n reflected Euler-Maruyama paths of ``model`` started at ``x0``."""

    model: DiffusionModel
    rewards: RewardSpec
    x0: float
    T: float
    dt: float
    n: int
    seed: int

    @property
    def n_steps(self) -> int:
        return int(round(self.T / self.dt))

    def step_of(self, t: float) -> int:
        k = int(round(t / self.dt))
        if k < 0 or k > self.n_steps:
            raise InvalidRegionError(f"time {t} outside [0, {self.T}]")
        return k

    def streams(self):
        children = np.random.SeedSequence(self.seed).spawn(self.n)
        return [np.random.Generator(np.random.Philox(c)) for c in children]

    def blocks(self, until: Optional[float] = None, block_steps: Optional[int] = None) -> Iterator[Block]:
        """Yield the ensemble in time blocks covering steps 0 .. step_of(until)."""
        last = self.n_steps if until is None else self.step_of(until)
        k_block = block_steps or max(1, min(last + 1, _BLOCK_BUDGET // self.n))
        gens = self.streams()
        model, dt = self.model, self.dt
        sqdt = math.sqrt(dt)
        lo, hi = model.x_lo, model.x_hi
        x = np.full(self.n, float(self.x0))
        alpha = np.zeros(self.n)
        r_fn = self.rewards.r
        start = 0
        while start <= last:
            k = min(k_block, last + 1 - start)
            xs = np.empty((self.n, k))
            als = np.empty((self.n, k))
            # increment for step j moves X_j to X_{j+1}; the final block needs one fewer
            n_inc = k if start + k <= last else k - 1
            z = np.empty((self.n, max(n_inc, 0)))
            if n_inc > 0:
                for i, g in enumerate(gens):
                    z[i] = g.standard_normal(n_inc)
            for j in range(k):
                xs[:, j] = x
                als[:, j] = alpha
                if j < n_inc:
                    alpha = alpha + r_fn(x) * dt
                    x = x + model.b(x) * dt + model.sigma(x) * sqdt * z[:, j]
                    x = np.where(x > hi, 2 * hi - x, x)
                    x = np.where(x < lo, 2 * lo - x, x)
                    np.clip(x, lo, hi, out=x)
            times = (start + np.arange(k)) * dt
            yield Block(start, times, xs, als)
            start += k

    def snapshots(self, times: Sequence[float]) -> np.ndarray:
        """States at the requested times, shape (n, len(times))."""
        steps = [self.step_of(t) for t in times]
        out = np.empty((self.n, len(steps)))
        for blk in self.blocks(until=max(times)):
            for c, k in enumerate(steps):
                j = k - blk.start
                if 0 <= j < blk.x.shape[1]:
                    out[:, c] = blk.x[:, j]
        return out

    def record(self, stride: int = 1):
        """Materialise (times, states, alpha) every ``stride`` steps; small ensembles only."""
        ts, xs, als = [], [], []
        for blk in self.blocks():
            sel = (blk.start + np.arange(blk.x.shape[1])) % stride == 0
            ts.append(blk.times[sel])
            xs.append(blk.x[:, sel])
            als.append(blk.alpha[:, sel])
        return np.concatenate(ts), np.concatenate(xs, axis=1), np.concatenate(als, axis=1)

    def manifest(self) -> dict:
        return {
            "model": self.model.describe(),
            "rewards": self.rewards.describe(),
            "x0": self.x0, "T": self.T, "dt": self.dt, "n": self.n, "seed": self.seed,
            "rng": "numpy Philox, SeedSequence(seed).spawn(n), one stream per path",
        }


def drift_stiffness(model: DiffusionModel, n_probe: int = 2001) -> float:
    """max |b'(x)| over the domain by central differences."""
    x = np.linspace(model.x_lo, model.x_hi, n_probe)
    return float(np.max(np.abs(np.gradient(model.b(x), x))))


def simulate(
    model: DiffusionModel,
    rewards: RewardSpec,
    x0: float,
    T: float,
    dt: float,
    n: int,
    seed: int,
) -> PathEnsemble:
    if dt <= 0 or n < 1 or T < 0:
        raise ParameterError("need dt > 0, n >= 1 and T >= 0")
    if not model.x_lo <= x0 <= model.x_hi:
        raise InvalidRegionError(f"x0 = {x0} outside the domain [{model.x_lo}, {model.x_hi}]")
    stiff = drift_stiffness(model)
    if dt * stiff >= 1.0:
        raise StepSizeError(
            f"dt = {dt:g} too large for drift stiffness {stiff:.3g}; need dt < {1.0 / stiff:.3g}"
        )
    return PathEnsemble(model, rewards, float(x0), float(T), float(dt), int(n), int(seed))


@dataclass(frozen=True)
class TimeAverage:
    times: np.ndarray
    values: np.ndarray  # (n, len(times)) per-path averages
    estimates: tuple

    def rows(self):
        for t, e in zip(self.times, self.estimates):
            lo, hi = e.ci
            yield float(t), e.mean, lo, hi


def _path_integrals(ens: PathEnsemble, phi, times, discounted=False):
    """Left-endpoint integrals of phi (optionally weighted by e^-alpha) and of the weight."""
    steps = [ens.step_of(t) for t in times]
    out = np.zeros((ens.n, len(steps)))
    norm = np.zeros((ens.n, len(steps)))
    acc = np.zeros(ens.n)
    acc_w = np.zeros(ens.n)
    for blk in ens.blocks(until=max(times)):
        w = np.exp(-blk.alpha) if discounted else np.ones_like(blk.x)
        vals = w * phi(blk.x) * ens.dt
        cs = acc[:, None] + np.cumsum(vals, axis=1) - vals  # integral up to (excluding) each step
        cw = acc_w[:, None] + np.cumsum(w * ens.dt, axis=1) - w * ens.dt
        for c, k in enumerate(steps):
            j = k - blk.start
            if 0 <= j < blk.x.shape[1]:
                out[:, c] = cs[:, j]
                norm[:, c] = cw[:, j]
        acc = acc + vals.sum(axis=1)
        acc_w = acc_w + (w * ens.dt).sum(axis=1)
    return out, norm


def time_average(ens: PathEnsemble, phi, times: Sequence[float]) -> TimeAverage:
    """Per-path (1/t) int_0^t phi(X_s) ds at each requested time."""
    times = np.asarray(times, dtype=float)
    if np.any(times <= 0) or np.any(times > ens.T + 1e-12):
        raise InvalidRegionError(f"requested times must lie in (0, {ens.T}]")
    integ, norm = _path_integrals(ens, phi, times)
    values = integ / norm
    return TimeAverage(times, values, tuple(Estimate.of(values[:, c]) for c in range(len(times))))


def wilson_interval(k: int, n: int, z: float = Z99):
    p = k / n
    denom = 1 + z * z / n
    centre = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    lo = 0.0 if k == 0 else max(0.0, centre - half)
    hi = 1.0 if k == n else min(1.0, centre + half)
    return lo, hi


@dataclass(frozen=True)
class DeviationTable:
    """Empirical P{|average - target| > eps} against t and the fitted decay rate."""

    times: np.ndarray
    freq: np.ndarray
    ci_lo: np.ndarray
    ci_hi: np.ndarray
    n: int
    rate: Optional[float]  # None: unresolved at this n (no positive frequency to fit)
    zero: np.ndarray       # times with no observed exceedance

    @property
    def resolved(self) -> bool:
        return self.rate is not None

    @property
    def ci_separated_decrease(self) -> bool:
        return bool(np.all(self.ci_hi[1:] < self.ci_lo[:-1]))

    def rows(self):
        for t, f in zip(self.times, self.freq):
            yield float(t), float(f)


def large_deviation_estimate(
    model: DiffusionModel,
    rewards: RewardSpec,
    phi,
    target: float,
    eps: float,
    x0: float,
    times: Sequence[float],
    n: int,
    seed: int,
    *,
    dt: float = 1e-2,
    discounted: bool = False,
) -> DeviationTable:
    """Exceedance frequencies of time averages (or e^-alpha weighted averages).

    With ``discounted=True`` the average is int e^-alpha phi / int e^-alpha.
    """
    times = np.asarray(times, dtype=float)
    if np.any(np.diff(times) <= 0):
        raise ParameterError("times must be strictly increasing")
    ens = simulate(model, rewards, x0, float(times[-1]), dt, n, seed)
    integ, norm = _path_integrals(ens, phi, times, discounted=discounted)
    avg = integ / norm
    exceed = np.abs(avg - target) > eps
    counts = exceed.sum(axis=0)
    freq = counts / n
    ci = np.array([wilson_interval(int(c), n) for c in counts])
    pos = freq > 0
    rate = None
    if pos.sum() >= 2:
        fit = stats.linregress(times[pos], np.log(freq[pos]))
        rate = float(-fit.slope)
    return DeviationTable(times, freq, ci[:, 0], ci[:, 1], n, rate, times[~pos])


@dataclass(frozen=True)
class StoppingRule:
    """First entry into a union of closed intervals."""

    intervals: tuple
    eps: float = 0.0
    description: str = ""

    @classmethod
    def from_mask(cls, grid: Grid, mask, eps=0.0, description="") -> "StoppingRule":
        mask = np.asarray(mask, dtype=bool)
        grid.check(mask.astype(float), "mask")
        intervals = []
        i = 0
        n = len(mask)
        while i < n:
            if mask[i]:
                j = i
                while j + 1 < n and mask[j + 1]:
                    j += 1
                intervals.append((float(grid.x[i]), float(grid.x[j])))
                i = j + 1
            else:
                i += 1
        return cls(tuple(intervals), float(eps), description)

    @classmethod
    def everywhere(cls, model: DiffusionModel) -> "StoppingRule":
        return cls(((model.x_lo, model.x_hi),), 0.0, "stop immediately")

    @classmethod
    def never(cls) -> "StoppingRule":
        return cls((), 0.0, "never stop")

    @property
    def empty(self) -> bool:
        return not self.intervals

    def contains(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        hit = np.zeros(x.shape, dtype=bool)
        for lo, hi in self.intervals:
            hit |= (x >= lo) & (x <= hi)
        return hit

    def mask_on(self, grid: Grid) -> np.ndarray:
        return self.contains(grid.x)

    def within(self, model: DiffusionModel) -> bool:
        return all(model.x_lo - 1e-12 <= lo and hi <= model.x_hi + 1e-12 for lo, hi in self.intervals)


@dataclass(frozen=True)
class RuleEvaluation:
    payoff: Estimate
    tau: Estimate               # E[tau ^ T_cap]
    discounted_time: Estimate   # E[int_0^{tau ^ T_cap} e^-alpha ds]
    unstopped_fraction: float
    per_path_payoff: np.ndarray = field(repr=False)
    per_path_tau: np.ndarray = field(repr=False)
    stopped: np.ndarray = field(repr=False)


@dataclass(frozen=True)
class _Scan:
    stop_step: np.ndarray   # step index of stopping, or the cap step if censored
    entered: np.ndarray     # True where the rule (not the cap) stopped the path
    x_stop: np.ndarray
    alpha_stop: np.ndarray


def _stop_scan(ens: PathEnsemble, rule: StoppingRule, T_cap: float, on_block=None) -> _Scan:
    """First entry into ``rule`` at sample points, censored at ``T_cap``.

    ``on_block(blk, active)`` sees every block before stopping is applied;
    ``active[i, j]`` is True while column j is strictly before path i's
    stopping step, which is exactly the left-endpoint integration range.
    """
    cap = ens.step_of(T_cap)
    n = ens.n
    done = np.zeros(n, dtype=bool)
    stop_step = np.full(n, cap)
    entered = np.zeros(n, dtype=bool)
    x_stop = np.empty(n)
    a_stop = np.empty(n)
    for blk in ens.blocks(until=T_cap):
        k = blk.x.shape[1]
        inside = rule.contains(blk.x)
        hit = inside.copy()
        hit[:, blk.start + np.arange(k) == cap] = True
        hit &= ~done[:, None]
        any_hit = hit.any(axis=1)
        first = np.where(any_hit, hit.argmax(axis=1), k)
        if on_block is not None:
            active = (np.arange(k)[None, :] < first[:, None]) & ~done[:, None]
            on_block(blk, active)
        rows = np.flatnonzero(any_hit)
        cols = first[rows]
        stop_step[rows] = blk.start + cols
        entered[rows] = inside[rows, cols]
        x_stop[rows] = blk.x[rows, cols]
        a_stop[rows] = blk.alpha[rows, cols]
        done[rows] = True
        if done.all():
            break
    return _Scan(stop_step, entered, x_stop, a_stop)


def _effective_alpha(alpha, times, floor_rate):
    if floor_rate is None:
        return alpha
    return np.maximum(alpha, floor_rate * times)


def evaluate_rule(
    ens: PathEnsemble,
    rewards: RewardSpec,
    rule: StoppingRule,
    T_cap: float,
    *,
    discount_floor: Optional[float] = None,
) -> RuleEvaluation:
    """Monte Carlo value of stopping at the first entry into ``rule``.

    Payoff per path is int_0^{tau ^ T_cap} e^-alpha f ds + e^-alpha g at
    tau ^ T_cap.  ``discount_floor = lam`` replaces alpha_t by
    max(alpha_t, lam t).
    """
    if not rule.within(ens.model):
        raise InvalidRegionError("stopping set extends beyond the model domain")
    if T_cap > ens.T + 1e-12:
        raise InvalidRegionError(f"T_cap = {T_cap} exceeds the simulated horizon {ens.T}")
    n, dt = ens.n, ens.dt
    integral = np.zeros(n)
    disc_time = np.zeros(n)

    def accumulate(blk, active):
        a = _effective_alpha(blk.alpha, blk.times[None, :], discount_floor)
        w = np.where(active, np.exp(-a), 0.0) * dt
        integral[:] += (w * rewards.f(blk.x)).sum(axis=1)
        disc_time[:] += w.sum(axis=1)

    scan = _stop_scan(ens, rule, T_cap, accumulate)
    t_stop = scan.stop_step * dt
    a_stop = _effective_alpha(scan.alpha_stop, t_stop, discount_floor)
    payoff = integral + np.exp(-a_stop) * rewards.g(scan.x_stop)
    return RuleEvaluation(
        payoff=Estimate.of(payoff),
        tau=Estimate.of(t_stop),
        discounted_time=Estimate.of(disc_time),
        unstopped_fraction=float(1.0 - scan.entered.mean()),
        per_path_payoff=payoff,
        per_path_tau=t_stop,
        stopped=scan.entered,
    )


@dataclass(frozen=True)
class MartingaleCheck:
    """E[Z_t] along checkpoints, with paired increments between neighbours."""

    checkpoints: np.ndarray
    estimates: tuple
    increments: tuple          # Estimate of Z_{t_k} - Z_{t_(k-1)}, paired per path
    start_value: float         # Z_0 = w(x0)

    @property
    def nonincreasing(self) -> bool:
        """No increment is significantly positive at one-sided 99%."""
        return all(e.mean - Z99_ONE_SIDED * e.stderr <= 0.0 for e in self.increments)

    @property
    def constant(self) -> bool:
        """Every checkpoint's 99% CI covers the starting value."""
        return all(e.ci[0] <= self.start_value <= e.ci[1] for e in self.estimates)

    def rows(self):
        for t, e in zip(self.checkpoints, self.estimates):
            lo, hi = e.ci
            yield float(t), e.mean, lo, hi


def supermartingale_check(
    ens: PathEnsemble,
    rewards: RewardSpec,
    grid: Grid,
    w,
    checkpoints: Sequence[float],
    *,
    stop_rule: Optional[StoppingRule] = None,
) -> MartingaleCheck:
    """Estimate E[Z_t], Z_t = int_0^t e^-alpha f ds + e^-alpha_t w(X_t).

    With ``stop_rule`` the process is frozen at the rule's entry time,
    giving Z_{t ^ tau}.  ``w`` is interpolated linearly between nodes.
    """
    w = grid.check(w, "w")
    checkpoints = np.asarray(checkpoints, dtype=float)
    steps = [ens.step_of(t) for t in checkpoints]
    rule = stop_rule or StoppingRule.never()
    n, dt = ens.n, ens.dt
    T_end = float(checkpoints[-1])

    integral = np.zeros(n)
    z = np.empty((n, len(steps)))
    frozen = np.full(n, np.nan)
    done = np.zeros(n, dtype=bool)
    for blk in ens.blocks(until=T_end):
        k = blk.x.shape[1]
        disc = np.exp(-blk.alpha)
        inc = disc * rewards.f(blk.x) * dt
        running = integral[:, None] + np.cumsum(inc, axis=1) - inc
        zz = running + disc * grid.interp(w, blk.x)
        if not rule.empty:
            inside = rule.contains(blk.x) & ~done[:, None]
            any_in = inside.any(axis=1)
            first = inside.argmax(axis=1)
            rows = np.flatnonzero(any_in)
            frozen[rows] = zz[rows, first[rows]]
            after = np.arange(k)[None, :] >= first[:, None]
            zz = np.where(any_in[:, None] & after, frozen[:, None], zz)
            zz = np.where(done[:, None], frozen[:, None], zz)
            done |= any_in
        for c, s in enumerate(steps):
            j = s - blk.start
            if 0 <= j < k:
                z[:, c] = zz[:, j]
        integral += inc.sum(axis=1)

    start = float(grid.interp(w, ens.x0))
    prev = np.full(n, start)
    increments = []
    for c in range(len(steps)):
        increments.append(Estimate.of(z[:, c] - prev))
        prev = z[:, c]
    return MartingaleCheck(
        checkpoints,
        tuple(Estimate.of(z[:, c]) for c in range(len(steps))),
        tuple(increments),
        start,
    )
