"""Batch front-end: ``ergostop {solve,potential,verify,simulate,report}``.

Each run writes CSV artifacts plus ``<command>.manifest.json`` into the
output directory.  Every CSV starts with a ``# manifest-sha256: <hash>``
line naming the run that produced it; the hash covers the command and the
fully resolved configuration, so identical inputs give byte-identical
output directories.

Exit codes: 0 success, 1 runtime error, 2 configuration error,
3 diverged (value is infinite), 4 not converged, 5 verification failed.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .config import RunConfig, canonical_json, load
from .errors import ConfigError, ErgostopError, NotApplicableError, ParameterError
from .models import Grid, RewardSpec, ergodicity_profile, mu_integral, stationary_density
from .potential import (
    sample,
    solve_discounted_potential,
    solve_resolvent,
    solve_zero_potential,
    verify_c_assumptions,
)
from .simulator import (
    evaluate_rule,
    large_deviation_estimate,
    simulate,
    supermartingale_check,
    time_average,
)
from .stopping import (
    CONVERGED,
    DIVERGED,
    ValueSurface,
    gamma_and_M,
    solve_infinite_horizon,
    stopping_rule,
)
from .verification import TimeSpec, bellman_inequality_check, perturb, vi_residual

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_NONCONVERGED = 4
EXIT_VERIFY = 5

log = logging.getLogger("ergostop")


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


class Run:
    """Output directory of one command invocation."""

    def __init__(self, command: str, cfg: RunConfig, out: Path, quiet: bool):
        self.command = command
        self.cfg = cfg
        self.out = out
        self.quiet = quiet
        self.manifest = {
            "command": command,
            "version": __version__,
            "config": cfg.resolved(),
        }
        self.hash = hashlib.sha256(canonical_json(self.manifest).encode()).hexdigest()
        self.files = {}
        self.lines = []
        out.mkdir(parents=True, exist_ok=True)

    def _write(self, name: str, text: str):
        data = text.encode()
        (self.out / name).write_bytes(data)
        self.files[name] = hashlib.sha256(data).hexdigest()

    def csv(self, name: str, header, rows):
        buf = io.StringIO()
        buf.write(f"# manifest-sha256: {self.hash}\r\n")
        writer = csv.writer(buf)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])
        self._write(name, buf.getvalue())

    def say(self, line: str = ""):
        self.lines.append(line)
        if not self.quiet:
            print(line)

    def close(self, status: str, code: int) -> int:
        self.say(f"status: {status} (exit {code})")
        self._write(
            f"{self.command}.report.txt",
            f"# manifest-sha256: {self.hash}\n" + "\n".join(self.lines) + "\n",
        )
        manifest = dict(self.manifest, hash=self.hash, status=status, exit_code=code, artifacts=dict(sorted(self.files.items())))
        (self.out / f"{self.command}.manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return code


def _status_code(status: str) -> int:
    if status == CONVERGED:
        return EXIT_OK
    return EXIT_DIVERGED if status == DIVERGED else EXIT_NONCONVERGED


def _solve(run: Run):
    cfg = run.cfg
    model, grid, rewards = cfg.model(), cfg.grid(), cfg.rewards()
    surface = solve_infinite_horizon(model, grid, rewards, cfg.solver)
    return model, grid, rewards, surface


def _surface_from_csv(path: Path, grid: Grid, rewards: RewardSpec) -> ValueSurface:
    rows = [r for r in csv.reader(path.read_text().splitlines()) if r and not r[0].startswith("#")]
    if rows[0][:2] != ["x", "w"]:
        raise ConfigError(f"{path}: expected a value CSV with header x,w,g,mask")
    data = np.array([[float(v) for v in r[:2]] for r in rows[1:]])
    if len(data) != grid.n_nodes or not np.allclose(data[:, 0], grid.x, atol=1e-9 * max(1.0, abs(grid.x_hi))):
        raise ConfigError(f"{path}: grid does not match the configured grid")
    return ValueSurface(grid, data[:, 1], rewards.g(grid.x), math.nan)


# -- commands --------------------------------------------------------------------

def cmd_solve(run: Run) -> int:
    cfg = run.cfg
    model, grid, rewards, surface = _solve(run)
    run.csv("value.csv", ["x", "w", "g", "mask"], zip(grid.x, surface.w, surface.g, surface.mask))
    run.csv("convergence.csv", ["T", "cauchy_diff"], ((T, d) for T, d, _ in surface.history))
    run.csv("growth.csv", ["T", "w_ref"], ((T, v) for T, _, v in surface.history))
    run.say(f"model: {model.label}; grid: {grid.n_nodes} nodes on [{grid.x_lo:g}, {grid.x_hi:g}]")
    run.say(f"rewards: f = {cfg.f}; g = {cfg.g}; r = {cfg.r}")
    run.say(f"regime: {surface.regime}")
    run.say(f"horizon reached: T = {surface.T_final:g}")
    x0 = cfg.simulation.x0
    run.say(f"w({x0:g}) = {surface.value_at(x0):.6g}")
    if surface.growth_slope is not None:
        run.say(f"fitted slope of w_T(x_ref) against T: {surface.growth_slope:.4g}")
    if surface.decay_rate is not None:
        run.say(f"fitted decay rate of Cauchy differences: {surface.decay_rate:.4g}")
    if surface.converged:
        interior = int(surface.mask[1:-1].sum())
        run.say(f"interior stopping nodes: {interior}; free-boundary brackets: {surface.free_boundary()}")
        run.say(f"policy-iteration sweeps: {surface.polish_iterations}")
        try:
            cert = _certificate(model, grid, rewards, cfg)
        except (NotApplicableError, ParameterError) as exc:
            run.say(f"bound certificate: not applicable ({exc})")
        else:
            run.csv("bound.csv", ["x", "gamma", "M"], zip(grid.x, cert.gamma, cert.M))
            run.say(f"bound certificate: d = {cert.d:.4g}, routes {cert.source}, M({x0:g}) = {cert.at(x0):.5g}")
    return run.close(surface.status, _status_code(surface.status))


def _certificate(model, grid, rewards, cfg):
    s = rewards.on(grid)
    measure = stationary_density(model, grid)
    potential = solve_discounted_potential(model, grid, s.f, s.r, measure)
    return gamma_and_M(model, grid, rewards, None, cfg.solver, potential)


def cmd_potential(run: Run) -> int:
    cfg = run.cfg
    model, grid, rewards = cfg.model(), cfg.grid(), cfg.rewards()
    s = rewards.on(grid)
    measure = stationary_density(model, grid)
    run.csv("density.csv", ["x", "value"], zip(grid.x, measure.density))
    zero = solve_zero_potential(model, grid, s.f, measure)
    run.csv("q.csv", ["x", "value"], zip(grid.x, zero.values))
    run.say(f"mu(f) = {zero.mu_f:.6g}; Poisson residual {zero.residual:.3g}")
    for alpha in cfg.verify.alphas:
        qa = solve_resolvent(model, grid, s.f, measure, alpha)
        run.csv(f"q_alpha_{alpha:g}.csv", ["x", "value"], zip(grid.x, qa.values))
        run.say(f"resolvent alpha = {alpha:g}: residual {qa.residual:.3g}")
    main = zero
    if not s.undiscounted:
        main = solve_discounted_potential(model, grid, s.f, s.r, measure)
        run.csv("q_r.csv", ["x", "value"], zip(grid.x, main.values))
        run.say(f"discounted potential ({main.kind}): residual {main.residual:.3g}")

    sim = cfg.simulation
    times = tuple(t for t in sim.checkpoints if t <= sim.T)
    ens = simulate(model, rewards, sim.x0, max(times), sim.dt, sim.n, sim.seed)
    report = verify_c_assumptions(main, model, rewards, ens, sigma_times=times)
    for line in report.lines():
        run.say(line)
    return run.close("ok", EXIT_OK)


def cmd_verify(run: Run, surface_path: Optional[Path]) -> int:
    cfg = run.cfg
    model, grid, rewards = cfg.model(), cfg.grid(), cfg.rewards()
    if surface_path is not None:
        surface = _surface_from_csv(surface_path, grid, rewards)
        run.say(f"surface: {surface_path}")
    else:
        surface = solve_infinite_horizon(model, grid, rewards, cfg.solver)
        if not surface.converged:
            run.say(f"solver status {surface.status}: nothing to verify")
            return run.close(surface.status, _status_code(surface.status))
    ok = True

    tol_c = cfg.verify.tol_c or 10.0 * cfg.solver.tol_w
    vi = vi_residual(model, grid, rewards, surface.w, tol_c)
    run.csv("complementarity.csv", ["x", "rho", "delta", "class"], vi.rows())
    run.say(f"complementarity at tol_c = {tol_c:g}: {'PASS' if vi.passed else 'FAIL'} "
            f"(continuation {vi.worst_continuation:.3g}, stopping {vi.worst_stopping:.3g}, band {vi.worst_band:.3g})")
    ok &= vi.passed

    sim = cfg.simulation
    x0 = sim.x0
    center = cfg.verify.bump_center
    if center is None:
        cont = np.flatnonzero(~surface.mask)
        center = float(grid.x[cont[np.argmin(np.abs(grid.x[cont] - x0))]]) if cont.size else None
    if center is not None:
        bad = vi_residual(model, grid, rewards, perturb(surface, center), tol_c)
        run.say(f"fault injection (tent at x = {center:g}): {'FAIL as expected' if not bad.passed else 'unexpected PASS'}")
        ok &= not bad.passed

    rule = stopping_rule(surface, 0.0)
    checkpoints = tuple(t for t in sim.checkpoints if t <= sim.T)
    ens = simulate(model, rewards, x0, sim.T, sim.dt, sim.n, sim.seed)
    sup = supermartingale_check(ens, rewards, grid, surface.w, checkpoints)
    run.csv("supermartingale.csv", ["t", "mean", "ci_lo", "ci_hi"], sup.rows())
    run.say(f"E[Z_t] nonincreasing (one-sided 99%): {'PASS' if sup.nonincreasing else 'FAIL'}")
    ok &= sup.nonincreasing
    mart = supermartingale_check(ens, rewards, grid, surface.w, checkpoints, stop_rule=rule)
    run.csv("martingale_stopped.csv", ["t", "mean", "ci_lo", "ci_hi"], mart.rows())
    run.say(f"E[Z_(t ^ tau*)] constant at w(x0) = {mart.start_value:.5g}: {'PASS' if mart.constant else 'FAIL'}")
    ok &= mart.constant

    t1, t2 = checkpoints[0], checkpoints[-1]
    pairs = [
        (TimeSpec.fixed(t1), TimeSpec.fixed(t2)),
        (TimeSpec.fixed(t2), TimeSpec.fixed(t1)),
        (TimeSpec.fixed(t1), TimeSpec.entry(rule, t2)),
        (TimeSpec.entry(rule, t1), TimeSpec.fixed(t2)),
        (TimeSpec.zero(), TimeSpec.entry(rule, t2)),
    ]
    bell = bellman_inequality_check(grid, rewards, surface.w, ens, pairs)
    rows = []
    for p in bell.pairs:
        lo, hi = p.gap.ci
        rows.append((p.sigma, p.tau, p.left.mean, p.right.mean, p.gap.mean, lo, hi, p.passed))
    run.csv("bellman.csv", ["sigma", "tau", "left", "right", "gap", "gap_lo", "gap_hi", "passed"], rows)
    run.say(f"Bellman inequality over {len(rows)} pairs: {'PASS' if bell.passed else 'FAIL'}")
    ok &= bell.passed
    return run.close("verified" if ok else "verification-failed", EXIT_OK if ok else EXIT_VERIFY)


def cmd_simulate(run: Run) -> int:
    cfg = run.cfg
    sim = cfg.simulation
    model, grid, rewards = cfg.model(), cfg.grid(), cfg.rewards()
    from . import expr

    phi = expr.parse(sim.lln_phi)
    measure = stationary_density(model, grid)
    mu_phi = mu_integral(measure, sample(grid, phi))

    ens = simulate(model, rewards, sim.x0, max(sim.lln_times), sim.dt, sim.lln_paths, sim.seed)
    avg = time_average(ens, phi, sim.lln_times)
    run.csv("lln.csv", ["t", "mean", "ci_lo", "ci_hi"], avg.rows())
    last = avg.estimates[-1]
    run.say(f"time average of {sim.lln_phi} at t = {sim.lln_times[-1]:g}: {last.mean:.4g} +- {last.half_width:.3g} "
            f"(mu = {mu_phi:.4g})")

    target = mu_phi if sim.ld_target is None else sim.ld_target
    table = large_deviation_estimate(
        model, rewards, phi, target, sim.ld_eps, sim.x0, sim.ld_times, sim.n, sim.seed + 1, dt=sim.dt,
    )
    run.csv("large_deviations.csv", ["t", "freq"], table.rows())
    rate = "unresolved" if table.rate is None else f"{table.rate:.4g}"
    run.say(f"exceedance of |avg - {target:.4g}| > {sim.ld_eps:g}: fitted rate {rate}; "
            f"CI-separated decrease: {table.ci_separated_decrease}")

    prof = ergodicity_profile(model, grid, sim.tv_starts, sim.tv_times, n_samples=sim.n, dt=sim.dt, seed=sim.seed + 2)
    run.csv("tv_profile.csv", ["t", "x", "tv"], prof.rows())
    run.say(f"TV envelope ({prof.method}): rate {prof.rate:.4g}, min R^2 {prof.fit_quality:.4f}")

    surface = solve_infinite_horizon(model, grid, rewards, cfg.solver)
    if surface.converged:
        ens = simulate(model, rewards, sim.x0, sim.T, sim.dt, sim.n, sim.seed + 3)
        w0 = surface.value_at(sim.x0)
        rows = []
        for eps in (0.0,) + tuple(sim.rule_eps):
            ev = evaluate_rule(ens, rewards, stopping_rule(surface, eps), sim.T)
            lo, hi = ev.payoff.ci
            tlo, thi = ev.tau.ci
            rows.append((eps, w0, ev.payoff.mean, lo, hi, ev.tau.mean, tlo, thi, ev.unstopped_fraction))
            run.say(f"rule eps = {eps:g}: payoff {ev.payoff.mean:.5g} [{lo:.5g}, {hi:.5g}] vs w = {w0:.5g}; "
                    f"E[tau ^ T] = {ev.tau.mean:.4g}")
        run.csv("rule_evaluation.csv",
                ["eps", "w_x0", "payoff", "ci_lo", "ci_hi", "tau", "tau_lo", "tau_hi", "unstopped"], rows)
    else:
        run.say(f"solver status {surface.status}: rule evaluation skipped")
    return run.close("ok", EXIT_OK)


def cmd_report(out: Path, quiet: bool) -> int:
    manifests = sorted(out.glob("*.manifest.json"))
    if not manifests:
        raise ConfigError(f"no manifests in {out}")
    worst = EXIT_OK
    for path in manifests:
        m = json.loads(path.read_text())
        if not quiet:
            print(f"== {m['command']} [{m['hash'][:12]}] status {m['status']} (exit {m['exit_code']})")
            report = out / f"{m['command']}.report.txt"
            if report.exists():
                for line in report.read_text().splitlines()[1:]:
                    print(f"   {line}")
            for name, digest in m["artifacts"].items():
                data = (out / name).read_bytes() if (out / name).exists() else None
                state = "ok" if data is not None and hashlib.sha256(data).hexdigest() == digest else "MODIFIED"
                print(f"   artifact {name}: {state}")
        worst = max(worst, m["exit_code"])
    return worst


# -- entry point ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ergostop", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for name, helptext in [
        ("solve", "value function, convergence history and bound certificate"),
        ("potential", "zero, resolvent and discounted potentials with assumption checks"),
        ("verify", "complementarity, supermartingale and Bellman checks"),
        ("simulate", "law of large numbers, large deviations, TV profile and rule evaluation"),
        ("report", "summarise the manifests in an output directory"),
    ]:
        sp_ = sub.add_parser(name, help=helptext)
        sp_.add_argument("--config", required=name != "report", help="config file or bundled name")
        sp_.add_argument("--out", help="output directory (overrides [output] dir)")
        sp_.add_argument("--seed", type=int, help="simulation seed (overrides [simulation] seed)")
        sp_.add_argument("--quiet", action="store_true", help="suppress the printed report")
        if name == "verify":
            sp_.add_argument("--surface", help="value CSV written by 'solve' (default: solve afresh)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        if args.command == "report":
            if args.out is None and args.config is None:
                raise ConfigError("report needs --out or --config")
            out = Path(args.out) if args.out else Path(load(args.config).output)
            return cmd_report(out, args.quiet)
        cfg = load(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        out = Path(args.out or cfg.output)
        run = Run(args.command, cfg, out, args.quiet)
        if args.command == "solve":
            return cmd_solve(run)
        if args.command == "potential":
            return cmd_potential(run)
        if args.command == "verify":
            return cmd_verify(run, Path(args.surface) if args.surface else None)
        return cmd_simulate(run)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ErgostopError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
