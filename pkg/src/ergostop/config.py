"""Run configuration: INI files with expressions for drift, volatility and rewards.

A complete file looks like::

    [model]
    name = ou            ; or: drift = x - x^3 / volatility = 1
    theta = 1
    sigma = 1.4142135623730951

    [grid]
    x_lo = -8
    x_hi = 8
    n = 801              ; or: dx = 0.02

    [rewards]
    f = 0
    g = arctan(x)
    r = 0

    [solver]
    tol_w = 1e-4

    [simulation]
    dt = 1e-3
    n = 10000
    T = 60
    seed = 0

Unknown sections or keys are rejected so typos cannot silently fall back to
defaults.  ``resolved()`` returns every parameter after defaults are filled
in; its canonical JSON hash identifies a run.
"""

from __future__ import annotations

import configparser
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

from . import expr
from .errors import ConfigError
from .models import BUNDLED_MODELS, DiffusionModel, Grid, RewardSpec
from .stopping import SolverConfig

BUNDLED_DIR = Path(__file__).parent / "bundled"

_MODEL_PARAMS = {
    "ou": {"theta": 1.0, "m": 0.0, "sigma": math.sqrt(2.0)},
    "double-well": {"sigma": 1.0},
}


@dataclass(frozen=True)
class SimulationConfig:
    dt: float = 1e-2
    n: int = 10_000
    T: float = 60.0
    seed: int = 0
    x0: float = 0.0
    lln_phi: str = "tanh(x)"
    lln_times: tuple = (10.0, 100.0, 1000.0)
    lln_paths: int = 100
    ld_target: Optional[float] = None   # default: mu(phi)
    ld_eps: float = 0.1
    ld_times: tuple = (5.0, 10.0, 20.0, 40.0)
    tv_starts: tuple = (1.0, 2.0, 3.0)
    tv_times: tuple = (1.0, 2.0, 3.0, 4.0, 5.0, 6.0)
    rule_eps: tuple = (0.05, 0.1, 0.2)
    checkpoints: tuple = (1.0, 2.0, 5.0, 10.0)


@dataclass(frozen=True)
class VerifyConfig:
    tol_c: Optional[float] = None      # default 10 * tol_w
    bump_center: Optional[float] = None  # fault-injection tent; default: first continuation node near x0
    alphas: tuple = (0.5, 0.1)         # resolvent rates for the potential command
    eps: Optional[float] = None        # dichotomy slack; default mu(r)/2


@dataclass(frozen=True)
class RunConfig:
    model_name: str
    model_params: dict
    drift: Optional[str]
    volatility: Optional[str]
    x_lo: float
    x_hi: float
    n_nodes: int
    f: str
    g: str
    r: str
    solver: SolverConfig = SolverConfig()
    simulation: SimulationConfig = SimulationConfig()
    verify: VerifyConfig = VerifyConfig()
    output: str = "out"
    source: str = field(default="", compare=False)

    # -- derived objects -------------------------------------------------
    def model(self) -> DiffusionModel:
        if self.model_name in BUNDLED_MODELS:
            return BUNDLED_MODELS[self.model_name](x_lo=self.x_lo, x_hi=self.x_hi, **self.model_params)
        return DiffusionModel(
            drift=expr.parse(self.drift),
            volatility=expr.parse(self.volatility),
            x_lo=self.x_lo,
            x_hi=self.x_hi,
            label=self.model_name,
        )

    def grid(self) -> Grid:
        return Grid(self.x_lo, self.x_hi, self.n_nodes)

    def rewards(self) -> RewardSpec:
        return RewardSpec.from_strings(self.f, self.g, self.r)

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, simulation=replace(self.simulation, seed=int(seed)))

    def resolved(self) -> dict:
        return {
            "model": {
                "name": self.model_name,
                **({"drift": self.drift, "volatility": self.volatility} if self.drift else {}),
                **self.model_params,
            },
            "grid": {"x_lo": self.x_lo, "x_hi": self.x_hi, "n": self.n_nodes},
            "rewards": {"f": self.f, "g": self.g, "r": self.r},
            "solver": _plain(asdict(self.solver)),
            "simulation": _plain(asdict(self.simulation)),
            "verify": _plain(asdict(self.verify)),
            "output": {"dir": self.output},
        }

    def digest(self) -> str:
        return hashlib.sha256(canonical_json(self.resolved()).encode()).hexdigest()


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _plain(d: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


# -- parsing ------------------------------------------------------------------

_SECTIONS = {"model", "grid", "rewards", "solver", "simulation", "verify", "output"}


def _number(section, key, raw, kind=float):
    try:
        value = kind(raw)
    except ValueError:
        raise ConfigError(f"[{section}] {key}: expected {kind.__name__}, got {raw!r}") from None
    if kind is float and not math.isfinite(value):
        raise ConfigError(f"[{section}] {key}: must be finite, got {raw!r}")
    return value


def _tuple(section, key, raw):
    parts = [p for p in raw.replace(",", " ").split() if p]
    if not parts:
        raise ConfigError(f"[{section}] {key}: empty list")
    return tuple(_number(section, key, p) for p in parts)


def _expression(section, key, raw):
    try:
        expr.parse(raw)
    except ConfigError as exc:
        raise ConfigError(f"[{section}] {key}: {exc}", getattr(exc, "position", None)) from None
    return raw.strip()


def _take(parser, section, converters):
    """Read ``section`` with ``converters``; reject unknown keys."""
    if not parser.has_section(section):
        return {}
    items = dict(parser.items(section))
    unknown = set(items) - set(converters)
    if unknown:
        raise ConfigError(f"[{section}]: unknown key(s) {', '.join(sorted(unknown))}")
    return {k: conv(section, k, items[k]) for k, conv in converters.items() if k in items}


def _str(section, key, raw):
    return raw.strip()


def _bool(section, key, raw):
    v = raw.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"[{section}] {key}: expected a boolean, got {raw!r}")


def _int(section, key, raw):
    return _number(section, key, raw, int)


def loads(text: str, source: str = "<string>") -> RunConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"), interpolation=None)
    parser.optionxform = str.lower
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    extra = set(parser.sections()) - _SECTIONS
    if extra:
        raise ConfigError(f"unknown section(s) {', '.join(sorted(extra))}")

    # model
    if not parser.has_section("model"):
        raise ConfigError("missing [model] section")
    raw_model = dict(parser.items("model"))
    name = raw_model.pop("name", "").strip()
    drift = raw_model.pop("drift", None)
    vol = raw_model.pop("volatility", None)
    if name in BUNDLED_MODELS:
        if drift is not None or vol is not None:
            raise ConfigError(f"[model]: bundled model {name!r} takes no drift/volatility expressions")
        allowed = _MODEL_PARAMS[name]
        unknown = set(raw_model) - set(allowed)
        if unknown:
            raise ConfigError(f"[model]: unknown parameter(s) for {name!r}: {', '.join(sorted(unknown))}")
        params = dict(allowed)
        params.update({k: _number("model", k, v) for k, v in raw_model.items()})
    else:
        if drift is None or vol is None:
            raise ConfigError(
                f"[model]: name {name!r} is not bundled ({', '.join(BUNDLED_MODELS)}); "
                "give drift and volatility expressions"
            )
        if raw_model:
            raise ConfigError(f"[model]: unknown key(s) {', '.join(sorted(raw_model))}")
        drift = _expression("model", "drift", drift)
        vol = _expression("model", "volatility", vol)
        params = {}
        name = name or "custom"

    # grid
    g = _take(parser, "grid", {"x_lo": _number, "x_hi": _number, "n": _int, "dx": _number})
    if "x_lo" not in g or "x_hi" not in g:
        raise ConfigError("[grid]: x_lo and x_hi are required")
    if not g["x_hi"] > g["x_lo"]:
        raise ConfigError("[grid]: need x_hi > x_lo")
    if ("n" in g) == ("dx" in g):
        raise ConfigError("[grid]: give exactly one of n and dx")
    if "dx" in g:
        if g["dx"] <= 0:
            raise ConfigError("[grid] dx: must be positive")
        n_nodes = int(round((g["x_hi"] - g["x_lo"]) / g["dx"])) + 1
    else:
        n_nodes = g["n"]
    if n_nodes < 3:
        raise ConfigError("[grid]: need at least 3 nodes")

    # rewards
    rw = _take(parser, "rewards", {"f": _expression, "g": _expression, "r": _expression})
    if "f" not in rw or "g" not in rw:
        raise ConfigError("[rewards]: f and g are required")

    s = _take(parser, "solver", {
        "dt": _number, "dt_horizon": _number, "tol_w": _number, "t_max": _number,
        "window": _tuple, "x_ref": _number, "polish": _bool, "max_polish": _int,
    })
    renames = {"dt_horizon": "dT", "t_max": "T_max"}
    s = {renames.get(k, k): v for k, v in s.items()}
    if "window" in s and len(s["window"]) != 2:
        raise ConfigError("[solver] window: expected two numbers")
    solver = SolverConfig(**s)

    sim = _take(parser, "simulation", {
        "dt": _number, "n": _int, "t": _number, "seed": _int, "x0": _number,
        "lln_phi": _expression, "lln_times": _tuple, "lln_paths": _int,
        "ld_target": _number, "ld_eps": _number, "ld_times": _tuple,
        "tv_starts": _tuple, "tv_times": _tuple, "rule_eps": _tuple, "checkpoints": _tuple,
    })
    if "t" in sim:
        sim["T"] = sim.pop("t")
    simulation = SimulationConfig(**sim)
    if simulation.dt <= 0 or simulation.n < 1 or simulation.T <= 0:
        raise ConfigError("[simulation]: need dt > 0, n >= 1 and T > 0")

    ver = VerifyConfig(**_take(parser, "verify", {
        "tol_c": _number, "bump_center": _number, "alphas": _tuple, "eps": _number,
    }))
    out = _take(parser, "output", {"dir": _str})

    return RunConfig(
        model_name=name,
        model_params=params,
        drift=drift,
        volatility=vol,
        x_lo=g["x_lo"],
        x_hi=g["x_hi"],
        n_nodes=n_nodes,
        f=rw["f"],
        g=rw["g"],
        r=rw.get("r", "0"),
        solver=solver,
        simulation=simulation,
        verify=ver,
        output=out.get("dir", "out"),
        source=source,
    )


def load(path) -> RunConfig:
    """Load a config file; a bare name such as ``arctan`` resolves to a bundled config."""
    p = Path(path)
    if not p.exists():
        bundled = BUNDLED_DIR / (p.name if p.suffix == ".cfg" else p.name + ".cfg")
        if bundled.exists():
            p = bundled
        else:
            raise ConfigError(f"config file not found: {path}")
    return loads(p.read_text(), str(p))


def bundled_configs() -> dict:
    return {p.stem: p for p in sorted(BUNDLED_DIR.glob("*.cfg"))}
