"""Scenario configurations: builtins, YAML loading and validation.

A configuration is a plain mapping::

    name: elliptic-bump
    seed: 0
    field: {builtin: elliptic-bump, params: {amplitude: 1.0}}
    lower_order:
      b1: {kind: gaussian, amplitude: ["0.2+0.1j", 0], width: 1.0}
    grid: {n: 2, L: 10.0, N: 64}
    evolution: {T: 1.0, dt: null, stride: 1}
    initial: {kind: packet, lambda: 4.0}
    experiments: [trace, evolve]
    blocks: {trace: {s_max: 20.0}}

Complex numbers may be written as strings ("1j", "0.2+0.1j").
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import coeffields as cf
from .evolve import LinearOperatorSpec, knapp_packet, wave_packet
from .nlsolve import NonlinearProblem, model_nonlinearity
from .quantize import BoxGrid, GridField
from .symbols import Symbol

__all__ = [
    "ScenarioConfig", "ConfigError", "FIELD_BUILTINS", "SCENARIOS", "EXPERIMENTS", "builtin",
    "load_config", "validate", "from_mapping", "build_field", "build_grid", "build_spec",
    "build_problem", "build_u0", "make_rng",
]

EXPERIMENTS = ("trace", "symbol", "smooth", "evolve", "nonlinear", "verify", "mizohata", "quarter-gain")
TOP_KEYS = {"name", "seed", "field", "lower_order", "grid", "evolution", "initial", "experiments", "blocks"}


class ConfigError(ValueError):
    """Validation failure; ``errors`` is a list of {"path", "message"} records."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(f"{e['path']}: {e['message']}" for e in self.errors))


@dataclass
class ScenarioConfig:
    name: str
    field: dict
    grid: dict
    lower_order: dict = field(default_factory=dict)
    evolution: dict = field(default_factory=lambda: {"T": 1.0, "dt": None, "stride": 1})
    initial: dict = field(default_factory=lambda: {"kind": "packet", "lambda": 4.0})
    experiments: list = field(default_factory=list)
    blocks: dict = field(default_factory=dict)
    seed: int = 0

    def to_mapping(self) -> dict:
        return copy.deepcopy(asdict(self))

    def fingerprint(self) -> str:
        text = json.dumps(self.to_mapping(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()

    def with_experiments(self, experiments) -> "ScenarioConfig":
        out = copy.deepcopy(self)
        out.experiments = list(experiments)
        return out


# ---------------------------------------------------------------- builtins

def _constant(n, a0=None, name="constant"):
    return cf.constant_field(np.eye(n) if a0 is None else np.asarray(a0, float), name=name)


FIELD_BUILTINS = {
    "elliptic-bump": lambda n, **kw: cf.elliptic_bump(n, **kw),
    "ultrahyperbolic-bump": lambda n, **kw: cf.ultrahyperbolic_bump(n, **kw),
    "trapped-gallery": lambda n, **kw: cf.trapped_gallery(n, **kw),
    "compact-bump": lambda n, **kw: cf.compact_bump(n, **kw),
    "constant": lambda n, matrix=None: _constant(n, matrix),
}

SCENARIOS = {
    "elliptic-bump": {
        "field": {"builtin": "elliptic-bump"},
        "lower_order": {"b1": {"kind": "gaussian", "amplitude": [0.5, 0.25], "width": 1.0}},
        "grid": {"n": 2, "L": 5.0, "N": 128},
        "evolution": {"T": 0.375, "dt": None, "stride": 4},
        "initial": {"kind": "packet", "lambda": 4.0},
        "experiments": ["trace", "evolve"],
    },
    "ultrahyperbolic-bump": {
        "field": {"builtin": "ultrahyperbolic-bump"},
        "lower_order": {"b1": {"kind": "gaussian", "amplitude": [0.5, 0.25], "width": 1.0}},
        "grid": {"n": 2, "L": 5.0, "N": 128},
        "evolution": {"T": 0.375, "dt": None, "stride": 4},
        "initial": {"kind": "packet", "lambda": 4.0},
        "experiments": ["trace", "evolve"],
    },
    "trapped-gallery": {
        "field": {"builtin": "trapped-gallery"},
        "grid": {"n": 2, "L": 10.0, "N": 64},
        "experiments": ["trace"],
        "blocks": {"trace": {"probe_s_max": 60.0}},
    },
    "mizohata-constant": {
        "field": {"builtin": "constant"},
        "lower_order": {"b1": {"kind": "constant", "value": ["1j", 0]}},
        "grid": {"n": 2, "L": 10.0, "N": 256},
        "experiments": ["mizohata"],
        "blocks": {"mizohata": {"lambdas": [8.0, 16.0, 32.0], "T": 0.5}},
    },
    "quarter-gain": {
        "field": {"builtin": "constant", "params": {"matrix": [[0.0, 0.5], [0.5, 0.0]]}},
        "lower_order": {"b2": {"kind": "constant", "value": ["1j", 0]}},
        "grid": {"n": 2, "L": 40.0, "N": 1024},
        "experiments": ["quarter-gain"],
        "blocks": {"quarter-gain": {"variants": ["ultrahyperbolic", "elliptic"],
                                    "lambdas": [4.0, 8.0, 16.0, 32.0], "T": 0.5}},
    },
    "model-nls": {
        "field": {"builtin": "elliptic-bump"},
        "lower_order": {"b1": {"kind": "gaussian", "amplitude": ["0.2+0.1j", 0], "width": 1.0}},
        "grid": {"n": 2, "L": 10.0, "N": 64},
        "evolution": {"T": 1.0, "dt": None, "stride": 1},
        "initial": {"kind": "gaussian", "width": 1.4142135623730951, "norm": 0.1},
        "experiments": ["nonlinear"],
    },
}
SCENARIOS["mizohata-blowup"] = SCENARIOS["mizohata-constant"]


def builtin(name: str, seed: int = 0) -> ScenarioConfig:
    if name not in SCENARIOS:
        raise ConfigError([{"path": "name", "message": f"unknown builtin scenario {name!r}"}])
    data = copy.deepcopy(SCENARIOS[name])
    data.update(name=name, seed=seed)
    return from_mapping(data)


# ---------------------------------------------------------------- validation

def _err(errors, path, message):
    errors.append({"path": path, "message": message})


def _is_number(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def parse_complex(v) -> complex:
    if isinstance(v, bool):
        raise ValueError("booleans are not numbers")
    if isinstance(v, (int, float, complex)):
        return complex(v)
    if isinstance(v, str):
        return complex(v.replace(" ", ""))
    raise ValueError(f"cannot read {v!r} as a complex number")


def _check_descriptor(errors, path, d, n, vector):
    if not isinstance(d, dict):
        _err(errors, path, "descriptor must be a mapping")
        return
    kind = d.get("kind")
    if kind not in ("gaussian", "constant"):
        _err(errors, path + ".kind", "kind must be 'gaussian' or 'constant'")
        return
    key = "amplitude" if kind == "gaussian" else "value"
    if key not in d:
        _err(errors, f"{path}.{key}", "missing")
        return
    vals = d[key]
    if vector:
        if not isinstance(vals, list) or len(vals) != n:
            _err(errors, f"{path}.{key}", f"expected a list of {n} numbers")
            return
    else:
        vals = [vals]
    for i, v in enumerate(vals):
        try:
            parse_complex(v)
        except ValueError as exc:
            _err(errors, f"{path}.{key}[{i}]", str(exc))
    if kind == "gaussian":
        w = d.get("width", 1.0)
        if not _is_number(w) or w <= 0:
            _err(errors, path + ".width", "width must be a positive number")
        c = d.get("center")
        if c is not None and (not isinstance(c, list) or len(c) != n or not all(map(_is_number, c))):
            _err(errors, path + ".center", f"center must be a list of {n} numbers")


def validate(data) -> list:
    """All problems found in a raw configuration mapping (empty when valid)."""
    errors: list = []
    if not isinstance(data, dict):
        return [{"path": "", "message": "configuration must be a mapping"}]
    for k in sorted(set(data) - TOP_KEYS):
        _err(errors, k, "unknown key")
    if not isinstance(data.get("name", ""), str):
        _err(errors, "name", "must be a string")
    seed = data.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        _err(errors, "seed", "must be a non-negative integer")
    grid = data.get("grid")
    n = 2
    if not isinstance(grid, dict):
        _err(errors, "grid", "missing grid block")
    else:
        n = grid.get("n")
        if n not in (1, 2, 3):
            _err(errors, "grid.n", "dimension must be 1, 2 or 3")
            n = 2
        N = grid.get("N")
        if not isinstance(N, int) or isinstance(N, bool) or N <= 0 or N % 2:
            _err(errors, "grid.N", "N must be a positive even integer")
        L = grid.get("L")
        if not _is_number(L) or L <= 0:
            _err(errors, "grid.L", "L must be a positive number")
    fld = data.get("field")
    if not isinstance(fld, dict) or "builtin" not in fld:
        _err(errors, "field.builtin", "missing")
    elif fld["builtin"] not in FIELD_BUILTINS:
        _err(errors, "field.builtin", f"unknown builtin {fld['builtin']!r}; "
                                      f"known: {', '.join(sorted(FIELD_BUILTINS))}")
    elif not isinstance(fld.get("params", {}), dict):
        _err(errors, "field.params", "must be a mapping")
    lower = data.get("lower_order", {}) or {}
    if not isinstance(lower, dict):
        _err(errors, "lower_order", "must be a mapping")
    else:
        for k, d in lower.items():
            if k not in ("b1", "b2", "c1", "c2"):
                _err(errors, f"lower_order.{k}", "unknown term (expected b1, b2, c1, c2)")
            elif d is not None:
                _check_descriptor(errors, f"lower_order.{k}", d, n, k in ("b1", "b2"))
    evo = data.get("evolution", {}) or {}
    if not isinstance(evo, dict):
        _err(errors, "evolution", "must be a mapping")
    else:
        T = evo.get("T", 1.0)
        if not _is_number(T) or T <= 0:
            _err(errors, "evolution.T", "T must be positive")
        dt = evo.get("dt")
        if dt is not None and (not _is_number(dt) or dt <= 0):
            _err(errors, "evolution.dt", "dt must be null or positive")
        stride = evo.get("stride", 1)
        if not isinstance(stride, int) or isinstance(stride, bool) or stride < 1:
            _err(errors, "evolution.stride", "stride must be a positive integer")
    init = data.get("initial", {}) or {}
    if isinstance(init, dict) and init.get("kind", "packet") not in ("packet", "knapp", "gaussian"):
        _err(errors, "initial.kind", "kind must be packet, knapp or gaussian")
    exps = data.get("experiments", [])
    if not isinstance(exps, list):
        _err(errors, "experiments", "must be a list")
    else:
        for i, e in enumerate(exps):
            if e not in EXPERIMENTS:
                _err(errors, f"experiments[{i}]", f"unknown experiment {e!r}")
    if not isinstance(data.get("blocks", {}) or {}, dict):
        _err(errors, "blocks", "must be a mapping")
    return errors


def from_mapping(data) -> ScenarioConfig:
    errors = validate(data)
    if errors:
        raise ConfigError(errors)
    d = copy.deepcopy(data)
    evo = {"T": 1.0, "dt": None, "stride": 1}
    evo.update(d.get("evolution") or {})
    return ScenarioConfig(
        name=d.get("name", "scenario"), field=d["field"], grid=d["grid"],
        lower_order=d.get("lower_order") or {}, evolution=evo,
        initial=d.get("initial") or {"kind": "packet", "lambda": 4.0},
        experiments=d.get("experiments", []), blocks=d.get("blocks") or {}, seed=d.get("seed", 0))


def load_config(path) -> ScenarioConfig:
    """Read a YAML (or JSON) configuration; raises ConfigError on any problem."""
    try:
        data = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError([{"path": str(path), "message": str(exc)}]) from exc
    return from_mapping(data)


# ---------------------------------------------------------------- builders

def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Counter-based generator; ``stream`` separates independent probes."""
    return np.random.Generator(np.random.Philox(key=seed, counter=stream))


def build_grid(cfg: ScenarioConfig) -> BoxGrid:
    g = cfg.grid
    return BoxGrid(int(g["n"]), float(g["L"]), int(g["N"]))


def build_field(cfg: ScenarioConfig) -> cf.CoefficientField:
    spec = cfg.field
    return FIELD_BUILTINS[spec["builtin"]](int(cfg.grid["n"]), **(spec.get("params") or {}))


def _profile(d, n):
    """x -> complex values of shape (...,) or (..., n) for a descriptor."""
    if d["kind"] == "constant":
        vals = d["value"]
        vec = isinstance(vals, list)
        v = np.array([parse_complex(a) for a in vals]) if vec else parse_complex(vals)
        if vec:
            return lambda x: np.broadcast_to(v, np.shape(x)[:-1] + (n,)).astype(complex)
        return lambda x: np.full(np.shape(x)[:-1], v, dtype=complex)
    amp = d["amplitude"]
    vec = isinstance(amp, list)
    a = np.array([parse_complex(v) for v in amp]) if vec else parse_complex(amp)
    w2 = float(d.get("width", 1.0)) ** 2
    c = np.zeros(n) if d.get("center") is None else np.asarray(d["center"], float)

    def prof(x):
        g = np.exp(-np.sum((np.asarray(x) - c) ** 2, axis=-1) / w2)
        return g[..., None] * a if vec else g * a

    return prof


def build_spec(cfg: ScenarioConfig) -> LinearOperatorSpec:
    n = int(cfg.grid["n"])
    lo = cfg.lower_order
    terms = {}
    if lo.get("b1"):
        terms["b1"] = Symbol.vector_field(n, _profile(lo["b1"], n))
    if lo.get("b2"):
        terms["b2"] = _profile(lo["b2"], n)
    for k in ("c1", "c2"):
        if lo.get(k):
            terms[k] = Symbol.x_only(n, _profile(lo[k], n))
    return LinearOperatorSpec(build_field(cfg), name=cfg.name, **terms)


def build_problem(cfg: ScenarioConfig) -> NonlinearProblem:
    n = int(cfg.grid["n"])
    return NonlinearProblem(build_spec(cfg), model_nonlinearity(n))


def build_u0(cfg: ScenarioConfig, grid: BoxGrid | None = None, lam: float | None = None) -> GridField:
    grid = grid or build_grid(cfg)
    init = cfg.initial
    kind = init.get("kind", "packet")
    lam = float(init.get("lambda", 4.0)) if lam is None else lam
    if kind == "packet":
        u = wave_packet(grid, lam, init.get("direction"), init.get("center"))
    elif kind == "knapp":
        u = knapp_packet(grid, lam)
    else:
        w2 = float(init.get("width", 1.0)) ** 2
        u = GridField(grid, np.exp(-np.sum(grid.nodes**2, axis=-1) / w2))
        u = u * (1.0 / u.norm())
    return u * float(init.get("norm", 1.0))
