"""Scenario configuration: flat ``section.key = value`` text files.

Example::

    # linear example with a fading memory of width 0.2
    beam.n_interior = 16
    beam.m = 1.0
    forcing.kind = linear
    forcing.gamma = 0.3
    forcing.lambda = 0.05
    kernel.T = 0.2
    time.t_end = 2.0
    time.dt = 0.001
    initial.p = 0, 0, 0.5, -0.1666666666666667

Blank lines and ``#`` comments are ignored.  Lists are comma separated.
Polynomial coefficients are in ascending powers of x.  The boundary value
eta is never read from the file; it is always derived from p and q.
"""

from __future__ import annotations

import ast
import dataclasses
import math
from dataclasses import dataclass, field, fields

import numpy as np

from .generator import DEFAULT_VISCOSITY, BeamParams
from .solver import ForcingFunction, linear_beam_forcing, nodal_forcing, \
    zero_forcing
from .state_space import BeamState, Grid, compatible_eta


class ConfigError(ValueError):
    """Invalid configuration; ``field`` is the dotted key at fault."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


@dataclass
class BeamSection:
    n_interior: int = 16
    m: float = 1.0
    alpha: float = 1.0
    beta: float = 1.0
    viscosity: float = DEFAULT_VISCOSITY


@dataclass
class ForcingSection:
    kind: str = "zero"
    gamma: float = 0.0
    # "lambda" in the file
    lam: float = 0.0
    expression: str = ""
    C: float | None = None


@dataclass
class KernelSection:
    T: float = 1.0


@dataclass
class TimeSection:
    t0: float = 0.0
    t_end: float = 1.0
    dt: float = 1e-3


@dataclass
class InitialSection:
    kind: str = "polynomial"
    p: list[float] = field(default_factory=lambda: [0.0])
    q: list[float] = field(default_factory=lambda: [0.0])
    file: str = ""


@dataclass
class SolverSection:
    method: str = "strong"
    tol: float = 1e-10
    max_iter: int = 100
    window: float = 1.0


@dataclass
class OutputSection:
    dir: str = "out"
    downsample: int = 1


@dataclass
class BatchSection:
    count: int = 0
    radius: float = 1.0
    pairing: str = "random"
    epsilon: list[float] = field(default_factory=lambda: [1e-1, 1e-2, 1e-3])
    slack: float = 0.05
    attractor_slack: float = 0.1


@dataclass
class ScenarioConfig:
    beam: BeamSection = field(default_factory=BeamSection)
    forcing: ForcingSection = field(default_factory=ForcingSection)
    kernel: KernelSection = field(default_factory=KernelSection)
    time: TimeSection = field(default_factory=TimeSection)
    initial: InitialSection = field(default_factory=InitialSection)
    solver: SolverSection = field(default_factory=SolverSection)
    output: OutputSection = field(default_factory=OutputSection)
    batch: BatchSection = field(default_factory=BatchSection)
    seed: int = 0

    def __post_init__(self):
        validate(self)

    # -- derived objects -------------------------------------------------

    @property
    def grid(self) -> Grid:
        return Grid(self.beam.n_interior)

    @property
    def params(self) -> BeamParams:
        return BeamParams(self.beam.m, self.beam.alpha, self.beam.beta)

    def forcing_function(self) -> ForcingFunction:
        return build_forcing(self.forcing, self.grid)

    def initial_state(self, base_dir: str = ".") -> BeamState:
        grid, b = self.grid, self.beam
        if self.initial.kind == "polynomial":
            x = grid.nodes
            p = np.polynomial.polynomial.polyval(x, self.initial.p)
            q = np.polynomial.polynomial.polyval(x, self.initial.q)
        else:
            import os
            path = os.path.join(base_dir, self.initial.file)
            p, q = read_initial_file(path, grid)
        return BeamState(p, q, compatible_eta(p, q, grid, b.m, b.beta))


# ---------------------------------------------------------------------------

_SECTIONS = {"beam": BeamSection, "forcing": ForcingSection,
             "kernel": KernelSection, "time": TimeSection,
             "initial": InitialSection, "solver": SolverSection,
             "output": OutputSection, "batch": BatchSection}
_FILE_NAMES = {("forcing", "lam"): "lambda"}
_KEY_NAMES = {(s, v): k for (s, k), v in _FILE_NAMES.items()}


def _file_key(section: str, name: str) -> str:
    return _FILE_NAMES.get((section, name), name)


def _convert(raw: str, annotation: str, key: str):
    raw = raw.strip()
    try:
        if annotation == "int":
            value = float(raw)
            if value != int(value):
                raise ValueError
            return int(value)
        if annotation == "float":
            return float(raw)
        if annotation == "float | None":
            return None if raw.lower() in ("", "none") else float(raw)
        if annotation == "list[float]":
            return [float(tok) for tok in raw.split(",") if tok.strip()]
        return raw
    except ValueError:
        raise ConfigError(key, f"cannot parse {raw!r} as {annotation}") \
            from None


def parse_config(text: str) -> ScenarioConfig:
    sections = {name: {} for name in _SECTIONS}
    seed = 0
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", "expected 'key = value'")
        key, value = (tok.strip() for tok in line.split("=", 1))
        if key == "seed":
            seed = _convert(value, "int", key)
            continue
        section, _, name = key.partition(".")
        if section not in _SECTIONS or not name:
            raise ConfigError(key, "unknown key")
        attr = _KEY_NAMES.get((section, name), name)
        types = {f.name: f.type for f in fields(_SECTIONS[section])}
        if attr not in types:
            raise ConfigError(key, "unknown key")
        sections[section][attr] = _convert(value, types[attr], key)
    try:
        built = {name: _SECTIONS[name](**vals)
                 for name, vals in sections.items()}
    except TypeError as exc:
        raise ConfigError("config", str(exc)) from None
    return ScenarioConfig(**built, seed=seed)


def load_config(path) -> ScenarioConfig:
    with open(path) as fh:
        return parse_config(fh.read())


def serialize_config(cfg: ScenarioConfig) -> str:
    lines = []
    for section in _SECTIONS:
        obj = getattr(cfg, section)
        for f in fields(obj):
            value = getattr(obj, f.name)
            if isinstance(value, list):
                text = ", ".join(repr(float(v)) for v in value)
            elif value is None:
                text = "none"
            elif isinstance(value, float):
                text = repr(value)
            else:
                text = str(value)
            lines.append(f"{section}.{_file_key(section, f.name)} = {text}")
    lines.append(f"seed = {cfg.seed}")
    return "\n".join(lines) + "\n"


def replace(cfg: ScenarioConfig, **sections) -> ScenarioConfig:
    """Copy with some sections replaced by ``{field: value}`` updates."""
    new = {}
    for name, updates in sections.items():
        new[name] = dataclasses.replace(getattr(cfg, name), **updates)
    return dataclasses.replace(cfg, **new)


# ---------------------------------------------------------------------------
# Validation


def _positive(key: str, value) -> None:
    if not (isinstance(value, (int, float)) and math.isfinite(value)
            and value > 0):
        raise ConfigError(key, f"must be positive, got {value!r}")


def validate(cfg: ScenarioConfig) -> None:
    b = cfg.beam
    if b.n_interior < 4:
        raise ConfigError("beam.n_interior", "must be at least 4")
    for name in ("m", "alpha", "beta"):
        _positive(f"beam.{name}", getattr(b, name))
    if b.viscosity < 0:
        raise ConfigError("beam.viscosity", "must be nonnegative")

    _positive("kernel.T", cfg.kernel.T)
    t = cfg.time
    _positive("time.dt", t.dt)
    if not t.t_end > t.t0:
        raise ConfigError("time.t_end", "must exceed time.t0")
    steps = (t.t_end - t.t0) / t.dt
    if abs(steps - round(steps)) > 1e-6 * max(1.0, steps):
        raise ConfigError("time.dt", "must divide t_end - t0")

    f = cfg.forcing
    if f.kind not in ("zero", "linear", "expression"):
        raise ConfigError("forcing.kind",
                          "must be one of zero, linear, expression")
    if f.kind == "linear" and f.lam < 0:
        raise ConfigError("forcing.lambda", "must be nonnegative")
    if f.kind == "expression":
        if not f.expression:
            raise ConfigError("forcing.expression", "missing")
        if f.C is None:
            raise ConfigError("forcing.C", "required for expression forcing")
        compile_expression(f.expression)
    if f.C is not None and f.C < 0:
        raise ConfigError("forcing.C", "must be nonnegative")

    ini = cfg.initial
    if ini.kind not in ("polynomial", "file"):
        raise ConfigError("initial.kind", "must be polynomial or file")
    if ini.kind == "file" and not ini.file:
        raise ConfigError("initial.file", "missing")
    if ini.kind == "polynomial":
        _check_polynomial("initial.p", ini.p, need_free_end=True)
        _check_polynomial("initial.q", ini.q, need_free_end=False)

    if cfg.solver.method not in ("strong", "picard"):
        raise ConfigError("solver.method", "must be strong or picard")
    _positive("solver.tol", cfg.solver.tol)
    _positive("solver.window", cfg.solver.window)
    if cfg.solver.max_iter < 1:
        raise ConfigError("solver.max_iter", "must be at least 1")
    if cfg.output.downsample < 1:
        raise ConfigError("output.downsample", "must be at least 1")

    bt = cfg.batch
    if bt.count < 0:
        raise ConfigError("batch.count", "must be nonnegative")
    _positive("batch.radius", bt.radius)
    if bt.pairing not in ("random", "identical"):
        raise ConfigError("batch.pairing", "must be random or identical")
    if not bt.epsilon or any(e <= 0 for e in bt.epsilon):
        raise ConfigError("batch.epsilon", "must be positive values")
    if bt.slack < 0 or bt.attractor_slack < 0:
        raise ConfigError("batch.slack", "must be nonnegative")


def _check_polynomial(key: str, coeffs: list[float], need_free_end: bool):
    c = np.zeros(max(4, len(coeffs)))
    c[:len(coeffs)] = coeffs
    scale = max(1.0, float(np.max(np.abs(c))))
    if c[0] != 0 or c[1] != 0:
        raise ConfigError(key, "clamped end needs zero constant and linear "
                               "coefficients")
    if need_free_end:
        curvature = np.polynomial.polynomial.polyval(
            1.0, np.polynomial.polynomial.polyder(c, 2))
        if abs(curvature) > 1e-12 * scale:
            raise ConfigError(key, f"second derivative at x=1 is "
                                   f"{curvature:.3e}, must vanish")


def read_initial_file(path, grid: Grid):
    """Read p, q from a BeamState CSV row (header optional, eta ignored)."""
    with open(path) as fh:
        rows = [ln for ln in fh if ln.strip() and not ln.startswith("p_")]
    if not rows:
        raise ConfigError("initial.file", f"{path} has no data row")
    values = [float(tok) for tok in rows[0].split(",")]
    n = grid.n_nodes
    if len(values) not in (2 * n, 2 * n + 1):
        raise ConfigError("initial.file",
                          f"expected {2 * n + 1} columns, got {len(values)}")
    return np.array(values[:n]), np.array(values[n:2 * n])


# ---------------------------------------------------------------------------
# Forcing


_ALLOWED_FUNCS = {"sin": np.sin, "cos": np.cos, "tanh": np.tanh,
                  "exp": np.exp, "abs": np.abs}
_ALLOWED_NODES = (ast.Expression, ast.BinOp, ast.UnaryOp, ast.Constant,
                  ast.Name, ast.Load, ast.Call, ast.Add, ast.Sub, ast.Mult,
                  ast.Div, ast.Pow, ast.USub, ast.UAdd)


def compile_expression(text: str):
    """Compile an arithmetic expression in t, p1, p2 into g(t, p1, p2)."""
    try:
        tree = ast.parse(text, mode="eval")
    except SyntaxError as exc:
        raise ConfigError("forcing.expression", f"syntax error: {exc.msg}") \
            from None
    for node in ast.walk(tree):
        if not isinstance(node, _ALLOWED_NODES):
            raise ConfigError("forcing.expression",
                              f"{type(node).__name__} not allowed")
        if isinstance(node, ast.Name) and node.id not in (
                "t", "p1", "p2", *_ALLOWED_FUNCS):
            raise ConfigError("forcing.expression",
                              f"unknown name {node.id!r}")
        if isinstance(node, ast.Call) and not (
                isinstance(node.func, ast.Name)
                and node.func.id in _ALLOWED_FUNCS and len(node.args) == 1
                and not node.keywords):
            raise ConfigError("forcing.expression", "unsupported call")
        if isinstance(node, ast.Constant) and not isinstance(
                node.value, (int, float)):
            raise ConfigError("forcing.expression", "only numeric constants")
    code = compile(tree, "<forcing>", "eval")

    def g(t, p1, p2):
        env = {"__builtins__": {}, "t": t, "p1": p1, "p2": p2,
               **_ALLOWED_FUNCS}
        out = eval(code, env)  # AST whitelisted above
        return np.broadcast_to(out, np.broadcast_shapes(np.shape(p1),
                                                        np.shape(p2),
                                                        np.shape(out)))

    return g


def probe_pointwise_lipschitz(g, samples: int = 4000, seed: int = 0,
                              spread: float = 10.0) -> tuple[float, bool]:
    """Sampled Lipschitz ratio of g in (p1, p2) and whether g(t, 0, 0) = 0."""
    rng = np.random.default_rng(seed)
    t = 10.0 * rng.random(samples)
    a1, a2, b1, b2 = spread * rng.standard_normal((4, samples))
    num = np.abs(np.asarray(g(t, a1, a2)) - np.asarray(g(t, b1, b2)))
    den = np.abs(a1 - b1) + np.abs(a2 - b2)
    ratio = float(np.max(num[den > 0] / den[den > 0]))
    zeros = np.asarray(g(t, np.zeros(samples), np.zeros(samples)))
    return ratio, bool(np.all(zeros == 0))


def build_forcing(section: ForcingSection, grid: Grid) -> ForcingFunction:
    if section.kind == "zero":
        return zero_forcing()
    if section.kind == "linear":
        f = linear_beam_forcing(grid, section.gamma, section.lam)
        if section.C is not None:
            if section.C < f.lipschitz_C:
                raise ConfigError("forcing.C", f"declared {section.C} is "
                                  f"below max(lambda, gamma^2) = "
                                  f"{f.lipschitz_C}")
            f = dataclasses.replace(f, lipschitz_C=section.C)
        return f
    g = compile_expression(section.expression)
    ratio, zero_at_zero = probe_pointwise_lipschitz(g)
    if ratio > section.C * (1 + 1e-9):
        raise ConfigError("forcing.C", f"sampled Lipschitz ratio {ratio:.6g} "
                                       f"exceeds declared {section.C}")
    return nodal_forcing(grid, g, section.C, zero_at_zero=zero_at_zero,
                         label=f"expression({section.expression})")
