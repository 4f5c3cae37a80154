"""Mild (Picard/Duhamel) and strong (exponential stepping) solvers.

Both solvers work on flat state vectors.  ``ProblemSpec.initial`` may be a
:class:`BeamState` or a plain vector; trajectories always store arrays of
shape ``(n_times, dim)``.
"""

from __future__ import annotations

import logging
import os
import tempfile
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .generator import DiscreteGenerator
from .memory import ExpKernel, MemoryKernel, filter_step
from .state_space import (BeamState, DimensionError, Grid, compatibility_defect)

log = logging.getLogger(__name__)

COMPATIBILITY_TOL = 1e-8


class PicardConvergenceError(RuntimeError):
    """The fixed-point iteration did not reach the tolerance."""

    def __init__(self, message: str, residuals: Sequence[float]):
        super().__init__(message)
        self.residuals = list(residuals)


class CompatibilityError(ValueError):
    """Initial datum violates eta = -p_xxx(1) + (m/beta) q(1)."""


@dataclass(frozen=True)
class ForcingFunction:
    """Nonlinearity f(t, y, z) acting on flat states.

    ``func`` must broadcast over leading axes: ``y`` and ``z`` may be
    ``(dim,)`` or ``(n_times, dim)`` with ``t`` scalar or ``(n_times,)``.
    """

    func: Callable
    lipschitz_C: float
    time_lipschitz: float | Callable[[float], float] = 0.0
    zero_at_zero: bool = False
    label: str = "custom"

    def __call__(self, t, y, z):
        return self.func(t, y, z)

    def time_constant(self, n: float) -> float:
        c = self.time_lipschitz
        return float(c(n) if callable(c) else c)


def zero_forcing(dim: int | None = None) -> ForcingFunction:
    return ForcingFunction(lambda t, y, z: np.zeros_like(y), 0.0, 0.0,
                           zero_at_zero=True, label="zero")


def nodal_forcing(grid: Grid, g: Callable, C: float,
                  time_lipschitz: float = 0.0, zero_at_zero: bool = False,
                  label: str = "custom") -> ForcingFunction:
    """Lift a pointwise g(t, p1, p2) into the velocity slot of the state.

    ``p1`` is the deflection of y and ``p2`` the deflection part of the
    memory z, as in f(t, y, z) = (0, g(t, p_y, p_z), 0).
    """
    n = grid.n_nodes

    def f(t, y, z):
        out = np.zeros(np.broadcast_shapes(np.shape(y), np.shape(z)))
        tt = np.asarray(t, dtype=float)
        if tt.ndim:
            tt = tt[..., None]
        out[..., n:2 * n] = g(tt, y[..., :n], z[..., :n])
        return out

    return ForcingFunction(f, C, time_lipschitz, zero_at_zero, label)


def linear_beam_forcing(grid: Grid, gamma: float, lam: float
                        ) -> ForcingFunction:
    """g = -gamma^2 p1 - lam p2 with C = max(lam, gamma^2)."""
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    return nodal_forcing(grid, lambda t, p1, p2: -gamma ** 2 * p1 - lam * p2,
                         C=max(lam, gamma ** 2), time_lipschitz=0.0,
                         zero_at_zero=True,
                         label=f"linear(gamma={gamma!r}, lambda={lam!r})")


def probe_lipschitz(forcing: ForcingFunction, gen: DiscreteGenerator,
                    samples: int = 200, seed: int = 0, t_max: float = 10.0,
                    scale: float = 1.0) -> float:
    """Largest sampled |f(t,v1,v2) - f(t,w1,w2)| / (|v1-w1| + |v2-w2|)."""
    rng = np.random.default_rng(seed)
    d = gen.dim
    worst = 0.0
    for _ in range(samples):
        t = t_max * rng.random()
        v1, v2, w1, w2 = scale * rng.standard_normal((4, d))
        num = gen.norm(forcing(t, v1, v2) - forcing(t, w1, w2))
        den = gen.norm(v1 - w1) + gen.norm(v2 - w2)
        if den > 0:
            worst = max(worst, float(num / den))
    return worst


@dataclass
class ProblemSpec:
    generator: DiscreteGenerator
    forcing: ForcingFunction
    kernel: MemoryKernel
    t0: float
    initial: BeamState | np.ndarray

    def __post_init__(self):
        vec = self.generator.flat(self.initial)
        probe = self.forcing(self.t0, vec, np.zeros_like(vec))
        if np.shape(probe) != vec.shape:
            raise DimensionError("forcing", vec.shape, np.shape(probe))

    @property
    def initial_vector(self) -> np.ndarray:
        return self.generator.flat(self.initial)

    def with_initial(self, initial) -> "ProblemSpec":
        return ProblemSpec(self.generator, self.forcing, self.kernel, self.t0,
                           initial)


@dataclass
class Trajectory:
    t_grid: np.ndarray
    states: np.ndarray
    memory_states: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.t_grid = np.asarray(self.t_grid, dtype=float)
        if np.any(np.diff(self.t_grid) <= 0):
            raise ValueError("t_grid must be strictly increasing")
        if len(self.states) != len(self.t_grid):
            raise DimensionError("states", len(self.t_grid), len(self.states))
        if not np.all(np.isfinite(self.states)):
            raise FloatingPointError("trajectory contains non-finite values")

    @property
    def dt(self) -> float:
        return float(self.t_grid[1] - self.t_grid[0])

    def state(self, i: int, grid: Grid) -> BeamState:
        return BeamState.from_flat(self.states[i], grid)

    def norms(self, gen: DiscreteGenerator) -> np.ndarray:
        return gen.norm(self.states)

    def to_csv(self, path, gen: DiscreteGenerator, downsample: int = 1
               ) -> None:
        write_trajectory_csv(self, path, gen, downsample)


def _time_grid(t0: float, t_end: float, dt: float) -> np.ndarray:
    if not dt > 0:
        raise ValueError("dt must be positive")
    if not t_end > t0:
        raise ValueError("t_end must exceed t0")
    steps = (t_end - t0) / dt
    n = int(round(steps))
    if abs(steps - n) > 1e-6 * max(1.0, steps):
        raise ValueError(f"(t_end - t0)/dt = {steps} is not an integer")
    return t0 + dt * np.arange(n + 1)


def _sup_norm(gen: DiscreteGenerator, Y: np.ndarray) -> float:
    return float(np.max(gen.norm(Y))) if len(Y) else 0.0


def solve_mild_picard(spec: ProblemSpec, t_end: float, dt: float,
                      tol: float = 1e-10, max_iter: int = 100,
                      window: float | None = 1.0,
                      initial_guess: str | np.ndarray = "semigroup"
                      ) -> Trajectory:
    """Picard iteration on the discretized Duhamel formula.

    Each window [t_w, t_w + window] iterates

        y_{k+1}(t) = U(t - t_w) y(t_w) + int_{t_w}^t U(t - s) F_k(s) ds,
        F_k(s) = f(s, y_k(s), z_k(s)),

    with the trapezoid rule for the outer integral and the kernel's
    trapezoid memory over the whole history for z_k.  Earlier windows are
    frozen, so their contribution to the memory is carried unchanged.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    gen, f, kernel = spec.generator, spec.forcing, spec.kernel
    t_grid = _time_grid(spec.t0, t_end, dt)
    n_total = len(t_grid)
    E = gen.propagator(dt)
    v = spec.initial_vector

    Y = np.empty((n_total, gen.dim))
    Y[0] = v
    if isinstance(initial_guess, str):
        if initial_guess not in ("semigroup", "constant"):
            raise ValueError(f"unknown initial guess {initial_guess!r}")
        guess = None
    else:
        guess = np.asarray(initial_guess, dtype=float)
        if guess.shape != Y.shape:
            raise DimensionError("initial_guess", Y.shape, guess.shape)

    steps_per_window = (n_total - 1 if window is None
                        else max(1, int(round(window / dt))))
    histories, iterations = [], []
    start = 0
    while start < n_total - 1:
        stop = min(start + steps_per_window, n_total - 1)
        idx = slice(start, stop + 1)
        # initial iterate on this window
        if guess is not None:
            Y[start + 1:stop + 1] = guess[start + 1:stop + 1]
        elif initial_guess == "constant":
            Y[start + 1:stop + 1] = Y[start]
        else:
            for j in range(start, stop):
                Y[j + 1] = E @ Y[j]

        residuals = []
        for it in range(1, max_iter + 1):
            Z = kernel.history(t_grid[:stop + 1], Y[:stop + 1], start=start)
            F = f(t_grid[idx], Y[idx], Z[start:stop + 1])
            new = np.empty((stop - start + 1, gen.dim))
            new[0] = Y[start]
            for j in range(stop - start):
                new[j + 1] = E @ (new[j] + 0.5 * dt * F[j]) + 0.5 * dt * F[j + 1]
            res = _sup_norm(gen, new - Y[idx])
            residuals.append(res)
            Y[idx] = new
            if res <= tol:
                break
        else:
            raise PicardConvergenceError(
                f"Picard iteration did not converge on [{t_grid[start]}, "
                f"{t_grid[stop]}] after {max_iter} iterations "
                f"(residual {residuals[-1]:.3e}); reduce the window or dt",
                residuals)
        histories.append(residuals)
        iterations.append(len(residuals))
        start = stop

    Z = kernel.history(t_grid, Y)
    return Trajectory(t_grid, Y, Z, meta={
        "solver": "picard",
        "iterations": iterations,
        "residuals": histories,
        "final_residual": histories[-1][-1] if histories else 0.0,
        "tol": tol,
        "window": window,
        "initial_guess": initial_guess if isinstance(initial_guess, str)
        else "array",
    })


def check_compatibility(spec: ProblemSpec, tol: float = COMPATIBILITY_TOL
                        ) -> float:
    gen = spec.generator
    if gen.grid is None or gen.params is None:
        return 0.0
    state = BeamState.from_flat(spec.initial_vector, gen.grid)
    defect = compatibility_defect(state, gen.grid, gen.params.m,
                                  gen.params.beta)
    if defect > tol:
        raise CompatibilityError(
            f"initial eta violates the domain condition by {defect:.3e} "
            f"(tolerance {tol:g}); derive eta from p and q")
    return defect


def solve_strong_stepping(spec: ProblemSpec, t_end: float, dt: float,
                          check_domain: bool = True) -> Trajectory:
    """Exponential Heun stepping of the state plus memory filter.

    Per step, with E = exp(dt A) and the filter advanced by Crank-Nicolson:

        y* = E (y_n + dt F_n)
        y_{n+1} = E (y_n + dt/2 F_n) + dt/2 f(t_{n+1}, y*, z*)

    The linear part is propagated exactly, so the step size is limited by
    the forcing and the memory width only.
    """
    if not isinstance(spec.kernel, ExpKernel):
        raise TypeError("strong stepping needs an ExpKernel memory")
    defect = check_compatibility(spec) if check_domain else None
    gen, f, T = spec.generator, spec.forcing, spec.kernel.T
    t_grid = _time_grid(spec.t0, t_end, dt)
    E = gen.propagator(dt)

    Y = np.empty((len(t_grid), gen.dim))
    Z = np.zeros_like(Y)
    Y[0] = spec.initial_vector
    half = 0.5 * dt
    F = f(t_grid[0], Y[0], Z[0])
    for j in range(len(t_grid) - 1):
        y, z = Y[j], Z[j]
        y_pred = E @ (y + dt * F)
        z_pred = filter_step(z, y, y_pred, dt, T)
        Y[j + 1] = E @ (y + half * F) + half * f(t_grid[j + 1], y_pred, z_pred)
        Z[j + 1] = filter_step(z, y, Y[j + 1], dt, T)
        F = f(t_grid[j + 1], Y[j + 1], Z[j + 1])
    return Trajectory(t_grid, Y, Z, meta={"solver": "strong", "dt": dt,
                                          "compatibility_defect": defect})


def strong_residual(traj: Trajectory, spec: ProblemSpec) -> np.ndarray:
    """|central difference of y - (A y + f(t, y, z))| at interior times."""
    A = spec.generator.matrix
    Y, Z, t = traj.states, traj.memory_states, traj.t_grid
    deriv = (Y[2:] - Y[:-2]) / (2 * traj.dt)
    rhs = Y[1:-1] @ A.T + spec.forcing(t[1:-1], Y[1:-1], Z[1:-1])
    return spec.generator.norm(deriv - rhs)


def solve(spec: ProblemSpec, t_end: float, dt: float, method: str = "strong",
          **kwargs) -> Trajectory:
    if method == "strong":
        return solve_strong_stepping(spec, t_end, dt, **kwargs)
    if method == "picard":
        return solve_mild_picard(spec, t_end, dt, **kwargs)
    raise ValueError(f"unknown solver {method!r}")


@dataclass
class DependenceReport:
    ratios: list[float]
    sup_differences: list[float]
    initial_differences: list[float]
    gronwall_constant: float
    M_n: float
    K_n: float
    identical: list[bool]

    @property
    def passed(self) -> bool:
        ok_ratio = all(r <= self.gronwall_constant for r in self.ratios
                       if np.isfinite(r))
        return ok_ratio and all(self.identical)


def gronwall_constant(M_n: float, C: float, K_n: float, horizon: float
                      ) -> float:
    return M_n * np.exp(M_n * C * (1.0 + K_n * horizon) * horizon)


def continuous_dependence_probe(spec: ProblemSpec, perturbations: list,
                                t_end: float, dt: float,
                                method: str = "strong") -> DependenceReport:
    """Compare the solution from ``spec.initial`` with each perturbed start.

    The ratio sup_t |y_v - y_w| / |v - w| is reported next to the constant
    M e^{M C (1 + K (t_end - t0)) (t_end - t0)} with M the sampled
    sup |U(tau)| and K the sampled sup of the kernel on the window.
    """
    gen = spec.generator
    horizon = t_end - spec.t0
    taus = np.linspace(0.0, horizon, 201)
    step = gen.propagator(taus[1])
    U, M_n = np.eye(gen.dim), 0.0
    for _ in taus:
        M_n = max(M_n, gen.operator_norm(U))
        U = step @ U
    K_n = spec.kernel.sup_bound(spec.t0, t_end)
    bound = gronwall_constant(M_n, spec.forcing.lipschitz_C, K_n, horizon)

    base = solve(spec, t_end, dt, method)
    v = spec.initial_vector
    ratios, sups, inits, identical = [], [], [], []
    for w in perturbations:
        traj = solve(spec.with_initial(w), t_end, dt, method)
        diff = gen.norm(traj.states - base.states)
        d0 = float(gen.norm(gen.flat(w) - v))
        sups.append(float(diff.max()))
        inits.append(d0)
        if d0 == 0:
            ratios.append(float("nan"))
            identical.append(bool(np.array_equal(traj.states, base.states)))
        else:
            ratios.append(float(diff.max()) / d0)
            identical.append(True)
    return DependenceReport(ratios, sups, inits, float(bound), M_n, K_n,
                            identical)


# ---------------------------------------------------------------------------
# CSV export: t, energy, eta, p_1..p_k, q_1..q_k, z_norm


def trajectory_csv_lines(traj: Trajectory, gen: DiscreteGenerator,
                         downsample: int = 1) -> list[str]:
    if downsample < 1:
        raise ValueError("downsample must be >= 1")
    Y = traj.states
    if gen.grid is not None:
        n = gen.grid.n_nodes
        nodes = np.arange(downsample - 1, n, downsample)
        if nodes.size == 0 or nodes[-1] != n - 1:
            nodes = np.append(nodes, n - 1)
        p_cols, q_cols, eta_col = nodes, n + nodes, Y[:, 2 * n]
    else:
        p_cols = np.arange(0, gen.dim, downsample)
        q_cols = np.array([], dtype=int)
        eta_col = np.zeros(len(Y))
    header = (["t", "energy", "eta"]
              + [f"p_{i + 1}" for i in p_cols]
              + [f"q_{i - (q_cols[0] - p_cols[0]) + 1}" for i in q_cols]
              + ["z_norm"])
    energy = gen.norm(Y) ** 2
    z_norm = gen.norm(traj.memory_states)
    lines = [",".join(header)]
    for j in range(len(Y)):
        row = [traj.t_grid[j], energy[j], eta_col[j], *Y[j, p_cols],
               *Y[j, q_cols], z_norm[j]]
        lines.append(",".join(repr(float(x)) for x in row))
    return lines


def atomic_write(path, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_trajectory_csv(traj: Trajectory, path, gen: DiscreteGenerator,
                         downsample: int = 1) -> None:
    atomic_write(path, "\n".join(trajectory_csv_lines(traj, gen, downsample))
                 + "\n")
