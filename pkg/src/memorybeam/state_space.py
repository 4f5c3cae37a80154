"""Discretized beam state space: grids, states, and the energy norm.

A state holds the deflection ``p`` and velocity ``q`` at the nodes
``x_1 .. x_{n+1}`` (the clamped node ``x_0 = 0`` is excluded, the free end
``x_{n+1} = 1`` is included) plus the boundary scalar ``eta``.  Flattened
vectors use the layout ``[p_1..p_{n+1}, q_1..q_{n+1}, eta]``.

The energy is the trapezoid-rule discretization of

    E = w_bend/2 * int u_xx^2 + w_kin/2 * int v^2 + w_eta * beta/(2m) * eta^2

with second differences closed by the clamped ghost value ``p_{-1} = p_1``
and the free-end condition ``u_xx(1) = 0``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np


class DimensionError(ValueError):
    """Raised when array shapes disagree with the grid.

    ``field`` names the offending component (``"p"``, ``"q"``, ...).
    """

    def __init__(self, field: str, expected, got):
        self.field = field
        super().__init__(f"{field}: expected length {expected}, got {got}")


@dataclass(frozen=True)
class Grid:
    """Uniform grid on [0, 1] with ``n_interior`` interior nodes."""

    n_interior: int

    def __post_init__(self):
        if int(self.n_interior) != self.n_interior or self.n_interior < 4:
            raise ValueError(
                f"n_interior must be an integer >= 4, got {self.n_interior!r}")

    @property
    def h(self) -> float:
        return 1.0 / (self.n_interior + 1)

    @property
    def n_nodes(self) -> int:
        """Number of stored nodes, x_1 .. x_{n+1}."""
        return self.n_interior + 1

    @property
    def dim(self) -> int:
        """Length of a flattened state."""
        return 2 * self.n_nodes + 1

    @property
    def nodes(self) -> np.ndarray:
        return np.arange(1, self.n_nodes + 1) * self.h


@dataclass(frozen=True)
class EnergyWeights:
    w_bend: float = 1.0
    w_kin: float = 1.0
    w_eta: float = 1.0

    def __post_init__(self):
        for name in ("w_bend", "w_kin", "w_eta"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")


@dataclass(frozen=True, eq=False)
class BeamState:
    p: np.ndarray
    q: np.ndarray
    eta: float

    def __post_init__(self):
        p = np.array(self.p, dtype=float)
        q = np.array(self.q, dtype=float)
        if p.ndim != 1:
            raise DimensionError("p", "1-d array", p.shape)
        if q.shape != p.shape:
            raise DimensionError("q", p.shape[0], q.shape)
        if not (np.all(np.isfinite(p)) and np.all(np.isfinite(q))
                and np.isfinite(self.eta)):
            raise ValueError("BeamState entries must be finite")
        p.flags.writeable = False
        q.flags.writeable = False
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "eta", float(self.eta))

    @classmethod
    def zeros(cls, grid: Grid) -> "BeamState":
        return cls(np.zeros(grid.n_nodes), np.zeros(grid.n_nodes), 0.0)

    @classmethod
    def from_flat(cls, vec, grid: Grid) -> "BeamState":
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (grid.dim,):
            raise DimensionError("state", grid.dim, vec.shape)
        n = grid.n_nodes
        return cls(vec[:n], vec[n:2 * n], vec[2 * n])

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.p, self.q, [self.eta]])

    def check_grid(self, grid: Grid) -> None:
        if self.p.shape[0] != grid.n_nodes:
            raise DimensionError("p", grid.n_nodes, self.p.shape[0])
        if self.q.shape[0] != grid.n_nodes:
            raise DimensionError("q", grid.n_nodes, self.q.shape[0])

    def __eq__(self, other):
        if not isinstance(other, BeamState):
            return NotImplemented
        return (np.array_equal(self.p, other.p)
                and np.array_equal(self.q, other.q) and self.eta == other.eta)

    # CSV row: p_1..p_{n+1}, q_1..q_{n+1}, eta
    @staticmethod
    def csv_header(grid: Grid) -> list[str]:
        n = grid.n_nodes
        return ([f"p_{i}" for i in range(1, n + 1)]
                + [f"q_{i}" for i in range(1, n + 1)] + ["eta"])

    def to_csv_row(self) -> str:
        return ",".join(repr(float(v)) for v in self.flatten())

    @classmethod
    def from_csv_row(cls, row: str, grid: Grid) -> "BeamState":
        values = [float(tok) for tok in row.strip().split(",")]
        return cls.from_flat(np.array(values), grid)


# ---------------------------------------------------------------------------
# Difference operators


@lru_cache(maxsize=32)
def _curvature_matrix(n_interior: int) -> np.ndarray:
    grid = Grid(n_interior)
    n, h2 = grid.n_nodes, grid.h ** 2
    K = np.zeros((n, n))
    # kappa_0 = (p_{-1} - 2 p_0 + p_1)/h^2 with p_0 = 0, p_{-1} = p_1
    K[0, 0] = 2.0 / h2
    for i in range(1, n):
        # kappa_i at x_i, p_j stored in column j-1
        if i >= 2:
            K[i, i - 2] = 1.0 / h2
        K[i, i - 1] = -2.0 / h2
        K[i, i] = 1.0 / h2
    K.flags.writeable = False
    return K


def curvature_matrix(grid: Grid) -> np.ndarray:
    """Matrix mapping p to (D2 p) at x_0 .. x_n; D2 p at x_{n+1} is zero."""
    return _curvature_matrix(grid.n_interior)


def curvature_weights(grid: Grid) -> np.ndarray:
    """Trapezoid weights for the curvature nodes x_0 .. x_n."""
    w = np.full(grid.n_nodes, grid.h)
    w[0] = grid.h / 2
    return w


def mass_weights(grid: Grid) -> np.ndarray:
    """Trapezoid weights for the stored nodes x_1 .. x_{n+1}."""
    w = np.full(grid.n_nodes, grid.h)
    w[-1] = grid.h / 2
    return w


def second_difference(p, grid: Grid) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if p.shape[-1] != grid.n_nodes:
        raise DimensionError("p", grid.n_nodes, p.shape[-1])
    return p @ curvature_matrix(grid).T


def tip_third_derivative(p, grid: Grid) -> float:
    """Second-order one-sided u_xxx(1) built from the curvature stencil."""
    kappa = second_difference(p, grid)
    # kappa_{n+1} = 0 by the free-end condition
    return (kappa[..., -2] - 4.0 * kappa[..., -1]) / (2.0 * grid.h)


def compatible_eta(p, q, grid: Grid, m: float, beta: float) -> float:
    """eta = -p_xxx(1) + (m/beta) q(1), the generator-domain condition."""
    q = np.asarray(q, dtype=float)
    return -tip_third_derivative(p, grid) + (m / beta) * q[..., -1]


def compatibility_defect(state: BeamState, grid: Grid, m: float,
                         beta: float) -> float:
    return abs(state.eta - compatible_eta(state.p, state.q, grid, m, beta))


# ---------------------------------------------------------------------------
# Energy


def energy_factor(grid: Grid, w: EnergyWeights, beta: float,
                  m: float) -> np.ndarray:
    """Matrix L with energy(y) = |L y|^2 for flattened y.

    L is block lower-triangular and invertible, so ``L A L^{-1}`` is the
    energy-norm similarity transform of a generator A.
    """
    n = grid.n_nodes
    L = np.zeros((2 * n + 1, 2 * n + 1))
    L[:n, :n] = np.sqrt(0.5 * w.w_bend * curvature_weights(grid))[:, None] \
        * curvature_matrix(grid)
    L[n:2 * n, n:2 * n] = np.diag(np.sqrt(0.5 * w.w_kin * mass_weights(grid)))
    L[2 * n, 2 * n] = np.sqrt(w.w_eta * beta / (2.0 * m))
    return L


def energy(state: BeamState, grid: Grid, w: EnergyWeights | None = None,
           beta: float = 1.0, m: float = 1.0) -> float:
    w = w or EnergyWeights()
    state.check_grid(grid)
    kappa = second_difference(state.p, grid)
    bend = 0.5 * np.sum(curvature_weights(grid) * kappa ** 2)
    kin = 0.5 * np.sum(mass_weights(grid) * state.q ** 2)
    return float(w.w_bend * bend + w.w_kin * kin
                 + w.w_eta * beta / (2.0 * m) * state.eta ** 2)


def norm(state: BeamState, grid: Grid, w: EnergyWeights | None = None,
         beta: float = 1.0, m: float = 1.0) -> float:
    return float(np.sqrt(energy(state, grid, w, beta, m)))


# ---------------------------------------------------------------------------
# Vector-space operations


def _check_pair(x: BeamState, y: BeamState) -> None:
    if x.p.shape != y.p.shape:
        raise DimensionError("p", y.p.shape[0], x.p.shape[0])
    if x.q.shape != y.q.shape:
        raise DimensionError("q", y.q.shape[0], x.q.shape[0])


def axpy(alpha: float, x: BeamState, y: BeamState) -> BeamState:
    """alpha * x + y"""
    _check_pair(x, y)
    return BeamState(alpha * x.p + y.p, alpha * x.q + y.q,
                     alpha * x.eta + y.eta)


def scale(alpha: float, x: BeamState) -> BeamState:
    return BeamState(alpha * x.p, alpha * x.q, alpha * x.eta)


def sub(x: BeamState, y: BeamState) -> BeamState:
    _check_pair(x, y)
    return BeamState(x.p - y.p, x.q - y.q, x.eta - y.eta)


def dot(x: BeamState, y: BeamState) -> float:
    """Euclidean dot product of the flattened states."""
    _check_pair(x, y)
    return float(x.p @ y.p + x.q @ y.q + x.eta * y.eta)


def random_compatible_state(grid: Grid, rng: np.random.Generator, m: float,
                            beta: float) -> BeamState:
    """Random (p, q) with eta derived from the domain condition."""
    p = rng.standard_normal(grid.n_nodes)
    q = rng.standard_normal(grid.n_nodes)
    return BeamState(p, q, compatible_eta(p, q, grid, m, beta))
