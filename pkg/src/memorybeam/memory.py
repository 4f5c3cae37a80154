"""Fading-memory kernels and the memory term z(t) = int_{t0}^t k(t,s) y(s) ds."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.integrate import trapezoid
from scipy.signal import lfilter

# rows of the generic quadrature are processed in blocks of this size
_BLOCK = 256


class MemoryKernel:
    """A kernel k(t, s) >= 0 on t >= s >= t0 with k <= a exp(-b (t - s)).

    ``lip_t`` is the Lipschitz constant of k in its first argument, either
    a number or a callable ``n -> k_n`` for the window [t0, n].  ``func``
    must accept broadcastable arrays.
    """

    def __init__(self, func: Callable, bound_a: float, bound_b: float,
                 lip_t: float | Callable[[float], float] = np.inf):
        self.func = func
        self.bound_a = float(bound_a)
        self.bound_b = float(bound_b)
        self.lip_t = lip_t

    def __call__(self, t, s):
        return self.func(np.asarray(t, dtype=float), np.asarray(s, dtype=float))

    def lipschitz_constant(self, n: float) -> float:
        return float(self.lip_t(n) if callable(self.lip_t) else self.lip_t)

    def sup_bound(self, t0: float, t_end: float, samples: int = 257) -> float:
        """max of k over the triangle t0 <= s <= t <= t_end (sampled)."""
        g = np.linspace(t0, t_end, samples)
        t, s = np.meshgrid(g, g, indexing="ij")
        vals = np.where(t >= s, self(t, s), -np.inf)
        return float(vals.max())

    def history(self, t_grid, states, start: int = 0) -> np.ndarray:
        """Trapezoid memory z(t_j) for every grid index j >= start.

        Returns an array shaped like ``states`` whose rows before ``start``
        are zero.
        """
        t_grid = np.asarray(t_grid, dtype=float)
        Y = np.asarray(states, dtype=float).reshape(len(t_grid), -1)
        dt = _uniform_step(t_grid)
        Z = np.zeros_like(Y)
        w = np.full(len(t_grid), dt)
        w[0] = dt / 2
        for lo in range(max(start, 1), len(t_grid), _BLOCK):
            hi = min(lo + _BLOCK, len(t_grid))
            rows = np.arange(lo, hi)
            Kb = self(t_grid[rows, None], t_grid[None, :hi]) * w[None, :hi]
            Kb = np.where(np.arange(hi)[None, :] <= rows[:, None], Kb, 0.0)
            # the last node of each row gets half weight
            Kb[np.arange(hi - lo), rows] *= 0.5
            Z[lo:hi] = Kb @ Y[:hi]
        return Z.reshape(np.shape(states))


class ExpKernel(MemoryKernel):
    """k(t, s) = exp(-(t - s)/T)/T with a = b = 1/T and k_n = 1/T^2."""

    def __init__(self, T: float):
        if not (np.isfinite(T) and T > 0):
            raise ValueError(f"kernel width T must be positive, got {T!r}")
        self.T = float(T)
        super().__init__(lambda t, s: np.exp(-(t - s) / self.T) / self.T,
                         bound_a=1.0 / self.T, bound_b=1.0 / self.T,
                         lip_t=1.0 / self.T ** 2)

    def __repr__(self):
        return f"ExpKernel(T={self.T!r})"

    def history(self, t_grid, states, start: int = 0) -> np.ndarray:
        # Same trapezoid sum as the generic path, evaluated recursively:
        # S_j = sum_i c_i r^(j-i) y_i with c_0 = 1/2, so S_j = r S_{j-1} + y_j.
        t_grid = np.asarray(t_grid, dtype=float)
        Y = np.asarray(states, dtype=float).reshape(len(t_grid), -1)
        dt = _uniform_step(t_grid)
        r = np.exp(-dt / self.T)
        X = Y.copy()
        X[0] *= 0.5
        S = lfilter([1.0], [1.0, -r], X, axis=0)
        Z = (dt / self.T) * (S - 0.5 * Y)
        Z[0] = 0.0
        Z[:start] = 0.0
        return Z.reshape(np.shape(states))


def _uniform_step(t_grid: np.ndarray) -> float:
    if len(t_grid) < 2:
        return 1.0
    d = np.diff(t_grid)
    if np.any(d <= 0):
        raise ValueError("time grid must be strictly increasing")
    dt = float(d.mean())
    if np.max(np.abs(d - dt)) > 1e-9 * max(1.0, abs(dt)):
        raise ValueError("time grid must be uniform")
    return dt


def memory_integral_quadrature(kernel: MemoryKernel, t_grid, states,
                               t: float) -> np.ndarray:
    """Trapezoid approximation of int_{t0}^t k(t, s) y(s) ds.

    ``t`` need not be a grid point; the last partial interval uses the
    linearly interpolated value y(t).
    """
    t_grid = np.asarray(t_grid, dtype=float)
    Y = np.asarray(states, dtype=float).reshape(len(t_grid), -1)
    _uniform_step(t_grid)
    span_tol = 1e-12 * max(1.0, abs(t_grid[-1]))
    if t < t_grid[0] - span_tol or t > t_grid[-1] + span_tol:
        raise ValueError(
            f"t={t!r} outside trajectory span [{t_grid[0]}, {t_grid[-1]}]")
    t = float(np.clip(t, t_grid[0], t_grid[-1]))
    j = int(np.searchsorted(t_grid, t, side="right")) - 1
    nodes = list(t_grid[:j + 1])
    vals = list(Y[:j + 1])
    if t - t_grid[j] > span_tol:
        theta = (t - t_grid[j]) / (t_grid[j + 1] - t_grid[j])
        nodes.append(t)
        vals.append((1 - theta) * Y[j] + theta * Y[j + 1])
    nodes = np.array(nodes)
    if len(nodes) < 2:
        return np.zeros(Y.shape[1]).reshape(np.shape(states)[1:])
    f = kernel(t, nodes)[:, None] * np.array(vals)
    out = trapezoid(f, nodes, axis=0)
    return out.reshape(np.shape(states)[1:])


def aux_ode_rhs(y, z, T: float):
    """Right-hand side of the memory filter z' = (y - z)/T."""
    y = np.asarray(y, dtype=float)
    z = np.asarray(z, dtype=float)
    if y.shape != z.shape:
        raise ValueError(f"y and z shapes differ: {y.shape} vs {z.shape}")
    return (y - z) / T


def filter_step(z, y_old, y_new, dt: float, T: float) -> np.ndarray:
    """One trapezoid (Crank-Nicolson) step of z' = (y - z)/T."""
    c = dt / (2.0 * T)
    return ((1.0 - c) * z + c * (y_old + y_new)) / (1.0 + c)


def integrate_memory_filter(t_grid, states, T: float) -> np.ndarray:
    """Integrate the auxiliary filter along a sampled trajectory, z(t0) = 0."""
    t_grid = np.asarray(t_grid, dtype=float)
    Y = np.asarray(states, dtype=float)
    dt = _uniform_step(t_grid)
    Z = np.zeros_like(Y)
    for j in range(1, len(t_grid)):
        Z[j] = filter_step(Z[j - 1], Y[j - 1], Y[j], dt, T)
    return Z


# ---------------------------------------------------------------------------
# Sampled verification of the kernel hypotheses


@dataclass
class KernelReport:
    continuity_modulus: tuple[float, float]
    continuity_ok: bool
    lipschitz_ratio: float
    lipschitz_declared: float
    lipschitz_ok: bool
    bound_violations: int
    max_bound_ratio: float
    bound_ok: bool
    nonnegative: bool

    @property
    def passed(self) -> bool:
        return (self.continuity_ok and self.lipschitz_ok and self.bound_ok
                and self.nonnegative)


def check_kernel_conditions(kernel: MemoryKernel, window_n: float,
                            sample_count: int = 2000, t0: float = 0.0,
                            seed: int = 0) -> KernelReport:
    """Monte-Carlo check of continuity, t-Lipschitz bound and exponential bound.

    Continuity and the Lipschitz ratio are sampled on the window
    t0 <= s <= t <= window_n.  The exponential bound is a statement on the
    whole half-plane, so its lags also extend to where a exp(-b lag)
    drops below exp(-50) a.
    """
    if not window_n > t0:
        raise ValueError("window_n must exceed t0")
    rng = np.random.default_rng(seed)
    span = window_n - t0

    s = t0 + span * rng.random(sample_count)
    t = s + (window_n - s) * rng.random(sample_count)
    k = kernel(t, s)

    moduli = []
    for delta in (1e-4, 1e-6):
        tp = np.minimum(t + delta, window_n)
        sp = np.minimum(s + delta, t)
        moduli.append(float(max(np.max(np.abs(kernel(tp, s) - k)),
                                np.max(np.abs(kernel(t, sp) - k)))))
    continuity_ok = bool(np.all(np.isfinite(k))
                         and moduli[1] <= max(0.1 * moduli[0], 1e-12))

    t2 = s + (window_n - s) * rng.random(sample_count)
    gap = np.abs(t2 - t)
    keep = gap > 1e-9 * span
    ratios = np.abs(kernel(t2[keep], s[keep]) - k[keep]) / gap[keep]
    lip_ratio = float(ratios.max()) if ratios.size else 0.0
    lip_declared = kernel.lipschitz_constant(window_n)
    lipschitz_ok = lip_ratio <= lip_declared * (1 + 1e-9)

    a, b = kernel.bound_a, kernel.bound_b
    nonnegative = bool(np.all(k >= 0))
    if a > 0 and b > 0:
        reach = max(span, (max(np.log(a), 0.0) + 50.0) / b)
        lags = np.concatenate([
            (t - s),
            np.geomspace(1e-6 * reach, reach, sample_count),
        ])
        base = np.concatenate([s, t0 + span * rng.random(sample_count)])
        kv = kernel(base + lags, base)
        bound = a * np.exp(-b * lags)
        ratio = kv / np.where(bound > 0, bound, np.finfo(float).tiny)
        violations = int(np.sum(kv > bound * (1 + 1e-12)))
        nonnegative = nonnegative and bool(np.all(kv >= 0))
        max_ratio = float(ratio.max())
    else:
        violations, max_ratio = sample_count, np.inf

    return KernelReport(
        continuity_modulus=(moduli[0], moduli[1]),
        continuity_ok=continuity_ok,
        lipschitz_ratio=lip_ratio,
        lipschitz_declared=lip_declared,
        lipschitz_ok=bool(lipschitz_ok),
        bound_violations=violations,
        max_bound_ratio=max_ratio,
        bound_ok=violations == 0,
        nonnegative=nonnegative,
    )
