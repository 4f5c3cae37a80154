"""Stability certificates, decay envelopes, and trajectory-level checks.

For a generator of type (D, -omega), a C-Lipschitz forcing and a kernel
bounded by a exp(-b (t - s)), the certificate conditions are

    C < omega / D,   b > omega,   a < (b - omega)(omega - C D) / (C D)

and two mild solutions then satisfy

    |z(t) - y(t)| <= D |w - v| exp([C D (1 + a/(b - omega)) - omega](t - t0)).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.integrate import quad

from .generator import DiscreteGenerator
from .memory import MemoryKernel
from .solver import ForcingFunction, Trajectory


class CertificateConsistencyError(RuntimeError):
    """The beam certificate and its general form disagree."""


class DecayFitError(ValueError):
    pass


def _require_positive(**values):
    for name, v in values.items():
        if not (np.isfinite(v) and v > 0):
            raise ValueError(f"{name} must be positive, got {v!r}")


@dataclass(frozen=True)
class StabilityCertificate:
    C: float
    D: float
    omega: float
    a: float
    b: float

    @property
    def cond1(self) -> bool:
        return self.C < self.omega / self.D

    @property
    def cond2(self) -> bool:
        return self.b > self.omega

    @property
    def cond3(self) -> bool:
        CD = self.C * self.D
        return self.a < (self.b - self.omega) * (self.omega - CD) / CD

    @property
    def certified(self) -> bool:
        return self.cond1 and self.cond2 and self.cond3

    @property
    def decay_exponent(self) -> float:
        """C D (1 + a/(b - omega)) - omega; inf when b == omega."""
        if self.b == self.omega:
            return float("inf")
        return (self.C * self.D * (1.0 + self.a / (self.b - self.omega))
                - self.omega)

    def predicted_time(self, epsilon: float, diameter: float) -> float:
        """Time after which D * diameter * e^{rate t} <= epsilon."""
        rate = self.decay_exponent
        if not rate < 0:
            return float("inf")
        return max(0.0, float(np.log(self.D * diameter / epsilon) / -rate))

    def to_text(self) -> str:
        """Flat ``key = value`` block."""
        rows = [("C", self.C), ("D", self.D), ("omega", self.omega),
                ("a", self.a), ("b", self.b), ("cond1", self.cond1),
                ("cond2", self.cond2), ("cond3", self.cond3),
                ("decay_exponent", self.decay_exponent),
                ("certified", self.certified)]
        return "\n".join(f"certificate.{k} = {_fmt(v)}" for k, v in rows)

    @classmethod
    def from_text(cls, text: str) -> "StabilityCertificate":
        values = {}
        for line in text.splitlines():
            if "=" in line:
                key, val = (tok.strip() for tok in line.split("=", 1))
                values[key.removeprefix("certificate.")] = val
        return cls(*(float(values[k]) for k in ("C", "D", "omega", "a", "b")))


@dataclass(frozen=True)
class BeamStabilityCertificate:
    C: float
    omega: float
    T: float

    @property
    def cond_C(self) -> bool:
        return self.C < self.omega / 2

    @property
    def T_bound(self) -> float:
        return (self.omega - 2 * self.C) / (self.omega * (self.omega - self.C))

    @property
    def cond_T(self) -> bool:
        return self.T < self.T_bound

    @property
    def certified(self) -> bool:
        # cond_C first: T_bound is meaningless once C >= omega
        return self.cond_C and self.cond_T

    def general(self) -> StabilityCertificate:
        return StabilityCertificate(self.C, 1.0, self.omega, 1.0 / self.T,
                                    1.0 / self.T)

    def to_text(self) -> str:
        rows = [("C", self.C), ("omega", self.omega), ("T", self.T),
                ("cond_C", self.cond_C), ("T_bound", self.T_bound),
                ("cond_T", self.cond_T), ("certified", self.certified)]
        return "\n".join(f"beam_certificate.{k} = {_fmt(v)}" for k, v in rows)


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    return repr(float(v))


def certify_general(C: float, D: float, omega: float, a: float,
                    b: float) -> StabilityCertificate:
    _require_positive(C=C, D=D, omega=omega, a=a, b=b)
    if D < 1:
        raise ValueError(f"D must be >= 1, got {D!r}")
    return StabilityCertificate(float(C), float(D), float(omega), float(a),
                                float(b))


def _near_boundary(cert: BeamStabilityCertificate) -> bool:
    eps = 1e-12
    return (abs(cert.C - cert.omega / 2) <= eps * cert.omega
            or abs(cert.T - cert.T_bound) <= eps * max(cert.T, 1.0)
            or abs(cert.T * cert.omega - 1.0) <= eps)


def certify_beam(C: float, omega: float, T: float) -> BeamStabilityCertificate:
    """Beam-form conditions, cross-checked against the general ones."""
    _require_positive(C=C, omega=omega, T=T)
    cert = BeamStabilityCertificate(float(C), float(omega), float(T))
    if cert.certified != cert.general().certified and not _near_boundary(cert):
        raise CertificateConsistencyError(
            f"beam and general certificates disagree for {cert}")
    return cert


def decay_envelope(cert: StabilityCertificate, dist0: float, t, t0: float):
    t = np.asarray(t, dtype=float)
    if np.any(t < t0):
        raise ValueError("envelope time must satisfy t >= t0")
    if dist0 < 0:
        raise ValueError("initial distance must be nonnegative")
    out = cert.D * dist0 * np.exp(cert.decay_exponent * (t - t0))
    return float(out) if out.ndim == 0 else out


def kernel_bound_lemma(kernel: MemoryKernel, s: float, t: float,
                       omega: float) -> tuple[float, float, float]:
    """Quadrature of int_s^t k(sigma, s) e^{omega (sigma - s)} d sigma.

    Returns (integral, closed form of the a e^{-b} majorant, a/(b - omega)).
    """
    a, b = kernel.bound_a, kernel.bound_b
    val, _ = quad(lambda sig: float(kernel(sig, s)) * np.exp(omega * (sig - s)),
                  s, t, epsabs=1e-14, epsrel=1e-12, limit=200)
    closed = -a / (omega - b) * (1.0 - np.exp((omega - b) * (t - s)))
    return float(val), float(closed), a / (b - omega)


# ---------------------------------------------------------------------------
# Trajectory-level verification


def _empirical_times(t_grid, dist, ladder) -> dict:
    """Earliest t after which ``dist`` stays <= eps, per eps."""
    out = {}
    for eps in ladder:
        above = np.nonzero(dist > eps)[0]
        if above.size == 0:
            out[eps] = float(t_grid[0])
        elif above[-1] == len(dist) - 1:
            out[eps] = float("inf")
        else:
            out[eps] = float(t_grid[above[-1] + 1])
    return out


@dataclass
class EnvelopeReport:
    max_ratio: float
    violations: int
    passed: bool
    slack: float
    t_epsilon: dict = field(default_factory=dict)
    initial_distance: float = 0.0


def verify_envelope_on_pair(traj_z: Trajectory, traj_y: Trajectory,
                            cert: StabilityCertificate, gen: DiscreteGenerator,
                            slack: float = 0.05,
                            epsilon_ladder: Sequence[float] = (1e-1, 1e-2, 1e-3)
                            ) -> EnvelopeReport:
    if (len(traj_z.t_grid) != len(traj_y.t_grid)
            or not np.allclose(traj_z.t_grid, traj_y.t_grid, rtol=0,
                               atol=1e-12)):
        raise ValueError("trajectories do not share a time grid")
    t = traj_y.t_grid
    dist = gen.norm(traj_z.states - traj_y.states)
    env = decay_envelope(cert, float(dist[0]), t, float(t[0]))
    allowed = np.atleast_1d(env) * (1 + slack)
    violations = int(np.sum(dist > allowed))
    with np.errstate(invalid="ignore", divide="ignore"):
        ratios = np.where(dist > 0, dist / np.where(env > 0, env, np.inf), 0.0)
    return EnvelopeReport(float(np.max(ratios)), violations, violations == 0,
                          slack, _empirical_times(t, dist, epsilon_ladder),
                          float(dist[0]))


@dataclass
class AttractorReport:
    predicted_times: dict
    reached: dict
    sup_norm: float
    sup_bound: float
    bounded: bool
    passed: bool


class PreconditionError(ValueError):
    pass


def verify_attractor(trajectories: Sequence[Trajectory],
                     epsilon_ladder: Sequence[float],
                     cert: StabilityCertificate, gen: DiscreteGenerator,
                     diameter: float, forcing: ForcingFunction,
                     slack: float = 0.1,
                     bound_slack: float = 0.05) -> AttractorReport:
    """Check convergence to zero by the predicted times and boundedness.

    Every trajectory must fall below each eps by (1 + slack) times
    log(D diameter / eps) / |decay exponent| and stay below
    D diameter (1 + bound_slack) throughout.
    """
    if not forcing.zero_at_zero:
        raise PreconditionError("forcing does not declare f(t, 0, 0) = 0")
    zero = np.zeros(gen.dim)
    for tr in trajectories[:1]:
        for t in np.linspace(tr.t_grid[0], tr.t_grid[-1], 7):
            if np.any(forcing(t, zero, zero) != 0):
                raise PreconditionError(f"f({t}, 0, 0) is not zero")

    predicted = {eps: cert.predicted_time(eps, diameter)
                 for eps in epsilon_ladder}
    reached = {eps: True for eps in epsilon_ladder}
    sup_norm = 0.0
    for tr in trajectories:
        norms = gen.norm(tr.states)
        sup_norm = max(sup_norm, float(norms.max()))
        t = tr.t_grid
        for eps in epsilon_ladder:
            deadline = t[0] + predicted[eps] * (1 + slack)
            after = t >= deadline
            if not after.any() or np.any(norms[after] > eps):
                reached[eps] = False
    bound = cert.D * diameter * (1 + bound_slack)
    bounded = sup_norm <= bound
    return AttractorReport(predicted, reached, sup_norm, bound, bounded,
                           bounded and all(reached.values()))


def fit_decay_rate(traj: Trajectory, t_skip: float,
                   gen: DiscreteGenerator) -> float:
    """Least-squares slope of log|y(t)| on [t0 + t_skip, t_end]."""
    t = traj.t_grid
    if not t_skip < t[-1] - t[0]:
        raise DecayFitError("t_skip exceeds the trajectory span")
    norms = gen.norm(traj.states)
    if not norms[-1] < norms[0]:
        raise DecayFitError("trajectory does not decay")
    floor = 1e3 * np.finfo(float).eps * norms[0]
    use = (t >= t[0] + t_skip) & (norms > floor)
    if use.sum() < 3:
        raise DecayFitError("fewer than 3 usable samples")
    slope, _ = np.polyfit(t[use], np.log(norms[use]), 1)
    return float(slope)
