"""Acceptance gate: one group of tests per criterion, tolerances as stated.

A one-line verdict per criterion is printed in the terminal summary.
"""

import pathlib
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
import scipy.linalg
from scipy.integrate import quad, solve_ivp

from memorybeam import cli
from memorybeam.config import load_config
from memorybeam.generator import (BeamParams, DiscreteGenerator,
                                  apply_semigroup, build_beam_generator,
                                  estimate_semigroup_type, low_eigenvalues)
from memorybeam.memory import (ExpKernel, integrate_memory_filter,
                               memory_integral_quadrature)
from memorybeam.solver import (ForcingFunction, ProblemSpec,
                               continuous_dependence_probe, solve_mild_picard,
                               solve_strong_stepping, zero_forcing)
from memorybeam.stability import (StabilityCertificate, certify_beam,
                                  certify_general, kernel_bound_lemma,
                                  verify_attractor, verify_envelope_on_pair)
from memorybeam.state_space import (BeamState, Grid, energy,
                                    random_compatible_state, scale)

SCENARIOS = pathlib.Path(__file__).resolve().parents[1] / "scenarios"


def _detail(record_property, text):
    record_property("detail", text)
    print(text)


# ---------------------------------------------------------------------------
# 1. solver oracle equivalence


@pytest.mark.acceptance(1, "solver oracle equivalence")
def test_scalar_picard_matches_ode_oracle(record_property):
    gen = DiscreteGenerator.from_matrix([[0.0]])
    spec = ProblemSpec(gen, ForcingFunction(lambda t, y, z: -z, 1.0),
                       ExpKernel(1.0), 0.0, np.array([1.0]))
    tr = solve_mild_picard(spec, 5.0, 1e-3)
    # augmented system y' = -z, z' = y - z
    ref = solve_ivp(lambda t, u: [-u[1], u[0] - u[1]], (0.0, 5.0), [1.0, 0.0],
                    method="DOP853", rtol=1e-13, atol=1e-15,
                    t_eval=tr.t_grid)
    err = np.max(np.abs(tr.states[:, 0] - ref.y[0]))
    _detail(record_property, f"scalar sup error {err:.2e}")
    assert err <= 1e-6


@pytest.mark.acceptance(1, "solver oracle equivalence")
def test_beam_picard_matches_strong(record_property, linear_spec):
    a = solve_mild_picard(linear_spec, 2.0, 1e-3)
    b = solve_strong_stepping(linear_spec, 2.0, 1e-3)
    diff = np.max(linear_spec.generator.norm(a.states - b.states))
    _detail(record_property, f"beam Picard vs strong {diff:.2e}")
    assert diff <= 5e-5


# ---------------------------------------------------------------------------
# 2. memory reduction identity

_ANALYTIC = {
    "sin3t": lambda t: np.sin(3 * t),
    "t^2": lambda t: t ** 2,
    "exp(-2t)": lambda t: np.exp(-2 * t),
    "cos(t)+t": lambda t: np.cos(t) + t,
    "tanh(2t-1)": lambda t: np.tanh(2 * t - 1),
}


def _exact_memory(y, t, T):
    val, _ = quad(lambda s: np.exp(-(t - s) / T) / T * y(s), 0.0, t,
                  epsabs=1e-14, epsrel=1e-13, limit=200)
    return val


@pytest.mark.acceptance(2, "memory reduction identity")
@pytest.mark.parametrize("name", list(_ANALYTIC))
def test_filter_equals_quadrature(name, record_property):
    y, T = _ANALYTIC[name], 1.0
    t = np.linspace(0.0, 2.0, 2001)
    z_filter = integrate_memory_filter(t, y(t), T)
    z_quad = np.array([memory_integral_quadrature(ExpKernel(T), t, y(t), tj)
                       for tj in t[::50]])
    gap = np.max(np.abs(z_filter[::50] - z_quad))

    probes = (0.5, 1.0, 2.0)
    exact = np.array([_exact_memory(y, tp, T) for tp in probes])
    errs_f, errs_q = [], []
    for steps in (500, 1000, 2000):
        tt = np.linspace(0.0, 2.0, steps + 1)
        zf = integrate_memory_filter(tt, y(tt), T)
        idx = [int(round(tp / 2.0 * steps)) for tp in probes]
        errs_f.append(np.max(np.abs(zf[idx] - exact)))
        errs_q.append(np.max(np.abs(np.array(
            [memory_integral_quadrature(ExpKernel(T), tt, y(tt), tp)
             for tp in probes]) - exact)))
    order_f = np.log2(np.array(errs_f[:-1]) / np.array(errs_f[1:]))
    order_q = np.log2(np.array(errs_q[:-1]) / np.array(errs_q[1:]))
    _detail(record_property, f"{name}: gap {gap:.1e}, orders "
            f"{order_f.min():.2f}/{order_q.min():.2f}")
    assert gap <= 1e-6
    assert np.all(np.abs(order_f - 2) < 0.3)
    assert np.all(np.abs(order_q - 2) < 0.3)


# ---------------------------------------------------------------------------
# 3. semigroup laws and contraction


@pytest.mark.acceptance(3, "semigroup laws and contraction")
def test_identity_and_semigroup_law(record_property, beam_gen, smooth_state):
    assert apply_semigroup(beam_gen, 0.0, smooth_state) == smooth_state
    assert np.array_equal(beam_gen.propagator(0.0), np.eye(beam_gen.dim))
    rng = np.random.default_rng(2024)
    A = beam_gen.matrix
    worst = 0.0
    for t, s in rng.uniform(0.0, 1.0, (50, 2)):
        lhs = scipy.linalg.expm((t + s) * A)
        rhs = scipy.linalg.expm(t * A) @ scipy.linalg.expm(s * A)
        rel = beam_gen.operator_norm(lhs - rhs) / beam_gen.operator_norm(lhs)
        worst = max(worst, rel)
    _detail(record_property, f"semigroup law rel {worst:.1e}")
    assert worst <= 1e-8


@pytest.mark.acceptance(3, "semigroup laws and contraction")
def test_energy_non_increasing(record_property, grid, params, beam_gen):
    rng = np.random.default_rng(99)
    worst = -np.inf
    for _ in range(20):
        s = random_compatible_state(grid, rng, params.m, params.beta)
        s = scale(1.0 / beam_gen.norm(s.flatten()), s)
        spec = ProblemSpec(beam_gen, zero_forcing(), ExpKernel(0.2), 0.0, s)
        tr = solve_strong_stepping(spec, 5.0, 1e-3)
        e = np.array([energy(BeamState.from_flat(y, grid), grid)
                      for y in tr.states])
        worst = max(worst, float(np.max(np.diff(e))))
    _detail(record_property, f"largest energy step {worst:.1e}")
    assert worst <= 1e-9


# ---------------------------------------------------------------------------
# 4 and 5. envelope and attractor on the certified linear example


@pytest.fixture(scope="module")
def certified_batch():
    cfg = load_config(SCENARIOS / "stability_linear.cfg")
    gen, spec = cli.build_problem(cfg, str(SCENARIOS))
    est = estimate_semigroup_type(gen)
    C = max(cfg.forcing.lam, cfg.forcing.gamma ** 2)
    assert spec.forcing.lipschitz_C == C
    cert = certify_general(C, est.D, est.omega, spec.kernel.bound_a,
                           spec.kernel.bound_b)
    rng = np.random.default_rng(cfg.seed)
    starts = cli.sample_ball(cfg.grid, cfg.params, gen, 20, 1.0, rng)

    def run(state):
        return solve_strong_stepping(spec.with_initial(state), cfg.time.t_end,
                                     cfg.time.dt)

    with ThreadPoolExecutor(max_workers=cli._threads()) as pool:
        trajs = list(pool.map(run, starts))
    return cfg, gen, spec, cert, trajs


@pytest.mark.acceptance(4, "decay envelope")
def test_envelope_on_random_pairs(record_property, certified_batch):
    cfg, gen, spec, cert, trajs = certified_batch
    assert cert.certified
    ratios = []
    for i in range(10):
        rep = verify_envelope_on_pair(trajs[2 * i], trajs[2 * i + 1], cert,
                                      gen, slack=0.05)
        ratios.append(rep.max_ratio)
        assert rep.passed, (i, rep.max_ratio)
    _detail(record_property, f"D={cert.D:.3f} omega={cert.omega:.3f} "
            f"exponent={cert.decay_exponent:.4f} max ratio {max(ratios):.3f}")


@pytest.mark.acceptance(5, "attractor and boundedness")
def test_attractor(record_property, certified_batch):
    cfg, gen, spec, cert, trajs = certified_batch
    ladder = [1e-1, 1e-2, 1e-3]
    rep = verify_attractor(trajs[:8], ladder, cert, gen, diameter=2.0,
                           forcing=spec.forcing, slack=0.1, bound_slack=0.05)
    deadline = rep.predicted_times[1e-3] * 1.1
    assert deadline <= cfg.time.t_end
    _detail(record_property, f"t(1e-3)*1.1 = {deadline:.2f}, sup "
            f"{rep.sup_norm:.3f} <= {rep.sup_bound:.3f}")
    assert all(rep.reached.values())
    assert rep.sup_norm <= cert.D * 2.0 * 1.05
    assert rep.passed


# ---------------------------------------------------------------------------
# 6. certificate algebra


@pytest.mark.acceptance(6, "certificate algebra")
def test_certificate_algebra(record_property):
    rng = np.random.default_rng(6)
    N = 100_000
    bad_exponent = disagreements = 0
    certified_general = certified_beam = 0
    C, D = rng.uniform(0.0, 2.0, N), rng.uniform(1.0, 4.0, N)
    omega = np.exp(rng.uniform(np.log(0.05), np.log(5.0), N))
    a, b = np.exp(rng.uniform(np.log(0.01), np.log(50.0), (2, N)))
    T = np.exp(rng.uniform(np.log(1e-3), np.log(10.0), N))
    for i in range(N):
        if C[i] == 0:
            continue
        g = certify_general(C[i], D[i], omega[i], a[i], b[i])
        if g.certified:
            certified_general += 1
            bad_exponent += not g.decay_exponent < 0
        beam = certify_beam(C[i] * omega[i] / 2.0, omega[i], T[i])
        certified_beam += beam.certified
        disagreements += beam.certified != beam.general().certified
    _detail(record_property, f"{certified_general} general and "
            f"{certified_beam} beam certified of {N}; {bad_exponent} bad "
            f"exponents, {disagreements} disagreements")
    assert bad_exponent == 0 and disagreements == 0
    assert certified_general > 1000 and certified_beam > 1000


@pytest.mark.acceptance(6, "certificate algebra")
def test_certificate_boundaries():
    for omega, D in [(1.0, 1.0), (0.7, 1.3), (3.0, 2.5), (0.1, 1.0)]:
        c = StabilityCertificate(omega / D, D, omega, 0.1, 10.0)
        assert not c.cond1 and not c.certified
    for omega in (0.3, 1.0, 4.0):
        for T in (1e-4, 0.05, 1.0):
            beam = certify_beam(omega / 2, omega, T)
            assert not beam.cond_C and not beam.certified
    beam = certify_beam(0.25, 1.0, 2.0 / 3.0)
    assert beam.T == beam.T_bound and not beam.certified


# ---------------------------------------------------------------------------
# 7. kernel-bound lemma


@pytest.mark.acceptance(7, "kernel bound lemma")
def test_kernel_bound_lemma(record_property):
    rng = np.random.default_rng(7)
    violations, worst = 0, 0.0
    for _ in range(1000):
        k = ExpKernel(np.exp(rng.uniform(np.log(0.05), np.log(5.0))))
        s = rng.uniform(0.0, 10.0)
        t = s + rng.exponential(3.0 * k.T)
        omega = k.bound_b * rng.uniform(-1.0, 0.999)
        val, closed, limit = kernel_bound_lemma(k, s, t, omega)
        violations += not val < limit
        worst = max(worst, abs(val - closed) / limit)
    _detail(record_property, f"{violations} violations, closed-form gap "
            f"{worst:.1e}")
    assert violations == 0
    assert worst < 1e-8


# ---------------------------------------------------------------------------
# 8. uniqueness and continuous dependence


@pytest.mark.acceptance(8, "uniqueness and continuous dependence")
def test_picard_uniqueness(record_property, linear_spec):
    tol = 1e-10
    runs = [solve_mild_picard(linear_spec, 2.0, 1e-3, tol=tol,
                              initial_guess=g)
            for g in ("semigroup", "constant")]
    zero = solve_mild_picard(linear_spec, 2.0, 1e-3, tol=tol,
                             initial_guess=np.zeros_like(runs[0].states))
    gen = linear_spec.generator
    d1 = np.max(gen.norm(runs[0].states - runs[1].states))
    d2 = np.max(gen.norm(runs[0].states - zero.states))
    _detail(record_property, f"iterate spread {max(d1, d2):.1e}")
    assert d1 <= 2 * tol and d2 <= 2 * tol


def _perturbations(spec, grid, params, count, size, seed):
    rng = np.random.default_rng(seed)
    gen, v = spec.generator, spec.initial_vector
    out = []
    for _ in range(count):
        d = random_compatible_state(grid, rng, params.m, params.beta).flatten()
        out.append(v + size * d / gen.norm(d))
    return out


@pytest.mark.acceptance(8, "uniqueness and continuous dependence")
def test_gronwall_ratios(record_property, linear_spec, grid, params):
    perts = _perturbations(linear_spec, grid, params, 10, 1e-3, 8)
    rep = continuous_dependence_probe(linear_spec, perts, 2.0, 1e-3)
    _detail(record_property, f"max ratio {max(rep.ratios):.3f} below "
            f"Gronwall constant {rep.gronwall_constant:.1f}")
    assert rep.passed
    assert max(rep.ratios) < rep.gronwall_constant


@pytest.mark.acceptance(8, "uniqueness and continuous dependence")
def test_halving_perturbation(record_property, linear_spec, grid, params):
    gen, v = linear_spec.generator, linear_spec.initial_vector
    base = solve_strong_stepping(linear_spec, 2.0, 1e-3)
    (w,) = _perturbations(linear_spec, grid, params, 1, 1e-3, 80)
    sups = []
    for factor in (1.0, 0.5):
        tr = solve_strong_stepping(linear_spec.with_initial(
            v + factor * (w - v)), 2.0, 1e-3)
        sups.append(np.max(gen.norm(tr.states - base.states)))
    ratio = sups[0] / sups[1]
    _detail(record_property, f"halving ratio {ratio:.6f}")
    assert abs(ratio - 2.0) <= 0.02


# ---------------------------------------------------------------------------
# 9. convergence orders


@pytest.mark.acceptance(9, "convergence orders")
def test_temporal_order(record_property):
    cfg = load_config(SCENARIOS / "linear_example.cfg")
    gen, spec = cli.build_problem(cfg, str(SCENARIOS))
    dt = cfg.time.dt
    levels = [solve_strong_stepping(spec, cfg.time.t_end, dt / 2 ** k)
              for k in range(4)]
    # self-convergence: differences of successive refinements
    diffs = [np.max(gen.norm(levels[k].states - levels[k + 1].states[::2]))
             for k in range(3)]
    orders = np.log2(np.array(diffs[:-1]) / np.array(diffs[1:]))
    # error against the dt/8 run; the reference's own error is 1/64 of
    # the coarse one, so only the dt -> dt/2 ratio is an unbiased estimate
    ref = levels[3].states
    errs = [np.max(gen.norm(levels[k].states - ref[::2 ** (3 - k)]))
            for k in range(2)]
    ref_order = np.log2(errs[0] / errs[1])
    _detail(record_property, "temporal orders "
            + ", ".join(f"{o:.3f}" for o in orders)
            + f"; vs dt/8 reference {ref_order:.3f}")
    assert np.all(np.abs(orders - 2.0) <= 0.3)
    assert abs(ref_order - 2.0) <= 0.3


@pytest.mark.acceptance(9, "convergence orders")
def test_spatial_eigenvalue_order(record_property):
    evs = [low_eigenvalues(build_beam_generator(Grid(n), BeamParams()), 5)
           for n in (16, 33, 67)]
    diffs = [np.max(np.abs(evs[k] - evs[k + 1])) for k in range(2)]
    order = np.log2(diffs[0] / diffs[1])
    _detail(record_property, f"spatial order {order:.3f}")
    assert abs(order - 2.0) <= 0.3
