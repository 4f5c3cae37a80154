"""Command-line entry point.

Verbs: ``simulate``, ``certify``, ``stability``, ``converge``.
Exit codes: 0 success, 1 verdict failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .config import ConfigError, ScenarioConfig, load_config, \
    serialize_config, replace
from .generator import BeamParams, build_beam_generator, \
    estimate_semigroup_type, low_eigenvalues
from .memory import ExpKernel
from .solver import PicardConvergenceError, ProblemSpec, Trajectory, \
    atomic_write, solve, trajectory_csv_lines
from .stability import DecayFitError, PreconditionError, certify_beam, \
    certify_general, fit_decay_rate, verify_attractor, verify_envelope_on_pair
from .state_space import BeamState, EnergyWeights, Grid, scale, \
    random_compatible_state

log = logging.getLogger("memorybeam")

EXIT_OK, EXIT_VERDICT, EXIT_CONFIG = 0, 1, 2


@dataclass
class ExperimentReport:
    config_text: str = ""
    certificate_text: str = ""
    summaries: list[dict] = field(default_factory=list)
    verdicts: dict = field(default_factory=dict)
    runtime: float = 0.0

    @property
    def passed(self) -> bool:
        return all(v in ("pass", "informative", "exact")
                   for v in self.verdicts.values())

    def to_text(self) -> str:
        out = ["# config"]
        out += [f"config.{ln}" for ln in self.config_text.splitlines()]
        if self.certificate_text:
            out += ["# certificate", self.certificate_text]
        for i, summary in enumerate(self.summaries):
            out.append(f"# trajectory {i}")
            out += [f"run.{i}.{k} = {_fmt(v)}" for k, v in summary.items()]
        out.append("# verdicts")
        out += [f"verdict.{k} = {v}" for k, v in self.verdicts.items()]
        out.append(f"runtime.seconds = {self.runtime:.3f}")
        return "\n".join(out) + "\n"


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _threads() -> int:
    raw = os.environ.get("MEMORYBEAM_THREADS", "")
    try:
        return max(1, int(raw))
    except ValueError:
        return min(4, os.cpu_count() or 1)


def _emit(args, text: str) -> None:
    if not args.quiet:
        sys.stdout.write(text)


# ---------------------------------------------------------------------------
# Scenario plumbing


def build_problem(cfg: ScenarioConfig, base_dir: str = "."):
    grid = cfg.grid
    gen = build_beam_generator(grid, cfg.params, EnergyWeights(),
                               viscosity=cfg.beam.viscosity)
    spec = ProblemSpec(gen, cfg.forcing_function(), ExpKernel(cfg.kernel.T),
                       cfg.time.t0, cfg.initial_state(base_dir))
    return gen, spec


def run_solver(cfg: ScenarioConfig, spec: ProblemSpec) -> Trajectory:
    t = cfg.time
    if cfg.solver.method == "picard":
        return solve(spec, t.t_end, t.dt, "picard", tol=cfg.solver.tol,
                     max_iter=cfg.solver.max_iter, window=cfg.solver.window)
    return solve(spec, t.t_end, t.dt, "strong")


def scenario_certificate(cfg: ScenarioConfig, gen, spec):
    est = estimate_semigroup_type(gen)
    if not est.stable or spec.forcing.lipschitz_C <= 0:
        return est, None
    kernel = spec.kernel
    return est, certify_general(spec.forcing.lipschitz_C, est.D, est.omega,
                                kernel.bound_a, kernel.bound_b)


def summarize(traj: Trajectory, gen) -> dict:
    norms = gen.norm(traj.states)
    span = traj.t_grid[-1] - traj.t_grid[0]
    try:
        rate = fit_decay_rate(traj, 0.25 * span, gen)
    except DecayFitError:
        rate = float("nan")
    return {"final_energy": float(norms[-1] ** 2),
            "initial_norm": float(norms[0]),
            "fitted_rate": rate}


# ---------------------------------------------------------------------------
# Verbs


def cmd_simulate(args) -> int:
    started = time.perf_counter()
    cfg = _load(args)
    gen, spec = build_problem(cfg, os.path.dirname(args.config))
    traj = run_solver(cfg, spec)
    report = ExperimentReport(config_text=serialize_config(cfg))
    est, cert = scenario_certificate(cfg, gen, spec)
    if cert is not None:
        report.certificate_text = cert.to_text()
    summary = summarize(traj, gen)
    if traj.meta["solver"] == "picard":
        summary["iterations"] = sum(traj.meta["iterations"])
        summary["final_residual"] = traj.meta["final_residual"]
    report.summaries.append(summary)
    report.verdicts["solve"] = "pass"
    if cert is not None and cert.certified and np.isfinite(
            summary["fitted_rate"]):
        report.verdicts["fitted_rate_within_bound"] = (
            "pass" if summary["fitted_rate"] <= cert.decay_exponent + 0.05
            else "fail")
    report.runtime = time.perf_counter() - started

    out_dir = args.out or cfg.output.dir
    csv = "\n".join(trajectory_csv_lines(traj, gen, cfg.output.downsample))
    atomic_write(os.path.join(out_dir, "trajectory.csv"), csv + "\n")
    atomic_write(os.path.join(out_dir, "report.txt"), report.to_text())
    _emit(args, report.to_text())
    return EXIT_OK if report.passed else EXIT_VERDICT


def cmd_certify(args) -> int:
    if args.omega is None and args.omega_source == "given":
        raise ConfigError("omega", "give --omega or --omega-source estimate")
    lines = []
    D = 1.0
    if args.omega_source == "estimate":
        grid = Grid(args.n_interior)
        gen = build_beam_generator(grid, BeamParams(args.m, args.alpha,
                                                    args.beta),
                                   viscosity=args.viscosity)
        est = estimate_semigroup_type(gen)
        if not est.stable:
            lines.append("estimate.stable = false")
            _emit(args, "\n".join(lines) + "\n")
            return EXIT_VERDICT
        omega, D = est.omega, est.D
        lines += [f"estimate.omega = {omega!r}", f"estimate.D = {D!r}",
                  f"estimate.method = {est.method}"]
    else:
        omega = args.omega
    for name, value in (("C", args.C), ("T", args.T), ("omega", omega)):
        if not value > 0:
            raise ConfigError(name, "must be positive")
    beam = certify_beam(args.C, omega, args.T)
    lines.append(beam.to_text())
    certified = beam.certified
    if D != 1.0:
        general = certify_general(args.C, D, omega, 1 / args.T, 1 / args.T)
        lines.append(general.to_text())
        certified = general.certified
    _emit(args, "\n".join(lines) + "\n")
    return EXIT_OK if certified else EXIT_VERDICT


def sample_ball(grid: Grid, params: BeamParams, gen, count: int,
                radius: float, rng: np.random.Generator) -> list[BeamState]:
    """Random domain-compatible states with norm <= radius."""
    states = []
    for _ in range(count):
        s = random_compatible_state(grid, rng, params.m, params.beta)
        r = radius * rng.random() ** (1.0 / gen.dim)
        states.append(scale(r / float(gen.norm(s.flatten())), s))
    return states


def cmd_stability(args) -> int:
    started = time.perf_counter()
    cfg = _load(args)
    if cfg.batch.count < 1:
        raise ConfigError("batch.count", "stability needs at least 1 pair")
    gen, spec = build_problem(cfg, os.path.dirname(args.config))
    if not spec.forcing.zero_at_zero:
        raise PreconditionError(
            "forcing.kind: forcing must vanish at zero for the attractor check")
    est, cert = scenario_certificate(cfg, gen, spec)
    report = ExperimentReport(config_text=serialize_config(cfg))
    if cert is None:
        report.verdicts["certificate"] = "fail"
        _emit(args, report.to_text())
        return EXIT_VERDICT
    report.certificate_text = cert.to_text()

    rng = np.random.default_rng(cfg.seed)
    bt = cfg.batch
    grid, params = cfg.grid, cfg.params
    firsts = sample_ball(grid, params, gen, bt.count, bt.radius, rng)
    if bt.pairing == "identical":
        seconds = list(firsts)
    else:
        seconds = sample_ball(grid, params, gen, bt.count, bt.radius, rng)

    def run(state):
        return run_solver(cfg, spec.with_initial(state))

    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        trajs_a = list(pool.map(run, firsts))
        trajs_b = list(pool.map(run, seconds))

    envelope_ok = True
    for i, (ta, tb) in enumerate(zip(trajs_a, trajs_b)):
        env = verify_envelope_on_pair(ta, tb, cert, gen, bt.slack,
                                      bt.epsilon)
        envelope_ok &= env.passed
        summary = summarize(ta, gen)
        summary.update(envelope_max_ratio=env.max_ratio,
                       envelope_violations=env.violations,
                       initial_distance=env.initial_distance)
        for eps, t_eps in env.t_epsilon.items():
            summary[f"t_eps[{eps!r}]"] = t_eps
        report.summaries.append(summary)

    attractor = verify_attractor(trajs_a + trajs_b, bt.epsilon, cert, gen,
                                 2 * bt.radius, spec.forcing,
                                 bt.attractor_slack, bt.slack)
    report.summaries.append({
        "attractor_sup_norm": attractor.sup_norm,
        "attractor_sup_bound": attractor.sup_bound,
        **{f"predicted_t_eps[{e!r}]": v
           for e, v in attractor.predicted_times.items()},
    })
    if cert.certified:
        report.verdicts["envelope"] = "pass" if envelope_ok else "fail"
        report.verdicts["attractor"] = "pass" if attractor.passed else "fail"
    else:
        report.verdicts["envelope"] = "informative"
        report.verdicts["attractor"] = "informative"
    report.runtime = time.perf_counter() - started

    out_dir = args.out or cfg.output.dir
    atomic_write(os.path.join(out_dir, "stability_report.txt"),
                 report.to_text())
    _emit(args, report.to_text())
    return EXIT_OK if report.passed else EXIT_VERDICT


def observed_order(coarse: float, fine: float) -> float:
    if coarse == 0 and fine == 0:
        return float("nan")
    return float(np.log2(coarse / fine))


def temporal_study(cfg: ScenarioConfig, base_dir: str = ".",
                   levels: int = 3) -> tuple[list[float], list[float]]:
    """Self-convergence differences between dt, dt/2, dt/4, ... solutions."""
    trajs = []
    for k in range(levels):
        c = replace(cfg, time={"dt": cfg.time.dt / 2 ** k})
        gen, spec = build_problem(c, base_dir)
        trajs.append(run_solver(c, spec))
    diffs = []
    for k in range(levels - 1):
        fine = trajs[k + 1].states[::2]
        diffs.append(float(np.max(gen.norm(trajs[k].states - fine))))
    orders = [observed_order(diffs[k], diffs[k + 1])
              for k in range(len(diffs) - 1)]
    return diffs, orders


def spatial_study(cfg: ScenarioConfig, count: int = 5
                  ) -> tuple[list[float], list[float]]:
    """Low-eigenvalue differences under n -> 2n -> 4n."""
    evs = []
    for k in range(3):
        grid = Grid((cfg.beam.n_interior + 1) * 2 ** k - 1)
        gen = build_beam_generator(grid, cfg.params,
                                   viscosity=cfg.beam.viscosity)
        evs.append(low_eigenvalues(gen, count))
    diffs = [float(np.max(np.abs(evs[k] - evs[k + 1]))) for k in range(2)]
    return diffs, [observed_order(*diffs)]


def cmd_converge(args) -> int:
    cfg = _load(args)
    base_dir = os.path.dirname(args.config)
    t_diffs, t_orders = temporal_study(cfg, base_dir)
    s_diffs, s_orders = spatial_study(cfg)
    lines = ["study,level,difference,order"]
    for k, d in enumerate(t_diffs):
        order = t_orders[k - 1] if k >= 1 else float("nan")
        lines.append(f"temporal,dt/{2 ** k}-dt/{2 ** (k + 1)},{d!r},{order!r}")
    for k, d in enumerate(s_diffs):
        order = s_orders[0] if k == 1 else float("nan")
        n = cfg.beam.n_interior
        lines.append(f"spatial,n{(n + 1) * 2 ** k - 1}-n"
                     f"{(n + 1) * 2 ** (k + 1) - 1},{d!r},{order!r}")

    def verdict(diffs, orders):
        if all(d == 0 for d in diffs):
            return "exact"
        return "pass" if all(abs(o - 2) <= 0.3 for o in orders) else "fail"

    verdicts = {"temporal_order": verdict(t_diffs, t_orders),
                "spatial_order": verdict(s_diffs, s_orders)}
    lines += [f"# verdict.{k} = {v}" for k, v in verdicts.items()]
    text = "\n".join(lines) + "\n"
    out_dir = args.out or cfg.output.dir
    atomic_write(os.path.join(out_dir, "convergence.csv"), text)
    _emit(args, text)
    ok = all(v in ("pass", "exact") for v in verdicts.values())
    return EXIT_OK if ok else EXIT_VERDICT


# ---------------------------------------------------------------------------


def _load(args) -> ScenarioConfig:
    if not args.config:
        raise ConfigError("--config", "required")
    try:
        cfg = load_config(args.config)
    except OSError as exc:
        raise ConfigError("--config", str(exc)) from None
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="memorybeam", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="scenario file (key = value)")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", default=None, help="output directory")
    common.add_argument("--quiet", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    sub.add_parser("simulate", parents=[common],
                   help="solve one scenario, write CSV and report")
    cert = sub.add_parser("certify", parents=[common],
                          help="evaluate the beam stability conditions")
    cert.add_argument("--C", type=float, required=True)
    cert.add_argument("--T", type=float, required=True)
    cert.add_argument("--omega", type=float, default=None)
    cert.add_argument("--omega-source", choices=("given", "estimate"),
                      default="given")
    cert.add_argument("--n-interior", type=int, default=16)
    cert.add_argument("--m", type=float, default=1.0)
    cert.add_argument("--alpha", type=float, default=1.0)
    cert.add_argument("--beta", type=float, default=1.0)
    cert.add_argument("--viscosity", type=float, default=0.25)
    sub.add_parser("stability", parents=[common],
                   help="envelope and attractor checks over a batch")
    sub.add_parser("converge", parents=[common],
                   help="time-step and grid refinement study")
    return parser


COMMANDS = {"simulate": cmd_simulate, "certify": cmd_certify,
            "stability": cmd_stability, "converge": cmd_converge}


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.verb](args)
    except (ConfigError, PreconditionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        # validation failures raised by the model types
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PicardConvergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VERDICT


if __name__ == "__main__":
    sys.exit(main())
