"""
Experiment orchestration: one ExperimentConfig in, one ResultRecord out.
"""

import logging
import time
from typing import Callable, Dict, List, Optional

import numpy as np

from ..model.errors import InvalidArgumentError
from ..model.schemas import ExperimentConfig, ResultRecord, ScalarResult
from ..model.types import ControlPath, ControlProblem, PathBundle, ScenarioEnsemble, TimeGrid
from .control import (
    cost_samples, duality_check, gateaux_check, mp_residual, solve_adjoint, solve_state, solve_variational,
    variational_inequality_check,
)
from .lq import lq_assemble, lq_solve, lq_verify
from .meanfield import pairwise_mean, std_err
from .mf_solver import solve_forward_dsde, solve_mf_bdsde
from .mkv_spde import build_base, evaluate_u
from .presets import (
    build_coefficients, control_problem, get_preset, lq_coefficients, oracle_value, problem_kind,
    with_preset_defaults,
)
from .scenario import sample_ensemble


logger = logging.getLogger(__name__)

# scalar compared against the oracle in convergence studies
PRIMARY_SCALAR = {"solve": "Y0", "spde-eval": "u", "lq": "J"}

MIN_AXIS_VALUES = 3


class Outcome:
    """Mutable collector for the parts of a ResultRecord"""

    def __init__(self):
        self.scalars: Dict[str, ScalarResult] = {}
        self.series: Dict[str, List[float]] = {}
        self.trace: List[float] = []
        self.table: List[Dict[str, float]] = []

    def scalar(self, name: str, value: float, se: float = 0.0) -> None:
        self.scalars[name] = ScalarResult(value=float(value), std_err=float(se))

    def add_series(self, name: str, values) -> None:
        self.series[name] = [float(v) for v in np.asarray(values, dtype=float).ravel()]


def make_ensemble(config: ExperimentConfig) -> ScenarioEnsemble:
    grid = TimeGrid(0.0, config.horizon, config.n_steps)
    return sample_ensemble(grid, config.m_outer, config.k_inner, config.seed, config.threads)


def group_std_err(values: np.ndarray, ens: ScenarioEnsemble) -> float:
    """SE over backward-driver group means; particle-level when there is one group"""
    if ens.m_outer == 1:
        return std_err(values)
    return std_err(pairwise_mean(values.reshape(ens.m_outer, ens.k_inner), axis=1))


def _path_series(out: Outcome, bundle: PathBundle, y_name: str, z_name: str) -> None:
    Y = bundle.Y
    mean = pairwise_mean(Y, axis=0)
    centered = Y - mean
    out.add_series("t", bundle.grid.points)
    out.add_series(f"{y_name}_mean", mean)
    out.add_series(f"{y_name}_var", pairwise_mean(centered * centered, axis=0))
    out.add_series(f"{z_name}_mean", pairwise_mean(bundle.Z, axis=0))


def _oracle_error(out: Outcome, config: ExperimentConfig, name: str) -> None:
    oracle = oracle_value(config)
    if oracle is None:
        return
    out.scalar("oracle", oracle)
    out.scalar("error", abs(out.scalars[name].value - oracle))


def _constant_controls(config: ExperimentConfig, ens: ScenarioEnsemble) -> ControlPath:
    return ControlPath.constant(config.control_value, ens.n_particles, ens.grid)


def run_solve(config: ExperimentConfig, out: Outcome) -> None:
    ens = make_ensemble(config)
    kind = problem_kind(config)
    coeffs = build_coefficients(config)
    if kind == "mkv":
        base = build_base(
            coeffs, config.x0, ens, config.solver, config.picard_tol, config.max_iter, config.enforce_h1, config.threads,
        )
        bundle, trace = base.YZ0, base.trace
    elif kind in ("bdsde", "control"):
        controls = _constant_controls(config, ens).v if kind == "control" else None
        bundle, trace = solve_mf_bdsde(
            coeffs, ens, config.solver, config.picard_tol, config.max_iter,
            controls=controls, enforce_h1=config.enforce_h1, threads=config.threads,
        )
    else:
        raise InvalidArgumentError("solve does not apply to LQ problems; use the lq command")

    y0 = bundle.Y[:, 0]
    out.scalar("Y0", pairwise_mean(y0), group_std_err(y0, ens))
    out.scalar("Z0", pairwise_mean(bundle.Z[:, 0]), group_std_err(bundle.Z[:, 0], ens))
    out.scalar("picard_iterations", trace.iterations)
    out.scalar("picard_distance", trace.final_distance)
    _oracle_error(out, config, "Y0")
    _path_series(out, bundle, "Y", "Z")
    out.trace = list(trace.distances)


def run_forward(config: ExperimentConfig, out: Outcome) -> None:
    ens = make_ensemble(config)
    kind = problem_kind(config)
    if kind not in ("bdsde", "control"):
        raise InvalidArgumentError(f"forward does not apply to {kind} problems")
    coeffs = build_coefficients(config)
    controls = _constant_controls(config, ens).v if kind == "control" else None
    bundle, trace = solve_forward_dsde(
        coeffs, ens, config.solver, config.picard_tol, config.max_iter,
        controls=controls, enforce_h1=config.enforce_h1, threads=config.threads,
    )
    p_end = bundle.Y[:, -1]
    out.scalar("P_T", pairwise_mean(p_end), std_err(p_end))
    out.scalar("picard_iterations", trace.iterations)
    out.scalar("picard_distance", trace.final_distance)
    _path_series(out, bundle, "P", "Q")
    out.trace = list(trace.distances)


def run_spde_eval(config: ExperimentConfig, out: Outcome) -> None:
    if problem_kind(config) != "mkv":
        raise InvalidArgumentError("spde-eval needs forward coefficients b and sigma")
    ens = make_ensemble(config)
    coeffs = build_coefficients(config)
    base = build_base(
        coeffs, config.x0, ens, config.solver, config.picard_tol, config.max_iter, config.enforce_h1, config.threads,
    )
    sample = evaluate_u(config.query_t, config.query_x, base, coeffs, config.solver, stream=0, threads=config.threads)
    out.scalar("u", sample.mean, sample.std_err)
    out.scalar("t", sample.t)
    out.scalar("x", sample.x)
    out.scalar("base_Y0", pairwise_mean(base.YZ0.Y[:, 0]), group_std_err(base.YZ0.Y[:, 0], ens))
    _oracle_error(out, config, "u")
    out.add_series("u_groups", sample.values)
    out.trace = list(base.trace.distances) if base.trace else []


def _control_problem(config: ExperimentConfig) -> ControlProblem:
    kind = problem_kind(config)
    if kind == "lq":
        return lq_assemble(lq_coefficients(config), horizon=config.horizon)
    if kind != "control":
        raise InvalidArgumentError(f"control-check needs a control problem, got a {kind} problem")
    return control_problem(config)


def run_control_check(config: ExperimentConfig, out: Outcome) -> None:
    ens = make_ensemble(config)
    prob = _control_problem(config)
    cfg, threads = config.solver, config.threads
    v = _constant_controls(config, ens)
    v_dir = ControlPath.constant(config.direction, ens.n_particles, ens.grid)

    state = solve_state(prob, v, ens, cfg, config.picard_tol, config.max_iter, config.enforce_h1, threads)
    samples = cost_samples(prob, v, state, threads)
    out.scalar("J", pairwise_mean(samples), group_std_err(samples, ens))
    out.scalar("Y0", pairwise_mean(state.Y[:, 0]), group_std_err(state.Y[:, 0], ens))

    adj = solve_adjoint(
        prob, v, state, ens, cfg, config.picard_tol, config.max_iter, threads=threads, enforce_h2=config.enforce_h1,
    )
    mp = mp_residual(prob, v, adj, state, tol_mp=config.mp_tol, threads=threads)
    out.scalar("mp_global_min", mp.global_min)
    out.scalar("mp_violation_fraction", mp.violation_fraction)

    gateaux = gateaux_check(
        prob, v, v_dir, config.eps_list, ens, cfg, max_iter=config.max_iter, enforce_h1=config.enforce_h1,
        threads=threads,
    )
    if gateaux.slope is not None:
        out.scalar("gateaux_slope", gateaux.slope)
    out.scalar("gateaux_residual", max(gateaux.residual))
    out.add_series("eps", gateaux.eps)
    out.add_series("sup_sq_diff", gateaux.sup_sq_diff)
    out.add_series("gateaux_residual", gateaux.residual)

    var = solve_variational(prob, v, state, v_dir, ens, cfg, config.picard_tol, config.max_iter, threads)
    duality = duality_check(prob, v, state, adj, var, v_dir, threads)
    out.scalar("duality_direct", duality.direct, duality.direct_se)
    out.scalar("duality_integral", duality.via_integral, duality.integral_se)
    out.scalar("duality_gap", duality.gap)

    if config.eps > 0:
        vi = variational_inequality_check(
            prob, v, state, v_dir, config.eps, ens, cfg, max_iter=config.max_iter,
            enforce_h1=config.enforce_h1, threads=threads,
        )
        out.scalar("dJ_finite_difference", vi.finite_difference)
        out.scalar("dJ_expansion", vi.expansion, vi.expansion_se)

    out.add_series("t", ens.grid.points)
    out.add_series("p_mean", pairwise_mean(adj.p, axis=0))
    out.add_series("q_mean", pairwise_mean(adj.q, axis=0))


def run_lq(config: ExperimentConfig, out: Outcome) -> None:
    if problem_kind(config) != "lq":
        raise InvalidArgumentError("lq needs LQ coefficients (a preset of kind lq or an [lq] block)")
    ens = make_ensemble(config)
    c = lq_coefficients(config)
    cfg, threads = config.solver, config.threads
    sol = lq_solve(
        c, ens, cfg, tol=config.picard_tol, max_iter=config.max_iter, picard_tol=config.picard_tol,
        picard_max_iter=config.max_iter, enforce_h1=config.enforce_h1, threads=threads,
    )
    report = lq_verify(
        sol, c, ens, n_perturb=config.n_perturb, eps=config.eps, seed=config.seed, cfg=cfg,
        picard_tol=config.picard_tol, picard_max_iter=config.max_iter, tol_mp=config.mp_tol,
        enforce_h1=config.enforce_h1, threads=threads,
    )
    u = sol.uhat.v
    y0 = sol.state.Y[:, 0]
    out.scalar("u_mean", pairwise_mean(u.ravel()), group_std_err(pairwise_mean(u, axis=1), ens))
    out.scalar("Y0", pairwise_mean(y0), group_std_err(y0, ens))
    out.scalar("J", sol.cost_at_opt, sol.cost_std_err)
    out.scalar("fixed_point_residual", sol.fixed_point_residual)
    out.scalar("min_delta", report.min_delta)
    if report.mp is not None:
        out.scalar("mp_global_min", report.mp.global_min)
        out.scalar("mp_violation_fraction", report.mp.violation_fraction)
    _oracle_error(out, config, "J")
    out.add_series("t", ens.grid.points)
    out.add_series("u_mean", pairwise_mean(u, axis=0))
    out.add_series("p_mean", pairwise_mean(sol.adjoint.p, axis=0))
    out.add_series("q_mean", pairwise_mean(sol.adjoint.q, axis=0))
    out.add_series("deltas", report.deltas)
    out.trace = list(sol.updates)


def base_command(config: ExperimentConfig) -> str:
    """Command a convergence study repeats"""
    if config.preset is not None:
        return str(get_preset(config.preset).defaults.get("command", "solve"))
    return {"lq": "lq", "mkv": "spde-eval"}.get(problem_kind(config), "solve")


def fit_slope(axis_values: List[float], errors: List[float]) -> Optional[float]:
    """Log-log least-squares slope, None when some error is not positive"""
    if len(errors) < 2 or any(not (e > 0) for e in errors):
        return None
    return float(np.polyfit(np.log(axis_values), np.log(errors), 1)[0])


def _axis_config(config: ExperimentConfig, command: str, value: float) -> ExperimentConfig:
    if config.axis == "steps":
        n_steps = int(round(value))
        if n_steps < 1 or n_steps != value:
            raise InvalidArgumentError(f"step counts must be positive integers, got {value}")
        return config.model_copy(update={"command": command, "n_steps": n_steps})
    n_particles = int(round(value))
    if n_particles != value or n_particles % config.m_outer:
        raise InvalidArgumentError(f"particle count {value} is not a multiple of m_outer={config.m_outer}")
    return config.model_copy(update={"command": command, "k_inner": n_particles // config.m_outer})


def run_convergence_study(config: ExperimentConfig, out: Outcome) -> None:
    if config.axis is None:
        raise InvalidArgumentError("convergence-study needs an axis (steps, particles or epsilon)")
    values = [float(v) for v in config.axis_values]
    if len(values) < MIN_AXIS_VALUES:
        raise InvalidArgumentError(f"need at least {MIN_AXIS_VALUES} axis values, got {len(values)}")
    if any(v <= 0 for v in values):
        raise InvalidArgumentError(f"axis values must be positive, got {values}")

    if config.axis == "epsilon":
        if problem_kind(config) not in ("control", "lq"):
            raise InvalidArgumentError("an epsilon study needs a control problem")
        ens = make_ensemble(config)
        prob = _control_problem(config)
        v = _constant_controls(config, ens)
        v_dir = ControlPath.constant(config.direction, ens.n_particles, ens.grid)
        report = gateaux_check(
            prob, v, v_dir, values, ens, config.solver, max_iter=config.max_iter,
            enforce_h1=config.enforce_h1, threads=config.threads,
        )
        errors = list(report.sup_sq_diff)
        measured = [ScalarResult(value=e) for e in errors]
    else:
        command = base_command(config)
        if command not in PRIMARY_SCALAR:
            raise InvalidArgumentError(f"no primary scalar for a {command} study")
        oracle = oracle_value(config.model_copy(update={"command": command}))
        if oracle is None:
            raise InvalidArgumentError(f"preset {config.preset!r} has no oracle to measure errors against")
        measured = []
        for value in values:
            point = _run_record(_axis_config(config, command, value))
            measured.append(point.scalars[PRIMARY_SCALAR[command]])
            logger.info(f"{config.axis}={value:g}: {PRIMARY_SCALAR[command]}={measured[-1].value:.6f}")
        errors = [abs(m.value - oracle) for m in measured]

    for value, m, error in zip(values, measured, errors):
        out.table.append({"axis_value": value, "value": m.value, "std_err": m.std_err, "error": error})
    slope = fit_slope(values, errors)
    if slope is not None:
        out.table.append({"slope": slope})
        out.scalar("slope", slope)
    if config.axis == "particles":
        # Monte Carlo rate, read from the reported standard errors
        se_slope = fit_slope(values, [m.std_err for m in measured])
        if se_slope is not None:
            out.scalar("se_slope", se_slope)
    logger.info(f"Convergence study over {config.axis}: slope={slope}")


COMMANDS: Dict[str, Callable[[ExperimentConfig, Outcome], None]] = {
    "solve": run_solve,
    "forward": run_forward,
    "spde-eval": run_spde_eval,
    "control-check": run_control_check,
    "lq": run_lq,
    "convergence-study": run_convergence_study,
}


def _run_record(config: ExperimentConfig) -> ResultRecord:
    out = Outcome()
    start = time.perf_counter()
    COMMANDS[config.command](config, out)
    return ResultRecord(
        command=config.command,
        config=config.model_dump(mode="json"),
        scalars=out.scalars,
        series=out.series,
        trace=out.trace,
        table=out.table,
        wall_clock=time.perf_counter() - start,
    )


def run(config: ExperimentConfig) -> ResultRecord:
    """Dispatch one experiment; preset defaults fill fields the config leaves unset"""
    config = with_preset_defaults(config)
    logger.info(f"Running {config.command} (preset={config.preset}, seed={config.seed}, threads={config.threads})")
    record = _run_record(config)
    logger.info(f"{config.command} finished in {record.wall_clock:.2f}s")
    return record


def convergence_study(config: ExperimentConfig) -> ResultRecord:
    return run(config.model_copy(update={"command": "convergence-study"}))
