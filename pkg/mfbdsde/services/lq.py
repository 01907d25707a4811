"""
Linear-quadratic specialization: problem assembly, the coupled
state/adjoint/optimality fixed point, and a sampled cost-dominance check.
"""

import logging
from typing import Dict

import numpy as np

from ..model.errors import InvalidArgumentError, IterationLimitError
from ..model.expr import Expr, Var, free_vars
from ..model.schemas import LipschitzMeta, LQCoefficients, SolverConfig
from ..model.types import (
    CoefficientSet, ControlPath, ControlProblem, DominanceReport, LQSolution, ScenarioEnsemble, TerminalMode,
)
from .control import cost, cost_samples, mp_residual, solve_adjoint, solve_state
from .dsl import add, evaluate, mul, num, parse, power
from .meanfield import pairwise_mean, std_err
from .mf_solver import require_h2


logger = logging.getLogger(__name__)

COEFFICIENT_NAMES = (
    "A1", "A2", "B1", "B2", "C1", "C2", "D1", "D2", "E1", "E2", "F1", "F2",
    "M1", "M2", "N1", "N2", "R1", "R2", "Q1_0", "Q2_0",
)
NONNEGATIVE = ("M1", "M2", "N1", "N2", "Q1_0", "Q2_0")

# sample count for sup-norms of t-dependent coefficients
SUP_SAMPLES = 257

DAMPING = 0.5


def coefficient_expr(name: str, value) -> Expr:
    if isinstance(value, str):
        e = parse(value)
        extra = free_vars(e) - {"t"}
        if extra:
            raise InvalidArgumentError(f"LQ coefficient {name} may only depend on t, got {sorted(extra)}")
        return e
    return num(float(value))


def coefficient_exprs(c: LQCoefficients) -> Dict[str, Expr]:
    return {name: coefficient_expr(name, getattr(c, name)) for name in COEFFICIENT_NAMES}


def sample_coefficient(e: Expr, times: np.ndarray) -> np.ndarray:
    return np.broadcast_to(evaluate(e, {"t": times}), times.shape).astype(float)


def _linear_form(pairs) -> Expr:
    result: Expr = num(0.0)
    for coefficient, variable in pairs:
        result = add(result, mul(coefficient, Var(variable)))
    return result


def _quadratic_form(pairs) -> Expr:
    result: Expr = num(0.0)
    for coefficient, variable in pairs:
        result = add(result, mul(mul(num(0.5), coefficient), power(Var(variable), 2)))
    return result


def lq_assemble(c: LQCoefficients, horizon: float = 1.0) -> ControlProblem:
    """
    theta^f = A1 y + B1 z + C1 v + A2 y' + B2 z' + C2 v', theta^g likewise with D, E, F,
    l = (M1 y^2 + N1 z^2 + R1 v^2 + M2 y'^2 + N2 z'^2 + R2 v'^2)/2 and
    h = (Q1_0 y^2 + Q2_0 y'^2)/2. Lipschitz metadata are sup-norms over [0, horizon].
    """
    k = coefficient_exprs(c)
    times = np.linspace(0.0, horizon, SUP_SAMPLES)
    samples = {name: sample_coefficient(e, times) for name, e in k.items()}

    for name, values in samples.items():
        if not np.all(np.isfinite(values)):
            raise InvalidArgumentError(f"LQ coefficient {name} is not bounded on [0, {horizon}]")
    for name in NONNEGATIVE:
        if np.any(samples[name] < 0):
            raise InvalidArgumentError(f"LQ weight {name} must be nonnegative")
    if np.any(samples["R1"] + samples["R2"] <= 0):
        raise InvalidArgumentError("R1 + R2 must be positive on the whole horizon")

    sup = {name: float(np.max(np.abs(values))) for name, values in samples.items()}
    meta = LipschitzMeta(
        L_y=sup["A1"], L_z=sup["B1"], L_yp=sup["A2"], L_zp=sup["B2"], L_v=sup["C1"], L_vp=sup["C2"],
        K_y=sup["D1"], K_yp=sup["D2"], K_v=sup["F1"], K_vp=sup["F2"],
        alpha1=0.0, alpha2=1.0, alpha3=sup["E1"] ** 2, alpha4=sup["E2"] ** 2, L_gamma=1.0,
    )

    coeffs = CoefficientSet(
        theta_f=_linear_form([(k["A1"], "y"), (k["B1"], "z"), (k["C1"], "v"), (k["A2"], "yp"), (k["B2"], "zp"), (k["C2"], "vp")]),
        theta_g=_linear_form([(k["D1"], "y"), (k["E1"], "z"), (k["F1"], "v"), (k["D2"], "yp"), (k["E2"], "zp"), (k["F2"], "vp")]),
        l=_quadratic_form([(k["M1"], "y"), (k["N1"], "z"), (k["R1"], "v"), (k["M2"], "yp"), (k["N2"], "zp"), (k["R2"], "vp")]),
        h=_quadratic_form([(k["Q1_0"], "y"), (k["Q2_0"], "yp")]),
        xi_mode=TerminalMode.constant(c.xi),
        lipschitz=meta,
    )
    return ControlProblem(coeffs=coeffs, u_lo=c.u_lo, u_hi=c.u_hi)


def _printed_running_terms(k: Dict[str, Expr], times: np.ndarray):
    """Bare M and N weights in the adjoint drift and diffusion"""
    drift = sample_coefficient(k["M1"], times) + sample_coefficient(k["M2"], times)
    diffusion = sample_coefficient(k["N1"], times) + sample_coefficient(k["N2"], times)
    return drift[None, :], diffusion[None, :]


def fixed_point_residual(u: np.ndarray, response: np.ndarray) -> float:
    """sup|u - response| over indices 0..n-1; the last index carries a copied q"""
    return float(np.max(np.abs(u[:, :-1] - response[:, :-1])))


def lq_solve(
    c: LQCoefficients,
    ens: ScenarioEnsemble,
    cfg: SolverConfig = SolverConfig(),
    tol: float = 1e-6,
    max_iter: int = 50,
    picard_tol: float = 1e-8,
    picard_max_iter: int = 50,
    enforce_h1: bool = True,
    threads: int = 1,
) -> LQSolution:
    """
    Fixed point u -> state -> adjoint -> clip(-(C1 p + F1 q + C2 E*p + F2 E*q)/(R1 + R2)).
    Updates are damped by 0.5 once two consecutive updates point in opposite
    directions. Stops when sup|u_{k+1} - u_k| <= tol.
    """
    grid = ens.grid
    prob = lq_assemble(c, horizon=grid.t_end)
    k = coefficient_exprs(c)
    require_h2(prob.coeffs.lipschitz, enforce_h1)
    times = grid.points
    C1, C2, F1, F2 = (sample_coefficient(k[name], times) for name in ("C1", "C2", "F1", "F2"))
    denominator = sample_coefficient(k["R1"], times) + sample_coefficient(k["R2"], times)
    if np.any(np.abs(denominator) <= 1e-12):
        raise InvalidArgumentError("vanishing denominator R1 + R2 in the optimality condition")
    running_terms = _printed_running_terms(k, times) if c.adjoint_form == "printed" else None
    if running_terms is not None:
        logger.warning("Adjoint uses the bare M, N weights; the duality identity does not hold in this form")

    def optimal_response(state, adjoint) -> np.ndarray:
        p_bar = pairwise_mean(adjoint.p, axis=0)
        q_bar = pairwise_mean(adjoint.q, axis=0)
        numerator = C1 * adjoint.p + F1 * adjoint.q + C2 * p_bar + F2 * q_bar
        return np.clip(-numerator / denominator, prob.u_lo, prob.u_hi)

    u = ControlPath.constant(float(np.clip(0.0, prob.u_lo, prob.u_hi)), ens.n_particles, grid)
    updates = []
    damping = 1.0
    previous_delta = None

    for it in range(max_iter):
        state = solve_state(prob, u, ens, cfg, picard_tol, picard_max_iter, enforce_h1, threads)
        adjoint = solve_adjoint(prob, u, state, ens, cfg, picard_tol, picard_max_iter, running_terms, threads, enforce_h1)
        raw = optimal_response(state, adjoint)
        delta = raw - u.v
        change = float(np.max(np.abs(delta)))
        updates.append(change)
        logger.debug(f"LQ iteration {it + 1}: sup|du|={change:.3e}, damping={damping}")
        if change <= tol:
            break
        if previous_delta is not None and damping == 1.0 and float(np.vdot(delta, previous_delta)) < 0:
            damping = DAMPING
            logger.warning(f"Control updates oscillate at iteration {it + 1}; damping by {DAMPING}")
        u = ControlPath(v=u.v + damping * delta)
        previous_delta = delta
    else:
        raise IterationLimitError(f"LQ fixed point did not reach sup|du| <= {tol:g} in {max_iter} iterations", updates)

    residual = fixed_point_residual(u.v, raw)
    samples = cost_samples(prob, u, state, threads)
    solution = LQSolution(
        uhat=u,
        state=state,
        adjoint=adjoint,
        fixed_point_residual=residual,
        cost_at_opt=float(pairwise_mean(samples)),
        cost_std_err=std_err(samples),
        updates=updates,
    )
    logger.info(
        f"LQ solved in {len(updates)} iterations: mean u={float(pairwise_mean(u.v.ravel())):.6f}, "
        f"J={solution.cost_at_opt:.6f}, residual={residual:.2e}"
    )
    return solution


def piecewise_direction(rng: np.random.Generator, times: np.ndarray, pieces: int = 4) -> np.ndarray:
    """Deterministic direction, constant on `pieces` equal sub-intervals, values in [-1, 1]"""
    levels = rng.uniform(-1.0, 1.0, size=pieces)
    span = times[-1] - times[0]
    index = np.minimum(((times - times[0]) / span * pieces).astype(int), pieces - 1)
    return levels[index]


def lq_verify(
    sol: LQSolution,
    c: LQCoefficients,
    ens: ScenarioEnsemble,
    n_perturb: int = 100,
    eps: float = 0.1,
    seed: int = 0,
    cfg: SolverConfig = SolverConfig(),
    picard_tol: float = 1e-8,
    picard_max_iter: int = 50,
    tol_mp: float = 1e-3,
    enforce_h1: bool = True,
    threads: int = 1,
) -> DominanceReport:
    """
    J(u + eps v) - J(u) on common random numbers for n_perturb random
    piecewise-constant directions v, plus the maximum-principle scan at u.
    The base cost is recomputed from sol.uhat.
    """
    if n_perturb < 1:
        raise InvalidArgumentError(f"n_perturb must be >= 1, got {n_perturb}")
    if eps < 0:
        raise InvalidArgumentError(f"eps must be nonnegative, got {eps}")
    grid = ens.grid
    prob = lq_assemble(c, horizon=grid.t_end)
    uhat = sol.uhat

    state = solve_state(prob, uhat, ens, cfg, picard_tol, picard_max_iter, enforce_h1, threads)
    base_cost = cost(prob, uhat, state, threads)

    rng = np.random.Generator(np.random.Philox(seed))
    deltas = np.empty(n_perturb)
    for j in range(n_perturb):
        direction = ControlPath.from_function(lambda t: eps * piecewise_direction(rng, t), ens.n_particles, grid)
        perturbed = (uhat + direction).clip(prob.u_lo, prob.u_hi)
        state_j = solve_state(prob, perturbed, ens, cfg, picard_tol, picard_max_iter, enforce_h1, threads)
        deltas[j] = cost(prob, perturbed, state_j, threads) - base_cost

    running_terms = None
    if c.adjoint_form == "printed":
        running_terms = _printed_running_terms(coefficient_exprs(c), grid.points)
    adjoint = solve_adjoint(prob, uhat, state, ens, cfg, picard_tol, picard_max_iter, running_terms, threads, enforce_h1)
    mp = mp_residual(prob, uhat, adjoint, state, tol_mp=tol_mp, threads=threads)

    report = DominanceReport(deltas=deltas, min_delta=float(deltas.min()), base_cost=base_cost, mp=mp)
    logger.info(f"Cost dominance over {n_perturb} perturbations: min delta={report.min_delta:.3e}")
    return report
