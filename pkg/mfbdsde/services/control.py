"""
Optimal control of mean-field BDSDEs: state, cost, variational and adjoint
equations, the Hamiltonian, and numerical checks of the maximum principle.

Partial derivatives of theta^f, theta^g, l and h come from the DSL. E' terms
average over the second outcome with the own state in unprimed slots. E* terms
integrate the first outcome instead: the kernel is evaluated with its primed
slots swapped, and the integrated outcome's p or q values enter as carriers.
"""

import logging
from functools import lru_cache
from typing import Dict, Iterable, Optional, Sequence, Tuple

import numpy as np

from ..model.errors import InvalidArgumentError
from ..model.expr import Expr, Var, is_zero
from ..model.schemas import SolverConfig
from ..model.types import (
    AdjointBundle, ControlPath, ControlProblem, DualityReport, GateauxReport, MPReport, PathBundle,
    PopulationSnapshot, ScenarioEnsemble, VariationalReport,
)
from .bdsde import LinearDriver
from .dsl import add, diff, evaluate, mul, swap_primes
from .meanfield import empirical_average, gamma_hat_many, pairwise_mean, std_err
from .mf_solver import picard_solve, require_h2, solve_forward_model, solve_mf_bdsde
from .scenario import driver_paths


logger = logging.getLogger(__name__)

# Picard tolerance of the scaling checks, close to round-off
CHECK_TOL = 1e-24

PARTIAL_VARS = ("y", "z", "yp", "zp", "v", "vp")


@lru_cache(maxsize=64)
def _partials(e: Expr) -> Dict[str, Expr]:
    return {var: diff(e, var) for var in PARTIAL_VARS}


@lru_cache(maxsize=64)
def _swapped(e: Expr) -> Expr:
    return swap_primes(e)


def partials(prob: ControlProblem) -> Dict[str, Dict[str, Expr]]:
    """First-order partials of theta^f, theta^g and l in (y, z, y', z', v, v')"""
    c = prob.coeffs
    return {"theta_f": _partials(c.theta_f), "theta_g": _partials(c.theta_g), "l": _partials(c.l)}


def check_admissible(prob: ControlProblem, v: ControlPath) -> None:
    if not prob.contains(v.v):
        raise InvalidArgumentError(
            f"control leaves the box [{prob.u_lo}, {prob.u_hi}] (range {float(v.v.min())}..{float(v.v.max())})"
        )


class _HatPath:
    """Own bindings and population snapshots along a solved (Y, Z, u) triple"""

    def __init__(self, state: PathBundle, control: ControlPath, threads: int = 1):
        self.state = state
        self.control = control
        self.times = state.grid.points
        self.threads = threads

    @property
    def n_steps(self) -> int:
        return self.state.grid.n_steps

    def own(self, i: int) -> dict:
        return {"y": self.state.Y[:, i], "z": self.state.Z[:, i], "v": self.control.v[:, i]}

    def snap(self, i: int) -> PopulationSnapshot:
        return PopulationSnapshot.from_bundle(self.state, i, self.control.v)

    def gamma(self, kernel: Expr, i: int, extra: Optional[dict] = None) -> np.ndarray:
        """E'[kernel] per particle at grid index i"""
        n_particles = self.state.n_particles
        if is_zero(kernel):
            return np.zeros(n_particles)
        own = self.own(i)
        if extra:
            own.update(extra)
        return gamma_hat_many(kernel, own, self.snap(i), self.times[i], self.threads)

    def eprime(self, kernel: Expr, i: int, weights: np.ndarray) -> np.ndarray:
        """E'[kernel * w'] per particle: the weight is read at the averaged outcome"""
        if is_zero(kernel):
            return np.zeros(self.state.n_particles)
        return empirical_average(kernel, self.own(i), self.snap(i), self.times[i], weights=weights, threads=self.threads)

    def estar(self, kernel: Expr, i: int, carrier: Optional[np.ndarray] = None) -> np.ndarray:
        """E*[kernel(w*, w) * carrier(w*)] per particle w"""
        n_particles = self.state.n_particles
        if is_zero(kernel):
            return np.zeros(n_particles)
        weights = np.ones(n_particles) if carrier is None else carrier
        return empirical_average(
            _swapped(kernel), self.own(i), self.snap(i), self.times[i], weights=weights, threads=self.threads,
        )

    def columns(self, fn) -> np.ndarray:
        return np.stack([fn(i) for i in range(self.n_steps + 1)], axis=1)


# State and cost

def solve_state(
    prob: ControlProblem,
    v: ControlPath,
    ens: ScenarioEnsemble,
    cfg: SolverConfig = SolverConfig(),
    tol: float = 1e-8,
    max_iter: int = 50,
    enforce_h1: bool = True,
    threads: int = 1,
) -> PathBundle:
    """State equation under control v"""
    check_admissible(prob, v)
    bundle, _ = solve_mf_bdsde(
        prob.coeffs, ens, cfg, tol, max_iter, controls=v.v, enforce_h1=enforce_h1, threads=threads,
    )
    return bundle


def cost_samples(prob: ControlProblem, v: ControlPath, state: PathBundle, threads: int = 1) -> np.ndarray:
    """Per-particle contributions to J: left-end quadrature of Gamma^l plus E'h at t = 0"""
    hat = _HatPath(state, v, threads)
    dt = state.grid.dt
    running = np.zeros(state.n_particles)
    if not is_zero(prob.coeffs.l):
        terms = np.stack([hat.gamma(prob.coeffs.l, i) for i in range(hat.n_steps)], axis=1)
        running = dt * terms.sum(axis=1)
    initial = np.zeros(state.n_particles)
    if not is_zero(prob.coeffs.h):
        y0 = state.Y[:, 0]
        snap = PopulationSnapshot(time_index=0, y=y0, z=state.Z[:, 0])
        initial = gamma_hat_many(prob.coeffs.h, {"y": y0}, snap, state.grid.t_start, threads)
    return running + initial


def cost(prob: ControlProblem, v: ControlPath, state: PathBundle, threads: int = 1) -> float:
    return float(pairwise_mean(cost_samples(prob, v, state, threads)))


# Variational equation

def solve_variational(
    prob: ControlProblem,
    uhat: ControlPath,
    state_hat: PathBundle,
    v_dir: ControlPath,
    ens: ScenarioEnsemble,
    cfg: SolverConfig = SolverConfig(),
    tol: float = 1e-8,
    max_iter: int = 50,
    threads: int = 1,
) -> PathBundle:
    """
    Linear mean-field BDSDE for the Gateaux derivative (xi, eta) of the state in
    direction v_dir, with zero terminal value.
    """
    d = partials(prob)
    hat = _HatPath(state_hat, uhat, threads)
    fd, gd = d["theta_f"], d["theta_g"]

    drift_y = hat.columns(lambda i: hat.gamma(fd["y"], i))
    drift_z = hat.columns(lambda i: hat.gamma(fd["z"], i))
    diffusion_y = hat.columns(lambda i: hat.gamma(gd["y"], i))
    diffusion_z = hat.columns(lambda i: hat.gamma(gd["z"], i))
    psi_f = hat.columns(lambda i: hat.gamma(fd["v"], i) * v_dir.v[:, i] + hat.eprime(fd["vp"], i, v_dir.v[:, i]))
    psi_g = hat.columns(lambda i: hat.gamma(gd["v"], i) * v_dir.v[:, i] + hat.eprime(gd["vp"], i, v_dir.v[:, i]))

    mean_field = not all(is_zero(k) for k in (fd["yp"], fd["zp"], gd["yp"], gd["zp"]))

    def build(previous: PathBundle) -> LinearDriver:
        drift_0, diffusion_0 = psi_f, psi_g
        if mean_field:
            drift_0 = psi_f + hat.columns(
                lambda i: hat.eprime(fd["yp"], i, previous.Y[:, i]) + hat.eprime(fd["zp"], i, previous.Z[:, i])
            )
            diffusion_0 = psi_g + hat.columns(
                lambda i: hat.eprime(gd["yp"], i, previous.Y[:, i]) + hat.eprime(gd["zp"], i, previous.Z[:, i])
            )
        return LinearDriver(drift_y, drift_z, drift_0, diffusion_y, diffusion_z, diffusion_0)

    terminal = np.zeros(ens.n_particles)
    bundle, trace = picard_solve(
        build, driver_paths(ens), terminal, ens.grid, cfg, tol, max_iter, mean_field=mean_field,
    )
    logger.debug(f"Variational equation solved in {trace.iterations} Picard iterations")
    return bundle


def gateaux_check(
    prob: ControlProblem,
    uhat: ControlPath,
    v_dir: ControlPath,
    eps_list: Sequence[float],
    ens: ScenarioEnsemble,
    cfg: SolverConfig = SolverConfig(),
    tol: float = CHECK_TOL,
    max_iter: int = 50,
    enforce_h1: bool = True,
    threads: int = 1,
) -> GateauxReport:
    """
    Scaling of Y^eps - Y-hat with eps: the log-log slope of sup_t E|Y^eps - Y-hat|^2
    and the sup_t E|(Y^eps - Y-hat)/eps - xi|^2 residuals.
    """
    eps_list = [float(e) for e in eps_list]
    if any(e <= 0 for e in eps_list):
        raise InvalidArgumentError(f"eps values must be positive, got {eps_list}")
    for e in eps_list:
        check_admissible(prob, uhat + v_dir.scaled(e))

    state_hat = solve_state(prob, uhat, ens, cfg, tol, max_iter, enforce_h1, threads)
    var = solve_variational(prob, uhat, state_hat, v_dir, ens, cfg, tol, max_iter, threads)

    sup_sq, residual = [], []
    for e in eps_list:
        state_eps = solve_state(prob, uhat + v_dir.scaled(e), ens, cfg, tol, max_iter, enforce_h1, threads)
        diff_y = state_eps.Y - state_hat.Y
        sup_sq.append(float(np.max(pairwise_mean(diff_y * diff_y, axis=0))))
        scaled = diff_y / e - var.Y
        residual.append(float(np.max(pairwise_mean(scaled * scaled, axis=0))))

    slope = None
    if all(s > 0 for s in sup_sq) and len(eps_list) >= 2:
        slope = float(np.polyfit(np.log(eps_list), np.log(sup_sq), 1)[0])
    logger.info(f"Gateaux check over eps={eps_list}: slope={slope}")
    return GateauxReport(eps=eps_list, sup_sq_diff=sup_sq, residual=residual, slope=slope)


# Hamiltonian

@lru_cache(maxsize=64)
def _hamiltonian_expr(theta_f: Expr, theta_g: Expr, l: Expr) -> Expr:
    return add(add(mul(theta_f, Var("p")), mul(theta_g, Var("q"))), l)


def hamiltonian_expr(prob: ControlProblem) -> Expr:
    """H = theta^f * p + theta^g * q + l"""
    c = prob.coeffs
    return _hamiltonian_expr(c.theta_f, c.theta_g, c.l)


def _hamiltonian_bindings(t, y1, z1, v1, y2, z2, v2, p, q) -> dict:
    return {"t": t, "y": y1, "z": z1, "v": v1, "yp": y2, "zp": z2, "vp": v2, "p": p, "q": q}


def hamiltonian(t, y1, z1, v1, y2, z2, v2, p, q, prob: ControlProblem):
    return evaluate(hamiltonian_expr(prob), _hamiltonian_bindings(t, y1, z1, v1, y2, z2, v2, p, q))


def hamiltonian_partial(var: str, t, y1, z1, v1, y2, z2, v2, p, q, prob: ControlProblem):
    """Partial of H in one of its slots (y, z, v, yp, zp, vp, p, q)"""
    return evaluate(diff(hamiltonian_expr(prob), var), _hamiltonian_bindings(t, y1, z1, v1, y2, z2, v2, p, q))


# Adjoint equation

def _initial_adjoint(prob: ControlProblem, state_hat: PathBundle, threads: int) -> np.ndarray:
    """E'h_y(Y0, Y0') + E*h_y'(Y0*, Y0) per particle"""
    h = prob.coeffs.h
    y0 = state_hat.Y[:, 0]
    n_particles = len(y0)
    snap = PopulationSnapshot(time_index=0, y=y0, z=state_hat.Z[:, 0])
    t0 = state_hat.grid.t_start
    h_y, h_yp = diff(h, "y"), diff(h, "yp")
    p0 = np.zeros(n_particles)
    if not is_zero(h_y):
        p0 = p0 + gamma_hat_many(h_y, {"y": y0}, snap, t0, threads)
    if not is_zero(h_yp):
        p0 = p0 + empirical_average(swap_primes(h_yp), {"y": y0}, snap, t0, weights=np.ones(n_particles), threads=threads)
    return p0


def solve_adjoint(
    prob: ControlProblem,
    uhat: ControlPath,
    state_hat: PathBundle,
    ens: ScenarioEnsemble,
    cfg: SolverConfig = SolverConfig(),
    tol: float = 1e-8,
    max_iter: int = 50,
    running_terms: Optional[Tuple[np.ndarray, np.ndarray]] = None,
    threads: int = 1,
    enforce_h2: bool = True,
) -> AdjointBundle:
    """
    Forward doubly SDE for (p, q). The E* terms read the carriers p*, q* of the
    previous Picard iterate, so one fixed-point loop resolves both the frozen
    primed arguments and the carriers. `running_terms` replaces the cost
    contributions (E'l_y + E*l_y', E'l_z + E*l_z') of drift and diffusion.
    Metadata failing a3 + a4 < 1 raise unless `enforce_h2` is off.
    """
    require_h2(prob.coeffs.lipschitz, enforce_h2)
    d = partials(prob)
    hat = _HatPath(state_hat, uhat, threads)
    fd, gd, ld = d["theta_f"], d["theta_g"], d["l"]

    drift_y = hat.columns(lambda i: hat.gamma(fd["y"], i))
    drift_z = hat.columns(lambda i: hat.gamma(gd["y"], i))
    diffusion_y = hat.columns(lambda i: hat.gamma(fd["z"], i))
    diffusion_z = hat.columns(lambda i: hat.gamma(gd["z"], i))
    if running_terms is None:
        drift_base = hat.columns(lambda i: hat.gamma(ld["y"], i) + hat.estar(ld["yp"], i))
        diffusion_base = hat.columns(lambda i: hat.gamma(ld["z"], i) + hat.estar(ld["zp"], i))
    else:
        shape = (state_hat.n_particles, state_hat.grid.n_steps + 1)
        drift_base = np.broadcast_to(running_terms[0], shape).astype(float)
        diffusion_base = np.broadcast_to(running_terms[1], shape).astype(float)

    mean_field = not all(is_zero(k) for k in (fd["yp"], gd["yp"], fd["zp"], gd["zp"]))

    def build(previous: PathBundle) -> LinearDriver:
        drift_0, diffusion_0 = drift_base, diffusion_base
        if mean_field:
            # previous iterate is on the reversed axis
            p_star = previous.Y[:, ::-1]
            q_star = previous.Z[:, ::-1]
            drift_0 = drift_base + hat.columns(
                lambda i: hat.estar(fd["yp"], i, p_star[:, i]) + hat.estar(gd["yp"], i, q_star[:, i])
            )
            diffusion_0 = diffusion_base + hat.columns(
                lambda i: hat.estar(fd["zp"], i, p_star[:, i]) + hat.estar(gd["zp"], i, q_star[:, i])
            )
        return LinearDriver(drift_y, drift_z, drift_0, diffusion_y, diffusion_z, diffusion_0).time_reversed()

    p0 = _initial_adjoint(prob, state_hat, threads)
    bundle, trace = solve_forward_model(build, ens, p0, cfg, tol, max_iter, mean_field=mean_field)
    logger.debug(f"Adjoint equation solved in {trace.iterations} Picard iterations")
    return AdjointBundle(p=bundle.Y, q=bundle.Z, grid=ens.grid)


# Maximum principle

def mp_gradient(prob: ControlProblem, uhat: ControlPath, adj: AdjointBundle, state_hat: PathBundle,
                threads: int = 1) -> np.ndarray:
    """E'H_v(w, w') + E*H_v'(w*, w) at every (particle, grid index)"""
    d = partials(prob)
    hat = _HatPath(state_hat, uhat, threads)
    H_v = diff(hamiltonian_expr(prob), "v")

    def column(i: int) -> np.ndarray:
        own_pq = {"p": adj.p[:, i], "q": adj.q[:, i]}
        return (
            hat.gamma(H_v, i, own_pq)
            + hat.estar(d["theta_f"]["vp"], i, adj.p[:, i])
            + hat.estar(d["theta_g"]["vp"], i, adj.q[:, i])
            + hat.estar(d["l"]["vp"], i)
        )

    return hat.columns(column)


def mp_residual(
    prob: ControlProblem,
    uhat: ControlPath,
    adj: AdjointBundle,
    state_hat: PathBundle,
    v_grid: Optional[Iterable[float]] = None,
    tol_mp: float = 1e-3,
    threads: int = 1,
) -> MPReport:
    """
    min over v in v_grid of G * (v - u-hat) at every (t_i, particle). G * (v - u)
    is affine in v, so the box end points are a complete default grid.
    """
    v_grid = [prob.u_lo, prob.u_hi] if v_grid is None else [float(v) for v in v_grid]
    if not v_grid:
        raise InvalidArgumentError("v_grid is empty")
    if any(not (prob.u_lo <= v <= prob.u_hi) for v in v_grid):
        raise InvalidArgumentError(f"v_grid {v_grid} leaves the box [{prob.u_lo}, {prob.u_hi}]")

    G = mp_gradient(prob, uhat, adj, state_hat, threads)
    candidates = np.stack([G * (v - uhat.v) for v in v_grid])
    best = candidates.min(axis=0)
    choice = candidates.argmin(axis=0)
    particle, index = np.unravel_index(int(np.argmin(best)), best.shape)
    report = MPReport(
        G=G,
        global_min=float(best[particle, index]),
        violation_fraction=float(np.mean(best < -tol_mp)),
        worst_index=int(index),
        worst_particle=int(particle),
        worst_v=float(v_grid[choice[particle, index]]),
    )
    logger.info(f"Maximum-principle scan: min={report.global_min:.3e}, violations={report.violation_fraction:.3%}")
    return report


# Identities of the first-order expansion

def _running_linearization(prob: ControlProblem, hat: _HatPath, var: PathBundle, i: int) -> np.ndarray:
    """E'[l_y xi + l_z eta + l_y' xi' + l_z' eta'] at index i"""
    ld = partials(prob)["l"]
    return (
        hat.gamma(ld["y"], i) * var.Y[:, i]
        + hat.gamma(ld["z"], i) * var.Z[:, i]
        + hat.eprime(ld["yp"], i, var.Y[:, i])
        + hat.eprime(ld["zp"], i, var.Z[:, i])
    )


def duality_check(
    prob: ControlProblem,
    uhat: ControlPath,
    state_hat: PathBundle,
    adj: AdjointBundle,
    var: PathBundle,
    v_dir: ControlPath,
    threads: int = 1,
) -> DualityReport:
    """
    E[xi_0 p_0] directly and through
    -E int E'[l_y xi + l_z eta + l_y' xi' + l_z' eta'] + E int E'[(f_v p + g_v q) v + (f_v' p + g_v' q) v'].
    """
    d = partials(prob)
    fd, gd = d["theta_f"], d["theta_g"]
    hat = _HatPath(state_hat, uhat, threads)
    dt = state_hat.grid.dt

    direct = var.Y[:, 0] * adj.p[:, 0]
    integrand = np.zeros(state_hat.n_particles)
    for i in range(hat.n_steps):
        v_i = v_dir.v[:, i]
        p_i, q_i = adj.p[:, i], adj.q[:, i]
        control_term = (
            (hat.gamma(fd["v"], i) * p_i + hat.gamma(gd["v"], i) * q_i) * v_i
            + p_i * hat.eprime(fd["vp"], i, v_i)
            + q_i * hat.eprime(gd["vp"], i, v_i)
        )
        integrand = integrand + dt * (control_term - _running_linearization(prob, hat, var, i))

    return DualityReport(
        direct=float(pairwise_mean(direct)),
        direct_se=std_err(direct),
        via_integral=float(pairwise_mean(integrand)),
        integral_se=std_err(integrand),
    )


def variational_inequality_check(
    prob: ControlProblem,
    uhat: ControlPath,
    state_hat: PathBundle,
    v_dir: ControlPath,
    eps: float,
    ens: ScenarioEnsemble,
    cfg: SolverConfig = SolverConfig(),
    tol: float = CHECK_TOL,
    max_iter: int = 50,
    enforce_h1: bool = True,
    threads: int = 1,
) -> VariationalReport:
    """
    Gateaux derivative of J at u-hat in direction v_dir, once as (J(u + eps v) - J(u))/eps
    and once from the first-order expansion in (xi, eta).
    """
    if eps <= 0:
        raise InvalidArgumentError(f"eps must be positive, got {eps}")
    perturbed = uhat + v_dir.scaled(eps)
    check_admissible(prob, perturbed)
    state_eps = solve_state(prob, perturbed, ens, cfg, tol, max_iter, enforce_h1, threads)
    finite_difference = (cost(prob, perturbed, state_eps, threads) - cost(prob, uhat, state_hat, threads)) / eps

    var = solve_variational(prob, uhat, state_hat, v_dir, ens, cfg, tol, max_iter, threads)
    ld = partials(prob)["l"]
    hat = _HatPath(state_hat, uhat, threads)
    dt = state_hat.grid.dt
    samples = np.zeros(state_hat.n_particles)
    for i in range(hat.n_steps):
        v_i = v_dir.v[:, i]
        control_term = hat.gamma(ld["v"], i) * v_i + hat.eprime(ld["vp"], i, v_i)
        samples = samples + dt * (_running_linearization(prob, hat, var, i) + control_term)

    h = prob.coeffs.h
    y0 = state_hat.Y[:, 0]
    snap = PopulationSnapshot(time_index=0, y=y0, z=state_hat.Z[:, 0])
    t0 = state_hat.grid.t_start
    h_y, h_yp = diff(h, "y"), diff(h, "yp")
    if not is_zero(h_y):
        samples = samples + gamma_hat_many(h_y, {"y": y0}, snap, t0, threads) * var.Y[:, 0]
    if not is_zero(h_yp):
        samples = samples + empirical_average(h_yp, {"y": y0}, snap, t0, weights=var.Y[:, 0], threads=threads)

    return VariationalReport(
        finite_difference=float(finite_difference),
        expansion=float(pairwise_mean(samples)),
        expansion_se=std_err(samples),
    )
