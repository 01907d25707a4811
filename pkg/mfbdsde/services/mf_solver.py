"""
Picard iteration for mean-field BDSDEs and the forward doubly SDE solver.

Each Picard step freezes the primed arguments to the previous iterate's
population and runs one backward sweep. The forward equation is solved by
reversing time at particle level, which turns it into a backward equation
of the same form.
"""

import logging
from typing import Callable, List, Optional, Tuple

import numpy as np

from ..model.errors import ContractionConditionError, InvalidArgumentError, IterationLimitError, ShapeError
from ..model.expr import uses_primed
from ..model.schemas import LipschitzMeta, SolverConfig
from ..model.types import (
    CoefficientSet, DriverPaths, PathBundle, PicardTrace, PopulationSnapshot, ScenarioEnsemble, TimeGrid,
)
from .bdsde import CoefficientDriver, DriverModel, backward_sweep, terminal_condition
from .meanfield import check_h1, check_h2, pairwise_mean
from .scenario import driver_paths


logger = logging.getLogger(__name__)


def population_snapshots(bundle: PathBundle, controls: Optional[np.ndarray] = None,
                         x_paths: Optional[np.ndarray] = None) -> List[PopulationSnapshot]:
    return [
        PopulationSnapshot.from_bundle(bundle, i, controls, x_paths)
        for i in range(bundle.grid.n_steps + 1)
    ]


def picard_distance(new: PathBundle, old: PathBundle) -> float:
    """sup_i mean|dY_i|^2 + dt * sum_{i<n} mean|dZ_i|^2"""
    dY = new.Y - old.Y
    dZ = new.Z[:, :-1] - old.Z[:, :-1]
    sup_y = float(np.max(pairwise_mean(dY * dY, axis=0)))
    int_z = float(pairwise_mean(dZ * dZ, axis=0).sum()) * new.grid.dt
    return sup_y + int_z


def initial_guess(terminal: np.ndarray, grid: TimeGrid) -> PathBundle:
    """Y equal to the terminal mean everywhere, Z = 0"""
    n_particles = terminal.shape[0]
    Y = np.full((n_particles, grid.n_steps + 1), float(pairwise_mean(terminal)))
    return PathBundle(Y=Y, Z=np.zeros_like(Y), grid=grid)


def require_h1(meta: LipschitzMeta, enforce: bool = True) -> None:
    report = check_h1(meta)
    if report.h1_ok:
        return
    message = f"contraction condition fails (margin={report.margin:.4f}, M2={report.M2:.4f}, M4={report.M4:.4f})"
    if enforce:
        raise ContractionConditionError(message, report)
    logger.warning(f"{message}; continuing because enforcement is off")


def require_h2(meta: LipschitzMeta, enforce: bool = True) -> None:
    ok, margin = check_h2(meta)
    if ok:
        return
    message = f"control contraction condition a3 + a4 < 1 fails (margin={margin:.4f})"
    if enforce:
        raise ContractionConditionError(message, (ok, margin))
    logger.warning(f"{message}; continuing because enforcement is off")


def picard_solve(
    build_model: Callable[[PathBundle], DriverModel],
    paths: DriverPaths,
    terminal: np.ndarray,
    grid: TimeGrid,
    cfg: SolverConfig,
    tol: float,
    max_iter: int,
    mean_field: bool = True,
    x_paths: Optional[np.ndarray] = None,
) -> Tuple[PathBundle, PicardTrace]:
    """
    Fixed-point loop over bundles. `build_model` receives the previous iterate
    and returns the driver with that iterate frozen into it. Without mean-field
    dependence the driver is built once and the second sweep confirms the
    fixed point.
    """
    bundle = initial_guess(terminal, grid)
    trace = PicardTrace(tol=tol)
    model: Optional[DriverModel] = None

    for k in range(max_iter):
        if model is None or mean_field:
            model = build_model(bundle)
        Y, Z = backward_sweep(model, paths, terminal, cfg, x_paths)
        new = PathBundle(Y=Y, Z=Z, grid=grid)
        distance = picard_distance(new, bundle)
        trace.distances.append(distance)
        logger.debug(f"Picard iteration {k + 1}: d={distance:.3e}")
        bundle = new
        if distance <= tol:
            trace.converged = True
            return bundle, trace

    raise IterationLimitError(
        f"Picard iteration did not reach d <= {tol:g} in {max_iter} iterations (last d={trace.final_distance:.3e})",
        trace,
    )


def _mean_field(coeffs: CoefficientSet) -> bool:
    return uses_primed(coeffs.theta_f) or uses_primed(coeffs.theta_g)


def solve_mf_bdsde(
    coeffs: CoefficientSet,
    ens: ScenarioEnsemble,
    cfg: SolverConfig = SolverConfig(),
    tol: float = 1e-8,
    max_iter: int = 50,
    controls: Optional[np.ndarray] = None,
    x_paths: Optional[np.ndarray] = None,
    terminal: Optional[np.ndarray] = None,
    enforce_h1: bool = True,
    threads: int = 1,
) -> Tuple[PathBundle, PicardTrace]:
    """Solve the mean-field BDSDE by Picard iteration on the frozen primed population"""
    require_h1(coeffs.lipschitz, enforce_h1)
    xi = terminal_condition(coeffs.xi_mode, ens, x_paths) if terminal is None else np.asarray(terminal, dtype=float)

    def build(previous: PathBundle) -> DriverModel:
        return CoefficientDriver(coeffs, population_snapshots(previous, controls, x_paths), controls, x_paths, threads)

    bundle, trace = picard_solve(
        build, driver_paths(ens), xi, ens.grid, cfg, tol, max_iter, mean_field=_mean_field(coeffs), x_paths=x_paths,
    )
    logger.info(
        f"Solved MF-BDSDE with {ens.n_particles} particles, {ens.grid.n_steps} steps: "
        f"{trace.iterations} Picard iterations, d={trace.final_distance:.3e}"
    )
    return bundle, trace


def picard_residual(
    coeffs: CoefficientSet,
    ens: ScenarioEnsemble,
    bundle: PathBundle,
    cfg: SolverConfig = SolverConfig(),
    controls: Optional[np.ndarray] = None,
    x_paths: Optional[np.ndarray] = None,
    terminal: Optional[np.ndarray] = None,
    threads: int = 1,
) -> float:
    """Distance moved by one extra Picard sweep started at `bundle`"""
    xi = terminal_condition(coeffs.xi_mode, ens, x_paths) if terminal is None else terminal
    model = CoefficientDriver(coeffs, population_snapshots(bundle, controls, x_paths), controls, x_paths, threads)
    Y, Z = backward_sweep(model, driver_paths(ens), xi, cfg, x_paths)
    return picard_distance(PathBundle(Y=Y, Z=Z, grid=ens.grid), bundle)


def reversed_config(cfg: SolverConfig) -> SolverConfig:
    """Reversed particles share no backward driver, so only pooled fits apply"""
    if cfg.estimator == "pooled":
        return cfg
    return cfg.model_copy(update={"estimator": "pooled"})


def solve_forward_model(
    build_model: Callable[[PathBundle], DriverModel],
    ens: ScenarioEnsemble,
    initial: np.ndarray,
    cfg: SolverConfig,
    tol: float,
    max_iter: int,
    mean_field: bool = True,
) -> Tuple[PathBundle, PicardTrace]:
    """
    Forward doubly SDE for a driver model written on the reversed time axis.
    `build_model` receives reversed iterates; the result is in forward time.
    """
    n_particles = ens.n_particles
    initial = np.broadcast_to(np.asarray(initial, dtype=float), (n_particles,)).copy()
    paths = driver_paths(ens).reversed()
    bundle, trace = picard_solve(
        build_model, paths, initial, ens.grid, reversed_config(cfg), tol, max_iter, mean_field=mean_field,
    )
    return bundle.time_reversed(), trace


def solve_forward_dsde(
    coeffs: CoefficientSet,
    ens: ScenarioEnsemble,
    cfg: SolverConfig = SolverConfig(),
    tol: float = 1e-8,
    max_iter: int = 50,
    initial: Optional[np.ndarray] = None,
    controls: Optional[np.ndarray] = None,
    enforce_h1: bool = True,
    threads: int = 1,
) -> Tuple[PathBundle, PicardTrace]:
    """
    Solve P_t = eta + int_0^t Gamma^f ds + int_0^t Gamma^g dW - int_0^t Q dB (backward
    integral in B). eta is the constant of xi_mode unless a per-particle
    `initial` array is given. Returns (P, Q) as a bundle in forward time.
    """
    require_h1(coeffs.lipschitz, enforce_h1)
    n = ens.grid.n_steps
    if initial is None:
        if coeffs.xi_mode.kind != "constant":
            raise InvalidArgumentError("forward equation needs a constant or per-particle initial value")
        initial = np.full(ens.n_particles, coeffs.xi_mode.value)
    reversed_controls = None if controls is None else np.ascontiguousarray(controls[:, ::-1])
    if reversed_controls is not None and reversed_controls.shape != (ens.n_particles, n + 1):
        raise ShapeError(f"controls have shape {controls.shape}, expected {(ens.n_particles, n + 1)}")

    def build(previous: PathBundle) -> DriverModel:
        return CoefficientDriver(
            coeffs, population_snapshots(previous, reversed_controls), reversed_controls, None, threads,
        )

    bundle, trace = solve_forward_model(build, ens, initial, cfg, tol, max_iter, mean_field=_mean_field(coeffs))
    logger.info(f"Solved forward doubly SDE: {trace.iterations} Picard iterations, d={trace.final_distance:.3e}")
    return bundle, trace
