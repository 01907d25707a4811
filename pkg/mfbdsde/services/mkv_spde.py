"""
McKean-Vlasov forward paths and the probabilistic evaluation u(t, x) = Y^{t,x}_t
of the nonlocal SPDE.

The base population started from (0, x0) is built once and stays read-only.
Queries reuse its backward-driver groups with fresh forward particles, and
every primed slot of a query reads the base population.
"""

import logging
from typing import Optional

import numpy as np

from ..model.errors import DivergenceError, InvalidArgumentError, ShapeError
from ..model.expr import uses_primed
from ..model.schemas import SolverConfig
from ..model.types import BasePopulation, CoefficientSet, FieldSample, PopulationSnapshot, ScenarioEnsemble, TimeGrid
from .bdsde import solve_bdsde
from .meanfield import gamma_hat_many, pairwise_mean, std_err
from .mf_solver import solve_mf_bdsde
from .scenario import with_fresh_forward


logger = logging.getLogger(__name__)


def _x_snapshot(i: int, x: np.ndarray) -> PopulationSnapshot:
    # b and sigma never read y' or z'
    zeros = np.zeros_like(x)
    return PopulationSnapshot(time_index=i, y=zeros, z=zeros, x=x)


def _euler(coeffs: CoefficientSet, x_init: float, times: np.ndarray, dW: np.ndarray,
           base_x: Optional[np.ndarray], threads: int = 1) -> np.ndarray:
    n_particles, n = dW.shape
    dt = float(times[1] - times[0])
    interacting = uses_primed(coeffs.b) or uses_primed(coeffs.sigma)
    X = np.empty((n_particles, n + 1))
    X[:, 0] = x_init
    for i in range(n):
        snap = None
        if interacting:
            population = base_x[:, i] if base_x is not None else X[:, i]
            snap = _x_snapshot(i, population)
        own = {"x": X[:, i]}
        drift = gamma_hat_many(coeffs.b, own, snap, times[i], threads)
        vol = gamma_hat_many(coeffs.sigma, own, snap, times[i], threads)
        X[:, i + 1] = X[:, i] + drift * dt + vol * dW[:, i]
        if not np.all(np.isfinite(X[:, i + 1])):
            raise DivergenceError("forward state became non-finite", step=i + 1)
    return X


def simulate_mkv(
    coeffs: CoefficientSet,
    x_init: float,
    t_init: float,
    ens: ScenarioEnsemble,
    base: Optional[BasePopulation] = None,
    threads: int = 1,
) -> np.ndarray:
    """
    Euler-Maruyama paths of X from (t_init, x_init) to the end of the grid,
    shape (N, n - i0 + 1) with i0 the grid index of t_init. Primed slots of b
    and sigma average against the base population, or against the evolving
    population itself when no base is given.
    """
    grid = ens.grid
    i0 = grid.index_of(t_init)
    if base is not None and base.X0.shape != (ens.n_particles, grid.n_steps + 1):
        raise ShapeError(f"base population has shape {base.X0.shape}, ensemble needs {(ens.n_particles, grid.n_steps + 1)}")
    dW = ens.dW.reshape(ens.n_particles, grid.n_steps)[:, i0:]
    base_x = None if base is None else base.X0[:, i0:]
    return _euler(coeffs, x_init, grid.points[i0:], dW, base_x, threads)


def _terminal_average(coeffs: CoefficientSet, x: np.ndarray, population: np.ndarray, t: float, threads: int) -> np.ndarray:
    """E'[h(x, X'_T)] per own state"""
    return gamma_hat_many(coeffs.h, {"x": x}, _x_snapshot(-1, population), t, threads)


def build_base(
    coeffs: CoefficientSet,
    x0: float,
    ens: ScenarioEnsemble,
    cfg: SolverConfig = SolverConfig(),
    tol: float = 1e-8,
    max_iter: int = 50,
    enforce_h1: bool = True,
    threads: int = 1,
) -> BasePopulation:
    """
    Forward paths of X^{0,x0} (self-interacting), then the mean-field backward
    equation at (0, x0) with terminal E'[h(X_T, X'_T)] and its own (X, Y, Z)
    as the frozen population.
    """
    X0 = simulate_mkv(coeffs, x0, ens.grid.t_start, ens, None, threads)
    terminal = _terminal_average(coeffs, X0[:, -1], X0[:, -1], ens.grid.t_end, threads)
    bundle, trace = solve_mf_bdsde(
        coeffs, ens, cfg, tol, max_iter, x_paths=X0, terminal=terminal, enforce_h1=enforce_h1, threads=threads,
    )
    for array in (X0, bundle.Y, bundle.Z):
        array.flags.writeable = False
    logger.info(f"Built base population from x0={x0}: {trace.iterations} Picard iterations")
    return BasePopulation(X0=X0, YZ0=bundle, x0=float(x0), ens=ens, trace=trace)


def _group_values(values: np.ndarray, ens: ScenarioEnsemble) -> np.ndarray:
    return pairwise_mean(values.reshape(ens.m_outer, ens.k_inner), axis=1)


def _sample(t: float, x: float, values: np.ndarray) -> FieldSample:
    return FieldSample(t=t, x=x, values=values, mean=float(pairwise_mean(values)), std_err=std_err(values))


def evaluate_u(
    t: float,
    x: float,
    base: BasePopulation,
    coeffs: CoefficientSet,
    cfg: SolverConfig = SolverConfig(),
    stream: int = 0,
    threads: int = 1,
) -> FieldSample:
    """
    u(t, x) as one sample per backward-driver group. t is snapped to the base
    grid; the query solves on [t_i0, T] with fresh forward particles.
    """
    ens = base.ens
    grid = ens.grid
    if not (grid.t_start <= t <= grid.t_end):
        raise InvalidArgumentError(f"query time {t} outside [{grid.t_start}, {grid.t_end}]")
    i0 = grid.index_of(t)
    t_snapped = grid.point(i0)
    if abs(t_snapped - t) > 1e-12:
        logger.warning(f"Query time {t} snapped to grid point {t_snapped}")
    n = grid.n_steps

    if i0 == n:
        value = _terminal_average(coeffs, np.array([float(x)]), base.X0[:, -1], grid.t_end, threads)[0]
        return _sample(t_snapped, x, np.full(ens.m_outer, value))

    fresh = with_fresh_forward(ens, stream, threads)
    sub_ens = ScenarioEnsemble(
        grid=TimeGrid(t_snapped, grid.t_end, n - i0),
        m_outer=ens.m_outer,
        k_inner=ens.k_inner,
        dW=np.ascontiguousarray(fresh.dW[:, :, i0:]),
        dB=np.ascontiguousarray(ens.dB[:, i0:]),
        seed=ens.seed,
    )
    base_x = base.X0[:, i0:]
    X = _euler(coeffs, x, grid.points[i0:], sub_ens.dW.reshape(ens.n_particles, n - i0), base_x, threads)
    terminal = _terminal_average(coeffs, X[:, -1], base.X0[:, -1], grid.t_end, threads)
    frozen = [
        PopulationSnapshot(time_index=k, y=base.YZ0.Y[:, i0 + k], z=base.YZ0.Z[:, i0 + k], x=base.X0[:, i0 + k])
        for k in range(n - i0 + 1)
    ]
    bundle = solve_bdsde(coeffs, sub_ens, frozen, cfg=cfg, x_paths=X, terminal=terminal, threads=threads)
    values = _group_values(bundle.Y[:, 0], ens)
    logger.debug(f"u({t_snapped}, {x}) over {ens.m_outer} groups")
    return _sample(t_snapped, x, values)
