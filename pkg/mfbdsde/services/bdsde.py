"""
Backward sweep for a BDSDE whose mean-field arguments are frozen.

Conditional expectations are least-squares projections on polynomials of a
per-particle state marker. In grouped mode one fit runs per backward-driver
group, which conditions on that group's B path; pooled mode runs a single fit
and adds the backward level B_T - B_{t_i} to the features.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from ..model.errors import DivergenceError, InvalidArgumentError, ShapeError, SingularSystemError
from ..model.expr import uses_primed
from ..model.schemas import SolverConfig
from ..model.types import CoefficientSet, DriverPaths, PathBundle, PopulationSnapshot, ScenarioEnsemble, TerminalMode
from .dsl import evaluate
from .meanfield import gamma_hat_many
from .scenario import driver_paths


logger = logging.getLogger(__name__)


def terminal_condition(xi_mode: TerminalMode, ens: ScenarioEnsemble, x_paths: Optional[np.ndarray] = None) -> np.ndarray:
    """Per-particle terminal values xi"""
    n_particles = ens.n_particles
    if xi_mode.kind == "constant":
        return np.full(n_particles, xi_mode.value)
    if xi_mode.kind == "w_terminal":
        return driver_paths(ens).forward_levels()[:, -1]
    if x_paths is None:
        raise InvalidArgumentError("expression terminal condition needs forward state paths")
    if x_paths.shape[0] != n_particles:
        raise ShapeError(f"state paths cover {x_paths.shape[0]} particles, ensemble has {n_particles}")
    values = evaluate(xi_mode.expr, {"x": x_paths[:, -1]})
    return np.broadcast_to(values, (n_particles,)).astype(float)


# Regression

def basis(markers: np.ndarray, degree: int, backward_level: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Monomial features, intercept first. With a backward level the features are
    x^a * b^c for a + c <= degree, ordered by total degree.
    """
    own = np.polynomial.polynomial.polyvander(np.asarray(markers, dtype=float), degree)
    if backward_level is None:
        return own
    other = np.polynomial.polynomial.polyvander(np.asarray(backward_level, dtype=float), degree)
    columns = [own[..., a] * other[..., total - a] for total in range(degree + 1) for a in range(total, -1, -1)]
    return np.stack(columns, axis=-1)


@dataclass(frozen=True, eq=False)
class FittedPredictor:
    """Fitted projection; `coefficients` has one row per fit group"""
    coefficients: np.ndarray  # (groups, features)
    fitted: np.ndarray        # in-sample predictions, (N,)
    degree: int
    pooled_levels: bool

    def predict(self, markers: Optional[np.ndarray] = None, backward_level: Optional[np.ndarray] = None) -> np.ndarray:
        """In-sample values, or values at new markers laid out group after group"""
        if markers is None:
            return self.fitted
        markers = np.asarray(markers, dtype=float)
        groups = self.coefficients.shape[0]
        if markers.size % groups:
            raise ShapeError(f"{markers.size} markers do not split into {groups} groups")
        if self.pooled_levels and backward_level is None:
            raise InvalidArgumentError("pooled predictor needs the backward level")
        level = None if backward_level is None else np.asarray(backward_level, dtype=float).reshape(groups, -1)
        features = basis(markers.reshape(groups, -1), self.degree, level)
        return np.einsum("gkp,gp->gk", features, self.coefficients).ravel()


class RegressionDesign:
    """
    Normal equations for one time step, shared by every target regressed on the
    same features. Columns constant inside a group drop out with a zero
    coefficient; the ridge weight acts on the non-intercept block only.
    """

    def __init__(self, markers: np.ndarray, cfg: SolverConfig, group_size: Optional[int] = None,
                 backward_level: Optional[np.ndarray] = None):
        markers = np.asarray(markers, dtype=float)
        n_particles = markers.shape[0]
        if cfg.estimator == "grouped":
            if group_size is None:
                raise InvalidArgumentError("grouped estimator needs a backward-driver group structure")
            if n_particles % group_size:
                raise ShapeError(f"{n_particles} particles do not split into groups of {group_size}")
            backward_level = None
        else:
            group_size = n_particles

        self.cfg = cfg
        self.n_particles = n_particles
        self.group_size = group_size
        self.n_groups = n_particles // group_size
        self.pooled_levels = backward_level is not None

        level = None if backward_level is None else np.asarray(backward_level, dtype=float).reshape(self.n_groups, group_size)
        self.features = basis(markers.reshape(self.n_groups, group_size), cfg.basis_degree, level)
        n_features = self.features.shape[-1]

        gram = np.matmul(self.features.transpose(0, 2, 1), self.features) / group_size
        spread = np.ptp(self.features, axis=1)
        self.active = spread > 0
        self.active[:, 0] = True
        inactive = ~self.active
        gram = gram * (self.active[:, :, None] & self.active[:, None, :])
        idx = np.arange(n_features)
        gram[:, idx, idx] += np.where(inactive, 1.0, 0.0)
        if cfg.ridge > 0:
            ridge = np.full(n_features, cfg.ridge)
            ridge[0] = 0.0
            gram[:, idx, idx] += np.where(self.active, ridge, 0.0)
        elif n_features > 1:
            ranks = np.linalg.matrix_rank(gram)
            if np.any(ranks < n_features):
                bad = int(np.argmax(ranks < n_features))
                raise SingularSystemError(f"rank-deficient normal equations in fit group {bad} (rank {ranks[bad]} < {n_features})")
        self.gram = gram

    def fit(self, targets: np.ndarray) -> FittedPredictor:
        targets = np.asarray(targets, dtype=float)
        if targets.shape != (self.n_particles,):
            raise ShapeError(f"targets have shape {targets.shape}, expected ({self.n_particles},)")
        grouped = targets.reshape(self.n_groups, self.group_size)
        rhs = np.einsum("gkp,gk->gp", self.features, grouped) / self.group_size
        rhs = np.where(self.active, rhs, 0.0)
        try:
            coefficients = np.linalg.solve(self.gram, rhs[..., None])[..., 0]
        except np.linalg.LinAlgError as e:
            raise SingularSystemError(f"normal equations not solvable: {e}") from e
        if not np.all(np.isfinite(coefficients)):
            raise SingularSystemError("regression produced non-finite coefficients")
        fitted = np.einsum("gkp,gp->gk", self.features, coefficients).ravel()
        return FittedPredictor(
            coefficients=coefficients, fitted=fitted, degree=self.cfg.basis_degree, pooled_levels=self.pooled_levels,
        )


def regress(targets: np.ndarray, markers: np.ndarray, cfg: SolverConfig, group_size: Optional[int] = None,
            backward_level: Optional[np.ndarray] = None) -> FittedPredictor:
    """Least-squares projection of targets on polynomial features of the markers"""
    return RegressionDesign(markers, cfg, group_size, backward_level).fit(targets)


# Driver models

class DriverModel:
    """Drift and diffusion of a backward equation, evaluated per particle at grid index i"""

    def drift(self, i: int, t: float, y: np.ndarray, z: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def diffusion(self, i: int, t: float, y: np.ndarray, z: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class CoefficientDriver(DriverModel):
    """theta^f / theta^g averaged against a frozen population snapshot per grid index"""

    def __init__(self, coeffs: CoefficientSet, frozen: Optional[Sequence[PopulationSnapshot]] = None,
                 controls: Optional[np.ndarray] = None, x_paths: Optional[np.ndarray] = None, threads: int = 1):
        if frozen is None and (uses_primed(coeffs.theta_f) or uses_primed(coeffs.theta_g)):
            raise InvalidArgumentError("coefficients reference primed variables but no population is frozen")
        self.coeffs = coeffs
        self.frozen = frozen
        self.controls = controls
        self.x_paths = x_paths
        self.threads = threads

    def _own(self, i: int, y: np.ndarray, z: np.ndarray) -> dict:
        own = {"y": y, "z": z}
        if self.controls is not None:
            own["v"] = self.controls[:, i]
        if self.x_paths is not None:
            own["x"] = self.x_paths[:, i]
        return own

    def _snapshot(self, i: int) -> Optional[PopulationSnapshot]:
        return None if self.frozen is None else self.frozen[i]

    def drift(self, i, t, y, z):
        return gamma_hat_many(self.coeffs.theta_f, self._own(i, y, z), self._snapshot(i), t, self.threads)

    def diffusion(self, i, t, y, z):
        return gamma_hat_many(self.coeffs.theta_g, self._own(i, y, z), self._snapshot(i), t, self.threads)


@dataclass(frozen=True, eq=False)
class LinearDriver(DriverModel):
    """
    drift = drift_y*y + drift_z*z + drift_0 and likewise for the diffusion,
    with every coefficient an (N, n+1) array.
    """
    drift_y: np.ndarray
    drift_z: np.ndarray
    drift_0: np.ndarray
    diffusion_y: np.ndarray
    diffusion_z: np.ndarray
    diffusion_0: np.ndarray

    def drift(self, i, t, y, z):
        return self.drift_y[:, i] * y + self.drift_z[:, i] * z + self.drift_0[:, i]

    def diffusion(self, i, t, y, z):
        return self.diffusion_y[:, i] * y + self.diffusion_z[:, i] * z + self.diffusion_0[:, i]

    def time_reversed(self) -> "LinearDriver":
        return LinearDriver(*(np.ascontiguousarray(a[:, ::-1]) for a in (
            self.drift_y, self.drift_z, self.drift_0, self.diffusion_y, self.diffusion_z, self.diffusion_0,
        )))


# Sweep

def backward_sweep(model: DriverModel, paths: DriverPaths, terminal: np.ndarray, cfg: SolverConfig,
                   x_paths: Optional[np.ndarray] = None):
    """
    Explicit backward recursion. The backward-integral integrand is taken at the
    right end point t_{i+1}; Z is projected from the residual of the Y target
    times dW_i. Returns (Y, Z), each (N, n+1), with Z at the last index copied
    from the one before.
    """
    n_particles, n = paths.n_particles, paths.n_steps
    terminal = np.asarray(terminal, dtype=float)
    if terminal.shape != (n_particles,):
        raise ShapeError(f"terminal values have shape {terminal.shape}, expected ({n_particles},)")
    if not np.all(np.isfinite(terminal)):
        raise DivergenceError("terminal condition is not finite", step=n)
    if x_paths is not None and x_paths.shape != (n_particles, n + 1):
        raise ShapeError(f"state paths have shape {x_paths.shape}, expected {(n_particles, n + 1)}")

    group_size = paths.group_size if cfg.estimator == "grouped" else None
    if cfg.estimator == "grouped" and group_size is None:
        raise InvalidArgumentError("grouped estimator is not available on ungrouped driver paths; use pooled")
    markers = x_paths if x_paths is not None else paths.forward_levels()
    levels = paths.backward_levels() if cfg.estimator == "pooled" else None

    dt = paths.dt
    times = paths.times
    Y = np.empty((n_particles, n + 1))
    Z = np.zeros((n_particles, n + 1))
    Y[:, n] = terminal

    for i in range(n - 1, -1, -1):
        g_next = model.diffusion(i + 1, times[i + 1], Y[:, i + 1], Z[:, i + 1])
        target = Y[:, i + 1] + g_next * paths.backward[:, i]

        design = RegressionDesign(markers[:, i], cfg, group_size, None if levels is None else levels[:, i])
        y_tilde = design.fit(target).fitted
        Z[:, i] = design.fit((target - y_tilde) * paths.forward[:, i]).fitted / dt
        Y[:, i] = y_tilde + dt * model.drift(i, times[i], y_tilde, Z[:, i])

        if not (np.all(np.isfinite(Y[:, i])) and np.all(np.isfinite(Z[:, i]))):
            raise DivergenceError("non-finite solution values", step=i)

    Z[:, n] = Z[:, n - 1]
    return Y, Z


def solve_bdsde(
    coeffs: CoefficientSet,
    ens: ScenarioEnsemble,
    frozen: Optional[Sequence[PopulationSnapshot]] = None,
    controls: Optional[np.ndarray] = None,
    cfg: SolverConfig = SolverConfig(),
    x_paths: Optional[np.ndarray] = None,
    terminal: Optional[np.ndarray] = None,
    threads: int = 1,
) -> PathBundle:
    """One backward sweep with the primed arguments frozen to `frozen`"""
    n = ens.grid.n_steps
    if frozen is not None and len(frozen) != n + 1:
        raise ShapeError(f"expected {n + 1} frozen snapshots, got {len(frozen)}")
    if controls is not None and controls.shape != (ens.n_particles, n + 1):
        raise ShapeError(f"controls have shape {controls.shape}, expected {(ens.n_particles, n + 1)}")

    model = CoefficientDriver(coeffs, frozen, controls, x_paths, threads)
    xi = terminal_condition(coeffs.xi_mode, ens, x_paths) if terminal is None else terminal
    Y, Z = backward_sweep(model, driver_paths(ens), xi, cfg, x_paths)
    return PathBundle(Y=Y, Z=Z, grid=ens.grid)
