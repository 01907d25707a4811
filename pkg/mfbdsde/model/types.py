"""Array-carrying solver state. All containers are treated as immutable once built."""

from dataclasses import dataclass, field
from typing import Callable, List, Literal, Optional

import numpy as np

from .errors import InvalidArgumentError, ShapeError
from .expr import Expr, ZERO, free_vars
from .schemas import LipschitzMeta


@dataclass(frozen=True)
class TimeGrid:
    t_start: float
    t_end: float
    n_steps: int

    def __post_init__(self):
        if not (np.isfinite(self.t_start) and np.isfinite(self.t_end)):
            raise InvalidArgumentError("grid end points must be finite")
        if self.t_start >= self.t_end:
            raise InvalidArgumentError(f"t_start={self.t_start} must be below t_end={self.t_end}")
        if self.n_steps < 1:
            raise InvalidArgumentError(f"n_steps must be >= 1, got {self.n_steps}")

    @property
    def dt(self) -> float:
        return (self.t_end - self.t_start) / self.n_steps

    @property
    def points(self) -> np.ndarray:
        # index times dt, never accumulated
        return self.t_start + np.arange(self.n_steps + 1) * self.dt

    def point(self, k: int) -> float:
        return self.t_start + k * self.dt

    def index_of(self, t: float) -> int:
        """Nearest grid index to t; t must lie inside the grid"""
        if t < self.t_start or t > self.t_end:
            raise InvalidArgumentError(f"t={t} outside [{self.t_start}, {self.t_end}]")
        return int(round((t - self.t_start) / self.dt))


@dataclass(frozen=True, eq=False)
class ScenarioEnsemble:
    grid: TimeGrid
    m_outer: int
    k_inner: int
    dW: np.ndarray  # [group][particle][step]
    dB: np.ndarray  # [group][step]
    seed: int

    def __post_init__(self):
        n = self.grid.n_steps
        if self.dW.shape != (self.m_outer, self.k_inner, n):
            raise ShapeError(f"dW has shape {self.dW.shape}, expected {(self.m_outer, self.k_inner, n)}")
        if self.dB.shape != (self.m_outer, n):
            raise ShapeError(f"dB has shape {self.dB.shape}, expected {(self.m_outer, n)}")
        if not (np.all(np.isfinite(self.dW)) and np.all(np.isfinite(self.dB))):
            raise InvalidArgumentError("increments must be finite")

    @property
    def n_particles(self) -> int:
        return self.m_outer * self.k_inner

    def same_as(self, other: "ScenarioEnsemble") -> bool:
        """Bitwise equality of every field"""
        return (
            self.grid == other.grid
            and self.m_outer == other.m_outer
            and self.k_inner == other.k_inner
            and self.seed == other.seed
            and np.array_equal(self.dW, other.dW)
            and np.array_equal(self.dB, other.dB)
        )


@dataclass(frozen=True, eq=False)
class DriverPaths:
    """
    Per-particle view of the two drivers. Particles sharing a backward driver
    sit in contiguous blocks of `group_size`; None means no sharing, so only
    pooled regression applies.
    """
    dt: float
    times: np.ndarray
    forward: np.ndarray   # (N, n)
    backward: np.ndarray  # (N, n)
    group_size: Optional[int] = None

    @property
    def n_particles(self) -> int:
        return self.forward.shape[0]

    @property
    def n_steps(self) -> int:
        return self.forward.shape[1]

    def forward_levels(self) -> np.ndarray:
        levels = np.zeros((self.n_particles, self.n_steps + 1))
        levels[:, 1:] = np.cumsum(self.forward, axis=1)
        return levels

    def backward_levels(self) -> np.ndarray:
        levels = np.zeros((self.n_particles, self.n_steps + 1))
        levels[:, :-1] = np.cumsum(self.backward[:, ::-1], axis=1)[:, ::-1]
        return levels

    def reversed(self) -> "DriverPaths":
        """Particle-level time reversal: swap drivers, reverse steps and times"""
        return DriverPaths(
            dt=self.dt,
            times=self.times[::-1].copy(),
            forward=self.backward[:, ::-1].copy(),
            backward=self.forward[:, ::-1].copy(),
            group_size=None,
        )


@dataclass(frozen=True)
class TerminalMode:
    kind: Literal["constant", "w_terminal", "expression"] = "constant"
    value: float = 0.0
    expr: Optional[Expr] = None

    @classmethod
    def constant(cls, value: float) -> "TerminalMode":
        return cls(kind="constant", value=float(value))

    @classmethod
    def w_terminal(cls) -> "TerminalMode":
        return cls(kind="w_terminal")

    @classmethod
    def expression(cls, expr: Expr) -> "TerminalMode":
        if not free_vars(expr) <= {"x"}:
            raise InvalidArgumentError(f"terminal expression may only use x, got {sorted(free_vars(expr))}")
        return cls(kind="expression", expr=expr)


SLOT_VARIABLES = {
    "theta_f": frozenset({"t", "x", "xp", "y", "z", "yp", "zp", "v", "vp"}),
    "theta_g": frozenset({"t", "x", "xp", "y", "z", "yp", "zp", "v", "vp"}),
    "l": frozenset({"t", "x", "xp", "y", "z", "yp", "zp", "v", "vp"}),
    "h": frozenset({"x", "xp", "y", "yp"}),
    "b": frozenset({"t", "x", "xp"}),
    "sigma": frozenset({"t", "x", "xp"}),
}


@dataclass(frozen=True)
class CoefficientSet:
    theta_f: Expr = ZERO
    theta_g: Expr = ZERO
    l: Expr = ZERO
    h: Expr = ZERO
    b: Expr = ZERO
    sigma: Expr = ZERO
    xi_mode: TerminalMode = field(default_factory=TerminalMode)
    lipschitz: LipschitzMeta = field(default_factory=LipschitzMeta)

    def __post_init__(self):
        for slot, allowed in SLOT_VARIABLES.items():
            extra = free_vars(getattr(self, slot)) - allowed
            if extra:
                raise InvalidArgumentError(f"{slot} may not use {sorted(extra)}")


@dataclass(frozen=True, eq=False)
class PathBundle:
    Y: np.ndarray  # (N, n+1)
    Z: np.ndarray  # (N, n+1)
    grid: TimeGrid

    def __post_init__(self):
        expected = (self.Y.shape[0], self.grid.n_steps + 1)
        if self.Y.shape != expected or self.Z.shape != expected:
            raise ShapeError(f"bundle shapes {self.Y.shape}/{self.Z.shape} do not match grid {expected}")

    @property
    def n_particles(self) -> int:
        return self.Y.shape[0]

    def time_reversed(self) -> "PathBundle":
        return PathBundle(Y=self.Y[:, ::-1].copy(), Z=self.Z[:, ::-1].copy(), grid=self.grid)


@dataclass(frozen=True, eq=False)
class PopulationSnapshot:
    time_index: int
    y: np.ndarray
    z: np.ndarray
    v: Optional[np.ndarray] = None
    x: Optional[np.ndarray] = None

    def __post_init__(self):
        n = len(self.y)
        if n < 1:
            raise InvalidArgumentError("empty population snapshot")
        for name in ("z", "v", "x"):
            arr = getattr(self, name)
            if arr is not None and len(arr) != n:
                raise ShapeError(f"snapshot field {name} has length {len(arr)}, expected {n}")

    def __len__(self) -> int:
        return len(self.y)

    @classmethod
    def from_bundle(cls, bundle: PathBundle, i: int, controls: Optional[np.ndarray] = None,
                    x_paths: Optional[np.ndarray] = None) -> "PopulationSnapshot":
        return cls(
            time_index=i,
            y=bundle.Y[:, i],
            z=bundle.Z[:, i],
            v=None if controls is None else controls[:, i],
            x=None if x_paths is None else x_paths[:, i],
        )


@dataclass
class PicardTrace:
    distances: List[float] = field(default_factory=list)
    converged: bool = False
    tol: float = 0.0

    @property
    def iterations(self) -> int:
        return len(self.distances)

    @property
    def final_distance(self) -> float:
        return self.distances[-1] if self.distances else float("inf")

    def ratios(self) -> List[float]:
        """d_{k+1}/d_k for k >= 1"""
        d = self.distances
        return [d[k + 1] / d[k] for k in range(1, len(d) - 1) if d[k] > 0]


@dataclass(frozen=True)
class ContractionReport:
    M1: float
    M2: float
    M3: float
    M4: float
    h1_ok: bool
    margin: float
    C: float


@dataclass(frozen=True, eq=False)
class ControlPath:
    v: np.ndarray  # (N, n+1)

    @classmethod
    def constant(cls, value: float, n_particles: int, grid: TimeGrid) -> "ControlPath":
        return cls(v=np.full((n_particles, grid.n_steps + 1), float(value)))

    @classmethod
    def from_function(cls, fn: Callable[[np.ndarray], np.ndarray], n_particles: int, grid: TimeGrid) -> "ControlPath":
        """Deterministic path t -> fn(t), shared by every particle"""
        row = np.broadcast_to(np.asarray(fn(grid.points), dtype=float), (grid.n_steps + 1,))
        return cls(v=np.tile(row, (n_particles, 1)))

    def clip(self, lo: float, hi: float) -> "ControlPath":
        return ControlPath(v=np.clip(self.v, lo, hi))

    def __add__(self, other: "ControlPath") -> "ControlPath":
        return ControlPath(v=self.v + other.v)

    def scaled(self, factor: float) -> "ControlPath":
        return ControlPath(v=self.v * factor)


@dataclass(frozen=True, eq=False)
class AdjointBundle:
    p: np.ndarray
    q: np.ndarray
    grid: TimeGrid


@dataclass(frozen=True, eq=False)
class BasePopulation:
    X0: np.ndarray
    YZ0: PathBundle
    x0: float
    ens: ScenarioEnsemble
    trace: Optional[PicardTrace] = None


@dataclass(frozen=True, eq=False)
class FieldSample:
    t: float
    x: float
    values: np.ndarray
    mean: float
    std_err: float


@dataclass(frozen=True, eq=False)
class LQSolution:
    uhat: ControlPath
    state: PathBundle
    adjoint: AdjointBundle
    fixed_point_residual: float
    cost_at_opt: float
    cost_std_err: float = 0.0
    updates: List[float] = field(default_factory=list)


@dataclass(frozen=True)
class ControlProblem:
    """Controlled mean-field BDSDE with running cost l and initial cost h over the box [u_lo, u_hi]"""
    coeffs: CoefficientSet
    u_lo: float = -np.inf
    u_hi: float = np.inf

    def __post_init__(self):
        if self.u_lo > self.u_hi:
            raise InvalidArgumentError(f"u_lo={self.u_lo} exceeds u_hi={self.u_hi}")

    @property
    def xi_mode(self) -> TerminalMode:
        return self.coeffs.xi_mode

    def contains(self, v: np.ndarray, slack: float = 1e-12) -> bool:
        return bool(np.all(v >= self.u_lo - slack) and np.all(v <= self.u_hi + slack))


@dataclass(frozen=True)
class GateauxReport:
    eps: List[float]
    sup_sq_diff: List[float]
    residual: List[float]
    slope: Optional[float]


@dataclass(frozen=True, eq=False)
class MPReport:
    """Maximum-principle scan; `G` holds the v-gradient at every (particle, grid index)"""
    G: np.ndarray
    global_min: float
    violation_fraction: float
    worst_index: int
    worst_particle: int
    worst_v: float


@dataclass(frozen=True)
class DualityReport:
    direct: float
    direct_se: float
    via_integral: float
    integral_se: float

    @property
    def gap(self) -> float:
        return abs(self.direct - self.via_integral)


@dataclass(frozen=True)
class VariationalReport:
    finite_difference: float
    expansion: float
    expansion_se: float


@dataclass(frozen=True, eq=False)
class DominanceReport:
    deltas: np.ndarray
    min_delta: float
    base_cost: float
    mp: Optional[MPReport] = None
