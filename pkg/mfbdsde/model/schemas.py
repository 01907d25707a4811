from pydantic import BaseModel, ConfigDict, Field, model_validator
from typing import Optional, List, Dict, Any, Literal, Tuple, Union


RESULT_VERSION = "1.0"

Coefficient = Union[float, str]


class BaseSchema(BaseModel):
    model_config = ConfigDict(
        from_attributes=True,
        # reject misspelled keys in config files and request bodies
        extra="forbid",
    )


class SolverConfig(BaseSchema):
    """Regression settings of the backward sweep"""
    basis_degree: int = Field(default=1, ge=0, le=6, description="Polynomial degree of regression features")
    estimator: Literal["grouped", "pooled"] = "grouped"
    ridge: float = Field(default=1e-8, ge=0, description="Ridge weight on the non-intercept block")
    driver_eval: Literal["explicit"] = "explicit"


class LipschitzMeta(BaseSchema):
    """Constants of the Lipschitz assumptions on theta^f, theta^g and the outer maps"""
    L_y: float = Field(default=0.0, ge=0, allow_inf_nan=False)
    L_z: float = Field(default=0.0, ge=0, allow_inf_nan=False)
    L_yp: float = Field(default=0.0, ge=0, allow_inf_nan=False)
    L_zp: float = Field(default=0.0, ge=0, allow_inf_nan=False)
    L_v: float = Field(default=0.0, ge=0, allow_inf_nan=False)
    L_vp: float = Field(default=0.0, ge=0, allow_inf_nan=False)
    L_gamma: float = Field(default=0.0, ge=0, allow_inf_nan=False)
    K_y: float = Field(default=0.0, ge=0, allow_inf_nan=False)
    K_yp: float = Field(default=0.0, ge=0, allow_inf_nan=False)
    K_v: float = Field(default=0.0, ge=0, allow_inf_nan=False)
    K_vp: float = Field(default=0.0, ge=0, allow_inf_nan=False)
    alpha1: float = Field(default=0.0, ge=0, allow_inf_nan=False)
    alpha2: float = Field(default=0.0, ge=0, allow_inf_nan=False)
    alpha3: float = Field(default=0.0, ge=0, allow_inf_nan=False)
    alpha4: float = Field(default=0.0, ge=0, allow_inf_nan=False)


class LQCoefficients(BaseSchema):
    """
    Linear-quadratic problem data. Each coefficient is a constant or a DSL
    expression in t.
    """
    A1: Coefficient = 0.0
    A2: Coefficient = 0.0
    B1: Coefficient = 0.0
    B2: Coefficient = 0.0
    C1: Coefficient = 0.0
    C2: Coefficient = 0.0
    D1: Coefficient = 0.0
    D2: Coefficient = 0.0
    E1: Coefficient = 0.0
    E2: Coefficient = 0.0
    F1: Coefficient = 0.0
    F2: Coefficient = 0.0
    M1: Coefficient = 0.0
    M2: Coefficient = 0.0
    N1: Coefficient = 0.0
    N2: Coefficient = 0.0
    R1: Coefficient = 1.0
    R2: Coefficient = 0.0
    Q1_0: Coefficient = 0.0
    Q2_0: Coefficient = 0.0
    xi: float = Field(default=1.0, allow_inf_nan=False)
    u_lo: float = -5.0
    u_hi: float = 5.0
    adjoint_form: Literal["derived", "printed"] = Field(
        default="derived", description="'printed' uses bare M1, N1 in the adjoint drift"
    )

    @model_validator(mode="after")
    def check_box(self):
        if self.u_lo > self.u_hi:
            raise ValueError(f"u_lo={self.u_lo} exceeds u_hi={self.u_hi}")
        return self


class ScalarResult(BaseSchema):
    value: float
    std_err: float = 0.0


class ExperimentConfig(BaseSchema):
    """Everything one CLI or HTTP run needs"""
    command: Literal["solve", "forward", "spde-eval", "control-check", "lq", "convergence-study"] = "solve"
    preset: Optional[str] = None
    coefficients: Dict[str, str] = Field(default_factory=dict, description="Inline DSL overrides per slot")
    horizon: float = Field(default=1.0, gt=0)
    n_steps: int = Field(default=64, ge=1)
    m_outer: int = Field(default=8, ge=1)
    k_inner: int = Field(default=1024, ge=1)
    seed: int = Field(default=42, ge=0)
    picard_tol: float = Field(default=1e-8, gt=0)
    mp_tol: float = Field(default=1e-3, gt=0)
    max_iter: int = Field(default=50, ge=1)
    solver: SolverConfig = Field(default_factory=SolverConfig)
    enforce_h1: bool = True
    x0: float = 0.0
    query_t: float = 0.0
    query_x: float = 0.0
    lq: Optional[LQCoefficients] = None
    u_box: Optional[Tuple[float, float]] = None
    control_value: float = 0.0
    direction: float = 1.0
    n_perturb: int = Field(default=100, ge=1)
    eps: float = Field(default=0.1, ge=0)
    eps_list: List[float] = Field(default_factory=lambda: [0.2, 0.1, 0.05, 0.025])
    axis: Optional[Literal["steps", "particles", "epsilon"]] = None
    axis_values: List[float] = Field(default_factory=list)
    out: Optional[str] = None
    format: Literal["json", "csv"] = "json"
    threads: int = Field(default=1, ge=1)


class ResultRecord(BaseSchema):
    version: str = RESULT_VERSION
    command: str
    config: Dict[str, Any]
    scalars: Dict[str, ScalarResult] = Field(default_factory=dict)
    series: Dict[str, List[float]] = Field(default_factory=dict)
    trace: List[float] = Field(default_factory=list)
    table: List[Dict[str, float]] = Field(default_factory=list)
    wall_clock: float = 0.0


class PresetInfo(BaseSchema):
    name: str
    description: str
    oracle: Optional[float] = None
    coefficients: Dict[str, str] = Field(default_factory=dict)
