"""
Built-in problems and the translation of an experiment configuration into
solver inputs.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Literal, Optional

import numpy as np

from ..model.errors import ContractionConditionError, InvalidArgumentError
from ..model.expr import Expr, free_vars
from ..model.schemas import ExperimentConfig, LipschitzMeta, LQCoefficients, PresetInfo
from ..model.types import CoefficientSet, ControlProblem, TerminalMode
from .dsl import const_value, diff, evaluate, parse, parse_map


logger = logging.getLogger(__name__)

Kind = Literal["bdsde", "mkv", "control", "lq"]

SLOTS = ("theta_f", "theta_g", "l", "h", "b", "sigma")

# sample count for sup-norms of partials that depend on t only
SUP_SAMPLES = 257


@dataclass(frozen=True)
class Preset:
    name: str
    description: str
    kind: Kind
    coefficients: Dict[str, str] = field(default_factory=dict)
    oracle: Optional[Callable[[ExperimentConfig], float]] = None
    defaults: Dict[str, object] = field(default_factory=dict)
    lq: Dict[str, float] = field(default_factory=dict)

    def info(self, config: Optional[ExperimentConfig] = None) -> PresetInfo:
        config = config or ExperimentConfig(preset=self.name, **self.defaults)
        return PresetInfo(
            name=self.name,
            description=self.description,
            oracle=self.oracle(config) if self.oracle else None,
            coefficients=dict(self.coefficients) if self.kind != "lq" else {k: str(v) for k, v in self.lq.items()},
        )


PRESETS: Dict[str, Preset] = {
    p.name: p
    for p in [
        Preset(
            name="constant",
            description="xi = 1 with zero drivers; Y is identically 1",
            kind="bdsde",
            coefficients={"xi": "1"},
            oracle=lambda c: 1.0,
        ),
        Preset(
            name="martingale",
            description="xi = W_T with zero drivers; Y_t = W_t and Z = 1",
            kind="bdsde",
            coefficients={"xi": "W_T"},
            oracle=lambda c: 0.0,
        ),
        Preset(
            name="backward-driver",
            description="theta^g = 0.5, xi = 0; Var(Y_t) = 0.25 (T - t)",
            kind="bdsde",
            coefficients={"theta_g": "0.5", "xi": "0"},
            oracle=lambda c: 0.0,
        ),
        Preset(
            name="linear-mean",
            description="theta^f = 0.5 y + 0.5 y', xi = 1; E[Y_0] = e^T",
            kind="bdsde",
            coefficients={"theta_f": "0.5*y + 0.5*yp", "xi": "1"},
            oracle=lambda c: math.exp(c.horizon),
        ),
        Preset(
            name="mkv-linear",
            description="dX = (-0.5 X + 0.5 E X) dt + 0.3 dW from x0 = 1, theta^f = 0.5 y, h = x; E[Y_0] = e^(T/2)",
            kind="mkv",
            coefficients={"b": "-0.5*x + 0.5*xp", "sigma": "0.3", "theta_f": "0.5*y", "h": "x"},
            oracle=lambda c: c.x0 * math.exp(0.5 * c.horizon),
            defaults={"x0": 1.0},
        ),
        Preset(
            name="spde-basic",
            description="b = 0, sigma = 1, h = x, theta = 0; u(t, x) = x",
            kind="mkv",
            coefficients={"b": "0", "sigma": "1", "h": "x"},
            oracle=lambda c: c.query_x,
            defaults={"command": "spde-eval", "query_t": 0.5, "query_x": 0.3},
        ),
        Preset(
            name="control-linear",
            description="theta^f = 0.5 y' + v, l = (y^2 + v^2)/2, h = y^2/2, xi = 1, v in [-5, 5]",
            kind="control",
            coefficients={"theta_f": "0.5*yp + v", "l": "0.5*y^2 + 0.5*v^2", "h": "0.5*y^2", "xi": "1"},
            defaults={"command": "control-check", "u_box": (-5.0, 5.0)},
        ),
        Preset(
            name="lq-basic",
            description="C1 = R1 = Q1_0 = 1, xi = 1, v in [-5, 5]; u = -1/2, Y_0 = 1/2, J = 1/4",
            kind="lq",
            lq={"C1": 1.0, "R1": 1.0, "Q1_0": 1.0, "xi": 1.0},
            oracle=lambda c: 0.25,
            defaults={"command": "lq", "u_box": (-5.0, 5.0)},
        ),
    ]
}


def list_presets() -> List[PresetInfo]:
    return [p.info() for p in PRESETS.values()]


def get_preset(name: str) -> Preset:
    try:
        return PRESETS[name]
    except KeyError:
        raise InvalidArgumentError(f"unknown preset '{name}' (known: {', '.join(PRESETS)})")


def with_preset_defaults(config: ExperimentConfig) -> ExperimentConfig:
    """Fill fields the caller left unset from the preset's defaults"""
    if config.preset is None:
        return config
    preset = get_preset(config.preset)
    missing = {k: v for k, v in preset.defaults.items() if k not in config.model_fields_set and k != "command"}
    if not missing:
        return config
    return config.model_copy(update=missing)


def parse_terminal(source: str) -> TerminalMode:
    """'W_T', a constant, or an expression in x"""
    if source.strip() == "W_T":
        return TerminalMode.w_terminal()
    e = parse(source)
    c = const_value(e)
    if c is not None:
        return TerminalMode.constant(c)
    return TerminalMode.expression(e)


def _sup_abs(e: Expr, horizon: float) -> Optional[float]:
    c = const_value(e)
    if c is not None:
        return abs(c)
    if free_vars(e) <= {"t"}:
        times = np.linspace(0.0, horizon, SUP_SAMPLES)
        return float(np.max(np.abs(evaluate(e, {"t": times}))))
    return None


def infer_lipschitz(theta_f: Expr, theta_g: Expr, horizon: float = 1.0) -> LipschitzMeta:
    """
    Lipschitz metadata from the partials of theta^f and theta^g. Every partial
    must be constant or a function of t alone.
    """
    bounds: Dict[str, float] = {}
    unbounded = []
    for slot, theta in (("f", theta_f), ("g", theta_g)):
        for var in ("y", "z", "yp", "zp", "v", "vp"):
            bound = _sup_abs(diff(theta, var), horizon)
            if bound is None:
                unbounded.append(f"d theta^{slot}/d {var}")
                bound = 0.0
            bounds[f"{slot}_{var}"] = bound
    if unbounded:
        raise ContractionConditionError(f"cannot bound {', '.join(unbounded)} by a constant")
    return LipschitzMeta(
        L_y=bounds["f_y"], L_z=bounds["f_z"], L_yp=bounds["f_yp"], L_zp=bounds["f_zp"],
        L_v=bounds["f_v"], L_vp=bounds["f_vp"],
        K_y=bounds["g_y"], K_yp=bounds["g_yp"], K_v=bounds["g_v"], K_vp=bounds["g_vp"],
        alpha1=0.0, alpha2=1.0, alpha3=bounds["g_z"] ** 2, alpha4=bounds["g_zp"] ** 2, L_gamma=1.0,
    )


def coefficient_sources(config: ExperimentConfig) -> Dict[str, str]:
    sources: Dict[str, str] = {}
    if config.preset is not None:
        sources.update(get_preset(config.preset).coefficients)
    sources.update(config.coefficients)
    unknown = set(sources) - set(SLOTS) - {"xi"}
    if unknown:
        raise InvalidArgumentError(f"unknown coefficient slots {sorted(unknown)}")
    return sources


def build_coefficients(config: ExperimentConfig) -> CoefficientSet:
    """Preset coefficient strings with the config's overrides, parsed"""
    sources = coefficient_sources(config)
    xi_source = sources.pop("xi", "0")
    exprs = parse_map(sources)
    theta_f = exprs.get("theta_f", parse("0"))
    theta_g = exprs.get("theta_g", parse("0"))
    try:
        meta = infer_lipschitz(theta_f, theta_g, config.horizon)
    except ContractionConditionError as e:
        if config.enforce_h1:
            raise
        logger.warning(f"{e.message}; solving without the contraction check")
        meta = LipschitzMeta()
    return CoefficientSet(xi_mode=parse_terminal(xi_source), lipschitz=meta, **exprs)


def problem_kind(config: ExperimentConfig) -> Kind:
    if config.preset is not None:
        return get_preset(config.preset).kind
    if config.lq is not None:
        return "lq"
    slots = set(config.coefficients)
    if slots & {"b", "sigma"}:
        return "mkv"
    if "l" in slots or any(free_vars(parse(s)) & {"v", "vp"} for s in config.coefficients.values()):
        return "control"
    return "bdsde"


def lq_coefficients(config: ExperimentConfig) -> LQCoefficients:
    values: Dict[str, object] = {}
    if config.preset is not None:
        values.update(get_preset(config.preset).lq)
    if config.lq is not None:
        values.update(config.lq.model_dump(exclude_unset=True))
    if config.u_box is not None:
        values["u_lo"], values["u_hi"] = config.u_box
    return LQCoefficients(**values)


def control_problem(config: ExperimentConfig) -> ControlProblem:
    coeffs = build_coefficients(config)
    u_lo, u_hi = config.u_box if config.u_box is not None else (-np.inf, np.inf)
    return ControlProblem(coeffs=coeffs, u_lo=u_lo, u_hi=u_hi)


def oracle_value(config: ExperimentConfig) -> Optional[float]:
    if config.preset is None:
        return None
    preset = get_preset(config.preset)
    return preset.oracle(config) if preset.oracle else None

