import sys
import logging
from typing import Any, Dict, Optional, Tuple

import click
import orjson

from .infra.output import to_json, write_result
from .infra.settings import build_config, configure_logging, load_config, output_path
from .model.errors import InvalidArgumentError, MFBDSDEError
from .services.presets import list_presets
from .services.runner import run


logger = logging.getLogger(__name__)


def parse_particles(value: Optional[str]) -> Optional[Tuple[int, int]]:
    """'8x1024' -> (8, 1024)"""
    if value is None:
        return None
    try:
        m_outer, k_inner = (int(part) for part in value.lower().split("x"))
    except ValueError:
        raise InvalidArgumentError(f"particles must look like MxK, got {value!r}")
    return m_outer, k_inner


def parse_assignments(pairs: Tuple[str, ...], what: str) -> Dict[str, str]:
    result = {}
    for pair in pairs:
        name, sep, value = pair.partition("=")
        if not sep or not name.strip():
            raise InvalidArgumentError(f"{what} must look like NAME=VALUE, got {pair!r}")
        result[name.strip()] = value.strip()
    return result


def parse_floats(value: Optional[str]) -> Optional[list]:
    if value is None:
        return None
    try:
        return [float(v) for v in value.split(",") if v.strip()]
    except ValueError:
        raise InvalidArgumentError(f"expected comma-separated numbers, got {value!r}")


def common_options(fn):
    options = [
        click.option('--config', 'config_path', type=click.Path(), help='TOML experiment file'),
        click.option('--preset', help='Built-in preset name'),
        click.option('--coef', multiple=True, help='Coefficient override SLOT=EXPR (theta_f, theta_g, l, h, b, sigma, xi)'),
        click.option('--horizon', type=float, help='Terminal time T'),
        click.option('--steps', type=int, help='Number of time steps'),
        click.option('--particles', help='Particle layout MxK (B-groups x particles per group)'),
        click.option('--seed', type=int, help='Base seed'),
        click.option('--picard-tol', type=float, help='Picard tolerance'),
        click.option('--mp-tol', type=float, help='Maximum-principle tolerance'),
        click.option('--max-iter', type=int, help='Iteration budget of every fixed-point loop'),
        click.option('--basis-degree', type=int, help='Regression basis degree'),
        click.option('--estimator', type=click.Choice(['grouped', 'pooled']), help='Regression estimator'),
        click.option('--ridge', type=float, help='Ridge weight'),
        click.option('--enforce-h1/--no-enforce-h1', default=None, help='Reject coefficients failing the contraction check'),
        click.option('--out', help='Output file'),
        click.option('--format', 'fmt', type=click.Choice(['json', 'csv']), help='Output format'),
    ]
    for option in reversed(options):
        fn = option(fn)
    return fn


def collect_overrides(command: str, threads: int, params: Dict[str, Any]) -> Dict[str, Any]:
    """Flag values the user actually gave, as ExperimentConfig fields"""
    overrides: Dict[str, Any] = {"command": command, "threads": threads}
    simple = {
        "preset": "preset", "horizon": "horizon", "steps": "n_steps", "seed": "seed",
        "picard_tol": "picard_tol", "mp_tol": "mp_tol", "max_iter": "max_iter", "enforce_h1": "enforce_h1",
        "out": "out", "fmt": "format", "x0": "x0", "t": "query_t", "x": "query_x",
        "control_value": "control_value", "direction": "direction", "eps": "eps",
        "n_perturb": "n_perturb", "axis": "axis",
    }
    for param, field in simple.items():
        if params.get(param) is not None:
            overrides[field] = params[param]
    particles = parse_particles(params.get("particles"))
    if particles is not None:
        overrides["m_outer"], overrides["k_inner"] = particles
    if params.get("coef"):
        overrides["coefficients"] = parse_assignments(params["coef"], "--coef")
    solver = {
        key: params[key] for key in ("basis_degree", "estimator", "ridge") if params.get(key) is not None
    }
    if solver:
        overrides["solver"] = solver
    for param, field in (("eps_list", "eps_list"), ("values", "axis_values")):
        values = parse_floats(params.get(param))
        if values is not None:
            overrides[field] = values
    if params.get("u_box") is not None:
        overrides["u_box"] = params["u_box"]
    lq = parse_assignments(params.get("lq") or (), "--lq")
    if params.get("adjoint_form") is not None:
        lq["adjoint_form"] = params["adjoint_form"]
    if lq:
        overrides["lq"] = lq
    return overrides


def _merge(file_values: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(file_values)
    for key, value in overrides.items():
        if key in ("solver", "coefficients", "lq") and isinstance(merged.get(key), dict):
            merged[key] = {**merged[key], **value}
        else:
            merged[key] = value
    return merged


def execute(ctx: click.Context, command: str, params: Dict[str, Any]) -> None:
    """Build the config, run it, write or print the record; map failures to exit codes"""
    try:
        overrides = collect_overrides(command, ctx.obj["threads"], params)
        config_path = params.get("config_path")
        if config_path:
            file_config = load_config(config_path)
            config = build_config(_merge(file_config.model_dump(exclude_unset=True), overrides))
        else:
            config = build_config(overrides)
        record = run(config)
    except MFBDSDEError as e:
        logger.error(f"{command} failed: {e.message}")
        click.echo(orjson.dumps(e.to_dict()).decode(), err=True)
        ctx.exit(e.exit_code)

    if config.out:
        path = write_result(record, output_path(config.out), config.format)
        click.echo(str(path))
    else:
        click.echo(to_json(record).decode())


@click.group()
@click.option('--log-level', default=None, help='Logging level (default MFBDSDE_LOG_LEVEL or INFO)')
@click.option('--threads', type=click.IntRange(min=1), envvar='MFBDSDE_THREADS', default=1, show_default=True,
              help='Worker threads')
@click.version_option(package_name='mfbdsde')
@click.pass_context
def main(ctx, log_level, threads):
    """Mean-field backward doubly SDE solver"""
    configure_logging(log_level)
    ctx.ensure_object(dict)
    ctx.obj["threads"] = threads


@main.command()
@common_options
@click.option('--control-value', type=float, help='Constant control for control presets')
@click.pass_context
def solve(ctx, **params):
    """Solve the mean-field BDSDE of a preset or inline coefficients"""
    execute(ctx, "solve", params)


@main.command()
@common_options
@click.option('--control-value', type=float, help='Constant control for control presets')
@click.pass_context
def forward(ctx, **params):
    """Solve the forward doubly SDE by time reversal"""
    execute(ctx, "forward", params)


@main.command('spde-eval')
@common_options
@click.option('--t', type=float, help='Query time')
@click.option('--x', type=float, help='Query point')
@click.option('--x0', type=float, help='Start point of the base population')
@click.pass_context
def spde_eval(ctx, **params):
    """Evaluate u(t, x) of the nonlocal SPDE"""
    execute(ctx, "spde-eval", params)


@main.command('control-check')
@common_options
@click.option('--control-value', type=float, help='Constant control to check')
@click.option('--direction', type=float, help='Constant perturbation direction')
@click.option('--eps', type=float, help='Step of the finite-difference cost derivative')
@click.option('--eps-list', help='Comma-separated eps values of the scaling check')
@click.option('--u-box', type=(float, float), help='Control box LO HI')
@click.pass_context
def control_check(ctx, **params):
    """State, cost, adjoint and the maximum-principle checks at a constant control"""
    execute(ctx, "control-check", params)


@main.command()
@common_options
@click.option('--lq', multiple=True, help='LQ coefficient NAME=VALUE (constant or expression in t)')
@click.option('--adjoint-form', type=click.Choice(['derived', 'printed']), help='Cost terms of the adjoint')
@click.option('--u-box', type=(float, float), help='Control box LO HI')
@click.option('--n-perturb', type=int, help='Random perturbations of the dominance check')
@click.option('--eps', type=float, help='Perturbation size')
@click.pass_context
def lq(ctx, **params):
    """Solve and certify the linear-quadratic problem"""
    execute(ctx, "lq", params)


@main.command('convergence-study')
@common_options
@click.option('--axis', type=click.Choice(['steps', 'particles', 'epsilon']), help='Refinement axis')
@click.option('--values', help='Comma-separated axis values')
@click.option('--control-value', type=float, help='Constant control of epsilon studies')
@click.option('--direction', type=float, help='Perturbation direction of epsilon studies')
@click.option('--x', type=float, help='Query point of SPDE studies')
@click.option('--t', type=float, help='Query time of SPDE studies')
@click.pass_context
def convergence_study(ctx, **params):
    """Error against the preset oracle over an axis, with the log-log slope"""
    execute(ctx, "convergence-study", params)


@main.command()
def presets():
    """List built-in presets"""
    for info in list_presets():
        oracle = "-" if info.oracle is None else f"{info.oracle:.6g}"
        click.echo(f"{info.name:16s} oracle={oracle:10s} {info.description}")


if __name__ == "__main__":
    main(sys.argv[1:])
