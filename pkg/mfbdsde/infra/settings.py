import os
import tomllib
import logging
from pathlib import Path
from typing import Any, Dict, Mapping, Optional

from pydantic import BaseModel, Field, ValidationError

from ..model.errors import InvalidArgumentError
from ..model.schemas import ExperimentConfig


logger = logging.getLogger(__name__)


LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

ENV_PREFIX = "MFBDSDE_"


class EnvSettings(BaseModel):
    """Process-wide defaults read from MFBDSDE_* environment variables"""

    # worker threads when a run does not set its own
    threads: int = Field(default=1, ge=1)
    log_level: str = "INFO"
    # relative output paths resolve against this directory
    output_dir: str = "."


def read_env(environ: Mapping[str, str] = os.environ) -> EnvSettings:
    """Validate MFBDSDE_* variables; invalid ones fall back to their defaults with a warning"""
    values = {}
    for name in EnvSettings.model_fields:
        key = ENV_PREFIX + name.upper()
        if key in environ:
            values[name] = environ[key]
    try:
        return EnvSettings.model_validate(values)
    except ValidationError as e:
        bad = {error["loc"][0] for error in e.errors()}
        logger.warning(f"Ignoring invalid environment settings {sorted(ENV_PREFIX + str(b).upper() for b in bad)}")
        return EnvSettings.model_validate({k: v for k, v in values.items() if k not in bad})


ENV = read_env()
THREADS = ENV.threads
LOG_LEVEL = ENV.log_level
OUTPUT_DIR = ENV.output_dir

# TOML section -> ExperimentConfig fields it may carry
SECTIONS = {
    "grid": {"horizon", "n_steps"},
    "particles": {"m_outer", "k_inner", "seed"},
    "tolerances": {"picard_tol", "mp_tol", "max_iter", "enforce_h1"},
    "query": {"x0", "query_t", "query_x"},
    "control": {"u_box", "control_value", "direction", "n_perturb", "eps", "eps_list"},
    "study": {"axis", "axis_values"},
    "output": {"out", "format"},
}


def configure_logging(level: Optional[str] = None) -> None:
    logging.basicConfig(level=(level or LOG_LEVEL).upper(), format=LOG_FORMAT)


def output_path(out: str) -> Path:
    path = Path(out)
    if not path.is_absolute():
        path = Path(OUTPUT_DIR) / path
    return path


def flatten_sections(document: Dict[str, Any]) -> Dict[str, Any]:
    """Map sectioned TOML onto the flat ExperimentConfig fields"""
    flat: Dict[str, Any] = {}
    for key, value in document.items():
        if not isinstance(value, dict):
            flat[key] = value
        elif key in ("solver", "coefficients", "lq"):
            flat[key] = value
        elif key in SECTIONS:
            unknown = set(value) - SECTIONS[key]
            if unknown:
                raise InvalidArgumentError(f"unknown keys in [{key}]: {sorted(unknown)}")
            flat.update(value)
        else:
            raise InvalidArgumentError(f"unknown section [{key}]")
    return flat


def build_config(values: Dict[str, Any]) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(values)
    except ValidationError as e:
        raise InvalidArgumentError(f"invalid experiment config: {e.errors(include_url=False)}")


def load_config(path: str, overrides: Optional[Dict[str, Any]] = None) -> ExperimentConfig:
    """Read a TOML experiment file; `overrides` (command-line values) win"""
    try:
        with open(path, "rb") as f:
            document = tomllib.load(f)
    except OSError as e:
        raise InvalidArgumentError(f"cannot read config {path}: {e}")
    except tomllib.TOMLDecodeError as e:
        raise InvalidArgumentError(f"config {path} is not valid TOML: {e}")
    values = flatten_sections(document)
    values.update(overrides or {})
    logger.debug(f"Loaded config from {path}: {sorted(values)}")
    return build_config(values)
