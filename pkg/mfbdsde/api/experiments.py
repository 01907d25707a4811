from fastapi import APIRouter, HTTPException
from typing import Dict, List
import logging

from ..infra import settings
from ..model.errors import MFBDSDEError
from ..model.schemas import ExperimentConfig, ResultRecord
from ..services.runner import convergence_study, run


logger = logging.getLogger(__name__)

router = APIRouter(prefix="/experiments", tags=["experiments"])

# numerical failures are well-formed requests the solver could not finish
STATUS_BY_CATEGORY = {"config": 400, "divergence": 422, "iteration-limit": 422}


def _http_error(e: MFBDSDEError) -> HTTPException:
    logger.warning(f"Experiment failed ({e.category}): {e.message}")
    return HTTPException(status_code=STATUS_BY_CATEGORY.get(e.category, 400), detail=e.to_dict())


def _with_default_threads(config: ExperimentConfig) -> ExperimentConfig:
    if "threads" in config.model_fields_set:
        return config
    return config.model_copy(update={"threads": settings.THREADS})


@router.post("", response_model=ResultRecord)
def run_experiment(config: ExperimentConfig):
    """Run one experiment; same dispatch as the command line"""
    try:
        return run(_with_default_threads(config))
    except MFBDSDEError as e:
        raise _http_error(e)


@router.post("/convergence", response_model=List[Dict[str, float]])
def run_convergence(config: ExperimentConfig):
    """Convergence study rows, slope row last when it exists"""
    try:
        return convergence_study(_with_default_threads(config)).table
    except MFBDSDEError as e:
        raise _http_error(e)
