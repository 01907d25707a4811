from fastapi import APIRouter, HTTPException
from typing import List

from ..model.errors import InvalidArgumentError
from ..model.schemas import PresetInfo
from ..services.presets import get_preset, list_presets


router = APIRouter(prefix="/presets", tags=["presets"])


@router.get("", response_model=List[PresetInfo])
def get_presets():
    """List built-in presets with oracle availability"""
    return list_presets()


@router.get("/{name}", response_model=PresetInfo)
def get_preset_by_name(name: str):
    try:
        return get_preset(name).info()
    except InvalidArgumentError as e:
        raise HTTPException(status_code=404, detail=e.message)
