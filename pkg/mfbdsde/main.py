from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import ORJSONResponse
from contextlib import asynccontextmanager
import logging

from . import __version__
from .api import experiments, presets
from .infra.settings import THREADS, configure_logging


configure_logging()
logger = logging.getLogger(__name__)


@asynccontextmanager
async def lifespan(app: FastAPI):
    logger.info(f"Starting mean-field BDSDE experiment API {__version__} (default threads={THREADS})")
    yield
    logger.info("Shutting down mean-field BDSDE experiment API")


app = FastAPI(
    title="Mean-field BDSDE API",
    description="Solve mean-field backward doubly SDEs, evaluate the nonlocal SPDE and check control problems",
    version=__version__,
    lifespan=lifespan,
    default_response_class=ORJSONResponse
)

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)

app.include_router(presets.router)
app.include_router(experiments.router)


@app.get("/health")
def health_check():
    return {"status": "healthy", "api_version": __version__}


if __name__ == "__main__":
    import uvicorn

    uvicorn.run("mfbdsde.main:app", host="0.0.0.0", port=8000, reload=True, log_level="info")
