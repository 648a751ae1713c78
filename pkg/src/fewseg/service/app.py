"""FastAPI service exposing every pipeline operation as a POST endpoint."""

from __future__ import annotations

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .. import __version__
from ..errors import (
    ConfigError,
    DataError,
    FormatError,
    NumericError,
    SamplingError,
    ShapeError,
)
from . import models


def create_app() -> FastAPI:
    app = FastAPI(title="fewseg", version=__version__)

    # Imported lazily so the service module stays importable without triggering
    # kernel JIT warmup at module import.
    from .. import runs

    @app.exception_handler(ConfigError)
    async def _config_error(request: Request, exc: ConfigError):
        return JSONResponse(status_code=400, content={"error": "config", "detail": str(exc)})

    @app.exception_handler(DataError)
    @app.exception_handler(FormatError)
    @app.exception_handler(ShapeError)
    @app.exception_handler(SamplingError)
    async def _data_error(request: Request, exc: Exception):
        return JSONResponse(status_code=422, content={"error": "data", "detail": str(exc)})

    @app.exception_handler(NumericError)
    async def _numeric_error(request: Request, exc: NumericError):
        return JSONResponse(status_code=500, content={"error": "numeric", "detail": str(exc)})

    @app.get("/health", response_model=models.HealthResponse)
    def health():
        return models.HealthResponse(status="ok", version=__version__)

    @app.post("/synth", response_model=models.SynthResponse)
    def synth(req: models.SynthRequest):
        return runs.run_synth(req)

    @app.post("/train", response_model=models.TrainResponse)
    def train(cfg: models.RunConfig):
        return runs.run_train(cfg)

    @app.post("/eval", response_model=models.EvalResponse)
    def evaluate(cfg: models.RunConfig):
        return runs.run_eval(cfg)

    @app.post("/predict", response_model=models.PredictResponse)
    def predict(cfg: models.RunConfig):
        return runs.run_predict(cfg)

    @app.post("/viz", response_model=models.VizResponse)
    def viz(cfg: models.RunConfig):
        return runs.run_viz(cfg)

    @app.post("/params", response_model=models.ParamsResponse)
    def params(req: models.ParamsRequest):
        return runs.run_params(req)

    return app


app = create_app()
