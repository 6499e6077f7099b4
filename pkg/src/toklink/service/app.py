"""FastAPI application exposing the experiment pipeline.

Endpoints take a full run configuration (schema-validated, unknown keys
rejected) and run synchronously; artifacts and traces are written on the
service side under the configured output directory. Precondition failures
(missing or mismatched artifacts, inconsistent settings) map to 400,
malformed configs to 422.
"""

from __future__ import annotations

from fastapi import FastAPI, HTTPException

from .. import __version__, pipeline
from ..config import RunConfig
from .models import (
    HealthResponse,
    ReportRequest,
    ReportResponse,
    SimulateResponse,
    TrainCodecResponse,
    TrainPredictorResponse,
)


def _run(fn, cfg):
    try:
        return fn(cfg)
    except (ValueError, FileNotFoundError) as exc:
        raise HTTPException(status_code=400, detail=str(exc))


def create_app() -> FastAPI:
    app = FastAPI(title="toklink", version=__version__)

    @app.get("/health", response_model=HealthResponse)
    def health():
        return HealthResponse(status="ok", version=__version__)

    @app.post("/codec/train", response_model=TrainCodecResponse)
    def train_codec(cfg: RunConfig):
        return TrainCodecResponse(**_run(pipeline.train_codec, cfg))

    @app.post("/predictor/train", response_model=TrainPredictorResponse)
    def train_predictor(cfg: RunConfig):
        return TrainPredictorResponse(**_run(pipeline.train_predictor, cfg))

    @app.post("/simulate", response_model=SimulateResponse)
    def simulate(cfg: RunConfig):
        return SimulateResponse(**_run(pipeline.simulate, cfg))

    @app.post("/sweep", response_model=SimulateResponse)
    def sweep(cfg: RunConfig):
        return SimulateResponse(**_run(pipeline.sweep, cfg))

    @app.post("/report", response_model=ReportResponse)
    def report(req: ReportRequest):
        try:
            merged = pipeline.aggregate_reports(req.paths)
        except (ValueError, FileNotFoundError) as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        return ReportResponse(rows=merged["rows"], table=pipeline.render_table(merged["rows"]))

    return app


app = create_app()
