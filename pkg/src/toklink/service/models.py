"""Request and response models for the service endpoints."""

from __future__ import annotations

from pydantic import BaseModel, ConfigDict

from ..metrics import ReportRow


class HealthResponse(BaseModel):
    status: str
    version: str


class TrainCodecResponse(BaseModel):
    codebooks_path: str
    features_path: str
    tokens_path: str
    n_frames: int
    residual_energies: list[float]


class TrainPredictorResponse(BaseModel):
    model_config = ConfigDict(protected_namespaces=())

    model_path: str
    contexts: int
    corpus_frames: int
    vocab: int


class SimulateResponse(BaseModel):
    rows: list[ReportRow]
    files: dict[str, str]


class ReportRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    paths: list[str]


class ReportResponse(BaseModel):
    rows: list[ReportRow]
    table: str
