"""Pydantic request/response models for the pipeline service."""

from __future__ import annotations

from typing import Any

from pydantic import BaseModel, Field


class HealthResponse(BaseModel):
    status: str = "ok"
    version: str


class ValidateRequest(BaseModel):
    config: dict[str, Any]
    base_dir: str | None = None


class ValidateResponse(BaseModel):
    valid: bool
    errors: list[str] = Field(default_factory=list)
    normalized: dict[str, Any] | None = None


class StageRunRequest(BaseModel):
    config: dict[str, Any]
    base_dir: str | None = None
    mock: bool = False
    resume: bool = True


class StageSummaryResponse(BaseModel):
    run_id: str
    stage: str
    status: str
    input: int
    retained: int
    discarded: int
    discard_reasons: dict[str, int] = Field(default_factory=dict)


class ErrorBody(BaseModel):
    error: str
    exit_code: int = 1


class ManifestResponse(BaseModel):
    manifest: dict[str, Any]


class ReportResponse(BaseModel):
    name: str
    report: Any
