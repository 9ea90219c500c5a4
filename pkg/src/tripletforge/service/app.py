"""HTTP service wrapping the pipeline engine.

Stage execution runs synchronously inside the request: pipeline clients
are batch tools that wait for the stage summary (stages are idempotent and
resumable, so a dropped connection costs nothing — re-POST the stage).
Engine failures map onto stable ``exit_code`` values that thin clients
propagate as process exit codes.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

from fastapi import FastAPI
from fastapi.responses import JSONResponse

from .. import __version__
from ..config import validate_config_data
from ..engine import Engine, StageFailure, STAGES
from ..records import InvariantViolation
from ..store import RunStore, StoreError
from .schemas import (
    ErrorBody,
    HealthResponse,
    ManifestResponse,
    ReportResponse,
    StageRunRequest,
    StageSummaryResponse,
    ValidateRequest,
    ValidateResponse,
)

_FAILURE_HTTP_STATUS = {2: 400, 3: 409, 4: 502, 5: 500}


def _failure(message: str, exit_code: int) -> JSONResponse:
    return JSONResponse(
        status_code=_FAILURE_HTTP_STATUS.get(exit_code, 500),
        content=ErrorBody(error=message, exit_code=exit_code).model_dump(),
    )


def create_app(runs_root: str | None = None) -> FastAPI:
    """Build the service; ``runs_root`` anchors run lookups for GET endpoints."""
    app = FastAPI(title="tripletforge", version=__version__)
    default_root = runs_root or os.environ.get("TRIPLETFORGE_RUNS_ROOT", "runs")

    @app.get("/health", response_model=HealthResponse)
    def health() -> HealthResponse:
        return HealthResponse(version=__version__)

    @app.post("/config/validate", response_model=ValidateResponse)
    def validate(request: ValidateRequest) -> ValidateResponse:
        base_dir = Path(request.base_dir) if request.base_dir else None
        config, errors = validate_config_data(request.config, base_dir=base_dir)
        if config is None:
            return ValidateResponse(valid=False, errors=errors)
        return ValidateResponse(valid=True, normalized=config.snapshot())

    @app.post("/runs/{run_id}/stages/{stage}", response_model=StageSummaryResponse)
    def run_stage(run_id: str, stage: str, request: StageRunRequest):
        if stage not in STAGES:
            return _failure(f"unknown stage {stage!r}", 2)
        base_dir = Path(request.base_dir) if request.base_dir else None
        config, errors = validate_config_data(request.config, base_dir=base_dir)
        if config is None:
            return _failure("; ".join(errors), 2)
        if config.run_id != run_id:
            return _failure(
                f"path run_id {run_id!r} does not match config run_id {config.run_id!r}", 2
            )
        try:
            engine = Engine(config, mock_only=request.mock)
            summary = engine.run_stage(stage, resume=request.resume)
        except StageFailure as exc:
            return _failure(str(exc), exc.exit_code)
        except (StoreError, InvariantViolation) as exc:
            return _failure(str(exc), 5)
        return StageSummaryResponse(**summary.to_dict())

    @app.get("/runs/{run_id}/manifest", response_model=ManifestResponse)
    def manifest(run_id: str, runs_root: str | None = None):
        store = RunStore(runs_root or default_root, run_id)
        if not store.manifest_path.exists():
            return _failure(f"run {run_id!r} has no manifest", 3)
        return ManifestResponse(manifest=store.read_manifest().to_dict())

    @app.get("/runs/{run_id}/reports/{name}", response_model=ReportResponse)
    def report(run_id: str, name: str, runs_root: str | None = None):
        store = RunStore(runs_root or default_root, run_id)
        safe = Path(name).name
        path = store.reports_dir() / safe
        if not path.exists():
            return _failure(f"report {safe!r} not found for run {run_id!r}", 3)
        if safe.endswith(".json"):
            payload = json.loads(path.read_text(encoding="utf-8"))
        else:
            payload = path.read_text(encoding="utf-8")
        return ReportResponse(name=safe, report=payload)

    return app


app = create_app()
