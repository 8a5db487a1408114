"""HTTP facade over the core operations.

Thin by design: every endpoint delegates to the same functions the CLI
calls, so behavior cannot drift between the two front ends. Pure
computations (metrics, report grading, failure distributions) take their
inputs inline; only POST /runs touches the filesystem, and only through
paths named in the request (cassettes) or produced by the engine.

Status mapping: 400 invalid input, 422 unparseable request body (FastAPI
default), 502 infrastructure problems (unreachable target, backend
failure).
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from .domain import (
    ExecutionTrace,
    ManifestError,
    RunMode,
    RunRecord,
    TraceError,
    parse_target_manifest,
)
from .engine import Budgets, EngineError, run_exploitation
from .harness import AnnotationError, FailureAnnotation, failure_distribution
from .llm import BackendConfig, BackendError
from .metrics import MetricsError, build_report
from .poc import PocError, poc_from_dict, poc_to_dict, validate_poc
from .sandbox import create_env

RUN_MODES = ("greybox_multi", "greybox_single", "blackbox_multi")


class BackendModel(BaseModel):
    mode: str = "replay"
    cassette_path: Optional[str] = None


class RunRequest(BaseModel):
    manifest: dict
    mode: Optional[str] = None
    max_attempts: int = Field(default=5, ge=1)
    backend: BackendModel = BackendModel()


class RunResponse(BaseModel):
    record: dict
    poc: Optional[dict] = None


class MetricsRequest(BaseModel):
    records: list[dict]
    max_attempts: int = Field(default=5, ge=1)
    drop_infrastructure_failures: bool = False


class MetricsResponse(BaseModel):
    sr: float
    avg_tca: Optional[float]
    se: float
    max_attempts: int
    success_at_k: dict[str, float]
    n_targets: int
    n_exploited: int


class PocValidateRequest(BaseModel):
    poc: dict
    trace: Optional[dict] = None


class PocValidateResponse(BaseModel):
    has_oracle: bool
    has_steps: bool
    trace_consistent: bool
    ok: bool


class DistributionRequest(BaseModel):
    annotations: list[dict]


def create_app() -> FastAPI:
    app = FastAPI(title="vulnproof", version="0.1.0")

    @app.get("/health")
    def health() -> dict:
        return {"status": "ok"}

    @app.post("/runs", response_model=RunResponse)
    def runs(request: RunRequest) -> RunResponse:
        try:
            manifest = parse_target_manifest(request.manifest)
        except (ManifestError, ValueError) as exc:
            raise HTTPException(status_code=400, detail=f"bad manifest: {exc}") from exc
        mode = None
        if request.mode is not None:
            if request.mode not in RUN_MODES:
                raise HTTPException(
                    status_code=400,
                    detail=f"unknown mode {request.mode!r}; expected one of {RUN_MODES}",
                )
            mode = RunMode(request.mode)
        try:
            config = BackendConfig(
                mode=request.backend.mode,
                cassette_path=Path(request.backend.cassette_path)
                if request.backend.cassette_path
                else None,
            )
        except ValueError as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc
        budgets = Budgets(max_attempts=request.max_attempts)
        try:
            record, _traces, poc = run_exploitation(
                manifest, budgets, config, create_env, mode=mode
            )
        except (EngineError, BackendError) as exc:
            raise HTTPException(status_code=502, detail=str(exc)) from exc
        return RunResponse(
            record=record.to_dict(), poc=poc_to_dict(poc) if poc is not None else None
        )

    @app.post("/metrics", response_model=MetricsResponse)
    def metrics(request: MetricsRequest) -> MetricsResponse:
        try:
            records = [RunRecord.from_dict(doc) for doc in request.records]
            report = build_report(
                records,
                max_attempts=request.max_attempts,
                drop_infrastructure_failures=request.drop_infrastructure_failures,
            )
        except (MetricsError, KeyError, ValueError) as exc:
            raise HTTPException(status_code=400, detail=f"bad records: {exc}") from exc
        return MetricsResponse(**report.to_dict())

    @app.post("/poc/validate", response_model=PocValidateResponse)
    def poc_validate(request: PocValidateRequest) -> PocValidateResponse:
        try:
            report = poc_from_dict(request.poc)
        except (PocError, KeyError, TypeError, ValueError) as exc:
            raise HTTPException(status_code=400, detail=f"bad poc: {exc}") from exc
        trace = None
        if request.trace is not None:
            try:
                lines = "\n".join(json.dumps(e) for e in request.trace["events"])
                trace = ExecutionTrace.from_ndjson(str(request.trace["run_id"]), lines)
            except (TraceError, KeyError, TypeError, ValueError) as exc:
                raise HTTPException(status_code=400, detail=f"bad trace: {exc}") from exc
        check = validate_poc(report, trace)
        return PocValidateResponse(
            has_oracle=check.has_oracle,
            has_steps=check.has_steps,
            trace_consistent=check.trace_consistent,
            ok=check.all_true,
        )

    @app.post("/failure-distribution")
    def distribution(request: DistributionRequest) -> dict:
        try:
            annotations = [FailureAnnotation.from_dict(doc) for doc in request.annotations]
        except (AnnotationError, KeyError, TypeError, ValueError) as exc:
            raise HTTPException(status_code=400, detail=f"bad annotations: {exc}") from exc
        return failure_distribution(annotations)

    return app


app = create_app()
