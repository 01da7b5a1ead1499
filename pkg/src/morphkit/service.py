"""HTTP front end over the analysis and registration core.

Run with ``morphkit serve`` or ``uvicorn morphkit.service:app``.  Report
bodies are serialised by the same writer as the CLI, so a client that
re-serialises them gets byte-identical files.
"""
from __future__ import annotations

import base64
import binascii

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse, Response

from . import __version__
from .errors import MorphkitError
from .jobs import Preprocess, registration_report
from .longitudinal import parse_table
from .pipeline import run_analysis
from .report import dumps
from .schemas import (ErrorDetail, HealthResponse, RegisterRequest, StatsRequest, TableRequest,
                      ValidateResponse)
from .volume import encode_mvol

app = FastAPI(title="morphkit", version=__version__)


def _json(payload) -> Response:
    return Response(dumps(payload), media_type="application/json")


@app.exception_handler(MorphkitError)
@app.exception_handler(ValueError)
async def _input_error(request: Request, exc: Exception):
    return JSONResponse(status_code=422,
                        content={"detail": ErrorDetail(error=type(exc).__name__, message=str(exc)).model_dump()})


@app.get("/health", response_model=HealthResponse)
def health() -> HealthResponse:
    return HealthResponse(version=__version__)


@app.post("/validate", response_model=ValidateResponse)
def validate(body: TableRequest) -> ValidateResponse:
    try:
        table = parse_table(body.table_csv)
    except ValueError as exc:
        return ValidateResponse(valid=False, error=ErrorDetail(error=type(exc).__name__, message=str(exc)))
    return ValidateResponse(valid=True, n_subjects=len(table), group_counts=table.group_counts())


@app.post("/stats")
def stats(body: StatsRequest) -> Response:
    table = parse_table(body.table_csv)
    report, csvs = run_analysis(table, body.options.to_request(), body.table_csv)
    return _json({"report": report, "csv": csvs})


def _decode(b64: str, what: str) -> bytes:
    try:
        return base64.b64decode(b64, validate=True)
    except (binascii.Error, ValueError):
        raise ValueError(f"{what} is not valid base64") from None


def _register(body: RegisterRequest, distance_only: bool) -> Response:
    report, warped = registration_report(
        _decode(body.template_b64, "template_b64"), _decode(body.target_b64, "target_b64"),
        body.params.to_params(), Preprocess(**body.preprocess.model_dump()),
        body.template_label, body.target_label, distance_only)
    payload = {"report": report}
    if body.include_warped:
        payload["warped_b64"] = base64.b64encode(encode_mvol(warped)).decode()
    return _json(payload)


@app.post("/register")
def register_endpoint(body: RegisterRequest) -> Response:
    return _register(body, distance_only=False)


@app.post("/distance")
def distance_endpoint(body: RegisterRequest) -> Response:
    return _register(body, distance_only=True)
