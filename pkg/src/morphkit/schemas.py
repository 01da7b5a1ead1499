"""Request and response models for the HTTP service."""
from __future__ import annotations

from typing import Dict, Optional

from pydantic import BaseModel, Field

from .lddmm import LddmmParams
from .pipeline import AnalysisRequest


class HealthResponse(BaseModel):
    status: str = "ok"
    version: str


class ErrorDetail(BaseModel):
    error: str = Field(..., description="Exception class name")
    message: str


class TableRequest(BaseModel):
    table_csv: str = Field(..., description="Subject table in the 18-column CSV schema")


class ValidateResponse(BaseModel):
    valid: bool
    n_subjects: int = 0
    group_counts: Dict[str, int] = Field(default_factory=dict)
    error: Optional[ErrorDetail] = None


class AnalysisOptions(BaseModel):
    analysis: str = "full"
    measure: str = "both"
    seed: int = Field(0, ge=0, lt=2**64)
    n_boot: int = Field(10_000, ge=1)
    n_perm: int = Field(10_000, ge=1)
    n_sim: int = Field(100_000, ge=1)
    max_power: int = Field(9, ge=1)

    def to_request(self) -> AnalysisRequest:
        return AnalysisRequest(**self.model_dump())


class StatsRequest(TableRequest):
    options: AnalysisOptions = Field(default_factory=AnalysisOptions)


class LddmmOptions(BaseModel):
    alpha: float = Field(0.01, gt=0)
    gamma: float = Field(1.0, gt=0)
    exponent: float = Field(2.0, gt=1.5)
    sigma: float = Field(1.0, gt=0)
    timesteps: int = Field(10, ge=2)
    step_size: float = Field(0.1, gt=0)
    max_iters: int = Field(200, ge=0)
    energy_tol: float = Field(1e-6, ge=0)

    def to_params(self) -> LddmmParams:
        return LddmmParams(**self.model_dump())


class PreprocessOptions(BaseModel):
    fill: bool = False
    smooth: bool = False
    smooth_window: int = 9
    smooth_sigma: float = 1.0
    resample: Optional[float] = None


class RegisterRequest(BaseModel):
    template_b64: str = Field(..., description="MVOL1 file, base64 encoded")
    target_b64: str
    template_label: str = "template"
    target_label: str = "target"
    params: LddmmOptions = Field(default_factory=LddmmOptions)
    preprocess: PreprocessOptions = Field(default_factory=PreprocessOptions)
    include_warped: bool = False
