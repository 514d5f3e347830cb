"""Pydantic request/response models for the estimation service."""
from __future__ import annotations

from typing import List, Literal, Optional

from pydantic import BaseModel, Field, model_validator


class SystemSpec(BaseModel):
    """Either a builtin benchmark by name or an inline system document."""

    builtin: Optional[Literal["lqr", "mpc"]] = None
    alpha: Optional[float] = Field(default=None, description="MPC step size; default 1/(2 lmax(H))")
    r_iters: int = Field(default=25, ge=1)
    document: Optional[dict] = Field(default=None, description="inline SystemDef JSON document")

    @model_validator(mode="after")
    def _one_of(self):
        if (self.builtin is None) == (self.document is None):
            raise ValueError("specify exactly one of builtin or document")
        return self


class BoxSpec(BaseModel):
    lower: List[float]
    upper: List[float]


class CertRequest(BaseModel):
    system: SystemSpec
    p: int = Field(ge=1)
    iota: float = Field(default=1e-6, gt=0)
    cap: int = Field(default=64, ge=1)


class CertResponse(BaseModel):
    p_tilde: int
    r_iota: float
    iota: float
    p: int
    c_p: float
    system_label: str
    alpha_used: Optional[float] = None
    unbounded: bool = False


class EstimateRequest(BaseModel):
    system: SystemSpec
    cert: Optional[CertResponse] = None
    p: Optional[int] = None
    iota: float = Field(default=1e-6, gt=0)
    box: Optional[BoxSpec] = None
    N1: int = Field(ge=1)
    N2: int = Field(ge=1)
    q: int = Field(ge=1)
    seed: int = 0
    mode: Literal["dd-lp", "full-psd"] = "dd-lp"
    delta1: float = Field(default=1e-6, gt=0, lt=1)
    delta2: float = Field(default=1e-6, gt=0, lt=1)

    @model_validator(mode="after")
    def _cert_or_p(self):
        if self.cert is None and self.p is None:
            raise ValueError("give either a certificate or a horizon p")
        return self


class EstimateResponse(BaseModel):
    estimate: dict
    summary: str


class AuditRequest(BaseModel):
    system: SystemSpec
    estimate: dict
    box: Optional[BoxSpec] = None
    M: int = Field(ge=1)
    seed: int = 0
    runs: int = Field(default=1, ge=1)
    workers: int = Field(default=1, ge=1)


class AuditResponse(BaseModel):
    report: dict
    table: str


class SweepRequest(BaseModel):
    system: SystemSpec
    p: int = Field(ge=1)
    iota: float = Field(default=1e-6, gt=0)
    box: Optional[BoxSpec] = None
    N1_list: List[int]
    q: int = Field(ge=1)
    M: int = Field(ge=1)
    runs: int = Field(ge=1)
    seed: int = 0
    mode: Literal["dd-lp", "full-psd"] = "dd-lp"
    workers: int = Field(default=1, ge=1)


class SweepResponse(BaseModel):
    rows: List[dict]
    table: str


class ComplexityRequest(BaseModel):
    delta: float = Field(default=1e-6, gt=0, lt=1)
    epsilon: Optional[float] = Field(default=None, gt=0, lt=1)
    N: Optional[int] = Field(default=None, ge=1)
    n: int = Field(default=2, ge=1, description="state dimension for the shape-stage quote")
    q: int = Field(default=2, ge=1)

    @model_validator(mode="after")
    def _one_of(self):
        if (self.epsilon is None) == (self.N is None):
            raise ValueError("specify exactly one of epsilon or N")
        return self


class ComplexityResponse(BaseModel):
    shape_stage: dict
    level_stage: dict


class GridRequest(BaseModel):
    system: SystemSpec
    estimate: Optional[dict] = None
    p: Optional[int] = None
    iota: float = Field(default=1e-6, gt=0)
    box: Optional[BoxSpec] = None
    resolution: int = Field(default=400, ge=2)


class MembershipRequest(BaseModel):
    system: SystemSpec
    cert: Optional[CertResponse] = None
    p: Optional[int] = None
    iota: float = Field(default=1e-6, gt=0)
    estimate: Optional[dict] = None
    points: List[List[float]]


class MembershipResponse(BaseModel):
    inside_true_region: List[bool]
    V_p: List[Optional[float]]
    inside_estimate: Optional[List[bool]] = None


class ErrorBody(BaseModel):
    stage: str
    message: str
