"""FastAPI service wrapping the estimation pipeline.

Endpoints mirror the pipeline stages; computation failures surface as
HTTP 400 with a stage-tagged body, so thin clients can map them to exit
codes without parsing tracebacks.
"""
from __future__ import annotations

import json
from contextlib import contextmanager

import numpy as np
from fastapi import FastAPI, HTTPException
from fastapi.responses import PlainTextResponse

from .. import audit as audit_mod
from ..converse import ConverseCertificate, make_certificate, membership
from ..dynamics import CertificateError, SystemDef, make_saturated_lqr, make_suboptimal_mpc
from ..sampling import DomainBox, DomainMismatchError, achieved_epsilon, required_samples
from ..basis import MonomialBasis
from ..scenario import GramEstimate, SolverError, estimate, membership_estimate_batch
from .schemas import (
    AuditRequest,
    AuditResponse,
    CertRequest,
    CertResponse,
    ComplexityRequest,
    ComplexityResponse,
    EstimateRequest,
    EstimateResponse,
    GridRequest,
    MembershipRequest,
    MembershipResponse,
    SweepRequest,
    SweepResponse,
    SystemSpec,
    BoxSpec,
)

app = FastAPI(title="roacert", version="0.1.0")

DEFAULT_BOXES = {"saturated-lqr": 6.0, "suboptimal-mpc": 11.0}


def build_system(spec: SystemSpec) -> SystemDef:
    if spec.builtin == "lqr":
        return make_saturated_lqr()
    if spec.builtin == "mpc":
        return make_suboptimal_mpc(alpha=spec.alpha, r_iters=spec.r_iters)
    return SystemDef.from_json(json.dumps(spec.document))


def resolve_box(box: BoxSpec | None, sys: SystemDef) -> DomainBox:
    if box is not None:
        return DomainBox(np.asarray(box.lower), np.asarray(box.upper))
    half = DEFAULT_BOXES.get(sys.label)
    if half is None:
        raise HTTPException(
            status_code=400,
            detail={"stage": "config", "message": "no default box for this system; pass one"},
        )
    return DomainBox.symmetric(half, sys.sample_dim)


@contextmanager
def stage(name: str):
    try:
        yield
    except (CertificateError, DomainMismatchError, SolverError, ValueError) as exc:
        raise HTTPException(status_code=400, detail={"stage": name, "message": str(exc)})


def _cert_from_response(c: CertResponse) -> ConverseCertificate:
    return ConverseCertificate(**c.model_dump())


def _resolve_cert(req, sys: SystemDef) -> ConverseCertificate:
    if getattr(req, "cert", None) is not None:
        return _cert_from_response(req.cert)
    with stage("certificate"):
        return make_certificate(sys, req.p, iota=req.iota)


@app.get("/health")
def health():
    return {"status": "ok", "version": app.version}


@app.post("/cert", response_model=CertResponse)
def cert_endpoint(req: CertRequest):
    with stage("system"):
        sys = build_system(req.system)
    with stage("certificate"):
        c = make_certificate(sys, req.p, iota=req.iota, cap=req.cap)
    return CertResponse(**json.loads(c.to_json()))


@app.post("/estimate", response_model=EstimateResponse)
def estimate_endpoint(req: EstimateRequest):
    with stage("system"):
        sys = build_system(req.system)
    cert = _resolve_cert(req, sys)
    box = resolve_box(req.box, sys)
    with stage("estimate"):
        est = estimate(
            sys, cert, box, req.N1, req.N2, req.q, req.seed,
            mode=req.mode, delta1=req.delta1, delta2=req.delta2,
        )
    q = est.quotes
    summary = (
        f"eta_N={est.eta_N:.6g} c_N={est.c_N:.6g} "
        f"epsilon1={q['epsilon1']:.6g} epsilon2={q['epsilon2']:.6g}"
    )
    if not est.uniqueness_guaranteed:
        summary += " [uniqueness not guaranteed: N1 < n_2q]"
    return EstimateResponse(estimate=json.loads(est.to_json()), summary=summary)


@app.post("/audit", response_model=AuditResponse)
def audit_endpoint(req: AuditRequest):
    with stage("system"):
        sys = build_system(req.system)
    with stage("estimate"):
        est = GramEstimate.from_json(json.dumps(req.estimate))
    if est.system_label != sys.label:
        raise HTTPException(
            status_code=400,
            detail={"stage": "audit", "message": f"estimate is for system {est.system_label!r}, not {sys.label!r}"},
        )
    box = resolve_box(req.box, sys)
    with stage("audit"):
        if req.runs == 1:
            rep = audit_mod.audit(sys, est.cert, est, box, req.M, req.seed, workers=req.workers)
        else:
            rep = audit_mod.repeat_audit(
                sys, est.cert, box, est.N1, est.N2, est.poly.basis.q,
                req.M, req.runs, req.seed, mode=est.mode, workers=req.workers,
            )
    table = (
        f"{'fn mean':>9} {'fn max':>9} {'fp mean':>9} {'fp max':>9}\n"
        f"{(rep.mean or {}).get('fn_rate', rep.fn_rate):>9.4f} "
        f"{(rep.max or {}).get('fn_rate', rep.fn_rate):>9.4f} "
        f"{(rep.mean or {}).get('fp_rate', rep.fp_rate):>9.4f} "
        f"{(rep.max or {}).get('fp_rate', rep.fp_rate):>9.4f}\n"
    )
    return AuditResponse(report=json.loads(rep.to_json()), table=table)


@app.post("/sweep", response_model=SweepResponse)
def sweep_endpoint(req: SweepRequest):
    with stage("system"):
        sys = build_system(req.system)
    with stage("certificate"):
        cert = make_certificate(sys, req.p, iota=req.iota)
    box = resolve_box(req.box, sys)
    with stage("sweep"):
        rows = audit_mod.sweep_sample_sizes(
            sys, cert, box, req.N1_list, req.q, req.M, req.runs, req.seed,
            mode=req.mode, workers=req.workers,
        )
    out_rows = [
        {"N1": r["N1"], "N2": r["N2"], "report": json.loads(r["report"].to_json())}
        for r in rows
    ]
    return SweepResponse(rows=out_rows, table=audit_mod.format_table(rows))


@app.post("/complexity", response_model=ComplexityResponse)
def complexity_endpoint(req: ComplexityRequest):
    n_q = MonomialBasis(req.n, req.q).n_q
    n_theta_shape = n_q**2
    with stage("complexity"):
        if req.epsilon is not None:
            shape = required_samples(req.epsilon, req.delta, n_theta_shape)
            level = required_samples(req.epsilon, req.delta, 0)
            return ComplexityResponse(
                shape_stage={"epsilon": req.epsilon, "n_theta": n_theta_shape, "N_required": shape.N_required},
                level_stage={"epsilon": req.epsilon, "n_theta": 0, "N_required": level.N_required},
            )
        eps1 = achieved_epsilon(req.N, req.delta, n_theta_shape)
        eps2 = achieved_epsilon(req.N, req.delta, 0)
        return ComplexityResponse(
            shape_stage={"N": req.N, "n_theta": n_theta_shape, "epsilon": eps1},
            level_stage={"N": req.N, "n_theta": 0, "epsilon": eps2},
        )


@app.post("/grid", response_class=PlainTextResponse)
def grid_endpoint(req: GridRequest):
    with stage("system"):
        sys = build_system(req.system)
    est = None
    if req.estimate is not None:
        with stage("estimate"):
            est = GramEstimate.from_json(json.dumps(req.estimate))
        cert = est.cert
    else:
        if req.p is None:
            raise HTTPException(
                status_code=400,
                detail={"stage": "grid", "message": "need an estimate or a horizon p"},
            )
        with stage("certificate"):
            cert = make_certificate(sys, req.p, iota=req.iota)
    box = resolve_box(req.box, sys)
    with stage("grid"):
        return audit_mod.grid_export(sys, cert, box, req.resolution, est=est)


@app.post("/membership", response_model=MembershipResponse)
def membership_endpoint(req: MembershipRequest):
    with stage("system"):
        sys = build_system(req.system)
    est = None
    if req.estimate is not None:
        with stage("estimate"):
            est = GramEstimate.from_json(json.dumps(req.estimate))
        cert = est.cert
    else:
        cert = _resolve_cert(req, sys)
    pts = np.asarray(req.points, dtype=float)
    with stage("membership"):
        results = [membership(sys, cert, sys.embed(p[None, :])[0]) for p in pts]
    inside = [r.inside for r in results]
    values = [r.V_p for r in results]
    inside_est = None
    if est is not None:
        inside_est = [bool(b) for b in membership_estimate_batch(est, pts)]
    return MembershipResponse(inside_true_region=inside, V_p=values, inside_estimate=inside_est)
