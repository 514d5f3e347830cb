"""Monte-Carlo accuracy audits of set estimates against the decidable truth.

Truth labels always come from the finite-time membership test (never from
open-ended simulation); audit points use a seed stream disjoint from the
pool stream, so estimates are never scored on their own training draws.
"""
from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from concurrent.futures import ThreadPoolExecutor
from typing import Optional, Sequence

import numpy as np

from .converse import ConverseCertificate, classify_batch, membership
from .dynamics import SystemDef
from .sampling import (
    CHUNK,
    STREAM_AUDIT,
    STREAM_POOLS,
    STREAM_RUNS,
    DomainBox,
    point_stream,
)
from .scenario import GramEstimate, estimate, membership_estimate_batch
from .basis import eval_gram_batch

__all__ = ["AccuracyReport", "audit", "repeat_audit", "sweep_sample_sizes", "grid_export"]


@dataclass
class AccuracyReport:
    """False-positive/false-negative tallies over M uniform evaluation points.

    Rates are fractions of the full M-sample; ``fn_rate_relative`` divides by
    the number of truly-stable points instead (the two conventions in use).
    """

    M: int
    fp_rate: float
    fn_rate: float
    fn_rate_relative: float
    truth_positive: int
    seed: int
    stream_label: str = "audit"
    per_run: list = field(default_factory=list)
    mean: Optional[dict] = None
    max: Optional[dict] = None
    seeds: list = field(default_factory=list)

    def to_json(self) -> str:
        d = {
            "M": self.M,
            "fp_rate": self.fp_rate,
            "fn_rate": self.fn_rate,
            "fn_rate_relative": self.fn_rate_relative,
            "truth_positive": self.truth_positive,
            "seed": self.seed,
            "stream_label": self.stream_label,
            "per_run": self.per_run,
            "mean": self.mean,
            "max": self.max,
            "seeds": self.seeds,
        }
        return json.dumps(d, indent=2, sort_keys=True)


def _audit_points(box: DomainBox, M: int, seed: int):
    chunks = []
    done = 0
    ci = 0
    while done < M:
        take = min(CHUNK, M - done)
        chunks.append(point_stream(seed, STREAM_AUDIT, ci, box, CHUNK)[:take])
        done += take
        ci += 1
    return np.vstack(chunks)


def audit(
    sys: SystemDef,
    cert: ConverseCertificate,
    est: GramEstimate,
    box: DomainBox,
    M: int,
    seed: int,
    workers: int = 1,
    csv_sink: Optional[io.TextIOBase] = None,
) -> AccuracyReport:
    """Classify M fresh uniform points by truth and by the estimate."""
    if M < 1:
        raise ValueError("M must be >= 1")
    assert STREAM_AUDIT != STREAM_POOLS, "audit stream must differ from pool stream"
    pts = _audit_points(box, M, seed)
    X = sys.embed(pts)
    if workers > 1:
        splits = np.array_split(np.arange(M), workers)
        truth = np.empty(M, dtype=bool)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futs = {pool.submit(classify_batch, sys, cert, X[s]): s for s in splits if s.size}
            for fut, s in futs.items():
                truth[s] = fut.result()[0]
    else:
        truth, _ = classify_batch(sys, cert, X)
    pred = membership_estimate_batch(est, pts)
    fp = int(np.sum(pred & ~truth))
    fn = int(np.sum(~pred & truth))
    tpos = int(np.sum(truth))
    if csv_sink is not None:
        csv_sink.write(",".join(f"x{i+1}" for i in range(box.dim)) + ",truth,predicted\n")
        for k in range(M):
            csv_sink.write(
                ",".join(repr(float(c)) for c in pts[k])
                + f",{int(truth[k])},{int(pred[k])}\n"
            )
    return AccuracyReport(
        M=M,
        fp_rate=fp / M,
        fn_rate=fn / M,
        fn_rate_relative=fn / tpos if tpos else 0.0,
        truth_positive=tpos,
        seed=int(seed),
    )


def run_seed(master_seed: int, run_index: int) -> int:
    """Derived 64-bit seed for one repetition of the pipeline."""
    ss = np.random.SeedSequence(entropy=int(master_seed) & (2**64 - 1), spawn_key=(STREAM_RUNS, run_index))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def repeat_audit(
    sys: SystemDef,
    cert: ConverseCertificate,
    box: DomainBox,
    N1: int,
    N2: int,
    q: int,
    M: int,
    runs: int,
    seed: int,
    mode: str = "dd-lp",
    workers: int = 1,
) -> AccuracyReport:
    """Estimate + audit ``runs`` times with derived seeds; aggregate mean/max."""
    if runs < 1:
        raise ValueError("runs must be >= 1")

    def one(i: int) -> dict:
        s = run_seed(seed, i)
        est = estimate(sys, cert, box, N1, N2, q, s, mode=mode)
        rep = audit(sys, cert, est, box, M, s)
        return {
            "run": i,
            "seed": s,
            "fp_rate": rep.fp_rate,
            "fn_rate": rep.fn_rate,
            "fn_rate_relative": rep.fn_rate_relative,
            "eta_N": est.eta_N,
            "c_N": est.c_N,
        }

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_run = list(pool.map(one, range(runs)))
    else:
        per_run = [one(i) for i in range(runs)]
    per_run.sort(key=lambda r: r["run"])
    keys = ("fp_rate", "fn_rate", "fn_rate_relative")
    mean = {k: sum(r[k] for r in per_run) / runs for k in keys}
    mx = {k: max(r[k] for r in per_run) for k in keys}
    return AccuracyReport(
        M=M,
        fp_rate=mean["fp_rate"],
        fn_rate=mean["fn_rate"],
        fn_rate_relative=mean["fn_rate_relative"],
        truth_positive=0,
        seed=int(seed),
        per_run=per_run,
        mean=mean,
        max=mx,
        seeds=[r["seed"] for r in per_run],
    )


def sweep_sample_sizes(
    sys: SystemDef,
    cert: ConverseCertificate,
    box: DomainBox,
    N1_list: Sequence[int],
    q: int,
    M: int,
    runs: int,
    seed: int,
    mode: str = "dd-lp",
    workers: int = 1,
) -> list:
    """One aggregated audit row per sample size, N2 = 2 N1 (table layout)."""
    rows = []
    for N1 in N1_list:
        rep = repeat_audit(sys, cert, box, N1, 2 * N1, q, M, runs, seed, mode=mode, workers=workers)
        rows.append({"N1": N1, "N2": 2 * N1, "report": rep})
    return rows


def format_table(rows: list) -> str:
    """Aligned text table: mean/max false rates per sweep row."""
    out = [f"{'N1':>6} {'fn mean':>9} {'fn max':>9} {'fp mean':>9} {'fp max':>9}"]
    for row in rows:
        r = row["report"]
        out.append(
            f"{row['N1']:>6d} {r.mean['fn_rate']:>9.4f} {r.max['fn_rate']:>9.4f} "
            f"{r.mean['fp_rate']:>9.4f} {r.max['fp_rate']:>9.4f}"
        )
    return "\n".join(out) + "\n"


def grid_export(
    sys: SystemDef,
    cert: ConverseCertificate,
    box: DomainBox,
    resolution: int,
    est: Optional[GramEstimate] = None,
) -> str:
    """CSV lattice of (x1, x2, gram_value, truth_label) for external plotting.

    Non-plotted coordinates of combined states are fixed at zero.
    """
    if resolution < 2:
        raise ValueError("resolution must be >= 2 per axis")
    if box.dim != 2:
        raise ValueError("grid export plots the first two sampled coordinates")
    xs = np.linspace(box.lower[0], box.upper[0], resolution)
    ys = np.linspace(box.lower[1], box.upper[1], resolution)
    XX, YY = np.meshgrid(xs, ys, indexing="ij")
    pts = np.column_stack([XX.ravel(), YY.ravel()])
    truth, _ = classify_batch(sys, cert, sys.embed(pts))
    if est is not None:
        vals = eval_gram_batch(est.poly, pts)
    else:
        vals = np.full(len(pts), np.nan)
    lines = ["x1,x2,gram_value,truth_label"]
    for k in range(len(pts)):
        gv = "" if np.isnan(vals[k]) else repr(float(vals[k]))
        lines.append(f"{float(pts[k, 0])!r},{float(pts[k, 1])!r},{gv},{int(truth[k])}")
    return "\n".join(lines) + "\n"
