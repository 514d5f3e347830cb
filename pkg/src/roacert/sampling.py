"""Labeled sample pools and scenario sample-complexity arithmetic.

Pools are drawn by rejection from a uniform law on an axis-aligned box:
candidates are produced in fixed-size chunks keyed by (seed, stream, chunk
index), so the output is independent of how classification work is
scheduled.  Stable points carry their V_p value; the two unstable pools are
split from one shared stream, which keeps them identically distributed.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .converse import ConverseCertificate, classify_batch
from .dynamics import SystemDef

__all__ = [
    "DomainBox",
    "SamplePools",
    "ComplexityQuote",
    "DomainMismatchError",
    "required_samples",
    "achieved_epsilon",
    "draw_pools",
    "point_stream",
    "STREAM_POOLS",
    "STREAM_AUDIT",
    "STREAM_RUNS",
]

E_FACTOR = math.e / (math.e - 1.0)

# seed-stream tags; pools and audits must never share one (no test-on-train)
STREAM_POOLS = 1
STREAM_AUDIT = 2
STREAM_RUNS = 3

CHUNK = 4096


class DomainMismatchError(RuntimeError):
    """Rejection sampling starved; the box does not fit the region."""


@dataclass(frozen=True)
class DomainBox:
    """Axis-aligned compact sampling domain containing the origin."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float).ravel()
        hi = np.asarray(self.upper, dtype=float).ravel()
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        if lo.shape != hi.shape:
            raise ValueError("lower/upper must have equal length")
        if not np.all(lo < hi):
            raise ValueError("lower must be strictly below upper")
        if not (np.all(lo < 0) and np.all(hi > 0)):
            raise ValueError("origin must be strictly inside the box")

    @property
    def dim(self) -> int:
        return self.lower.size

    def contains_ball(self, radius: float) -> bool:
        return bool(np.all(self.lower <= -radius) and np.all(self.upper >= radius))

    @classmethod
    def symmetric(cls, half_width: float, dim: int) -> "DomainBox":
        return cls(-half_width * np.ones(dim), half_width * np.ones(dim))


@dataclass
class ComplexityQuote:
    epsilon: float
    delta: float
    n_theta: int
    N_required: int

    def __post_init__(self):
        want = math.ceil(E_FACTOR * (math.log(1.0 / self.delta) + self.n_theta) / self.epsilon)
        if self.N_required != want:
            raise ValueError("N_required inconsistent with the scenario bound")


def required_samples(epsilon: float, delta: float, n_theta: int) -> ComplexityQuote:
    """Minimal N with eps * N >= e/(e-1) (ln(1/delta) + n_theta)."""
    if not 0 < epsilon < 1:
        raise ValueError("epsilon must be in (0, 1)")
    if not 0 < delta < 1:
        raise ValueError("delta must be in (0, 1)")
    if n_theta < 0:
        raise ValueError("n_theta must be nonnegative")
    N = math.ceil(E_FACTOR * (math.log(1.0 / delta) + n_theta) / epsilon)
    return ComplexityQuote(epsilon=epsilon, delta=delta, n_theta=n_theta, N_required=N)


def achieved_epsilon(N: int, delta: float, n_theta: int) -> float:
    """Accuracy level the scenario bound grants for N samples."""
    if N < 1:
        raise ValueError("N must be >= 1")
    if not 0 < delta < 1:
        raise ValueError("delta must be in (0, 1)")
    if n_theta < 0:
        raise ValueError("n_theta must be nonnegative")
    return E_FACTOR * (math.log(1.0 / delta) + n_theta) / N


def point_stream(seed: int, stream: int, chunk_index: int, box: DomainBox, size: int) -> np.ndarray:
    """Uniform chunk keyed by (seed, stream, chunk); order-independent."""
    ss = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=(stream, chunk_index))
    rng = np.random.Generator(np.random.PCG64(ss))
    return rng.uniform(box.lower, box.upper, size=(size, box.dim))


@dataclass
class SamplePools:
    """Classified initial conditions: breve (stable), hat and bar (unstable)."""

    stable: np.ndarray          # (N1, d)
    stable_values: np.ndarray   # (N1,) recorded V_p
    unstable_fit: np.ndarray    # (N1, d)
    unstable_level: np.ndarray  # (N2, d)
    seed: int
    counts: tuple
    rejection_stats: dict = field(default_factory=dict)
    stream_label: str = "pools"

    def to_json(self) -> str:
        return json.dumps(
            {
                "seed": self.seed,
                "counts": list(self.counts),
                "stable": self.stable.tolist(),
                "stable_values": self.stable_values.tolist(),
                "unstable_fit": self.unstable_fit.tolist(),
                "unstable_level": self.unstable_level.tolist(),
                "rejection_stats": self.rejection_stats,
                "stream_label": self.stream_label,
            },
            indent=2,
            sort_keys=True,
        )

    def to_csv(self) -> str:
        d = self.stable.shape[1] if self.stable.size else self.unstable_fit.shape[1]
        header = ",".join(f"x{i+1}" for i in range(d)) + ",label,V_p"
        lines = [header]
        for x, v in zip(self.stable, self.stable_values):
            lines.append(",".join(repr(float(c)) for c in x) + f",stable,{v!r}")
        for x in self.unstable_fit:
            lines.append(",".join(repr(float(c)) for c in x) + ",unstable_fit,")
        for x in self.unstable_level:
            lines.append(",".join(repr(float(c)) for c in x) + ",unstable_level,")
        return "\n".join(lines) + "\n"


def draw_pools(
    sys: SystemDef,
    cert: ConverseCertificate,
    box: DomainBox,
    N1: int,
    N2: int,
    seed: int,
    stream: int = STREAM_POOLS,
    max_chunks: Optional[int] = None,
) -> SamplePools:
    """Rejection-sample N1 stable, N1 + N2 unstable initial conditions.

    Unstable accepts are routed in draw order: the first N1 to the fit pool,
    the next N2 to the level pool (same distribution for both, as the
    convergence analysis assumes).  Deterministic given (seed, stream).
    """
    if N1 < 0 or N2 < 0:
        raise ValueError("pool sizes must be nonnegative")
    if box.dim != sys.sample_dim:
        raise ValueError(f"box dimension {box.dim} != sample dimension {sys.sample_dim}")
    if not box.contains_ball(math.sqrt(cert.c_p)) and (N1 or N2):
        # R_p always sits inside the ball of radius sqrt(c_p); a smaller box
        # restricts the sampled law to box-intersected regions, which the
        # scenario guarantees permit, so warn rather than refuse.
        import warnings

        warnings.warn(
            f"box does not contain the ball of radius sqrt(c_p) = "
            f"{math.sqrt(cert.c_p):.4g}; sampling is restricted to the box",
            stacklevel=2,
        )

    need_unstable = N1 + N2
    stable_pts, stable_vals, unstable_pts = [], [], []
    n_stable = n_unstable = 0
    draws = 0
    chunk_index = 0
    if max_chunks is None:
        max_chunks = max(64, 50 * (N1 + need_unstable) // CHUNK + 64)
    while n_stable < N1 or n_unstable < need_unstable:
        if chunk_index >= max_chunks:
            raise DomainMismatchError(
                f"pool starvation after {draws} draws "
                f"(stable {n_stable}/{N1}, unstable {n_unstable}/{need_unstable}); "
                "rescale the sampling box"
            )
        pts = point_stream(seed, stream, chunk_index, box, CHUNK)
        chunk_index += 1
        draws += CHUNK
        inside, V = classify_batch(sys, cert, sys.embed(pts))
        for k in range(CHUNK):
            if inside[k]:
                if n_stable < N1:
                    stable_pts.append(pts[k])
                    stable_vals.append(float(V[k]))
                    n_stable += 1
            elif n_unstable < need_unstable:
                unstable_pts.append(pts[k])
                n_unstable += 1
            if n_stable >= N1 and n_unstable >= need_unstable:
                break
        # starvation guard: vanishing acceptance for a still-needed pool
        if draws >= 20_000:
            if n_stable < N1 and n_stable / draws < 1e-4:
                raise DomainMismatchError(
                    f"stable-pool acceptance {n_stable}/{draws} below 1e-4; "
                    "rescale the sampling box"
                )
            if n_unstable < need_unstable and n_unstable / draws < 1e-4:
                raise DomainMismatchError(
                    f"unstable-pool acceptance {n_unstable}/{draws} below 1e-4; "
                    "rescale the sampling box"
                )

    d = box.dim
    return SamplePools(
        stable=np.array(stable_pts, dtype=float).reshape(N1, d),
        stable_values=np.array(stable_vals, dtype=float),
        unstable_fit=np.array(unstable_pts[:N1], dtype=float).reshape(N1, d),
        unstable_level=np.array(unstable_pts[N1 : N1 + N2], dtype=float).reshape(N2, d),
        seed=int(seed),
        counts=(N1, N2),
        rejection_stats={"draws": draws, "chunks": chunk_index},
    )
