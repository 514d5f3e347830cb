"""Finite-time membership certificates for the truncated energy sum.

V_p(x) = sum_{k<=p} ||x_k||^2 decides membership in R_p = {V_p < c_p} after
at most p steps, where c_p = (p+1) r^2 and r lower-bounds the invariance
radius of the ball trajectories cannot leave after p_tilde steps.  The radius
bound comes from monotone scalar recursions over precomputed norm tables.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from typing import Optional

import numpy as np

from .dynamics import CertificateError, DivergedError, SystemDef, StructuredNonlinearity, simulate, step_batch

__all__ = [
    "ConverseCertificate",
    "InvarianceBoundSpec",
    "find_p_tilde",
    "build_bound_spec",
    "F_p",
    "find_r_iota",
    "make_certificate",
    "membership",
    "MembershipResult",
    "classify_batch",
]

R_CAP_DEFAULT = 1e6


def spectral_norm(M: np.ndarray) -> float:
    return float(np.linalg.norm(M, 2))


def find_p_tilde(A: np.ndarray, cap: int = 64) -> int:
    """Smallest p with ||A^k||_2 < 1 for every k in [p, 2p-1].

    The window extends to the whole tail by submultiplicativity: for k >= 2p,
    ||A^k|| <= ||A^p|| ||A^{k-p}|| and induction on k.
    """
    A = np.asarray(A, dtype=float)
    norms = [1.0]
    P = np.eye(A.shape[0])
    for _ in range(2 * cap):
        P = A @ P
        norms.append(spectral_norm(P))
    for p in range(1, cap + 1):
        if all(norms[k] < 1.0 for k in range(p, 2 * p)):
            return p
    raise CertificateError(f"no contraction window found up to p = {cap}")


@dataclass
class InvarianceBoundSpec:
    """Precomputed tables behind the monotone state-norm bound F_p.

    For plain channel sets (no within-step chain) the tables follow the
    per-channel recursion: ``norm_table[k] = ||A^k||``,
    ``nAB[k, i] = ||A^k B_i||``, ``nKA[k, i] = ||K_i A^k||`` and
    ``xKAB[k, j, i] = |K_j A^k B_i|``.  Chained channel sets additionally
    carry ``nK[i] = ||K_i||`` and group-wise chain norms
    ``chain_norms[i, g] = ||chain[i, group g]||_2``; their w-bounds are
    anchored to running state-norm bounds instead of cross tables.
    """

    p_tilde: int
    norm_table: np.ndarray
    nAB: np.ndarray
    nKA: np.ndarray
    xKAB: Optional[np.ndarray]
    envelopes: list
    chained: bool
    nK: Optional[np.ndarray] = None
    chain_norms: Optional[np.ndarray] = None
    groups: Optional[list] = None

    def __post_init__(self):
        if abs(self.norm_table[0] - 1.0) > 1e-12:
            raise ValueError("norm_table[0] must be 1")
        for tbl in (self.norm_table, self.nAB, self.nKA):
            if not np.all(np.isfinite(tbl)) or np.any(tbl < 0):
                raise ValueError("bound tables must be nonnegative and finite")


def build_bound_spec(sys: SystemDef, p_tilde: int) -> InvarianceBoundSpec:
    if not isinstance(sys.phi, StructuredNonlinearity):
        raise CertificateError(
            "opaque nonlinearity: certify with a user-supplied radius instead"
        )
    nl = sys.phi
    m = nl.m
    kmax = 2 * p_tilde - 1
    Apow = [np.eye(sys.n)]
    for _ in range(kmax):
        Apow.append(sys.A @ Apow[-1])
    norm_table = np.array([spectral_norm(P) for P in Apow])
    nAB = np.array([[np.linalg.norm(P @ t.B) for t in nl.terms] for P in Apow])
    nKA = np.array([[np.linalg.norm(t.K @ P) for t in nl.terms] for P in Apow])
    envelopes = [t.envelope for t in nl.terms]
    if nl.chain is None:
        xKAB = np.array(
            [[[abs(tj.K @ P @ ti.B) for ti in nl.terms] for tj in nl.terms] for P in Apow]
        )
        return InvarianceBoundSpec(
            p_tilde=p_tilde,
            norm_table=norm_table,
            nAB=nAB,
            nKA=nKA,
            xKAB=xKAB,
            envelopes=envelopes,
            chained=False,
        )
    nK = np.array([np.linalg.norm(t.K) for t in nl.terms])
    ngroups = len(nl.groups)
    chain_norms = np.zeros((m, ngroups))
    for i in range(m):
        for g, idx in enumerate(nl.groups):
            chain_norms[i, g] = np.linalg.norm(nl.chain[i, idx])
    return InvarianceBoundSpec(
        p_tilde=p_tilde,
        norm_table=norm_table,
        nAB=nAB,
        nKA=nKA,
        xKAB=None,
        envelopes=envelopes,
        chained=True,
        nK=nK,
        chain_norms=chain_norms,
        groups=nl.groups,
    )


def _env_vec(spec: InvarianceBoundSpec, w: np.ndarray) -> np.ndarray:
    return np.array([spec.envelopes[i](w[i]) for i in range(len(w))])


def F_p(spec: InvarianceBoundSpec, p: int, r: float) -> float:
    """Monotone upper bound on ||x_p|| over all ||x_0|| <= r.

    Plain sets propagate per-channel output bounds forward with cross tables
    (|w_0,i| = ||K_i|| r at the root); chained sets anchor each step's channel
    inputs to the running state-norm bound and push within-step residuals
    through group-wise Cauchy-Schwarz.
    """
    if p > 2 * spec.p_tilde - 1:
        raise ValueError("p outside the tabulated window")
    if r < 0:
        raise ValueError("r must be nonnegative")
    m = spec.nKA.shape[1]
    if not spec.chained:
        W = np.zeros((p, m))
        for pp in range(p):
            w = spec.nKA[pp] * r
            for q in range(pp):
                w = w + spec.xKAB[pp - q - 1] @ _env_vec(spec, W[q])
            W[pp] = w
        out = spec.norm_table[p] * r
        for pp in range(p):
            out += spec.nAB[p - pp - 1] @ _env_vec(spec, W[pp])
        return float(out)
    rho = r
    W = np.zeros((p, m))
    phis = np.zeros((p, m))
    for pp in range(p):
        w = spec.nK * rho
        group_res = np.zeros(len(spec.groups))
        for g, idx in enumerate(spec.groups):
            for i in idx:
                w[i] = w[i] + spec.chain_norms[i, :g] @ group_res[:g]
            group_res[g] = np.linalg.norm([spec.envelopes[i](w[i]) for i in idx])
        W[pp] = w
        phis[pp] = _env_vec(spec, w)
        rho = spec.norm_table[pp + 1] * r
        for q in range(pp + 1):
            rho += spec.nAB[pp - q] @ phis[q]
    return float(rho)


def find_r_iota(
    spec: InvarianceBoundSpec,
    p_tilde: int,
    iota: float = 1e-6,
    r_cap: float = R_CAP_DEFAULT,
    tol: float = 1e-9,
):
    """Largest r with F_p(r) <= r - iota across the window {p_tilde..2p_tilde-1}.

    Doubles r upward to find a feasible point, keeps doubling to bracket the
    first upward crossing, then bisects.  Returns (r, unbounded); linear-only
    systems whose slack never crosses report the cap with unbounded = True.
    """
    if iota <= 0:
        raise ValueError("iota must be positive")
    window = range(p_tilde, 2 * p_tilde)

    def g(r: float) -> float:
        return max(F_p(spec, p, r) - r + iota for p in window)

    r = iota
    while r < r_cap and g(r) > 0:
        r *= 2.0
    if r >= r_cap:
        raise CertificateError(
            "no feasible radius found: contraction hypothesis violated"
        )
    lo = r
    hi = r
    while hi < r_cap and g(hi) <= 0:
        hi *= 2.0
    if hi >= r_cap:
        if g(r_cap) <= 0:
            return float(r_cap), True
        hi = r_cap
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if g(mid) <= 0:
            lo = mid
        else:
            hi = mid
    return float(lo), False


@dataclass
class ConverseCertificate:
    """Everything needed to decide x in R_p by finite simulation."""

    p_tilde: int
    r_iota: float
    iota: float
    p: int
    c_p: float
    system_label: str = ""
    alpha_used: Optional[float] = None
    unbounded: bool = False

    def __post_init__(self):
        if self.p < self.p_tilde:
            raise ValueError("p must be >= p_tilde")
        expected = (self.p + 1) * self.r_iota**2
        if abs(self.c_p - expected) > 1e-12 * max(1.0, abs(expected)):
            raise ValueError("c_p must equal (p+1) * r_iota^2")

    def to_json(self) -> str:
        d = asdict(self)
        if d["alpha_used"] is None:
            d.pop("alpha_used")
        return json.dumps(d, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ConverseCertificate":
        return cls(**json.loads(text))


def make_certificate(
    sys: SystemDef,
    p: int,
    iota: float = 1e-6,
    cap: int = 64,
    r_cap: float = R_CAP_DEFAULT,
) -> ConverseCertificate:
    p_tilde = find_p_tilde(sys.A, cap=cap)
    if p < p_tilde:
        raise CertificateError(f"p = {p} is below p_tilde = {p_tilde}")
    spec = build_bound_spec(sys, p_tilde)
    r_iota, unbounded = find_r_iota(spec, p_tilde, iota=iota, r_cap=r_cap)
    alpha = None
    if sys.builtin is not None:
        alpha = sys.builtin.get("params", {}).get("alpha")
    return ConverseCertificate(
        p_tilde=p_tilde,
        r_iota=r_iota,
        iota=iota,
        p=p,
        c_p=(p + 1) * r_iota**2,
        system_label=sys.label,
        alpha_used=alpha,
        unbounded=unbounded,
    )


@dataclass
class MembershipResult:
    inside: bool
    V_p: Optional[float] = None


def membership(sys: SystemDef, cert: ConverseCertificate, x0: np.ndarray) -> MembershipResult:
    """Decide x0 in R_p: the p-step energy sum stays strictly below c_p.

    Divergent simulations are classified outside (the finite level was
    necessarily exceeded on the way).
    """
    try:
        traj = simulate(sys, x0, cert.p, stop_level=cert.c_p)
    except DivergedError:
        return MembershipResult(inside=False)
    if traj.exceeded:
        return MembershipResult(inside=False)
    return MembershipResult(inside=True, V_p=float(traj.partial_sums[-1]))


def classify_batch(sys: SystemDef, cert: ConverseCertificate, X: np.ndarray):
    """Vectorized membership for rows of X: (inside mask, V_p where inside).

    Rows whose running sum reaches c_p are frozen early; non-finite rows are
    classified outside.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    N = X.shape[0]
    sums = np.einsum("ij,ij->i", X, X)
    active = sums < cert.c_p
    cur = X[active].copy()
    idx = np.nonzero(active)[0]
    for _ in range(cert.p):
        if idx.size == 0:
            break
        cur = step_batch(sys, cur)
        finite = np.all(np.isfinite(cur), axis=1)
        if not finite.all():
            active[idx[~finite]] = False
            cur = cur[finite]
            idx = idx[finite]
            if idx.size == 0:
                break
        sums[idx] += np.einsum("ij,ij->i", cur, cur)
        alive = sums[idx] < cert.c_p
        active[idx[~alive]] = False
        cur = cur[alive]
        idx = idx[alive]
    V = np.where(active, sums, np.nan)
    return active, V
