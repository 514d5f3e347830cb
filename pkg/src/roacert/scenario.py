"""The two sampled convex programs producing the set estimate.

Shape stage: fit a Gram-matrix polynomial to the recorded V_p values on the
stable pool, pushed above the level c_p on the unstable fit pool, minimizing
the worst residual eta.  Level stage: lower the set level to the smallest
polynomial value over the unstable level pool, which excludes every one of
those samples from the final estimate by construction.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import linprog

from .basis import GramPoly, MonomialBasis, eval_Z_batch, eval_gram_batch, pair_index_map
from .converse import ConverseCertificate
from .dynamics import SystemDef
from .sampling import DomainBox, SamplePools, achieved_epsilon, draw_pools

__all__ = [
    "ShapeProgram",
    "GramEstimate",
    "SolverError",
    "solve_shape",
    "solve_level",
    "estimate",
    "membership_estimate",
]

MODES = ("dd-lp", "full-psd")


class SolverError(RuntimeError):
    pass


@dataclass
class ShapeProgram:
    """Assembled constraint rows of the shape stage, in flattened form.

    Row blocks (3 N1 rows): eta + <z1, Theta> >= v, eta - <z1, Theta> >= -v
    for each stable sample, and eta + <z2, Theta> >= c_p for each unstable
    fit sample.  ``rows`` holds the Theta-side coefficients over the upper
    triangle; ``scales`` records the per-row normalization applied.
    """

    basis: MonomialBasis
    rows: np.ndarray
    rhs: np.ndarray
    eta_sign: np.ndarray
    scales: np.ndarray
    ut_pairs: list
    domain_scale: np.ndarray = None

    @property
    def n_rows(self) -> int:
        return self.rows.shape[0]


def _upper_triangle(n_q: int):
    return [(i, j) for i in range(n_q) for j in range(i, n_q)]


def _theta_rows(basis: MonomialBasis, X: np.ndarray) -> np.ndarray:
    """<Z_q^2(x), Theta> as coefficients over the upper triangle of Theta.

    Row values come from one Z_2q evaluation per sample via the pair index
    map, so they are flatten-consistent by construction.
    """
    big, idx = pair_index_map(basis)
    Z2 = eval_Z_batch(big, X)
    ut = _upper_triangle(basis.n_q)
    cols = np.array([idx[i, j] for (i, j) in ut])
    mult = np.array([1.0 if i == j else 2.0 for (i, j) in ut])
    return Z2[:, cols] * mult[None, :]


def assemble_shape(
    pools: SamplePools,
    basis: MonomialBasis,
    c_p: float,
    domain_scale: Optional[np.ndarray] = None,
) -> ShapeProgram:
    """Build the row system, working in box-normalized coordinates.

    Samples are divided axis-wise by ``domain_scale`` before monomial
    evaluation, which keeps every monomial value in [-1, 1] on the box; the
    solved matrix is mapped back by the diagonal congruence this induces
    (PSD is preserved, so the guarantee is unaffected).  Rows are then
    normalized by their max-abs entry.
    """
    n_ut = len(_upper_triangle(basis.n_q))
    if domain_scale is None:
        domain_scale = np.ones(basis.n)
    domain_scale = np.asarray(domain_scale, dtype=float).ravel()
    S = np.atleast_2d(pools.stable) if pools.stable.size else np.zeros((0, basis.n))
    U = np.atleast_2d(pools.unstable_fit) if pools.unstable_fit.size else np.zeros((0, basis.n))
    rows_s = _theta_rows(basis, S / domain_scale) if len(S) else np.zeros((0, n_ut))
    rows_u = _theta_rows(basis, U / domain_scale) if len(U) else np.zeros((0, n_ut))
    v = np.asarray(pools.stable_values, dtype=float).ravel()
    rows = np.vstack([rows_s, -rows_s, rows_u])
    rhs = np.concatenate([v, -v, np.full(len(U), c_p)])
    eta_sign = np.ones(rows.shape[0])
    scales = np.maximum(1.0, np.max(np.abs(rows), axis=1, initial=1.0))
    return ShapeProgram(
        basis=basis,
        rows=rows / scales[:, None],
        rhs=rhs / scales,
        eta_sign=eta_sign / scales,
        scales=scales,
        ut_pairs=_upper_triangle(basis.n_q),
        domain_scale=domain_scale,
    )


def _theta_from_ut(basis: MonomialBasis, ut_pairs, values: np.ndarray) -> np.ndarray:
    theta = np.zeros((basis.n_q, basis.n_q))
    for k, (i, j) in enumerate(ut_pairs):
        theta[i, j] = values[k]
        theta[j, i] = values[k]
    return theta


def _solve_shape_ddlp(prog: ShapeProgram):
    """LP over diagonally dominant Theta (a polyhedral inner cone of PSD)."""
    n_q = prog.basis.n_q
    ut = prog.ut_pairs
    n_ut = len(ut)
    off = [(i, j) for (i, j) in ut if i != j]
    n_off = len(off)
    nvar = 1 + n_ut + n_off  # eta, Theta upper triangle, |off-diagonal| bounds

    A_ub = []
    b_ub = []
    # sampled rows: eta_sign * eta + rows @ theta >= rhs
    blk = np.zeros((prog.n_rows, nvar))
    blk[:, 0] = -prog.eta_sign
    blk[:, 1 : 1 + n_ut] = -prog.rows
    A_ub.append(blk)
    b_ub.append(-prog.rhs)
    # |Theta_ij| <= t_ij
    for k, (i, j) in enumerate(off):
        ui = ut.index((i, j))
        row = np.zeros(nvar)
        row[1 + ui] = 1.0
        row[1 + n_ut + k] = -1.0
        A_ub.append(row[None, :])
        b_ub.append([0.0])
        row = np.zeros(nvar)
        row[1 + ui] = -1.0
        row[1 + n_ut + k] = -1.0
        A_ub.append(row[None, :])
        b_ub.append([0.0])
    # diagonal dominance: sum_j t_ij <= Theta_ii
    for i in range(n_q):
        row = np.zeros(nvar)
        row[1 + ut.index((i, i))] = -1.0
        for k, (a, b) in enumerate(off):
            if a == i or b == i:
                row[1 + n_ut + k] = 1.0
        A_ub.append(row[None, :])
        b_ub.append([0.0])

    c = np.zeros(nvar)
    c[0] = 1.0
    bounds = [(None, None)] * (1 + n_ut) + [(0.0, None)] * n_off
    res = linprog(
        c,
        A_ub=np.vstack(A_ub),
        b_ub=np.concatenate(b_ub),
        bounds=bounds,
        method="highs",
        options={
            "primal_feasibility_tolerance": 1e-10,
            "dual_feasibility_tolerance": 1e-9,
        },
    )
    if res.status != 0:
        raise SolverError(f"dd-lp shape solve failed: {res.message}")
    eta = float(res.x[0])
    theta = _theta_from_ut(prog.basis, ut, res.x[1 : 1 + n_ut])
    return eta, theta


def _solve_shape_psd(prog: ShapeProgram):
    """Semidefinite shape solve through cvxpy (optional capability)."""
    try:
        import cvxpy as cp
    except ImportError as exc:  # pragma: no cover
        raise SolverError("full-psd mode needs cvxpy installed") from exc
    n_q = prog.basis.n_q
    Theta = cp.Variable((n_q, n_q), symmetric=True)
    eta = cp.Variable()
    ut = prog.ut_pairs
    # rows act on the upper triangle with multiplicity 2 off-diagonal
    theta_ut = cp.hstack([Theta[i, j] for (i, j) in ut])
    cons = [Theta >> 0, prog.eta_sign * eta + prog.rows @ theta_ut >= prog.rhs]
    problem = cp.Problem(cp.Minimize(eta), cons)
    problem.solve(solver="CLARABEL", tol_feas=1e-10, tol_gap_abs=1e-10, tol_gap_rel=1e-10)
    if problem.status not in ("optimal", "optimal_inaccurate"):
        raise SolverError(f"full-psd shape solve failed: {problem.status}")
    return float(eta.value), 0.5 * (Theta.value + Theta.value.T)


def solve_shape(
    pools: SamplePools,
    basis: MonomialBasis,
    c_p: float,
    mode: str = "dd-lp",
    domain_scale: Optional[np.ndarray] = None,
):
    """Minimize the worst fit residual eta over the matrix cone.

    dd-lp restricts Theta to diagonally dominant matrices with nonnegative
    diagonal (inner approximation of the PSD cone, so eta upper-bounds the
    PSD optimum and every guarantee carries over); full-psd solves the
    semidefinite program.  The cone is imposed in box-normalized coordinates
    when a ``domain_scale`` is given.  The result is symmetrized and
    PSD-verified.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    prog = assemble_shape(pools, basis, c_p, domain_scale=domain_scale)
    if mode == "dd-lp":
        eta, theta_y = _solve_shape_ddlp(prog)
    else:
        eta, theta_y = _solve_shape_psd(prog)
    theta_y = 0.5 * (theta_y + theta_y.T)
    evals, evecs = np.linalg.eigh(theta_y)
    if evals[0] < -1e-6:
        raise SolverError(f"returned Theta is not PSD (min eigenvalue {evals[0]:.3e})")
    if evals[0] < 0.0:
        # solver-tolerance noise: project onto the PSD cone
        theta_y = (evecs * np.maximum(evals, 0.0)) @ evecs.T
        theta_y = 0.5 * (theta_y + theta_y.T)
    # map back from normalized coordinates: z(x/s) = D z(x) componentwise,
    # so Theta_x = D Theta_y D (a congruence; PSD is preserved)
    E = basis.exponent_array()
    d = np.prod(prog.domain_scale[None, :] ** (-E.astype(float)), axis=1)
    theta = (d[:, None] * theta_y) * d[None, :]
    theta = 0.5 * (theta + theta.T)
    poly = GramPoly(basis, theta)
    min_eig = poly.min_eigenvalue()
    if min_eig < -1e-8:
        raise SolverError(f"returned Theta is not PSD (min eigenvalue {min_eig:.3e})")
    # restore exact feasibility for the returned Theta: eta appears with
    # coefficient one in every sampled row, so the smallest feasible eta is
    # the worst residual of the fit itself (also covers solver tolerance and
    # the PSD projection above)
    eta = max(eta, 0.0, _eta_floor(poly, pools, c_p))
    # feasibility certificate: every assembled row satisfied up to tolerance
    ut_vals = np.array([theta_y[i, j] for (i, j) in prog.ut_pairs])
    slack = prog.eta_sign * eta + prog.rows @ ut_vals - prog.rhs
    if np.min(slack) < -1e-8:
        raise SolverError(f"solution violates an assembled row by {-np.min(slack):.3e}")
    return eta, poly


def _eta_floor(poly: GramPoly, pools: SamplePools, c_p: float) -> float:
    floor = 0.0
    if len(pools.stable):
        vals = eval_gram_batch(poly, pools.stable)
        floor = float(np.max(np.abs(vals - pools.stable_values)))
    if len(pools.unstable_fit):
        vals = eval_gram_batch(poly, pools.unstable_fit)
        floor = max(floor, float(np.max(c_p - vals)))
    return floor


def solve_level(poly: GramPoly, pool_level: np.ndarray) -> float:
    """Level stage: the smallest polynomial value over the bar samples."""
    pool_level = np.atleast_2d(np.asarray(pool_level, dtype=float))
    if pool_level.shape[0] == 0:
        raise ValueError("level pool is empty")
    return float(np.min(eval_gram_batch(poly, pool_level)))


@dataclass
class GramEstimate:
    """Polynomial sublevel-set estimate with its provenance and quotes."""

    poly: GramPoly
    eta_N: float
    c_N: float
    cert: ConverseCertificate
    system_label: str
    seed: int
    N1: int
    N2: int
    mode: str
    quotes: dict
    uniqueness_guaranteed: bool
    row_scaling: str = "box-normalized+max-abs-per-row"

    def to_json(self) -> str:
        return json.dumps(
            {
                "system_label": self.system_label,
                "cert": json.loads(self.cert.to_json()),
                "n": self.poly.basis.n,
                "q": self.poly.basis.q,
                "exponent_order": "gradlex",
                "theta": self.poly.theta.ravel().tolist(),
                "eta_N": self.eta_N,
                "c_N": self.c_N,
                "seed": self.seed,
                "N1": self.N1,
                "N2": self.N2,
                "mode": self.mode,
                "quotes": self.quotes,
                "uniqueness_guaranteed": self.uniqueness_guaranteed,
                "row_scaling": self.row_scaling,
            },
            indent=2,
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "GramEstimate":
        d = json.loads(text)
        basis = MonomialBasis(int(d["n"]), int(d["q"]))
        poly = GramPoly(basis, np.asarray(d["theta"], dtype=float).reshape(basis.n_q, basis.n_q))
        return cls(
            poly=poly,
            eta_N=float(d["eta_N"]),
            c_N=float(d["c_N"]),
            cert=ConverseCertificate(**d["cert"]),
            system_label=d["system_label"],
            seed=int(d["seed"]),
            N1=int(d["N1"]),
            N2=int(d["N2"]),
            mode=d["mode"],
            quotes=d["quotes"],
            uniqueness_guaranteed=bool(d["uniqueness_guaranteed"]),
            row_scaling=d.get("row_scaling", "box-normalized+max-abs-per-row"),
        )


def estimate(
    sys: SystemDef,
    cert: ConverseCertificate,
    box: DomainBox,
    N1: int,
    N2: int,
    q: int,
    seed: int,
    mode: str = "dd-lp",
    delta1: float = 1e-6,
    delta2: float = 1e-6,
    pools: Optional[SamplePools] = None,
) -> GramEstimate:
    """Full pipeline: draw pools, fit the shape, set the level, package.

    A pre-drawn ``pools`` may be passed to share one draw across degrees.
    """
    if N1 < 1 or N2 < 1:
        raise ValueError("N1 and N2 must be >= 1")
    if pools is None:
        pools = draw_pools(sys, cert, box, N1, N2, seed)
    basis = MonomialBasis(box.dim, q)
    scale = np.maximum(np.abs(box.lower), np.abs(box.upper))
    eta, poly = solve_shape(pools, basis, cert.c_p, mode=mode, domain_scale=scale)
    c_N = solve_level(poly, pools.unstable_level)
    big = MonomialBasis(box.dim, 2 * q)
    quotes = {
        "epsilon1": achieved_epsilon(N1, delta1, basis.n_q**2),
        "epsilon2": achieved_epsilon(N2, delta2, 0),
        "delta1": delta1,
        "delta2": delta2,
    }
    return GramEstimate(
        poly=poly,
        eta_N=eta,
        c_N=c_N,
        cert=cert,
        system_label=sys.label,
        seed=int(seed),
        N1=N1,
        N2=N2,
        mode=mode,
        quotes=quotes,
        uniqueness_guaranteed=bool(N1 >= big.n_q),
    )


def membership_estimate(est: GramEstimate, x: np.ndarray) -> bool:
    """Strict sublevel test <Theta, Z_q^2(x)> < c_N."""
    return bool(membership_estimate_batch(est, np.asarray(x, dtype=float)[None, :])[0])


def membership_estimate_batch(est: GramEstimate, X: np.ndarray) -> np.ndarray:
    return eval_gram_batch(est.poly, X) < est.c_N
