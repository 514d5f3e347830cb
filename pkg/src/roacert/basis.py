"""Monomial bases Z_q, Gram-matrix polynomials and their flattening.

Exponent order is graded lexicographic (total degree, then lex with the
first variable largest), constant term first; the order is fixed so that
serialized estimates evaluate identically after a round trip.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from math import comb
from typing import List, Sequence

import numpy as np

__all__ = [
    "MonomialBasis",
    "GramPoly",
    "eval_Z",
    "eval_Z_batch",
    "eval_gram",
    "flatten_to_vec",
    "sample_matrix_rank",
]


def _gradlex_exponents(n: int, q: int) -> List[tuple]:
    out: List[tuple] = []

    def rec(prefix: list, rem: int, k: int):
        if k == n - 1:
            out.append(tuple(prefix) + (rem,))
            return
        for e in range(rem, -1, -1):
            rec(prefix + [e], rem - e, k + 1)

    for d in range(q + 1):
        rec([], d, 0)
    return out


@dataclass(frozen=True)
class MonomialBasis:
    """All monomials in n variables up to degree q, graded-lex ordered."""

    n: int
    q: int

    @property
    def exponents(self) -> List[tuple]:
        return _gradlex_exponents(self.n, self.q)

    @property
    def n_q(self) -> int:
        return comb(self.n + self.q, self.q)

    def exponent_array(self) -> np.ndarray:
        return np.array(self.exponents, dtype=int)


def eval_Z(basis: MonomialBasis, x: np.ndarray) -> np.ndarray:
    """Vector of monomial values at x, in basis order."""
    return eval_Z_batch(basis, np.asarray(x, dtype=float)[None, :])[0]


def eval_Z_batch(basis: MonomialBasis, X: np.ndarray) -> np.ndarray:
    """Monomial values row-wise: shape (N, n_q)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != basis.n:
        raise ValueError(f"points must have {basis.n} coordinates")
    E = basis.exponent_array()  # (n_q, n)
    # x^0 must be 1 even at x = 0
    out = np.ones((X.shape[0], E.shape[0]))
    for j in range(basis.n):
        col = X[:, j][:, None] ** E[:, j][None, :]
        out *= np.where(E[:, j][None, :] == 0, 1.0, col)
    return out


class GramPoly:
    """Polynomial <Theta, Z_q (x) Z_q> with a symmetric coefficient matrix."""

    def __init__(self, basis: MonomialBasis, theta: np.ndarray):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (basis.n_q, basis.n_q):
            raise ValueError("theta must be n_q x n_q")
        if np.max(np.abs(theta - theta.T)) > 1e-12 * max(1.0, np.max(np.abs(theta))):
            raise ValueError("theta must be symmetric")
        self.basis = basis
        self.theta = 0.5 * (theta + theta.T)

    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(self.theta)[0])

    def to_json(self) -> str:
        return json.dumps(
            {
                "n": self.basis.n,
                "q": self.basis.q,
                "exponent_order": "gradlex",
                "theta": self.theta.ravel().tolist(),
            },
            indent=2,
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "GramPoly":
        d = json.loads(text)
        if d.get("exponent_order", "gradlex") != "gradlex":
            raise ValueError("unsupported exponent order")
        basis = MonomialBasis(int(d["n"]), int(d["q"]))
        theta = np.asarray(d["theta"], dtype=float).reshape(basis.n_q, basis.n_q)
        return cls(basis, theta)


def eval_gram(p: GramPoly, x: np.ndarray) -> float:
    z = eval_Z(p.basis, x)
    return float(z @ p.theta @ z)


def eval_gram_batch(p: GramPoly, X: np.ndarray) -> np.ndarray:
    Z = eval_Z_batch(p.basis, X)
    return np.einsum("ij,jk,ik->i", Z, p.theta, Z)


def pair_index_map(basis: MonomialBasis):
    """Map each (i, j) basis pair to its coefficient slot in the 2q basis."""
    big = MonomialBasis(basis.n, 2 * basis.q)
    lookup = {e: k for k, e in enumerate(big.exponents)}
    E = basis.exponents
    idx = np.empty((basis.n_q, basis.n_q), dtype=int)
    for i, ei in enumerate(E):
        for j, ej in enumerate(E):
            idx[i, j] = lookup[tuple(a + b for a, b in zip(ei, ej))]
    return big, idx


def flatten_to_vec(p: GramPoly) -> np.ndarray:
    """Collapse Theta onto Z_2q coefficients: an exact linear map.

    <flatten(Theta), Z_2q(x)> = <Theta, Z_q^2(x)> for every x.
    """
    big, idx = pair_index_map(p.basis)
    vec = np.zeros(big.n_q)
    np.add.at(vec, idx.ravel(), p.theta.ravel())
    return vec


def sample_matrix_rank(basis: MonomialBasis, points: Sequence[np.ndarray]) -> int:
    """Numerical rank of the monomial-sample matrix [Z_q(x_1) ... Z_q(x_N)]."""
    if len(points) < 1:
        raise ValueError("need at least one point")
    S = eval_Z_batch(basis, np.asarray(points, dtype=float)).T
    svals = np.linalg.svd(S, compute_uv=False)
    if svals.size == 0 or svals[0] == 0.0:
        return 0
    return int(np.sum(svals > 1e-10 * svals[0]))
