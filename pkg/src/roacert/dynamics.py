"""Discrete-time systems x+ = A x + phi(x) with structured nonlinearities.

The nonlinearity is a sum of scalar channels B_i * psi_i(<K_i, x>).  Channels
may optionally feed each other within a single step (strictly lower-triangular
chain), which is how iterated projections such as a warm-started QP solver are
represented exactly.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "DivergedError",
    "CertificateError",
    "ScalarChannel",
    "StructuredNonlinearity",
    "SystemDef",
    "Trajectory",
    "simulate",
    "step_batch",
    "make_saturated_lqr",
    "make_suboptimal_mpc",
    "solve_dare_fixed_point",
]

SCALAR_KINDS = (
    "saturation",
    "tanh-residual",
    "sat-residual",
    "box-projection-residual",
    "custom-table",
)


class DivergedError(RuntimeError):
    """Simulation produced a non-finite state."""

    def __init__(self, step: int):
        super().__init__(f"non-finite state at step {step}")
        self.step = step


class CertificateError(RuntimeError):
    """Certificate construction failed (hypothesis violated or cap exceeded)."""


def _psi_values(kind: str, params: dict, w: np.ndarray) -> np.ndarray:
    """Signed scalar nonlinearity psi(w), vectorized over w."""
    if kind == "saturation":
        return np.clip(w, -1.0, 1.0)
    if kind == "tanh-residual":
        return w - np.tanh(w)
    if kind == "sat-residual":
        return w - np.clip(w, -1.0, 1.0)
    if kind == "box-projection-residual":
        b = float(params["bound"])
        return w - np.clip(w, -b, b)
    if kind == "custom-table":
        # odd extension of a tabulated nonnegative branch
        wt = np.asarray(params["w"], dtype=float)
        pt = np.asarray(params["psi"], dtype=float)
        return np.sign(w) * np.interp(np.abs(w), wt, pt)
    raise ValueError(f"unknown scalar kind {kind!r}")


def _psi_envelope(kind: str, params: dict, t: np.ndarray) -> np.ndarray:
    """Monotone envelope psi(t) >= |psi(w)| for |w| <= t, t >= 0."""
    return _psi_values(kind, params, np.asarray(t, dtype=float))


@dataclass
class ScalarChannel:
    """One term B * psi(<K, x>) of a structured nonlinearity."""

    B: np.ndarray
    K: np.ndarray
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.B = np.asarray(self.B, dtype=float).ravel()
        self.K = np.asarray(self.K, dtype=float).ravel()
        if self.kind not in SCALAR_KINDS:
            raise ValueError(f"unknown scalar kind {self.kind!r}")

    def psi(self, w):
        return _psi_values(self.kind, self.params, np.asarray(w, dtype=float))

    def envelope(self, t):
        return _psi_envelope(self.kind, self.params, t)


class StructuredNonlinearity:
    """phi(x) = sum_i B_i psi_i(w_i) with w_i = <K_i, x> + chained residuals.

    ``chain`` is an optional strictly lower-triangular (m x m) matrix: channel
    i reads w_i = <K_i, x> + sum_{j<i} chain[i, j] * psi_j(w_j).  ``groups``
    partitions consecutive channels that belong to one vector-valued
    projection (used by the invariance-bound tables); default is singletons.
    """

    def __init__(
        self,
        terms: Sequence[ScalarChannel],
        chain: Optional[np.ndarray] = None,
        groups: Optional[Sequence[Sequence[int]]] = None,
    ):
        self.terms = list(terms)
        m = len(self.terms)
        if chain is not None:
            chain = np.asarray(chain, dtype=float)
            if chain.shape != (m, m):
                raise ValueError("chain must be m x m")
            if np.any(np.triu(np.abs(chain)) > 0):
                raise ValueError("chain must be strictly lower triangular")
        self.chain = chain
        if groups is None:
            groups = [[i] for i in range(m)]
        self.groups = [list(g) for g in groups]
        if sorted(i for g in self.groups for i in g) != list(range(m)):
            raise ValueError("groups must partition the channel indices")
        self._check_assumptions()

    @property
    def m(self) -> int:
        return len(self.terms)

    def _check_assumptions(self):
        # psi(0) = 0 and odd-monotone-bounded |psi(w)| <= psi(|w|) on a grid
        grid = np.linspace(-8.0, 8.0, 41)
        for t in self.terms:
            if abs(float(t.psi(0.0))) > 1e-12:
                raise ValueError(f"psi(0) != 0 for kind {t.kind!r}")
            if np.any(np.abs(t.psi(grid)) > t.envelope(np.abs(grid)) + 1e-12):
                raise ValueError(f"kind {t.kind!r} is not odd-monotone-bounded")

    def eval_batch(self, X: np.ndarray) -> np.ndarray:
        """phi evaluated row-wise on X of shape (N, n)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        N = X.shape[0]
        psis = np.empty((N, self.m))
        for i, t in enumerate(self.terms):
            w = X @ t.K
            if self.chain is not None and i > 0:
                w = w + psis[:, :i] @ self.chain[i, :i]
            psis[:, i] = t.psi(w)
        out = np.zeros_like(X)
        for i, t in enumerate(self.terms):
            out += np.outer(psis[:, i], t.B)
        return out

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.eval_batch(np.asarray(x, dtype=float)[None, :])[0]

    def to_dict(self) -> dict:
        d = {
            "terms": [
                {"B": t.B.tolist(), "K": t.K.tolist(), "kind": t.kind, "params": t.params}
                for t in self.terms
            ]
        }
        if self.chain is not None:
            d["chain"] = self.chain.tolist()
        if self.groups != [[i] for i in range(self.m)]:
            d["groups"] = self.groups
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "StructuredNonlinearity":
        terms = [
            ScalarChannel(t["B"], t["K"], t["kind"], t.get("params", {}))
            for t in d["terms"]
        ]
        chain = np.asarray(d["chain"], dtype=float) if d.get("chain") is not None else None
        return cls(terms, chain=chain, groups=d.get("groups"))


class SystemDef:
    """System x+ = A x + phi(x) with a stable linear part.

    ``phi`` is either a StructuredNonlinearity or an opaque callable
    x -> R^n (opaque systems cannot be certified from tables and need a
    user-supplied invariance radius).  ``sample_dim`` is the number of
    leading coordinates that samplers draw; trailing coordinates start at
    zero (warm-start convention for combined plant/solver states).
    """

    def __init__(
        self,
        n: int,
        A: np.ndarray,
        phi: StructuredNonlinearity | Callable[[np.ndarray], np.ndarray],
        label: str = "",
        sample_dim: Optional[int] = None,
        builtin: Optional[dict] = None,
    ):
        self.n = int(n)
        self.A = np.asarray(A, dtype=float)
        if self.A.shape != (self.n, self.n):
            raise ValueError("A must be n x n")
        rho = max(abs(np.linalg.eigvals(self.A)))
        if rho >= 1.0:
            raise CertificateError(
                f"spectral radius of A is {rho:.6g} >= 1; no finite-window certificate exists"
            )
        self.spectral_radius = float(rho)
        self.phi = phi
        self.label = label
        self.sample_dim = int(sample_dim) if sample_dim is not None else self.n
        self.builtin = builtin
        z = np.zeros(self.n)
        if np.linalg.norm(self._phi_batch(z[None, :])[0]) > 1e-12:
            raise ValueError("phi(0) != 0")

    @property
    def structured(self) -> bool:
        return isinstance(self.phi, StructuredNonlinearity)

    def _phi_batch(self, X: np.ndarray) -> np.ndarray:
        if isinstance(self.phi, StructuredNonlinearity):
            return self.phi.eval_batch(X)
        return np.stack([np.asarray(self.phi(x), dtype=float) for x in X])

    def embed(self, Y: np.ndarray) -> np.ndarray:
        """Pad sampled coordinates with zeros up to the full state dimension."""
        Y = np.atleast_2d(np.asarray(Y, dtype=float))
        if Y.shape[1] == self.n:
            return Y
        X = np.zeros((Y.shape[0], self.n))
        X[:, : Y.shape[1]] = Y
        return X

    def to_json(self) -> str:
        if not self.structured:
            raise ValueError("opaque systems are not serializable")
        doc = {
            "n": self.n,
            "A": self.A.ravel().tolist(),
            "label": self.label,
            "sample_dim": self.sample_dim,
        }
        doc.update(self.phi.to_dict())
        if self.builtin is not None:
            doc["builtin"] = self.builtin
        return json.dumps(doc, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SystemDef":
        doc = json.loads(text)
        if "builtin" in doc and doc["builtin"] is not None:
            b = doc["builtin"]
            if b["name"] == "lqr":
                return make_saturated_lqr()
            if b["name"] == "mpc":
                return make_suboptimal_mpc(**b.get("params", {}))
            raise ValueError(f"unknown builtin {b['name']!r}")
        n = int(doc["n"])
        A = np.asarray(doc["A"], dtype=float).reshape(n, n)
        phi = StructuredNonlinearity.from_dict(doc)
        return cls(n, A, phi, label=doc.get("label", ""), sample_dim=doc.get("sample_dim"))


@dataclass
class Trajectory:
    """States x_0..x_p with running energy sums sum_{j<=k} ||x_j||^2."""

    states: np.ndarray
    partial_sums: np.ndarray
    exceeded: bool = False

    def __post_init__(self):
        diffs = np.diff(self.partial_sums)
        if np.any(diffs < -1e-15):
            raise ValueError("partial sums must be nondecreasing")


def step_batch(sys: SystemDef, X: np.ndarray) -> np.ndarray:
    """One step of the dynamics applied row-wise to X of shape (N, n)."""
    return X @ sys.A.T + sys._phi_batch(X)


def simulate(
    sys: SystemDef,
    x0: np.ndarray,
    p: int,
    stop_level: Optional[float] = None,
) -> Trajectory:
    """Run p steps from x0, recording states and partial energy sums.

    With ``stop_level`` the run stops at the first index k whose partial sum
    reaches the level (the sums are nondecreasing, so no later step can fall
    back below it); the truncated trajectory is flagged ``exceeded``.
    """
    x0 = np.asarray(x0, dtype=float).ravel()
    if x0.shape != (sys.n,):
        raise ValueError(f"x0 must have length {sys.n}")
    if p < 1:
        raise ValueError("p must be >= 1")
    states = [x0.copy()]
    sums = [float(x0 @ x0)]
    if stop_level is not None and sums[0] >= stop_level:
        return Trajectory(np.array(states), np.array(sums), exceeded=True)
    X = x0[None, :]
    for k in range(1, p + 1):
        X = step_batch(sys, X)
        if not np.all(np.isfinite(X)):
            raise DivergedError(k)
        states.append(X[0].copy())
        sums.append(sums[-1] + float(X[0] @ X[0]))
        if stop_level is not None and sums[-1] >= stop_level:
            return Trajectory(np.array(states), np.array(sums), exceeded=True)
    return Trajectory(np.array(states), np.array(sums), exceeded=False)


# ---------------------------------------------------------------------------
# benchmark constructors

LQR_A_OP = np.array([[1.0745, 0.1025], [1.5079, 1.0745]])
LQR_B = np.array([0.1518, 3.0741])
LQR_K = np.array([-0.7999, -0.3397])


def make_saturated_lqr() -> SystemDef:
    """Two-state open-loop-unstable plant under saturated LQR feedback.

    Closed loop: x+ = A_op x + B sat(K x) = (A_op + B K) x + B (sat(Kx) - Kx).
    The residual is written as (-B) * (w - sat(w)) at w = Kx so that the
    scalar channel satisfies the odd-monotone-bounded assumption.
    """
    A = LQR_A_OP + np.outer(LQR_B, LQR_K)
    phi = StructuredNonlinearity([ScalarChannel(-LQR_B, LQR_K, "sat-residual")])
    return SystemDef(2, A, phi, label="saturated-lqr", builtin={"name": "lqr", "params": {}})


def solve_dare_fixed_point(
    A: np.ndarray,
    B: np.ndarray,
    Q: np.ndarray,
    R: np.ndarray,
    tol: float = 1e-12,
    max_iter: int = 100_000,
) -> np.ndarray:
    """Discrete algebraic Riccati equation by fixed-point iteration from Q."""
    P = Q.copy()
    for _ in range(max_iter):
        BtPB = R + B.T @ P @ B
        Pn = A.T @ P @ A - A.T @ P @ B @ np.linalg.solve(BtPB, B.T @ P @ A) + Q
        if np.max(np.abs(Pn - P)) < tol:
            return Pn
        P = Pn
    raise CertificateError("Riccati iteration did not converge")


def mpc_condensed_matrices(horizon: int = 3):
    """Condensed QP data (H, G) plus the terminal Riccati weight."""
    A, B = LQR_A_OP, LQR_B.reshape(2, 1)
    Q, R = np.eye(2), np.array([[1.0]])
    P = solve_dare_fixed_point(A, B, Q, R)
    Phi = np.vstack([np.linalg.matrix_power(A, k) for k in range(1, horizon + 1)])
    Gam = np.zeros((2 * horizon, horizon))
    for k in range(1, horizon + 1):
        for j in range(k):
            Gam[2 * (k - 1) : 2 * k, j] = (np.linalg.matrix_power(A, k - 1 - j) @ B).ravel()
    Qbar = np.zeros((2 * horizon, 2 * horizon))
    for k in range(horizon - 1):
        Qbar[2 * k : 2 * k + 2, 2 * k : 2 * k + 2] = Q
    Qbar[-2:, -2:] = P
    H = Gam.T @ Qbar @ Gam + np.eye(horizon)
    G = Gam.T @ Qbar @ Phi
    return H, G, P


def default_mpc_alpha(H: Optional[np.ndarray] = None) -> float:
    """Step size 1 / lmax(2H): the iteration map I - 2aH stays a contraction."""
    if H is None:
        H, _, _ = mpc_condensed_matrices()
    return 1.0 / (2.0 * float(np.linalg.eigvalsh(H)[-1]))


def make_suboptimal_mpc(alpha: Optional[float] = None, r_iters: int = 25) -> SystemDef:
    """Warm-started projected-gradient MPC on the combined state (x, z).

    One closed-loop step runs ``r_iters`` iterations
    z <- clip(z - 2a(Hz + Gx), -1, 1), applies the first entry of the final
    iterate as input, and carries the final iterate as the next warm start.
    The linear part is the unsaturated iteration composed r_iters times
    (projection inactive near the origin); the residual is the exact chain of
    per-iteration projection residuals.
    """
    if r_iters < 1:
        raise ValueError("r_iters must be >= 1")
    T = 3
    H, G, _ = mpc_condensed_matrices(T)
    if alpha is None:
        alpha = default_mpc_alpha(H)
    alpha = float(alpha)
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    B = LQR_B.reshape(2, 1)
    M = np.eye(T) - 2.0 * alpha * H
    Mp = [np.eye(T)]
    for _ in range(r_iters + 1):
        Mp.append(M @ Mp[-1])
    S = sum(Mp[t] for t in range(r_iters))
    L_z = Mp[r_iters]
    L_x = -2.0 * alpha * (S @ G)

    n = 2 + T
    A_c = np.zeros((n, n))
    A_c[0:2, 0:2] = LQR_A_OP + B @ L_x[0:1, :]
    A_c[0:2, 2:] = B @ L_z[0:1, :]
    A_c[2:, 0:2] = L_x
    A_c[2:, 2:] = L_z

    # channel (i, j): residual of the box projection at iteration i, output j
    terms = []
    m = r_iters * T
    chain = np.zeros((m, m))
    for i in range(r_iters):
        Si = sum(Mp[t] for t in range(i + 1))
        KX = -2.0 * alpha * (Si @ G)
        KZ = Mp[i + 1]
        for j in range(T):
            kappa = np.concatenate([KX[j, :], KZ[j, :]])
            c = np.zeros(n)
            c[0:2] = -(B.ravel() * Mp[r_iters - 1 - i][0, j])
            c[2:] = -Mp[r_iters - 1 - i][:, j]
            terms.append(ScalarChannel(c, kappa, "sat-residual"))
        for k in range(i):
            blk = -Mp[i - k]
            for j in range(T):
                for j2 in range(T):
                    chain[i * T + j, k * T + j2] = blk[j, j2]
    groups = [[i * T + j for j in range(T)] for i in range(r_iters)]
    phi = StructuredNonlinearity(terms, chain=chain, groups=groups)
    return SystemDef(
        n,
        A_c,
        phi,
        label="suboptimal-mpc",
        sample_dim=2,
        builtin={"name": "mpc", "params": {"alpha": alpha, "r_iters": r_iters}},
    )


def mpc_step_direct(x: np.ndarray, z: np.ndarray, alpha: float, r_iters: int = 25):
    """Reference closed-loop step evaluated by running the projected gradient."""
    H, G, _ = mpc_condensed_matrices()
    zi = np.asarray(z, dtype=float).copy()
    x = np.asarray(x, dtype=float)
    for _ in range(r_iters):
        zi = np.clip(zi - 2.0 * alpha * (H @ zi + G @ x), -1.0, 1.0)
    return LQR_A_OP @ x + LQR_B * zi[0], zi
