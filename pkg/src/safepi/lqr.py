"""Ground-truth unconstrained LQR machinery.

Provides the discrete algebraic Riccati solution via fixed-point value
iteration, exact Lyapunov policy evaluation through the vectorized linear
system, and classical Hewer policy iteration.  These serve as the
verification oracle for the constrained learner.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceError, InstabilityError, NotStabilizableError


@dataclass(frozen=True)
class CostSpec:
    """Quadratic stage cost x'Qx + u'Ru with Q >= 0 and R > 0."""

    Q: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        Q = np.asarray(self.Q, dtype=float)
        R = np.atleast_2d(np.asarray(self.R, dtype=float))
        if Q.ndim != 2 or Q.shape[0] != Q.shape[1]:
            raise ValueError("Q must be square")
        if R.shape[0] != R.shape[1]:
            raise ValueError("R must be square")
        Q = 0.5 * (Q + Q.T)
        R = 0.5 * (R + R.T)
        if np.min(np.linalg.eigvalsh(Q)) < -1e-12:
            raise ValueError("Q must be positive semidefinite")
        try:
            np.linalg.cholesky(R)
        except np.linalg.LinAlgError:
            raise ValueError("R must be positive definite") from None
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "R", R)

    @property
    def n(self):
        return self.Q.shape[0]

    @property
    def m(self):
        return self.R.shape[0]

    def sqrt_Q(self):
        w, U = np.linalg.eigh(self.Q)
        return U @ np.diag(np.sqrt(np.clip(w, 0.0, None))) @ U.T

    def check_observability(self, sys, rtol=1e-9):
        """Rank test of the observability matrix of (A, Q^{1/2})."""
        C = self.sqrt_Q()
        blocks = [C]
        for _ in range(sys.n - 1):
            blocks.append(blocks[-1] @ sys.A)
        s = np.linalg.svd(np.vstack(blocks), compute_uv=False)
        if s[0] == 0.0:
            return False
        return int(np.sum(s > rtol * s[0])) == sys.n


@dataclass(frozen=True)
class LqrSolution:
    """DARE solution: value matrix, optimal gain, and residual norm."""

    P_inf: np.ndarray
    K_inf: np.ndarray
    residual: float


def dare_residual(sys, cost, P):
    A, B = sys.A, sys.B
    G = np.linalg.solve(cost.R + B.T @ P @ B, B.T @ P @ A)
    return A.T @ P @ A - P + cost.Q - A.T @ P @ B @ G


def solve_dare(sys, cost, tol=1e-12, max_iter=100_000, divergence_norm=1e12):
    """Fixed-point value iteration for the discrete Riccati equation.

    Iterates P <- A'PA + Q - A'PB (R + B'PB)^{-1} B'PA from P = Q until the
    successive Frobenius change drops below ``tol``.  Divergence of the
    iterate norm signals a non-stabilizable pair.
    """
    A, B = sys.A, sys.B
    Q, R = cost.Q, cost.R
    if Q.shape[0] != sys.n or R.shape[0] != sys.m:
        raise ValueError("cost dimensions do not match the system")
    P = Q.copy()
    for _ in range(max_iter):
        BtP = B.T @ P
        G = np.linalg.solve(R + BtP @ B, BtP @ A)
        P_next = A.T @ P @ A + Q - (BtP @ A).T @ G
        P_next = 0.5 * (P_next + P_next.T)
        delta = np.linalg.norm(P_next - P, "fro")
        P = P_next
        if np.linalg.norm(P, "fro") > divergence_norm or not np.all(np.isfinite(P)):
            raise NotStabilizableError(
                "Riccati iteration diverged; (A, B) appears not stabilizable"
            )
        if delta <= tol:
            break
    else:
        raise ConvergenceError(
            f"Riccati iteration did not converge in {max_iter} iterations",
            residual=float(np.linalg.norm(dare_residual(sys, cost, P), "fro")),
        )
    K = -np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
    res = float(np.linalg.norm(dare_residual(sys, cost, P), "fro"))
    return LqrSolution(P_inf=P, K_inf=K, residual=res)


def lyapunov_evaluate(sys, K, cost, residual_tol=1e-10):
    """Exact value matrix of the policy u = Kx.

    Solves (A+BK)'P(A+BK) - P + Q + K'RK = 0 through the vectorized linear
    system (I - Acl' (x) Acl') vec(P) = vec(Q + K'RK).  Raises
    InstabilityError when A+BK is not Schur stable (singular system or an
    indefinite/poor-residual solution).
    """
    K = np.asarray(K, dtype=float)
    Acl = sys.A + sys.B @ K
    n = sys.n
    Qeff = cost.Q + K.T @ cost.R @ K
    M = np.eye(n * n) - np.kron(Acl.T, Acl.T)
    try:
        vecP = np.linalg.solve(M, Qeff.reshape(-1, order="F"))
    except np.linalg.LinAlgError:
        raise InstabilityError("closed loop A+BK is not Schur stable") from None
    P = vecP.reshape(n, n, order="F")
    P = 0.5 * (P + P.T)
    res = np.linalg.norm(Acl.T @ P @ Acl - P + Qeff, "fro")
    scale = 1.0 + np.linalg.norm(P, "fro")
    if not np.all(np.isfinite(P)) or res > residual_tol * scale:
        raise InstabilityError(
            "Lyapunov solve is ill-conditioned; A+BK is not (robustly) Schur stable"
        )
    if np.min(np.linalg.eigvalsh(P)) < -1e-9 * scale:
        raise InstabilityError("Lyapunov solution is indefinite; A+BK is unstable")
    return P


def policy_improvement(sys, P, cost):
    """K = -(R + B'PB)^{-1} B'PA for a given value matrix P."""
    B = sys.B
    return -np.linalg.solve(cost.R + B.T @ P @ B, B.T @ P @ sys.A)


def hewer_iterate(sys, K0, cost, iters, monotone_slack=1e-10):
    """Classical policy iteration: evaluate exactly, then improve.

    Returns the list [(P_1, K_1), ..., (P_iters, K_iters)].  The value
    matrices must be monotone nonincreasing in the Loewner order; a
    violation indicates a broken stabilizing-gain precondition and is
    treated as fatal.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    K = np.asarray(K0, dtype=float)
    seq = []
    P_prev = None
    for _ in range(iters):
        P = lyapunov_evaluate(sys, K, cost)
        if P_prev is not None:
            diff = P_prev - P
            slack = monotone_slack * (1.0 + np.linalg.norm(P_prev, "fro"))
            if np.min(np.linalg.eigvalsh(diff)) < -slack:
                raise AssertionError(
                    "Hewer iteration lost Loewner monotonicity; "
                    "initial gain was not stabilizing"
                )
        K = policy_improvement(sys, P, cost)
        seq.append((P, K))
        P_prev = P
    return seq
