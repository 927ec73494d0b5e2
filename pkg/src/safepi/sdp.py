"""First-order solver for small semidefinite programs.

Problems are affine in a symmetric matrix variable P, an optional scalar
level rho, and an optional epigraph scalar s.  The objective is a convex
quadratic (a weighted sum of squares of affine scalar functionals) plus a
linear term.  Constraints are LMIs -- affine symmetric-matrix expressions
required positive semidefinite -- with scalar affine inequalities treated
as 1x1 LMIs.

The solver is an ADMM splitting: a linear-system prox step in the decision
variables, a projection of each LMI slack onto the PSD cone, and a scaled
dual update.  Solutions reported as optimal are re-certified by the
Cholesky PSD test, never by the solver's own residuals alone.
"""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .constraints import is_psd_cholesky


def sym_basis(n):
    """Basis of symmetric n x n matrices: E_ii and e_i e_j' + e_j e_i' (i<j)."""
    pairs = []
    mats = []
    for i in range(n):
        for j in range(i, n):
            E = np.zeros((n, n))
            E[i, j] = 1.0
            E[j, i] = 1.0
            pairs.append((i, j))
            mats.append(E)
    return pairs, mats


def project_psd(M):
    """Frobenius-nearest PSD matrix: clip negative eigenvalues to zero."""
    M = np.asarray(M, dtype=float)
    Ms = 0.5 * (M + M.T)
    w, U = np.linalg.eigh(Ms)
    return (U * np.clip(w, 0.0, None)) @ U.T


@dataclass
class SdpConfig:
    """Tolerances and step parameters for the ADMM loop.

    Residual balancing of the penalty runs only for the first
    ``adapt_until`` sweeps; left on indefinitely it can limit-cycle on
    problems with active epigraph blocks.  ``relaxation`` is the usual
    over-relaxation coefficient (1 disables it).
    """

    feas_tol: float = 1e-7
    max_iter: int = 20000
    sigma: float = 1.0
    relaxation: float = 1.0
    adapt_every: int = 25
    adapt_until: int = 500
    balance_ratio: float = 10.0
    balance_factor: float = 2.0
    sigma_min: float = 1e-6
    sigma_max: float = 1e6
    stall_start: int = 3000
    stall_window: int = 1500
    infeas_residual: float = 1e-4
    cert_shift_factor: float = 50.0
    trace_every: int = 50


class SdpProblem:
    """Builder for one SDP instance over (P, rho, s).

    Scalar functionals of the decision variables are described by a matrix
    coefficient C (contributing <C, P> = trace(C'P)), plus rho and s
    coefficients and a constant.  LMIs are described by a constant block, a
    linear operator on P (applied to each symmetric basis element), and
    optional rho/s coefficient blocks.
    """

    def __init__(self, n, with_rho=True, with_s=False):
        self.n = n
        self.with_rho = with_rho
        self.with_s = with_s
        self._pairs, self._basis = sym_basis(n)
        self.dim_p = len(self._pairs)
        self.dim = self.dim_p + int(with_rho) + int(with_s)
        self._squares = []  # (a_vec, const, weight)
        self._lin = np.zeros(self.dim)
        self._obj_const = 0.0
        self._lmis = []  # (k, A_block (k*k, dim), b_block (k*k,), name)

    # -- coefficient plumbing -------------------------------------------

    def _functional(self, C=None, rho=0.0, s=0.0):
        a = np.zeros(self.dim)
        if C is not None:
            C = np.asarray(C, dtype=float)
            Cs = 0.5 * (C + C.T)
            for idx, (i, j) in enumerate(self._pairs):
                a[idx] = Cs[i, i] if i == j else 2.0 * Cs[i, j]
        if rho != 0.0:
            if not self.with_rho:
                raise ValueError("problem has no rho variable")
            a[self.dim_p] = rho
        if s != 0.0:
            if not self.with_s:
                raise ValueError("problem has no s variable")
            a[self.dim_p + int(self.with_rho)] = s
        return a

    def add_square(self, C=None, rho=0.0, s=0.0, const=0.0, weight=1.0):
        """Objective += 0.5 * weight * (<C,P> + rho_c*rho + s_c*s + const)^2."""
        if weight < 0:
            raise ValueError("square-term weight must be nonnegative")
        self._squares.append((self._functional(C, rho, s), float(const), float(weight)))

    def add_linear(self, C=None, rho=0.0, s=0.0, const=0.0):
        """Objective += <C,P> + rho_c*rho + s_c*s + const."""
        self._lin += self._functional(C, rho, s)
        self._obj_const += float(const)

    def add_lmi(self, F0, P_op=None, rho_mat=None, s_mat=None, name=""):
        """Require F0 + sum_z z_i F_i >= 0 (symmetric blocks only)."""
        F0 = np.asarray(F0, dtype=float)
        k = F0.shape[0]
        cols = np.zeros((k * k, self.dim))
        if P_op is not None:
            for idx, E in enumerate(self._basis):
                Fi = np.asarray(P_op(E), dtype=float)
                if not np.allclose(Fi, Fi.T, atol=1e-12 * (1.0 + np.abs(Fi).max())):
                    raise ValueError("LMI operator produced a non-symmetric block")
                cols[:, idx] = 0.5 * (Fi + Fi.T).reshape(-1)
        if rho_mat is not None:
            if not self.with_rho:
                raise ValueError("problem has no rho variable")
            cols[:, self.dim_p] = np.asarray(rho_mat, dtype=float).reshape(-1)
        if s_mat is not None:
            if not self.with_s:
                raise ValueError("problem has no s variable")
            cols[:, self.dim_p + int(self.with_rho)] = np.asarray(
                s_mat, dtype=float
            ).reshape(-1)
        self._lmis.append((k, cols, 0.5 * (F0 + F0.T).reshape(-1), name))

    def add_scalar_ineq(self, C=None, rho=0.0, s=0.0, const=0.0, name=""):
        """Require <C,P> + rho_c*rho + s_c*s + const >= 0 (a 1x1 LMI)."""
        a = self._functional(C, rho, s)
        self._lmis.append((1, a.reshape(1, -1), np.array([float(const)]), name))

    # -- value reconstruction -------------------------------------------

    def unpack(self, z):
        P = np.zeros((self.n, self.n))
        for idx, (i, j) in enumerate(self._pairs):
            P[i, j] = z[idx]
            P[j, i] = z[idx]
        rho = float(z[self.dim_p]) if self.with_rho else 0.0
        s = float(z[self.dim_p + int(self.with_rho)]) if self.with_s else 0.0
        return P, rho, s

    def pack(self, P, rho=0.0, s=0.0):
        z = np.zeros(self.dim)
        P = np.asarray(P, dtype=float)
        for idx, (i, j) in enumerate(self._pairs):
            z[idx] = 0.5 * (P[i, j] + P[j, i])
        if self.with_rho:
            z[self.dim_p] = rho
        if self.with_s:
            z[self.dim_p + int(self.with_rho)] = s
        return z

    def objective(self, z):
        val = self._obj_const + self._lin @ z
        for a, b, w in self._squares:
            val += 0.5 * w * (a @ z + b) ** 2
        return float(val)


@dataclass
class SdpSolution:
    """Solver output; ``primal_residual`` is the scaled ADMM residual."""

    P: np.ndarray
    rho: float
    s: float
    status: str
    primal_residual: float
    objective_value: float
    iterations: int = 0
    certified: bool = False


class _BlockGroup:
    """All LMI blocks of one size, stacked for batched projection.

    Each block is rescaled to unit magnitude (PSD-ness is invariant under
    positive scaling) so that residual tolerances are meaningful even when
    block data spans many orders of magnitude.
    """

    def __init__(self, k, blocks):
        self.k = k
        self.count = len(blocks)
        A = np.stack([cols for _, cols, _, _ in blocks], axis=0)  # (cnt, k*k, d)
        b = np.stack([b for _, _, b, _ in blocks], axis=0)  # (cnt, k*k)
        scale = np.maximum.reduce(
            [np.abs(A).max(axis=(1, 2)), np.abs(b).max(axis=1), np.ones(self.count)]
        )
        self.scale = scale
        A /= scale[:, None, None]
        b /= scale[:, None]
        self.A = A.reshape(self.count * k * k, -1)
        self.b = b.reshape(-1)
        self.names = [name for _, _, _, name in blocks]

    def affine(self, z):
        return (self.A @ z + self.b).reshape(self.count, self.k, self.k)

    def true_blocks(self, z):
        """Blocks in their original (unscaled) units, for certification."""
        return self.affine(z) * self.scale[:, None, None]

    def project(self, V):
        if self.k == 1:
            return np.clip(V, 0.0, None)
        Vs = 0.5 * (V + np.transpose(V, (0, 2, 1)))
        w, U = np.linalg.eigh(Vs)
        return np.einsum("bik,bk,bjk->bij", U, np.clip(w, 0.0, None), U)


def solve(prob, cfg=None, warm=None, trace=None):
    """Run ADMM on a compiled SdpProblem.

    ``warm`` is an optional (P, rho, s) initial guess.  ``trace`` is an
    optional writable stream receiving CSV lines
    ``iteration,primal,dual,objective`` every ``cfg.trace_every`` sweeps.
    Termination: both scaled residuals at or below ``cfg.feas_tol``; a
    stagnating residual well above tolerance is reported as infeasible.
    """
    cfg = cfg or SdpConfig()
    if not prob._lmis:
        raise ValueError("problem has no constraints")
    groups = {}
    for blk in prob._lmis:
        groups.setdefault(blk[0], []).append(blk)
    groups = [_BlockGroup(k, blks) for k, blks in sorted(groups.items())]
    d = prob.dim

    H = np.zeros((d, d))
    q = prob._lin.copy()
    for a, b, w in prob._squares:
        H += w * np.outer(a, a)
        q += w * b * a
    AtA = np.zeros((d, d))
    for g in groups:
        AtA += g.A.T @ g.A

    sigma = cfg.sigma
    reg = 1e-12 * (1.0 + np.trace(H) / d + np.trace(AtA) / d)

    def factor(sig):
        return cho_factor(H + sig * AtA + reg * np.eye(d), lower=True)

    chol = factor(sigma)

    if warm is not None:
        z = prob.pack(*warm)
    else:
        z = np.zeros(d)
    S = [g.project(g.affine(z)) for g in groups]
    U = [np.zeros_like(Sg) for Sg in S]

    def cert_check(zv):
        for g in groups:
            G = g.true_blocks(zv)
            for blk in G:
                shift = cfg.cert_shift_factor * cfg.feas_tol * (
                    1.0 + np.linalg.norm(blk)
                )
                if not is_psd_cholesky(blk, abs_shift=shift):
                    return False
        return True

    best_z = z.copy()
    best_res = np.inf
    stall_best = np.inf
    stall_mark = 0
    status = "max-iterations"
    pri_scaled = np.inf
    it = 0

    for it in range(1, cfg.max_iter + 1):
        # prox step in the affine variables
        rhs = -q
        for g, Sg, Ug in zip(groups, S, U):
            rhs += sigma * (g.A.T @ (Sg - Ug).reshape(-1) - g.A.T @ g.b)
        z = cho_solve(chol, rhs)

        # PSD projection of each slack, then dual ascent
        pri_scaled = 0.0
        dual_vec = np.zeros(d)
        for gi, g in enumerate(groups):
            G = g.affine(z)
            G_rel = cfg.relaxation * G + (1.0 - cfg.relaxation) * S[gi]
            S_new = g.project(G_rel + U[gi])
            dual_vec += g.A.T @ (S_new - S[gi]).reshape(-1)
            U[gi] = U[gi] + G_rel - S_new
            S[gi] = S_new
            viol = np.sqrt(np.sum((G - S_new) ** 2, axis=(1, 2)))
            rel = viol / (1.0 + np.sqrt(np.sum(G**2, axis=(1, 2))))
            pri_scaled = max(pri_scaled, float(rel.max()))

        dual = sigma * np.linalg.norm(dual_vec)
        dual_scale = np.sqrt(d) + np.linalg.norm(q) + sigma * sum(
            np.linalg.norm((g.A.T @ Ug.reshape(-1))) for g, Ug in zip(groups, U)
        )
        dual_scaled = dual / dual_scale

        if trace is not None and it % cfg.trace_every == 0:
            trace.write(f"{it},{pri_scaled:.6e},{dual_scaled:.6e},{prob.objective(z):.9e}\n")

        if pri_scaled < best_res:
            if pri_scaled < stall_best * 0.99:
                stall_best = pri_scaled
                stall_mark = it
            best_res = pri_scaled
            best_z = z.copy()

        if pri_scaled <= cfg.feas_tol and dual_scaled <= cfg.feas_tol:
            status = "optimal"
            break

        if (
            it >= cfg.stall_start
            and it - stall_mark >= cfg.stall_window
            and best_res > cfg.infeas_residual
        ):
            status = "infeasible"
            break

        if it % cfg.adapt_every == 0 and it <= cfg.adapt_until:
            if pri_scaled > cfg.balance_ratio * dual_scaled and sigma < cfg.sigma_max:
                sigma *= cfg.balance_factor
                U = [Ug / cfg.balance_factor for Ug in U]
                chol = factor(sigma)
            elif dual_scaled > cfg.balance_ratio * pri_scaled and sigma > cfg.sigma_min:
                sigma /= cfg.balance_factor
                U = [Ug * cfg.balance_factor for Ug in U]
                chol = factor(sigma)

    if status != "optimal":
        z = best_z
        pri_scaled = best_res
    P, rho, s = prob.unpack(z)
    certified = status == "optimal" and cert_check(z)
    if status == "optimal" and not certified:
        status = "max-iterations"
    return SdpSolution(
        P=P,
        rho=rho,
        s=s,
        status=status,
        primal_residual=float(pri_scaled),
        objective_value=prob.objective(z),
        iterations=it,
        certified=certified,
    )
