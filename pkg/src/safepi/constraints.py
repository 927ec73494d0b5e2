"""Polytopic state/input constraints and ellipsoidal invariant sets.

A constraint set is a list of rows (c_i, d_i), each encoding
c_i' x + d_i' u <= 1.  An ellipsoid (P, rho) is {x : x' P x <= rho} with
P symmetric positive definite.  Positive-semidefiniteness tests are done
by attempted Cholesky factorization rather than full eigendecompositions.
"""

import json
from dataclasses import dataclass

import numpy as np

from .errors import SynthesisError


def is_psd_cholesky(M, rel_shift=1e-12, abs_shift=0.0):
    """PSD test: Cholesky of (M + M')/2 + shift*I succeeds.

    The diagonal shift is rel_shift * trace / k (clipped at zero) plus an
    optional absolute term, so matrices that are PSD up to roundoff pass.
    """
    M = np.asarray(M, dtype=float)
    if M.ndim == 0:
        M = M.reshape(1, 1)
    k = M.shape[0]
    Ms = 0.5 * (M + M.T)
    shift = rel_shift * max(np.trace(Ms), 0.0) / k + abs_shift
    try:
        np.linalg.cholesky(Ms + shift * np.eye(k))
        return True
    except np.linalg.LinAlgError:
        return False


@dataclass(frozen=True)
class ConstraintSet:
    """Rows (c_i, d_i) of the normalized polytope c'x + d'u <= 1."""

    C: np.ndarray  # (r, n) state coefficients
    D: np.ndarray  # (r, m) input coefficients

    def __post_init__(self):
        C = np.atleast_2d(np.asarray(self.C, dtype=float))
        D = np.atleast_2d(np.asarray(self.D, dtype=float))
        if C.shape[0] != D.shape[0]:
            raise ValueError("C and D must have the same number of rows")
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "D", D)

    @property
    def r(self):
        return self.C.shape[0]

    @property
    def n(self):
        return self.C.shape[1]

    @property
    def m(self):
        return self.D.shape[1]

    @classmethod
    def empty(cls, n, m):
        return cls(np.zeros((0, n)), np.zeros((0, m)))

    @classmethod
    def from_rows(cls, rows, n=None, m=None):
        """Build from [(c, d), ...]; n, m required when rows is empty."""
        if not rows:
            if n is None or m is None:
                raise ValueError("n and m required for an empty constraint set")
            return cls.empty(n, m)
        C = np.vstack([np.asarray(c, dtype=float).reshape(1, -1) for c, _ in rows])
        D = np.vstack([np.asarray(d, dtype=float).reshape(1, -1) for _, d in rows])
        return cls(C, D)

    @classmethod
    def from_general(cls, A_rows, B_rows, bounds):
        """Ingest a'x + b'u <= g rows, normalizing each bound to 1.

        Rejects g <= 0 since the normalized form requires the origin to be
        strictly feasible.
        """
        A_rows = np.atleast_2d(np.asarray(A_rows, dtype=float))
        B_rows = np.atleast_2d(np.asarray(B_rows, dtype=float))
        g = np.asarray(bounds, dtype=float).reshape(-1)
        if np.any(g <= 0):
            raise ValueError("all constraint bounds must be strictly positive")
        return cls(A_rows / g[:, None], B_rows / g[:, None])

    @classmethod
    def box(cls, n, m, state_bound=None, input_bound=None):
        """Sup-norm boxes ||x||_inf <= state_bound, ||u||_inf <= input_bound."""
        rows_c, rows_d = [], []
        if state_bound is not None:
            if state_bound <= 0:
                raise ValueError("state_bound must be positive")
            for i in range(n):
                for s in (+1.0, -1.0):
                    c = np.zeros(n)
                    c[i] = s / state_bound
                    rows_c.append(c)
                    rows_d.append(np.zeros(m))
        if input_bound is not None:
            if input_bound <= 0:
                raise ValueError("input_bound must be positive")
            for j in range(m):
                for s in (+1.0, -1.0):
                    d = np.zeros(m)
                    d[j] = s / input_bound
                    rows_c.append(np.zeros(n))
                    rows_d.append(d)
        if not rows_c:
            return cls.empty(n, m)
        return cls(np.vstack(rows_c), np.vstack(rows_d))

    def tightened(self, margin):
        """Shrink the feasible set: rows scaled by 1/(1 - margin)."""
        if not 0 <= margin < 1:
            raise ValueError("margin must lie in [0, 1)")
        scale = 1.0 / (1.0 - margin)
        return ConstraintSet(self.C * scale, self.D * scale)

    def closed_loop_rows(self, K):
        """Rows w_i = c_i + K' d_i of the state-only polytope under u = Kx."""
        K = np.asarray(K, dtype=float)
        return self.C + self.D @ K

    def evaluate(self, x, u):
        """Row values c'x + d'u (empty sets give an empty array)."""
        x = np.asarray(x, dtype=float).reshape(-1)
        u = np.asarray(u, dtype=float).reshape(-1)
        return self.C @ x + self.D @ u

    def max_violation(self, x, u):
        """max_i (c'x + d'u - 1); <= 0 means feasible."""
        if self.r == 0:
            return -np.inf
        return float(np.max(self.evaluate(x, u)) - 1.0)

    def to_json(self):
        rows = [{"c": c.tolist(), "d": d.tolist()} for c, d in zip(self.C, self.D)]
        return json.dumps({"rows": rows})

    @classmethod
    def from_json(cls, text, n=None, m=None):
        doc = json.loads(text)
        rows = [(row["c"], row["d"]) for row in doc["rows"]]
        return cls.from_rows(rows, n=n, m=m)


@dataclass(frozen=True)
class Ellipsoid:
    """Sublevel set {x : x' P x <= rho} of a positive definite quadratic."""

    P: np.ndarray
    rho: float

    def __post_init__(self):
        P = np.asarray(self.P, dtype=float)
        if P.ndim != 2 or P.shape[0] != P.shape[1]:
            raise ValueError("P must be square")
        if not np.allclose(P, P.T, rtol=0.0, atol=1e-10 * (1.0 + np.abs(P).max())):
            raise ValueError("P must be symmetric")
        P = 0.5 * (P + P.T)
        if self.rho <= 0:
            raise ValueError("rho must be positive")
        try:
            np.linalg.cholesky(P)
        except np.linalg.LinAlgError:
            raise ValueError("P must be positive definite") from None
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "rho", float(self.rho))

    @property
    def n(self):
        return self.P.shape[0]

    def value(self, x):
        x = np.asarray(x, dtype=float).reshape(-1)
        return float(x @ self.P @ x)

    def boundary_points(self, count=256, seed=None):
        """Sample points with x' P x = rho exactly (up to roundoff).

        For n == 2 the samples sweep the angle uniformly; otherwise
        directions are drawn from a seeded normal distribution.
        """
        w, U = np.linalg.eigh(self.P)
        scale = U @ np.diag(np.sqrt(self.rho / w))
        if self.n == 2 and seed is None:
            theta = np.linspace(0.0, 2.0 * np.pi, count, endpoint=False)
            dirs = np.stack([np.cos(theta), np.sin(theta)], axis=1)
        else:
            rng = np.random.default_rng(0 if seed is None else seed)
            dirs = rng.standard_normal((count, self.n))
            dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        return dirs @ scale.T

    def to_json(self):
        return json.dumps({"P": self.P.tolist(), "rho": self.rho})

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        return cls(np.array(doc["P"], dtype=float), float(doc["rho"]))


@dataclass(frozen=True)
class CertifiedPolicy:
    """A gain together with the ellipsoid and contraction rate certifying it."""

    K: np.ndarray
    cais: Ellipsoid
    lam: float

    def __post_init__(self):
        object.__setattr__(self, "K", np.asarray(self.K, dtype=float))
        if not 0 < self.lam < 1:
            raise ValueError("contraction factor must lie in (0, 1)")


def contains(ellipsoid, x):
    """Membership test x' P x <= rho (exact comparison on the computed form)."""
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.shape[0] != ellipsoid.n:
        raise ValueError(f"x must have length {ellipsoid.n}")
    return ellipsoid.value(x) <= ellipsoid.rho


def admissibility_check(ellipsoid, K, cs, rel_shift=1e-12):
    """True iff P - rho (c_i + K'd_i)(c_i + K'd_i)' >= 0 for every row.

    Certifies that every state of the ellipsoid satisfies all constraint
    rows under u = Kx.
    """
    P, rho = ellipsoid.P, ellipsoid.rho
    W = cs.closed_loop_rows(K)
    for w in W:
        if not is_psd_cholesky(P - rho * np.outer(w, w), rel_shift=rel_shift):
            return False
    return True


def invariance_check(ellipsoid, sys, K, lam, rel_shift=1e-12):
    """True iff lam*P - (A+BK)' P (A+BK) >= 0 (value-function contraction)."""
    if not 0 < lam < 1:
        raise ValueError("lam must lie in (0, 1)")
    Acl = sys.A + sys.B @ np.asarray(K, dtype=float)
    P = ellipsoid.P
    return is_psd_cholesky(lam * P - Acl.T @ P @ Acl, rel_shift=rel_shift)


def max_admissible_level(P, cs, K):
    """Largest rho with P - rho w w' >= 0 over all rows, i.e. 1/max w'P^{-1}w."""
    W = cs.closed_loop_rows(K)
    if W.shape[0] == 0:
        return np.inf
    vals = np.einsum("ri,ri->r", W, np.linalg.solve(P, W.T).T)
    top = float(np.max(vals))
    if top <= 0.0:
        return np.inf
    return 1.0 / top


def contractive_lyapunov_shape(sys, K, lam):
    """Solve (A+BK)' P (A+BK) - lam P = -I for P, normalized to trace n.

    Fails when the closed loop cannot contract at rate lam (no positive
    definite solution exists).
    """
    Acl = sys.A + sys.B @ np.asarray(K, dtype=float)
    n = sys.n
    M = lam * np.eye(n * n) - np.kron(Acl.T, Acl.T)
    try:
        vecP = np.linalg.solve(M, np.eye(n).reshape(-1, order="F"))
    except np.linalg.LinAlgError:
        raise SynthesisError(
            "Lyapunov-type solve is singular; closed loop cannot contract "
            f"at rate {lam}"
        ) from None
    P = vecP.reshape(n, n, order="F")
    P = 0.5 * (P + P.T)
    if not is_psd_cholesky(P - 1e-12 * np.eye(n)):
        raise SynthesisError(
            f"no positive definite contractive shape at rate {lam}; "
            "A+BK0 must be Schur stable with spectral radius < sqrt(lam)"
        )
    return P * (n / np.trace(P))


def synthesize_initial_cais(sys, cs, K0, x0, lam, level_cap_factor=100.0, shape=None):
    """Construct an initial certified ellipsoid for the closed loop under K0.

    The shape comes from a Lyapunov-type solve enforcing contraction at
    rate lam (or is supplied directly via ``shape``, e.g. the value matrix
    of a surrogate cost, in which case contraction at lam is verified);
    the level is the largest admissible one (capped for numeric scaling
    when the constraints are extremely loose).  Raises SynthesisError
    carrying the maximal feasible level when x0 cannot be contained.
    """
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    if shape is None:
        P = contractive_lyapunov_shape(sys, K0, lam)
    else:
        P = np.asarray(shape, dtype=float)
        P = 0.5 * (P + P.T)
        Acl = sys.A + sys.B @ np.asarray(K0, dtype=float)
        if not is_psd_cholesky(lam * P - Acl.T @ P @ Acl):
            raise SynthesisError(
                f"supplied shape does not contract at rate {lam} under K0"
            )
    rho_max = max_admissible_level(P, cs, K0)
    v0 = float(x0 @ P @ x0)
    if v0 > rho_max:
        raise SynthesisError(
            "initial state lies outside every admissible level set "
            f"(x0'Px0 = {v0:.6g} > max admissible rho = {rho_max:.6g})",
            max_rho=rho_max,
        )
    rho = rho_max
    cap = max(1.0, level_cap_factor * v0)
    if not np.isfinite(rho) or rho > cap:
        rho = cap
    return Ellipsoid(P, rho)
