"""Constrained policy iteration with ellipsoidal invariant sets.

Policy evaluation is a small SDP (model-based, or data-driven over a
window of excited closed-loop samples) returning a certified ellipsoid;
policy improvement is the Riccati-style gain update tempered by
backtracking so every intermediate gain stays constraint-admissible, with
a recursive least-squares implementation for the data-driven path.  The
episode driver interleaves the two and enforces state/input constraints
at every step.
"""

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .constraints import (
    Ellipsoid,
    admissibility_check,
    contains,
    invariance_check,
    max_admissible_level,
)
from .errors import (
    EvaluationError,
    PersistenceError,
    PreconditionError,
    SafetyViolationError,
)
from .linsys import step
from .lqr import lyapunov_evaluate, policy_improvement
from .sdp import SdpProblem, solve, sym_basis

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def compute_lambda_bound(alpha1, alpha2, N):
    """Upper bound (alpha1/alpha2)^(2/N) that the contraction factor must
    stay strictly below for cross-cycle stability."""
    if not 0 < alpha1 <= alpha2:
        raise ValueError("need 0 < alpha1 <= alpha2")
    if N < 1:
        raise ValueError("N must be >= 1")
    return (alpha1 / alpha2) ** (2.0 / N)


@dataclass(frozen=True)
class LearningSchedule:
    """Policy-iteration instants {N, 2N, ...}: at least N samples per cycle."""

    N: int

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("window length N must be >= 1")

    def is_instant(self, t):
        return t > 0 and t % self.N == 0


@dataclass
class AdpConfig:
    """Constants of the constrained learner.

    alpha1/alpha2 bound the value-matrix spectrum, lam is the per-step
    contraction factor (must satisfy lam < (alpha1/alpha2)^(2/N)),
    lambda_rho weights the level-maximization term of the data-driven
    objective, and hessian_init_scale is the identity scaling used to
    (re)initialize the RLS Hessian.
    """

    alpha1: float
    alpha2: float
    lam: float
    lambda_rho: float = 1e-3
    beta: float = 0.5
    epsilon: float = 1e-6
    hessian_init_scale: float = 1e-4
    step_size: float = 1.0
    rho_min: float = 1e-9
    rho_max: float = 1e9
    contraction_margin: float = 1e-4
    membership_margin: float = 1e-6
    backtrack_cap: int = 100
    min_window_scale: float = 1e-10

    def __post_init__(self):
        if not 0 < self.alpha1 <= self.alpha2:
            raise ValueError("need 0 < alpha1 <= alpha2")
        if not 0 < self.lam < 1:
            raise ValueError("lam must lie in (0, 1)")
        if self.lambda_rho < 0:
            raise ValueError("lambda_rho must be nonnegative")
        if not 0 < self.beta < 1:
            raise ValueError("beta must lie in (0, 1)")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.hessian_init_scale <= 0:
            raise ValueError("hessian_init_scale must be positive")
        if not 0 < self.step_size <= 1:
            raise ValueError("step_size must lie in (0, 1]")
        if not 0 < self.rho_min < self.rho_max:
            raise ValueError("need 0 < rho_min < rho_max")

    def lambda_bound(self, N):
        return compute_lambda_bound(self.alpha1, self.alpha2, N)

    def validate_against(self, schedule):
        bound = self.lambda_bound(schedule.N)
        if self.lam >= bound:
            raise ValueError(
                f"lam = {self.lam:.6g} violates the schedule condition "
                f"lam < (alpha1/alpha2)^(2/N) = {bound:.6g} for N = {schedule.N}"
            )

    @classmethod
    def with_default_lambda(cls, alpha1, alpha2, schedule, safety=0.999, **kw):
        lam = safety * compute_lambda_bound(alpha1, alpha2, schedule.N)
        cfg = cls(alpha1=alpha1, alpha2=alpha2, lam=lam, **kw)
        cfg.validate_against(schedule)
        return cfg


# ---------------------------------------------------------------------------
# data window
# ---------------------------------------------------------------------------


class LearningBuffer:
    """Windowed closed-loop samples (x, u, K, nu, x_next).

    On append the noise-free quantities xtilde_next = x_next - B nu and
    utilde = K x are derived, which is what the evaluation SDP consumes.
    """

    def __init__(self, B):
        self.B = np.asarray(B, dtype=float)
        self.clear()

    def clear(self):
        self.xs = []
        self.us = []
        self.Ks = []
        self.nus = []
        self.x_nexts = []
        self.xtildes = []
        self.utildes = []

    def append(self, x, u, K, nu, x_next):
        x = np.asarray(x, dtype=float)
        self.xs.append(x)
        self.us.append(np.asarray(u, dtype=float))
        K = np.asarray(K, dtype=float)
        self.Ks.append(K)
        nu = np.asarray(nu, dtype=float)
        self.nus.append(nu)
        x_next = np.asarray(x_next, dtype=float)
        self.x_nexts.append(x_next)
        self.xtildes.append(x_next - self.B @ nu)
        self.utildes.append(K @ x)

    def __len__(self):
        return len(self.xs)


def pe_check(buffer, threshold=1e-8):
    """Persistence of excitation: the Kronecker difference matrix with rows
    x_t (x) x_t - x_{t+1} (x) x_{t+1}, restricted to the symmetric-matrix
    subspace, must have full column rank n(n+1)/2 (SVD with a relative
    threshold)."""
    if len(buffer) == 0:
        raise ValueError("buffer must be nonempty")
    n = buffer.xs[0].shape[0]
    rows = np.stack(
        [np.kron(x, x) - np.kron(xn, xn) for x, xn in zip(buffer.xs, buffer.x_nexts)]
    )
    _, basis = sym_basis(n)
    Sb = np.stack([E.reshape(-1) for E in basis], axis=1)  # (n^2, n(n+1)/2)
    restricted = rows @ Sb
    s = np.linalg.svd(restricted, compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return False
    rank = int(np.sum(s > threshold * s[0]))
    return rank == Sb.shape[1]


# ---------------------------------------------------------------------------
# policy evaluation (certified ellipsoid from an SDP)
# ---------------------------------------------------------------------------


def _add_common_constraints(prob, cs, K, cfg, x_member, n):
    for w in cs.closed_loop_rows(K):
        prob.add_lmi(
            np.zeros((n, n)),
            P_op=lambda E: E,
            rho_mat=-np.outer(w, w),
            name="admissible",
        )
    prob.add_lmi(-cfg.alpha1 * np.eye(n), P_op=lambda E: E, name="box-lo")
    prob.add_lmi(cfg.alpha2 * np.eye(n), P_op=lambda E: -E, name="box-hi")
    delta = cfg.membership_margin * (1.0 + cfg.alpha2 * float(x_member @ x_member))
    prob.add_scalar_ineq(
        C=-np.outer(x_member, x_member), rho=1.0, const=-delta, name="member"
    )
    prob.add_scalar_ineq(rho=1.0, const=-cfg.rho_min, name="rho-min")
    prob.add_scalar_ineq(rho=-1.0, const=cfg.rho_max, name="rho-max")


def _warm_point(P_guess, x_member, K, cs, cfg, fallback=None, prefer_high_rho=False):
    """Assemble a clamped (P, rho, s) initial iterate for the SDP.

    P_guess is any rough estimate of the value matrix (it need not be
    feasible); rho is placed inside its exactly-feasible interval for that
    matrix, preferring the admissible top when the objective rewards a
    large level.
    """
    if P_guess is None or not np.all(np.isfinite(P_guess)):
        if fallback is None:
            return None
        P_guess = fallback.P
    P = 0.5 * (P_guess + P_guess.T)
    lo = max(float(x_member @ P @ x_member), cfg.rho_min)
    hi = min(max_admissible_level(P, cs, K) * 0.99, cfg.rho_max * 0.5)
    if hi < lo:
        rho = lo
    elif prefer_high_rho:
        rho = hi
    elif fallback is not None:
        rho = min(max(fallback.rho, lo), hi)
    else:
        rho = min(2.0 * lo + 1e-6, hi)
    return P, rho, 0.0


def _certify(P, rho_raw, K, x_member, cs, cfg, sys=None, data_rows=None):
    """Exact post-solve certification shared by both evaluation routes.

    The level is clipped to the largest exactly-admissible one, then
    membership, admissibility, and contraction are re-checked with the
    Cholesky test (never the solver's own residuals).
    """
    P = 0.5 * (P + P.T)
    rho_adm = max_admissible_level(P, cs, K)
    rho = min(rho_raw, rho_adm * (1.0 - 1e-12)) if np.isfinite(rho_adm) else rho_raw
    if rho <= 0:
        raise EvaluationError("certification failed: no positive admissible level")
    if float(x_member @ P @ x_member) > rho:
        raise EvaluationError(
            "certification failed: window-end state left the admissible level set"
        )
    try:
        ellipsoid = Ellipsoid(P, rho)
    except ValueError as exc:
        raise EvaluationError(f"certification failed: {exc}") from None
    if not admissibility_check(ellipsoid, K, cs):
        raise EvaluationError("certification failed: admissibility LMI")
    if sys is not None and not invariance_check(ellipsoid, sys, K, cfg.lam):
        raise EvaluationError("certification failed: contraction LMI")
    if data_rows is not None:
        for x, xt in data_rows:
            lhs = float(xt @ P @ xt)
            rhs = cfg.lam * float(x @ P @ x)
            if lhs > rhs + 1e-12 * (1.0 + abs(rhs)):
                raise EvaluationError("certification failed: data contraction row")
    return ellipsoid


def evaluate_policy_model_based(sys, cost, K, x, cs, cfg, warm=None, sdp_cfg=None):
    """Constrained policy evaluation with full model knowledge.

    Minimizes the operator norm of the Riccati defect of (K, P) in
    epigraph form, subject to contraction, membership of the current
    state, constraint admissibility, and the spectrum box.  Returns a
    certified ellipsoid or raises EvaluationError (callers keep the
    previous one).
    """
    K = np.asarray(K, dtype=float)
    x = np.asarray(x, dtype=float).reshape(-1)
    n = sys.n
    Acl = sys.A + sys.B @ K
    Qeff = cost.Q + K.T @ cost.R @ K
    lam_eff = cfg.lam * (1.0 - cfg.contraction_margin)

    prob = SdpProblem(n, with_rho=True, with_s=True)
    prob.add_linear(s=1.0)
    prob.add_lmi(
        -Qeff, P_op=lambda E: E - Acl.T @ E @ Acl, s_mat=np.eye(n), name="epi+"
    )
    prob.add_lmi(
        Qeff, P_op=lambda E: Acl.T @ E @ Acl - E, s_mat=np.eye(n), name="epi-"
    )
    prob.add_lmi(
        np.zeros((n, n)),
        P_op=lambda E: lam_eff * E - Acl.T @ E @ Acl,
        name="contraction",
    )
    _add_common_constraints(prob, cs, K, cfg, x, n)

    # the exact evaluation of K is the unconstrained optimum; start there
    try:
        P_guess = lyapunov_evaluate(sys, K, cost)
    except Exception:
        P_guess = None
    sol = solve(
        prob,
        cfg=sdp_cfg,
        warm=_warm_point(P_guess, x, K, cs, cfg, fallback=warm),
    )
    if sol.status == "infeasible":
        raise EvaluationError("policy-evaluation SDP infeasible", status=sol.status)
    return _certify(sol.P, sol.rho, K, x, cs, cfg, sys=sys)


def evaluate_policy_data_driven(
    buffer, cost, x_end, K, cs, cfg, warm=None, sdp_cfg=None
):
    """Constrained policy evaluation from excited closed-loop data.

    Objective: half the sum of squared per-sample Riccati defects minus
    lambda_rho * rho; constraints: per-sample contraction rows, membership
    of the window-end state, admissibility, and the spectrum box.
    Requires the window to be persistently exciting.
    """
    if len(buffer) == 0 or not pe_check(buffer):
        raise PersistenceError(
            "data window is not persistently exciting; defer learning"
        )
    K = np.asarray(K, dtype=float)
    x_end = np.asarray(x_end, dtype=float).reshape(-1)
    n = x_end.shape[0]
    lam_eff = cfg.lam * (1.0 - cfg.contraction_margin)

    prob = SdpProblem(n, with_rho=True, with_s=False)
    ls_rows, ls_rhs, row_mats, consts = [], [], [], []
    for x, xt, ut in zip(buffer.xs, buffer.xtildes, buffer.utildes):
        const = float(x @ cost.Q @ x + ut @ cost.R @ ut)
        C = np.outer(xt, xt) - np.outer(x, x)
        row_mats.append(C)
        consts.append(const)
        ls_rows.append(prob._functional(C)[: prob.dim_p])
        ls_rhs.append(-const)
        prob.add_scalar_ineq(
            C=lam_eff * np.outer(x, x) - np.outer(xt, xt), name="data-contraction"
        )
    # normalize the defect terms to unit window scale so the level-reward
    # keeps a scale-free meaning once the exploration signal has decayed
    Als = np.vstack(ls_rows)
    scale_sq = float(np.mean(np.sum(Als**2, axis=1) + np.asarray(consts) ** 2))
    weight = 1.0 / max(scale_sq, 1e-300)
    for C, const in zip(row_mats, consts):
        prob.add_square(C=C, const=const, weight=weight)
    if cfg.lambda_rho > 0:
        prob.add_linear(rho=-cfg.lambda_rho)
    _add_common_constraints(prob, cs, K, cfg, x_end, n)

    # regularized least squares on the defect rows gives the warm start
    Als = np.vstack(ls_rows)
    ridge = 1e-9 * max(1.0, float(np.trace(Als.T @ Als)) / Als.shape[1])
    p_ls = np.linalg.solve(
        Als.T @ Als + ridge * np.eye(Als.shape[1]), Als.T @ np.asarray(ls_rhs)
    )
    z_guess = np.zeros(prob.dim)
    z_guess[: prob.dim_p] = p_ls
    P_guess, _, _ = prob.unpack(z_guess)

    sol = solve(
        prob,
        cfg=sdp_cfg,
        warm=_warm_point(
            P_guess, x_end, K, cs, cfg, fallback=warm,
            prefer_high_rho=cfg.lambda_rho > 0,
        ),
    )
    if sol.status == "infeasible":
        raise EvaluationError("policy-evaluation SDP infeasible", status=sol.status)
    return _certify(
        sol.P,
        sol.rho,
        K,
        x_end,
        cs,
        cfg,
        data_rows=list(zip(buffer.xs, buffer.xtildes)),
    )


# ---------------------------------------------------------------------------
# policy improvement
# ---------------------------------------------------------------------------


def ideal_improvement(P_next, sys, cost):
    """Unconstrained gain update K* = -(R + B'PB)^{-1} B'PA (model-based)."""
    return policy_improvement(sys, np.asarray(P_next, dtype=float), cost)


def backtrack_policy(K_star, K_t, ellipsoid, cs, beta=0.5, cap=100):
    """Walk K from K_star back toward the admissible K_t.

    Tries K_t + alpha (K_star - K_t) for alpha = 1, beta, beta^2, ...
    and returns the first admissible gain; after ``cap`` shrinkages the
    unchanged K_t is returned.  K_t itself must be admissible.
    """
    if not 0 < beta < 1:
        raise ValueError("beta must lie in (0, 1)")
    K_star = np.asarray(K_star, dtype=float)
    K_t = np.asarray(K_t, dtype=float)
    if not admissibility_check(ellipsoid, K_t, cs):
        raise PreconditionError(
            "current gain is not admissible for the certified ellipsoid"
        )
    alpha = 1.0
    for _ in range(cap):
        K = K_t + alpha * (K_star - K_t)
        if admissibility_check(ellipsoid, K, cs):
            return K
        alpha *= beta
    return K_t


@dataclass
class RlsState:
    """Recursive least-squares accumulator for the gain update."""

    H: np.ndarray
    H_inv: np.ndarray
    g: np.ndarray
    K: np.ndarray
    resets: int = 0

    @classmethod
    def fresh(cls, K0, scale):
        K0 = np.asarray(K0, dtype=float)
        d = K0.size
        return cls(
            H=scale * np.eye(d),
            H_inv=np.eye(d) / scale,
            g=np.zeros(d),
            K=K0,
        )

    def g_norm(self):
        return float(np.linalg.norm(self.g))

    def reset_hessian(self, scale):
        d = self.K.size
        self.H = scale * np.eye(d)
        self.H_inv = np.eye(d) / scale
        self.resets += 1


def rls_improvement_step(
    state, x, utilde, xtilde_next, P_next, cost, B, cfg, cais=None, cs=None
):
    """One recursive least-squares gain update.

    Accumulates H += xx' (x) (R + B'PB) with the inverse maintained by m
    Sherman-Morrison rank-one corrections, forms the instantaneous
    gradient g = x (x) (R utilde + B'P xtilde_next), and takes the Newton
    step on vec(K).  When a certified ellipsoid is supplied the step is
    backtracked until the new gain is constraint-admissible.
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    utilde = np.asarray(utilde, dtype=float).reshape(-1)
    xtilde_next = np.asarray(xtilde_next, dtype=float).reshape(-1)
    B = np.asarray(B, dtype=float)
    P_next = np.asarray(P_next, dtype=float)
    m, n = state.K.shape

    S = cost.R + B.T @ P_next @ B
    S = 0.5 * (S + S.T)
    X = np.outer(x, x)
    H_new = state.H + np.kron(X, S)

    H_inv = state.H_inv.copy()
    sig, Qs = np.linalg.eigh(S)
    ok = True
    for j in range(m):
        if sig[j] <= 0.0:
            continue
        u = np.kron(x, Qs[:, j])
        Hu = H_inv @ u
        denom = 1.0 + sig[j] * float(u @ Hu)
        if denom <= 1e-14:
            ok = False
            break
        H_inv -= (sig[j] / denom) * np.outer(Hu, Hu)
    state_resets = state.resets
    if not ok:
        log.warning("RLS Hessian lost positive definiteness; resetting to scaled identity")
        d = m * n
        H_new = cfg.hessian_init_scale * np.eye(d)
        H_inv = np.eye(d) / cfg.hessian_init_scale
        state_resets += 1

    g = np.kron(x, cost.R @ utilde + B.T @ P_next @ xtilde_next)
    delta = (H_inv @ g).reshape((m, n), order="F")
    K_target = state.K - cfg.step_size * delta
    if cais is not None and cs is not None:
        K_new = backtrack_policy(
            K_target, state.K, cais, cs, beta=cfg.beta, cap=cfg.backtrack_cap
        )
    else:
        K_new = K_target
    return RlsState(H=H_new, H_inv=H_inv, g=g, K=K_new, resets=state_resets)


def theorem2_lambda_floor(lqr, cost):
    """Smallest contraction factor under which the optimal pair stays
    feasible: the largest singular value of
    I - P^{-1/2} (Q + K'RK) P^{-1/2} at the Riccati solution."""
    P = lqr.P_inf
    w, U = np.linalg.eigh(P)
    Pm12 = (U / np.sqrt(w)) @ U.T
    M = cost.Q + lqr.K_inf.T @ cost.R @ lqr.K_inf
    inner = np.eye(P.shape[0]) - Pm12 @ M @ Pm12
    return float(np.linalg.norm(inner, 2))


def theorem2_alpha_window(lqr, alpha1, alpha2):
    """Spectrum-box conditions of the convergence theorem.

    Returns both the literal reading (alpha2 >= smallest singular value,
    as printed) and the conjectured one (alpha2 >= largest singular value,
    the likely intent); callers may warn when only the literal form holds.
    """
    s = np.linalg.svd(lqr.P_inf, compute_uv=False)
    smin, smax = float(s[-1]), float(s[0])
    return {
        "sigma_min": smin,
        "sigma_max": smax,
        "literal": alpha1 <= smin and alpha2 >= smin,
        "conjectured": alpha1 <= smin and alpha2 >= smax,
    }


# ---------------------------------------------------------------------------
# episode driver
# ---------------------------------------------------------------------------


@dataclass
class EpisodeLog:
    """Full record of one constrained-learning episode."""

    mode: str
    states: np.ndarray  # (T+1, n)
    inputs: np.ndarray  # (T, m)
    noises: np.ndarray  # (T, m)
    gains: list  # K applied at each step
    gain_errors: list  # ||K_t - K_inf||_2 per step (None without oracle)
    g_norms: list
    ellipsoids: list  # (t, Ellipsoid), first entry is the initial set at t=0
    active_ids: list  # per-step index into ellipsoids
    learning_instants: list
    skipped_instants: list  # (t, reason)
    constraint_margins: list  # per-step max row value - 1 (<= 0 is safe)
    lyapunov_cycles: list = field(default_factory=list)
    lyapunov_violations: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    converged_at: int = -1

    @property
    def horizon(self):
        return self.inputs.shape[0]

    def compute_lyapunov_cycles(self, rel_tol=1e-9):
        """Per-cycle decrease table of every certified quadratic.

        Cycle boundaries are the successful learning instants plus the
        episode endpoints; for each segment and each certified P the
        start/end values of x'Px are recorded, and increases beyond the
        relative tolerance are collected as violations.
        """
        bounds = [0] + [t for t in self.learning_instants] + [self.horizon]
        bounds = sorted(set(b for b in bounds if 0 <= b <= self.horizon))
        self.lyapunov_cycles = []
        self.lyapunov_violations = []
        for b0, b1 in zip(bounds[:-1], bounds[1:]):
            if b1 <= b0:
                continue
            x0 = self.states[b0]
            x1 = self.states[b1]
            entries = []
            for idx, (t_e, e) in enumerate(self.ellipsoids):
                v0 = float(x0 @ e.P @ x0)
                v1 = float(x1 @ e.P @ x1)
                ok = (v1 - v0) <= rel_tol * max(v0, 1e-12)
                entries.append({"ellipsoid": idx, "start": v0, "end": v1, "ok": ok})
                if not ok:
                    self.lyapunov_violations.append(
                        {"cycle": [b0, b1], "ellipsoid": idx, "start": v0, "end": v1}
                    )
            self.lyapunov_cycles.append({"cycle": [b0, b1], "entries": entries})
        return self.lyapunov_violations

    def write_csv(self, path):
        n = self.states.shape[1]
        m = self.inputs.shape[1] if self.horizon else 0
        cols = (
            ["t"]
            + [f"x{i}" for i in range(n)]
            + [f"u{j}" for j in range(m)]
            + ["gain_error", "ellipsoid_id"]
        )
        lines = [",".join(cols)]
        for t in range(self.horizon):
            err = self.gain_errors[t]
            row = (
                [str(t)]
                + [repr(v) for v in self.states[t]]
                + [repr(v) for v in self.inputs[t]]
                + ["" if err is None else repr(err), str(self.active_ids[t])]
            )
            lines.append(",".join(row))
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")

    def sidecar_dict(self):
        return {
            "mode": self.mode,
            "ellipsoids": [
                {"t": int(t), "P": e.P.tolist(), "rho": e.rho}
                for t, e in self.ellipsoids
            ],
            "learning_instants": [int(t) for t in self.learning_instants],
            "skipped_instants": [[int(t), r] for t, r in self.skipped_instants],
            "lyapunov_cycles": self.lyapunov_cycles,
            "lyapunov_violations": self.lyapunov_violations,
            "converged_at": int(self.converged_at),
            "config": self.config,
        }

    def write_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.sidecar_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")


def _assert_safe(cs, x, u, t, slack=1e-9):
    if cs.r == 0:
        return -np.inf
    vals = cs.evaluate(x, u)
    worst = int(np.argmax(vals))
    margin = float(vals[worst] - 1.0)
    if margin > slack:
        raise SafetyViolationError(
            f"constraint row {worst} violated at t={t}: value {vals[worst]:.9g} > 1",
            t=t,
            row=worst,
            value=float(vals[worst]),
        )
    return margin


def run_constrained_adp(
    sys,
    cost,
    cs,
    K0,
    cais0,
    x0,
    schedule,
    noise,
    cfg,
    horizon,
    mode="data-driven",
    cs_learner=None,
    oracle=None,
    sdp_cfg=None,
    safety_slack=1e-9,
):
    """Run one safety-constrained learning episode.

    ``cs`` is asserted on every visited state/input pair (hard
    SafetyViolationError on breach); ``cs_learner`` (default: ``cs``) is
    the possibly tightened set the learner certifies against, leaving
    margin for the exploration noise.  In data-driven mode the driver
    follows the buffered-timestamp algorithm: samples are stamped while
    the gradient norm is at most epsilon, the evaluation SDP runs at
    schedule instants once the stamped window is persistently exciting,
    and the RLS gain update with admissibility backtracking runs every
    step.  In model-based mode the evaluation SDP uses the true matrices
    and improvement is the exact Riccati-style update, backtracked.
    """
    if mode not in ("data-driven", "model-based"):
        raise ValueError(f"unknown mode {mode!r}")
    if horizon < 0:
        raise ValueError("horizon must be nonnegative")
    cs_learner = cs if cs_learner is None else cs_learner
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    K0 = np.asarray(K0, dtype=float)
    if not contains(cais0, x0):
        raise PreconditionError("initial state lies outside the initial invariant set")
    if not admissibility_check(cais0, K0, cs_learner):
        raise PreconditionError(
            "initial gain is not admissible for the initial invariant set"
        )
    cfg.validate_against(schedule)

    n, m = sys.n, sys.m
    rng = noise.make_rng()
    rls = RlsState.fresh(K0, cfg.hessian_init_scale)
    active = cais0
    ellipsoids = [(0, cais0)]
    buffer = LearningBuffer(sys.B)

    states = np.zeros((horizon + 1, n))
    inputs = np.zeros((horizon, m))
    noises = np.zeros((horizon, m))
    gains, gain_errors, g_norms = [], [], []
    active_ids, margins = [], []
    learning_instants, skipped = [], []
    converged_at = -1

    x = x0.copy()
    states[0] = x
    last_g_norm = 0.0

    for t in range(horizon):
        nu = noise.sample(rng, m, x=x)
        u = rls.K @ x + nu
        margin = _assert_safe(cs, x, u, t, slack=safety_slack)
        x_next = step(sys, x, u)

        gains.append(rls.K.copy())
        if oracle is not None:
            err = float(np.linalg.norm(rls.K - oracle.K_inf, 2))
            gain_errors.append(err)
            if converged_at < 0 and err <= 1e-2:
                converged_at = t
        else:
            gain_errors.append(None)
        g_norms.append(last_g_norm)
        active_ids.append(len(ellipsoids) - 1)
        margins.append(margin)
        inputs[t] = u
        noises[t] = nu
        states[t + 1] = x_next

        if mode == "data-driven" and last_g_norm <= cfg.epsilon:
            buffer.append(x, u, rls.K, nu, x_next)

        # policy evaluation at schedule instants (the instant is t+1: the
        # freshly observed state is the window-end state)
        if schedule.is_instant(t + 1):
            try:
                if mode == "model-based":
                    new_e = evaluate_policy_model_based(
                        sys, cost, rls.K, x_next, cs_learner, cfg,
                        warm=active, sdp_cfg=sdp_cfg,
                    )
                else:
                    if len(buffer) and max(
                        float(x @ x) for x in buffer.xs
                    ) < cfg.min_window_scale:
                        raise PersistenceError(
                            "window signal below the numerical floor"
                        )
                    new_e = evaluate_policy_data_driven(
                        buffer, cost, x_next, rls.K, cs_learner, cfg,
                        warm=active, sdp_cfg=sdp_cfg,
                    )
                active = new_e
                ellipsoids.append((t + 1, new_e))
                learning_instants.append(t + 1)
                buffer.clear()
                rls.reset_hessian(cfg.hessian_init_scale)
                if mode == "model-based":
                    K_star = ideal_improvement(active.P, sys, cost)
                    K_new = backtrack_policy(
                        K_star, rls.K, active, cs_learner,
                        beta=cfg.beta, cap=cfg.backtrack_cap,
                    )
                    if not invariance_check(active, sys, K_new, cfg.lam):
                        log.warning(
                            "improved gain does not contract the certified set at t=%d",
                            t + 1,
                        )
                    rls.K = K_new
            except PersistenceError:
                skipped.append((t + 1, "pe"))
            except EvaluationError as exc:
                skipped.append((t + 1, f"sdp:{exc}"))

        # policy improvement (every step in data-driven mode)
        if mode == "data-driven":
            rls = rls_improvement_step(
                rls,
                x,
                rls.K @ x,
                x_next - sys.B @ nu,
                active.P,
                cost,
                sys.B,
                cfg,
                cais=active,
                cs=cs_learner,
            )
            last_g_norm = rls.g_norm()

        x = x_next

    # terminal state must still satisfy the pure state constraints
    if horizon > 0 and cs.r > 0:
        state_rows = np.all(cs.D == 0.0, axis=1)
        if np.any(state_rows):
            vals = cs.C[state_rows] @ x
            if np.max(vals) - 1.0 > safety_slack:
                raise SafetyViolationError(
                    f"state constraint violated at final t={horizon}",
                    t=horizon,
                    value=float(np.max(vals)),
                )

    episode = EpisodeLog(
        mode=mode,
        states=states,
        inputs=inputs,
        noises=noises,
        gains=gains,
        gain_errors=gain_errors,
        g_norms=g_norms,
        ellipsoids=ellipsoids,
        active_ids=active_ids,
        learning_instants=learning_instants,
        skipped_instants=skipped,
        constraint_margins=margins,
        converged_at=converged_at,
    )
    episode.compute_lyapunov_cycles()
    if episode.lyapunov_violations:
        log.warning(
            "%d Lyapunov-decrease violations recorded", len(episode.lyapunov_violations)
        )
    return episode
