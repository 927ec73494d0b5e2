"""Safety-constrained policy iteration for discrete-time linear systems.

The learner iterates between certified policy evaluation (a small SDP
producing an ellipsoidal constraint-admissible invariant set) and tempered
policy improvement, converging to the unconstrained LQR gain while state
and input constraints hold at every step.  Both a model-based and a
data-driven (unknown state matrix) mode are provided, together with a
ground-truth Riccati oracle for verification.
"""

from .adp import (
    AdpConfig,
    EpisodeLog,
    LearningBuffer,
    LearningSchedule,
    RlsState,
    backtrack_policy,
    compute_lambda_bound,
    evaluate_policy_data_driven,
    evaluate_policy_model_based,
    ideal_improvement,
    pe_check,
    rls_improvement_step,
    run_constrained_adp,
    theorem2_alpha_window,
    theorem2_lambda_floor,
)
from .constraints import (
    CertifiedPolicy,
    ConstraintSet,
    Ellipsoid,
    admissibility_check,
    contains,
    invariance_check,
    is_psd_cholesky,
    max_admissible_level,
    synthesize_initial_cais,
)
from .errors import (
    ConvergenceError,
    EvaluationError,
    GenerationError,
    InstabilityError,
    NotStabilizableError,
    PersistenceError,
    PreconditionError,
    SafePiError,
    SafetyViolationError,
    SynthesisError,
)
from .linsys import (
    ClosedLoopSample,
    ExplorationNoise,
    LinearSystem,
    SimState,
    random_controllable_system,
    simulate_closed_loop,
    step,
)
from .lqr import (
    CostSpec,
    LqrSolution,
    dare_residual,
    hewer_iterate,
    lyapunov_evaluate,
    policy_improvement,
    solve_dare,
)
from .sdp import SdpConfig, SdpProblem, SdpSolution, project_psd, solve, sym_basis

__version__ = "0.1.0"
