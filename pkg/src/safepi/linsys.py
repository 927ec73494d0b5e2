"""Discrete-time LTI plants, closed-loop simulation, and random test systems.

The plant model is x_{t+1} = A x_t + B u_t with dense A (n x n) and
B (n x m).  Time is a nonnegative integer step index.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import GenerationError


def _as_matrix(M, name):
    M = np.asarray(M, dtype=float)
    if M.ndim != 2:
        raise ValueError(f"{name} must be a 2-D matrix, got ndim={M.ndim}")
    if not np.all(np.isfinite(M)):
        raise ValueError(f"{name} contains non-finite entries")
    return M


def _as_vector(v, length, name):
    v = np.asarray(v, dtype=float).reshape(-1)
    if v.shape[0] != length:
        raise ValueError(f"{name} must have length {length}, got {v.shape[0]}")
    return v


@dataclass(frozen=True)
class LinearSystem:
    """A discrete-time plant (A, B) with dimension metadata."""

    A: np.ndarray
    B: np.ndarray

    def __post_init__(self):
        A = _as_matrix(self.A, "A")
        B = _as_matrix(self.B, "B")
        if A.shape[0] != A.shape[1]:
            raise ValueError(f"A must be square, got {A.shape}")
        if B.shape[0] != A.shape[0]:
            raise ValueError(f"B must have {A.shape[0]} rows, got {B.shape[0]}")
        if A.shape[0] < 1 or B.shape[1] < 1:
            raise ValueError("state and input dimensions must be >= 1")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)

    @property
    def n(self):
        return self.A.shape[0]

    @property
    def m(self):
        return self.B.shape[1]

    def controllability_matrix(self):
        """[B, AB, ..., A^{n-1} B], shape (n, n*m)."""
        blocks = [self.B]
        for _ in range(self.n - 1):
            blocks.append(self.A @ blocks[-1])
        return np.hstack(blocks)

    def is_controllable(self, rtol=1e-9):
        """Kalman rank test via SVD with a relative threshold."""
        s = np.linalg.svd(self.controllability_matrix(), compute_uv=False)
        if s[0] == 0.0:
            return False
        return int(np.sum(s > rtol * s[0])) == self.n

    def to_json(self):
        return json.dumps({"A": self.A.tolist(), "B": self.B.tolist()})

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        return cls(np.array(doc["A"], dtype=float), np.array(doc["B"], dtype=float))


@dataclass
class SimState:
    """Current state of a simulated trajectory."""

    x: np.ndarray
    t: int = 0

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float).reshape(-1)
        if self.t < 0:
            raise ValueError("time index must be nonnegative")


@dataclass
class ExplorationNoise:
    """Bounded symmetric-uniform input perturbation.

    Every sample satisfies ||nu||_inf <= amplitude.  When ``taper_radius``
    is positive the amplitude is additionally scaled by
    min(1, ||x|| / taper_radius), so the perturbation decays with the state
    instead of holding the closed loop at a noise floor; the bound above
    still holds.
    """

    amplitude: float
    seed: int = 0
    distribution: str = "uniform-symmetric"
    taper_radius: float = 0.0

    def __post_init__(self):
        if self.amplitude < 0:
            raise ValueError("amplitude must be nonnegative")
        if self.distribution != "uniform-symmetric":
            raise ValueError(f"unsupported distribution {self.distribution!r}")
        if self.taper_radius < 0:
            raise ValueError("taper_radius must be nonnegative")

    def make_rng(self):
        return np.random.default_rng(self.seed)

    def sample(self, rng, m, x=None):
        """Draw one m-vector perturbation; reproducible given the rng state."""
        nu = rng.uniform(-self.amplitude, self.amplitude, size=m)
        if self.taper_radius > 0.0 and x is not None:
            nu *= min(1.0, float(np.linalg.norm(x)) / self.taper_radius)
        return nu


@dataclass
class ClosedLoopSample:
    """One simulated transition under u = K x + nu."""

    x: np.ndarray
    u: np.ndarray
    nu: np.ndarray
    x_next: np.ndarray
    t: int = 0


def step(sys, x, u):
    """One plant step A x + B u with strict dimension checks."""
    x = _as_vector(x, sys.n, "x")
    u = _as_vector(u, sys.m, "u")
    return sys.A @ x + sys.B @ u


def simulate_closed_loop(sys, K, x0, noise, horizon):
    """Simulate u_t = K x_t + nu_t for ``horizon`` steps.

    Returns a list of ClosedLoopSample.  The noise sequence is drawn from a
    fresh generator seeded by ``noise.seed``, so identical arguments yield
    bit-identical trajectories.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    K = _as_matrix(K, "K")
    if K.shape != (sys.m, sys.n):
        raise ValueError(f"K must be {(sys.m, sys.n)}, got {K.shape}")
    x = _as_vector(x0, sys.n, "x0")
    rng = noise.make_rng()
    out = []
    for t in range(horizon):
        nu = noise.sample(rng, sys.m, x=x)
        u = K @ x + nu
        x_next = step(sys, x, u)
        out.append(ClosedLoopSample(x=x, u=u, nu=nu, x_next=x_next, t=t))
        x = x_next
    return out


def random_controllable_system(n, m, spectral_radius_range, seed, max_attempts=1000):
    """Draw a controllable system with spectral radius of A in the given range.

    A is sampled with i.i.d. standard normal entries and rescaled so its
    spectral radius lands at a point (uniform in the range) of
    ``spectral_radius_range``; B is i.i.d. normal.  Candidates failing the
    Kalman rank test are rejected.
    """
    lo, hi = float(spectral_radius_range[0]), float(spectral_radius_range[1])
    if not (0 < lo <= hi):
        raise ValueError("spectral radius range must satisfy 0 < lo <= hi")
    if n < 1 or m < 1:
        raise ValueError("n and m must be >= 1")
    rng = np.random.default_rng(seed)
    for _ in range(max_attempts):
        A = rng.standard_normal((n, n))
        radius = max(abs(np.linalg.eigvals(A)))
        if radius == 0.0:
            continue
        target = rng.uniform(lo, hi)
        A *= target / radius
        B = rng.standard_normal((n, m))
        sys = LinearSystem(A, B)
        if sys.is_controllable():
            return sys
    raise GenerationError(
        f"no controllable system found in {max_attempts} attempts "
        f"(n={n}, m={m}, range=({lo}, {hi}))"
    )
