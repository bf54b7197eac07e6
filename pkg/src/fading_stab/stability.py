"""Mean-square stabilizability conditions, evaluated in the log domain.

Every condition has the form ``sum_i log|lambda_i| < -(l / 2n) log E`` where
``E`` is either the stationary expectation of the per-state contraction
factor (i.i.d. fading) or the spectral radius of ``Q^T D`` (Markov fading).
The *margin* is right-hand side minus left-hand side, so all four
conditions share a scale and reduce to one another exactly.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .core import (
    Channel,
    ConvergenceError,
    DimensionMismatch,
    Plant,
    PowerPolicy,
    Problem,
    ValidationError,
)

__all__ = [
    "TDMAConstraintViolated",
    "Condition",
    "ContractionDiagonal",
    "StabilityVerdict",
    "LyapunovResult",
    "state_capacity",
    "contraction_diagonal",
    "log_spectral_radius",
    "spectral_radius",
    "check_iid_scalar",
    "check_iid_vector",
    "check_markov_scalar",
    "check_markov_vector",
    "check",
    "lyapunov_feasible",
    "lambda_max",
    "tdma_residual",
    "tdma_policy",
    "tdma_capacity_gap",
]

BOUNDARY_TOL = 1e-12
TDMA_RTOL = 1e-9


class TDMAConstraintViolated(ValidationError):
    pass


class Condition(enum.Enum):
    IID_SCALAR = "iid_scalar"
    IID_VECTOR = "iid_vector"
    MARKOV_SCALAR = "markov_scalar"
    MARKOV_VECTOR = "markov_vector"


@dataclass(frozen=True)
class ContractionDiagonal:
    """Per-state contraction factors ``d_s``, stored as ``log d_s <= 0``."""

    log_d: np.ndarray

    @property
    def d(self) -> np.ndarray:
        return np.exp(self.log_d)


@dataclass(frozen=True)
class StabilityVerdict:
    stabilizable: bool
    margin: float
    condition_used: Condition

    @property
    def boundary(self) -> bool:
        return abs(self.margin) <= BOUNDARY_TOL


@dataclass(frozen=True)
class LyapunovResult:
    feasible: bool
    V: np.ndarray | None
    method: str


def state_capacity(ch: Channel, power: float, gain: float) -> float:
    """AWGN capacity ``0.5 ln(1 + g^2 P / N)`` in nats per channel use."""
    return 0.5 * float(np.log1p(gain ** 2 * power / ch.noise_var))


def _log_d(channel: Channel, slots: np.ndarray) -> np.ndarray:
    l = slots.shape[1]
    snr = channel.gains_sq[:, None] * slots / channel.noise_var
    return -(channel.block_len / l ** 2) * np.log1p(snr).sum(axis=1)


def contraction_diagonal(ch: Channel, policy: PowerPolicy, plant: Plant) -> ContractionDiagonal:
    """Diagonal of ``D``: ``(N / (g_s^2 P_s + N))^n`` for scalar plants and
    ``prod_i (N / (g_s^2 P_{s,i} + N))^(n / l^2)`` under TDMA for vector plants.
    """
    if policy.num_states != ch.num_states:
        raise DimensionMismatch(f"policy has {policy.num_states} states, channel has {ch.num_states}")
    return ContractionDiagonal(_log_d(ch, policy.slot_powers(plant.dim)))


def log_spectral_radius(log_M: np.ndarray, tol: float = 1e-14, max_iter: int = 100_000) -> float:
    """Log of the spectral radius of a nonnegative matrix given by its log entries.

    Power iteration carried out on log vectors, bracketed by the
    Collatz-Wielandt bounds ``min_i (Mx)_i / x_i <= rho <= max_i (Mx)_i / x_i``.
    After a short unshifted phase the iteration runs on ``M + c I`` (``c`` the
    current upper bound), which has the same Perron vector and no peripheral
    eigenvalues competing with the Perron root, so periodic structure
    converges too.  If the bracket fails to close the dense eigensolver is
    used instead.
    """
    log_M = np.asarray(log_M, dtype=float)
    m = log_M.shape[0]
    if log_M.shape != (m, m):
        raise DimensionMismatch("spectral radius needs a square matrix")
    x = np.zeros(m)
    best = np.inf
    stall = 0
    for it in range(max_iter):
        y = logsumexp(log_M + x[None, :], axis=1)
        ratio = y - x
        lo, hi = ratio.min(), ratio.max()
        if not np.isfinite(hi) or np.isnan(lo):
            break
        width = hi - lo
        if width <= tol * max(1.0, abs(hi)):
            return 0.5 * (lo + hi)
        if width < best * (1 - 1e-3):
            best, stall = width, 0
        else:
            stall += 1
            if stall > 200 and width <= 1e-10:
                return 0.5 * (lo + hi)
            if stall > 1000:
                break  # reducible structure: the bracket never closes
        x = y if it < 64 else np.logaddexp(y, x + hi)
        x = x - x.max()
        if not np.all(np.isfinite(x)):
            break
    shift = np.max(log_M[np.isfinite(log_M)]) if np.any(np.isfinite(log_M)) else 0.0
    eig = np.linalg.eigvals(np.exp(log_M - shift))
    rho = np.max(np.abs(eig))
    if not np.isfinite(rho):
        raise ConvergenceError("spectral radius did not converge")
    return float(np.log(rho) + shift) if rho > 0 else -np.inf


def spectral_radius(M) -> float:
    """Spectral radius of an entrywise nonnegative square matrix."""
    M = np.asarray(M, dtype=float)
    if np.any(M < 0):
        raise ValueError("spectral_radius expects a nonnegative matrix")
    with np.errstate(divide="ignore"):
        return float(np.exp(log_spectral_radius(np.log(M))))


def _log_qtd(Q: np.ndarray, log_d: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(Q.T) + log_d[None, :]


def _log_expectation(problem: Problem, log_d: np.ndarray) -> float:
    f = problem.fading
    if f.is_iid:
        return float(logsumexp(log_d, b=f.data))
    return log_spectral_radius(_log_qtd(f.data, log_d))


def _margin(problem: Problem, log_d: np.ndarray, log_lams: np.ndarray) -> float:
    l = log_lams.size
    n = problem.channel.block_len
    return -(l / (2.0 * n)) * _log_expectation(problem, log_d) - float(np.sum(log_lams))


def tdma_residual(plant: Plant, channel: Channel, policy: PowerPolicy) -> float:
    """Largest spread, over channel states, of ``2 log|lambda_i| + (1/l) log(N / (g_s^2 P_{s,i} + N))``.

    Zero means every state equalises the per-slot growth rates.  States with
    zero gain carry no information and are skipped.
    """
    slots = policy.slot_powers(plant.dim)
    l = plant.dim
    active = channel.gains > 0
    if l == 1 or not np.any(active):
        return 0.0
    snr = channel.gains_sq[active, None] * slots[active] / channel.noise_var
    c = 2 * plant.log_magnitudes[None, :] - np.log1p(snr) / l
    return float(np.max(np.ptp(c, axis=1)))


def _require_tdma(problem: Problem, policy: PowerPolicy, rtol: float) -> None:
    r = tdma_residual(problem.plant, problem.channel, policy)
    if r > rtol:
        raise TDMAConstraintViolated(f"slot powers violate the TDMA balance condition (spread {r:.3g})")


def _verdict(margin: float, cond: Condition) -> StabilityVerdict:
    return StabilityVerdict(bool(margin > BOUNDARY_TOL), float(margin), cond)


def check_iid_scalar(problem: Problem, policy: PowerPolicy) -> StabilityVerdict:
    """Scalar plant, i.i.d. fading:
    ``log|lambda| < -(1/2n) log sum_s pi_s (N / (g_s^2 P_s + N))^n``.
    """
    if problem.dim != 1 or not problem.fading.is_iid:
        raise DimensionMismatch("check_iid_scalar needs a scalar plant and i.i.d. fading")
    log_d = contraction_diagonal(problem.channel, policy, problem.plant).log_d
    return _verdict(_margin(problem, log_d, problem.plant.log_magnitudes), Condition.IID_SCALAR)


def check_iid_vector(problem: Problem, policy: PowerPolicy, rtol: float = TDMA_RTOL) -> StabilityVerdict:
    """Vector plant under TDMA, i.i.d. fading."""
    if not problem.fading.is_iid:
        raise DimensionMismatch("check_iid_vector needs i.i.d. fading")
    _require_tdma(problem, policy, rtol)
    log_d = contraction_diagonal(problem.channel, policy, problem.plant).log_d
    return _verdict(_margin(problem, log_d, problem.plant.log_magnitudes), Condition.IID_VECTOR)


def check_markov_scalar(problem: Problem, policy: PowerPolicy) -> StabilityVerdict:
    """Scalar plant, Markov fading: ``lambda^(2n) rho(Q^T D) < 1``."""
    if problem.dim != 1 or problem.fading.is_iid:
        raise DimensionMismatch("check_markov_scalar needs a scalar plant and Markov fading")
    log_d = contraction_diagonal(problem.channel, policy, problem.plant).log_d
    return _verdict(_margin(problem, log_d, problem.plant.log_magnitudes), Condition.MARKOV_SCALAR)


def check_markov_vector(problem: Problem, policy: PowerPolicy, rtol: float = TDMA_RTOL) -> StabilityVerdict:
    """Vector plant under TDMA, Markov fading:
    ``prod_i |lambda_i|^(2n/l) rho(Q^T D) < 1``.
    """
    if problem.fading.is_iid:
        raise DimensionMismatch("check_markov_vector needs Markov fading")
    _require_tdma(problem, policy, rtol)
    log_d = contraction_diagonal(problem.channel, policy, problem.plant).log_d
    return _verdict(_margin(problem, log_d, problem.plant.log_magnitudes), Condition.MARKOV_VECTOR)


def check(problem: Problem, policy: PowerPolicy) -> StabilityVerdict:
    """Dispatch to the condition matching the plant dimension and fading kind."""
    if problem.fading.is_iid:
        return check_iid_scalar(problem, policy) if problem.dim == 1 else check_iid_vector(problem, policy)
    return check_markov_scalar(problem, policy) if problem.dim == 1 else check_markov_vector(problem, policy)


def lyapunov_feasible(problem: Problem, policy: PowerPolicy) -> LyapunovResult:
    """Search for ``V_s > 0`` with ``V_s - lambda^(2n) d_s sum_r q_rs V_r > 0`` for all ``s``.

    With ``M = lambda^(2n) diag(d) Q^T`` the candidate ``V = (I - M)^{-1} 1``
    satisfies ``V - M V = 1`` and is positive exactly when a witness exists.
    When ``M`` cannot be formed in double precision the Perron vector of
    ``M`` (computed in the log domain) is used as the candidate instead.
    The candidate is always substituted back before declaring feasibility.
    """
    if problem.dim != 1:
        raise DimensionMismatch("lyapunov_feasible needs a scalar plant")
    n = problem.channel.block_len
    Q = problem.fading.transition_matrix
    log_d = contraction_diagonal(problem.channel, policy, problem.plant).log_d
    log_a = 2 * n * problem.plant.log_magnitudes[0] + log_d
    m = Q.shape[0]

    if np.all(np.abs(log_a) < 500):
        M = np.exp(log_a)[:, None] * Q.T
        try:
            V = np.linalg.solve(np.eye(m) - M, np.ones(m))
        except np.linalg.LinAlgError:
            return LyapunovResult(False, None, "solve")
        ok = bool(np.all(V > 0) and np.all(V - M @ V > 0))
        return LyapunovResult(ok, V if ok else None, "solve")

    with np.errstate(divide="ignore"):
        log_M = log_a[:, None] + np.log(Q.T)
    log_V = _log_perron_vector(log_M)
    if log_V is None:
        return LyapunovResult(False, None, "perron")
    # (V - MV)_s > 0  <=>  log V_s > logsumexp_r(log M_sr + log V_r)
    ok = bool(np.all(log_V > logsumexp(log_M + log_V[None, :], axis=1)))
    V = np.exp(log_V - log_V.max())
    return LyapunovResult(ok, V if ok else None, "perron")


def _log_perron_vector(log_M: np.ndarray, max_iter: int = 100_000) -> np.ndarray | None:
    x = np.zeros(log_M.shape[0])
    for it in range(max_iter):
        y = logsumexp(log_M + x[None, :], axis=1)
        ratio = y - x
        if not np.all(np.isfinite(ratio)):
            return None
        if np.ptp(ratio) <= 1e-13 * max(1.0, abs(ratio.max())):
            return x
        # unshifted steps first; the shift only matters for periodic structure
        x = y if it < 256 else np.logaddexp(y, x + ratio.max())
        x -= x.max()
    return x


def lambda_max(problem: Problem, policy: PowerPolicy, tol: float = 1e-12) -> float:
    """Supremal common eigenvalue magnitude the policy can stabilize.

    Bisection on ``log lambda`` using the stability margin as a black box;
    the margin is strictly decreasing in ``log lambda``.  Vector plants must
    have all eigenvalue magnitudes equal.  Returns 1.0 if no unstable plant
    is stabilizable.
    """
    lams = problem.plant.eigenvalues
    if np.ptp(lams) > 0:
        raise ValueError("lambda_max needs a scalar plant or equal eigenvalue magnitudes")
    l = problem.dim
    log_d = contraction_diagonal(problem.channel, policy, problem.plant).log_d

    def margin(t: float) -> float:
        return _margin(problem, log_d, np.full(l, t))

    if margin(0.0) <= 0:
        return 1.0
    lo, hi = 0.0, 1.0
    while margin(hi) > 0:
        lo, hi = hi, 2 * hi
    while hi - lo > tol * max(1.0, hi):
        mid = 0.5 * (lo + hi)
        if margin(mid) > 0:
            lo = mid
        else:
            hi = mid
    return float(np.exp(0.5 * (lo + hi)))


def tdma_policy(plant: Plant, channel: Channel, per_state) -> PowerPolicy:
    """Split each state's average power over the ``l`` TDMA slots so that
    the balance condition holds exactly.

    With ``Pbar_{s,i} = g_s^2 P_{s,i} + N`` the condition fixes the ratios
    ``Pbar_{s,i} / Pbar_{s,1} = (|lambda_i| / |lambda_1|)^(2l)``, and the slot
    average must equal ``per_state[s]``.

    Raises
    ------
    ValueError
        If a slot would need negative power at that average.
    """
    P = np.asarray(per_state, dtype=float)
    l = plant.dim
    if P.size != channel.num_states:
        raise DimensionMismatch("per_state length must equal the number of channel states")
    ratios = np.exp(2 * l * (plant.log_magnitudes - plant.log_magnitudes[0]))
    slots = np.tile(P[:, None], (1, l))
    N = channel.noise_var
    for s, g2 in enumerate(channel.gains_sq):
        if g2 == 0:
            continue
        lead = l * (g2 * P[s] + N) / ratios.sum()
        slot = (lead * ratios - N) / g2
        if np.any(slot < -1e-12 * max(1.0, P[s])):
            raise ValueError(f"average power {P[s]:g} in state {s} is too small for the TDMA profile")
        slots[s] = np.clip(slot, 0.0, None)
    return PowerPolicy(per_slot=slots)


def tdma_capacity_gap(channel: Channel, policy: PowerPolicy, dim: int) -> np.ndarray:
    """Per-state block capacity at the averaged power minus the sum of slot
    capacities, in nats; nonnegative by concavity of the log.
    """
    slots = policy.slot_powers(dim)
    N, n = channel.noise_var, channel.block_len
    g2 = channel.gains_sq[:, None]
    full = 0.5 * n * np.log1p(g2[:, 0] * slots.mean(axis=1) / N)
    split = (0.5 * n / dim) * np.log1p(g2 * slots / N).sum(axis=1)
    return full - split
