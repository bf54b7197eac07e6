"""Channel-state process: stationary distribution, average power, sample paths."""

from __future__ import annotations

import numpy as np

from .core import ConvergenceError, DimensionMismatch, FadingProcess, PowerPolicy

__all__ = ["stationary_distribution", "average_power", "sample_path", "trial_rng"]

RESIDUAL_TOL = 1e-12


def _residual(pi: np.ndarray, Q: np.ndarray) -> float:
    return float(np.max(np.abs(pi @ Q - pi)))


def stationary_distribution(f: FadingProcess, max_iter: int = 100_000) -> np.ndarray:
    """Stationary distribution of the channel-state process.

    For i.i.d. fading this is the probability vector itself.  For a Markov
    chain, ``(Q^T - I) pi = 0`` is solved together with ``sum(pi) = 1``; if the
    residual stays above 1e-12 the lazy chain ``(I + Q) / 2`` is power-iterated.

    Raises
    ------
    ConvergenceError
        If neither route reaches a residual below 1e-12.
    """
    if f.is_iid:
        return np.array(f.data)
    Q = np.array(f.data)
    m = Q.shape[0]
    A = np.vstack([Q.T - np.eye(m), np.ones((1, m))])
    b = np.zeros(m + 1)
    b[-1] = 1.0
    pi, *_ = np.linalg.lstsq(A, b, rcond=None)
    pi = np.clip(pi, 0.0, None)
    pi /= pi.sum()
    if _residual(pi, Q) < RESIDUAL_TOL:
        return pi

    lazy = 0.5 * (np.eye(m) + Q)
    x = np.full(m, 1.0 / m)
    for _ in range(max_iter):
        x = x @ lazy
        x /= x.sum()
        if _residual(x, Q) < RESIDUAL_TOL:
            return x
    raise ConvergenceError("stationary distribution did not converge", incumbent=x)


def average_power(pi, policy: PowerPolicy, dim: int = 1) -> float:
    """Long-run average transmit power ``sum_s pi_s P_s``.

    For vector plants the per-state power is the mean over the ``dim`` TDMA
    slots, i.e. ``sum_s sum_i pi_s P_{s,i} / dim``.
    """
    pi = np.asarray(pi, dtype=float)
    if pi.size != policy.num_states:
        raise DimensionMismatch(f"distribution has {pi.size} states, policy has {policy.num_states}")
    slots = policy.slot_powers(dim)
    return float(pi @ slots.mean(axis=1))


def trial_rng(seed: int, index: int) -> np.random.Generator:
    """Independent generator for trial ``index`` under master ``seed``.

    The stream depends only on ``(seed, index)``, so results do not depend on
    the order or grouping in which trials are run.
    """
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))


def sample_path(f: FadingProcess, num_blocks: int, seed: int | np.random.Generator = 0,
                start_state: int | None = None) -> np.ndarray:
    """Draw ``num_blocks`` channel states (0-based indices).

    Markov paths start from the stationary distribution unless
    ``start_state`` is given.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    m = f.num_states
    if num_blocks <= 0:
        return np.zeros(0, dtype=np.int64)
    if f.is_iid:
        path = rng.choice(m, size=num_blocks, p=f.data)
        if start_state is not None:
            path[0] = start_state
        return path.astype(np.int64)

    cdf = np.cumsum(f.data, axis=1)
    cdf[:, -1] = 1.0
    u = rng.random(num_blocks)
    # next_state[j][s]: successor of s when the j-th uniform is u[j]
    next_state = np.stack([np.searchsorted(row, u, side="right") for row in cdf], axis=1).tolist()
    if start_state is None:
        pi0 = np.cumsum(stationary_distribution(f))
        pi0[-1] = 1.0
        state = int(np.searchsorted(pi0, u[0], side="right"))
    else:
        state = int(start_state)
    path = [state]
    for j in range(1, num_blocks):
        state = next_state[j][state]
        path.append(state)
    return np.asarray(path, dtype=np.int64)
