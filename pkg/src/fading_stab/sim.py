"""Monte Carlo closed loop with the analog feedback (Elias-type) coding scheme.

Encoder and decoder share the channel state and the design variance
``v(k) = E[eps^2(k) | channel path]`` of the decoder's estimate of the
initial state.  Each channel use sends the current error scaled to the
scheduled power, and the decoder applies the linear MMSE correction::

    X(k)      = sqrt(P / v(k-1)) * eps(k-1)
    Y(k)      = g X(k) + W(k)
    Zhat0(k)  = Zhat0(k-1) - (E[Y eps] / E[Y^2]) Y(k)
    v(k)      = v(k-1) * N / (g^2 P + N)

The first informative use of each component instead sends the centred
initial state and decodes it by channel inversion, giving
``v = sigma^2 N / (g^2 P)``.  Vector plants share every block between their
``l`` components in equal TDMA slots.

After a few blocks ``eps`` is far below the resolution of ``Zhat0 - Z(0)``
in double precision, so the error is propagated directly, in units of its
design standard deviation (``e = eps / sqrt(v)``, exactly unit variance),
with ``log v`` tracked alongside.  The controller ``U(k) = K Zbar(k)`` with
``Zbar(k) = A^k Zhat0(k) + sum_j A^(k-j) B U(j-1)`` is applied through the
identity ``Zbar(k) = Z(k) + A^k eps(k)``.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from math import comb

import numpy as np
from scipy.special import logsumexp
from scipy.stats import norm

from .core import PowerPolicy, Problem
from .fading import sample_path, stationary_distribution, trial_rng

__all__ = [
    "NonSchurGain",
    "InsufficientTrials",
    "NumericalBlowup",
    "SimTrace",
    "ConsistencyReport",
    "alpha_recursion",
    "closed_loop_matrices",
    "deadbeat_gain",
    "run_closed_loop",
    "empirical_vs_analytic",
    "write_trace_csv",
]

OVERFLOW_GUARD = 1e150
MIN_TRIALS = 1000


class NonSchurGain(ValueError):
    pass


class InsufficientTrials(ValueError):
    pass


class NumericalBlowup(RuntimeWarning):
    """Trials whose state crossed the overflow guard; reported, never raised."""


@dataclass
class SimTrace:
    """Per-block and per-step statistics of a Monte Carlo run.

    Block-indexed arrays have shape ``(J,)`` for scalar plants and ``(J, l)``
    for vector plants (one column per component).  ``log_alpha_*`` hold the
    natural logs of the estimation-error variances at the end of each block;
    they stay finite where the variances themselves underflow.
    """

    block_len: int
    dim: int
    trials: int
    states: np.ndarray               # (trials, J) channel states
    log_alpha_empirical: np.ndarray  # mean of eps^2 over trials
    log_alpha_path: np.ndarray       # mean of the path-conditional design variance
    log_alpha_marginal: np.ndarray   # expectation over the fading process
    alpha_ratio_mean: np.ndarray     # mean of eps^2 / v over trials (1 in expectation)
    alpha_ratio_se: np.ndarray
    mean_square_state: np.ndarray    # (steps + 1,) E[|Z(k)|^2] over surviving trials
    error_mean: np.ndarray           # (steps, l) mean of eps(k) / sqrt(v(k))
    error_se: np.ndarray
    realized_power: np.ndarray       # (steps,) mean X(k)^2
    scheduled_power: np.ndarray      # (steps,) mean scheduled power
    power_ratio_mean: np.ndarray     # (steps,) mean X^2 / P over trials with P > 0
    power_ratio_se: np.ndarray
    diverged: np.ndarray             # (trials,) overflow guard tripped
    meta: dict = field(default_factory=dict)

    @property
    def num_blocks(self) -> int:
        return int(self.states.shape[1])

    @property
    def divergence_fraction(self) -> float:
        return float(np.mean(self.diverged))

    @property
    def alpha_empirical(self) -> np.ndarray:
        return np.exp(self.log_alpha_empirical)

    @property
    def alpha_analytic(self) -> np.ndarray:
        return np.exp(self.log_alpha_path)

    def block_mean_square(self) -> np.ndarray:
        """``E[|Z|^2]`` at the first step after each block."""
        n = self.block_len
        return self.mean_square_state[n::n][: self.num_blocks]

    def block_realized_power(self) -> np.ndarray:
        n = self.block_len
        return self.realized_power[: n * self.num_blocks].reshape(self.num_blocks, n).mean(axis=1)


@dataclass(frozen=True)
class ConsistencyReport:
    confidence: float
    z: float
    max_alpha_z: float
    max_error_z: float
    max_power_z: float
    max_relative_deviation: float
    alpha_within_bands: bool
    unbiased: bool
    power_within_bands: bool

    @property
    def consistent(self) -> bool:
        return self.alpha_within_bands and self.unbiased and self.power_within_bands


def _slot_layout(problem: Problem):
    n, l = problem.channel.block_len, problem.dim
    return n // l


def _use_factors(problem: Problem, policy: PowerPolicy):
    """Per state and component: SNR of one use, and the log of the per-use
    contraction ``N / (g^2 P + N)``."""
    slots = policy.slot_powers(problem.dim)
    snr = problem.channel.gains_sq[:, None] * slots / problem.channel.noise_var
    return snr, -np.log1p(snr)


def alpha_recursion(problem: Problem, policy: PowerPolicy, path=None, num_blocks: int | None = None,
                    start_distribution=None, log: bool = False) -> np.ndarray:
    """Error variance of the coding scheme at the end of each block.

    With ``path`` (a sequence of channel states) the recursion is the
    path-conditional one, ``alpha(j) = alpha(j-1) (N / (g^2 P + N))^(n/l)``
    after the initialising block.  Without it the expectation over the
    fading process is returned for ``num_blocks`` blocks; Markov chains start
    from ``start_distribution`` (default: stationary).

    Returns shape ``(J,)`` for scalar plants and ``(J, l)`` otherwise; with
    ``log=True`` the natural log is returned, which never underflows.
    """
    snr, log_c = _use_factors(problem, policy)
    uses = _slot_layout(problem)
    sigma2 = np.asarray(problem.plant.init_var)
    informative = snr > 0
    with np.errstate(divide="ignore"):
        # first informative block: channel inversion then uses-1 MMSE steps
        log_init = np.where(informative, -np.log(np.where(informative, snr, 1.0)) + (uses - 1) * log_c,
                            0.0) + np.log(sigma2)[None, :]
    log_block = uses * log_c

    if path is not None:
        path = np.asarray(path, dtype=np.int64)
        J, l = path.size, problem.dim
        out = np.empty((J, l))
        cur = np.log(sigma2).copy()
        started = np.zeros(l, dtype=bool)
        for j, s in enumerate(path):
            start_now = ~started & informative[s]
            cur = np.where(start_now, log_init[s], np.where(started, cur + log_block[s], cur))
            started |= informative[s]
            out[j] = cur
    else:
        if num_blocks is None:
            raise ValueError("num_blocks is required when no path is given")
        f = problem.fading
        Q = f.transition_matrix
        p0 = stationary_distribution(f) if start_distribution is None else np.asarray(start_distribution)
        J, l = num_blocks, problem.dim
        out = np.empty((J, l))
        with np.errstate(divide="ignore"):
            logQ = np.log(Q)
            log_p0 = np.log(p0)
        for i in range(l):
            inf_i = informative[:, i]
            # a: log E[eps^2 1{started, state=s}], b: log P(not started, state=s) sigma^2
            a = np.where(inf_i, log_p0 + log_init[:, i], -np.inf)
            b = np.where(inf_i, -np.inf, log_p0 + np.log(sigma2[i]))
            out[0, i] = logsumexp(np.concatenate([a, b]))
            for j in range(1, J):
                via_a = logsumexp(logQ + a[:, None], axis=0) + log_block[:, i]
                via_b = logsumexp(logQ + b[:, None], axis=0)
                a = np.where(inf_i, np.logaddexp(via_a, via_b + log_init[:, i] - np.log(sigma2[i])),
                             via_a)
                b = np.where(inf_i, -np.inf, via_b)
                out[j, i] = logsumexp(np.concatenate([a, b]))
    if problem.dim == 1:
        out = out[:, 0]
    return out if log else np.exp(out)


def closed_loop_matrices(problem: Problem):
    """Real Jordan-form ``A`` and input vector ``B`` used by the simulator.

    Only magnitudes are known, so eigenvalue signs are a free choice: Jordan
    blocks sharing a magnitude get alternating signs, which keeps ``(A, B)``
    controllable with a single input.  ``B`` is all ones.
    """
    plant = problem.plant
    lam = np.array(plant.eigenvalues, dtype=float)
    start, seen = 0, {}
    for b in plant.jordan_blocks:
        mag = float(lam[start])
        count = seen.get(mag, 0)
        if count >= 2:
            raise NonSchurGain(f"three or more Jordan blocks share |lambda|={mag}; "
                               "a single input cannot control them")
        seen[mag] = count + 1
        if count == 1:
            lam[start:start + b] *= -1
        start += b
    A = np.diag(lam)
    start = 0
    for b in plant.jordan_blocks:
        for i in range(start, start + b - 1):
            A[i, i + 1] = 1.0
        start += b
    B = np.ones((plant.dim, 1))
    return A, B


def deadbeat_gain(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Ackermann gain placing every eigenvalue of ``A + B K`` at zero."""
    l = A.shape[0]
    C = np.hstack([np.linalg.matrix_power(A, i) @ B for i in range(l)])
    if np.linalg.matrix_rank(C) < l:
        raise NonSchurGain("(A, B) is not controllable")
    e = np.zeros((1, l))
    e[0, -1] = 1.0
    return -e @ np.linalg.solve(C, np.linalg.matrix_power(A, l))


def _power_times_error(A: np.ndarray, k: int, e: np.ndarray, log_sd: np.ndarray) -> np.ndarray:
    """``A^k eps`` for all trials, with ``eps = e * exp(log_sd)`` never formed.

    ``A`` is Jordan form: per block ``A^k = lambda^k sum_p C(k,p) lambda^-p N^p``.
    """
    out = np.zeros_like(e)
    lam = np.diag(A)
    l = A.shape[0]
    i = 0
    while i < l:
        j = i
        while j + 1 < l and A[j, j + 1] != 0:
            j += 1
        size = j - i + 1
        mag, sign = abs(lam[i]), np.sign(lam[i])
        for r in range(i, j + 1):
            acc = np.zeros(e.shape[0])
            for p in range(0, min(size - (r - i), k + 1)):
                coef = comb(k, p) * (sign ** (k - p))
                acc += coef * e[:, r + p] * np.exp((k - p) * math.log(mag) + log_sd[:, r + p])
            out[:, r] = acc
        i = j + 1
    return out


def _draw_trials(problem: Problem, seed: int, indices, J: int, steps: int, start_state):
    l = problem.dim
    mu = np.asarray(problem.plant.init_mean)
    sd = np.sqrt(problem.plant.init_var)
    sn = math.sqrt(problem.channel.noise_var)
    z0 = np.empty((len(indices), l))
    w = np.empty((len(indices), steps))
    paths = np.empty((len(indices), J), dtype=np.int64)
    for row, idx in enumerate(indices):
        rng = trial_rng(seed, idx)
        z0[row] = mu + sd * rng.standard_normal(l)
        paths[row] = sample_path(problem.fading, J, rng, start_state)
        w[row] = sn * rng.standard_normal(steps)
    return z0, w, paths


def _workers(workers: int | None) -> int:
    if workers is not None:
        return max(1, int(workers))
    env = os.environ.get("FADING_STAB_THREADS")
    return max(1, int(env)) if env else 1


def run_closed_loop(problem: Problem, policy: PowerPolicy, controller_gain=None, trials: int = 1000,
                    horizon_blocks: int = 20, seed: int = 0, start_state: int | None = None,
                    workers: int | None = None) -> SimTrace:
    """Simulate ``trials`` independent closed-loop runs over ``horizon_blocks`` blocks.

    Each trial draws its initial state (Gaussian with the plant's mean and
    variance), channel path and channel noise from its own stream
    ``trial_rng(seed, index)``, so the trace does not depend on ``workers``.
    Trials whose state magnitude exceeds 1e150 are stopped and counted in
    ``diverged``.

    Raises
    ------
    NonSchurGain
        If ``A + B K`` is not Schur stable.
    """
    n, l = problem.channel.block_len, problem.dim
    N = problem.channel.noise_var
    J = int(horizon_blocks)
    steps = n * J
    uses = _slot_layout(problem)
    A, B = closed_loop_matrices(problem)
    K = deadbeat_gain(A, B) if controller_gain is None else np.atleast_2d(np.asarray(controller_gain, float))
    if K.shape != (1, l):
        raise NonSchurGain(f"controller gain must have shape (1, {l})")
    if np.max(np.abs(np.linalg.eigvals(A + B @ K))) >= 1:
        raise NonSchurGain("A + B K is not Schur stable")

    nw = _workers(workers)
    chunks = np.array_split(np.arange(trials), nw)
    if nw > 1:
        with ThreadPoolExecutor(nw) as pool:
            parts = list(pool.map(lambda c: _draw_trials(problem, seed, c, J, steps, start_state), chunks))
    else:
        parts = [_draw_trials(problem, seed, chunks[0], J, steps, start_state)]
    z0 = np.concatenate([p[0] for p in parts])
    w = np.concatenate([p[1] for p in parts])
    paths = np.concatenate([p[2] for p in parts])

    g = problem.channel.gains[paths]            # (T, J)
    slots = policy.slot_powers(l)               # (m, l)
    mu = np.asarray(problem.plant.init_mean)
    var0 = np.asarray(problem.plant.init_var)

    e = (mu - z0) / np.sqrt(var0)               # normalised error before any information
    log_v = np.tile(np.log(var0), (trials, 1))
    started = np.zeros((trials, l), dtype=bool)
    Z = z0.copy()
    Acl = A + B @ K
    BK = B @ K
    alive = np.ones(trials, dtype=bool)

    ms = np.empty(steps + 1)
    ms[0] = np.mean(np.sum(Z ** 2, axis=1))
    err_mean = np.zeros((steps, l))
    err_se = np.zeros((steps, l))
    realized = np.empty(steps)
    scheduled = np.empty(steps)
    pr_mean = np.full(steps, np.nan)
    pr_se = np.full(steps, np.nan)
    la_emp = np.empty((J, l))
    la_path = np.empty((J, l))
    ar_mean = np.empty((J, l))
    ar_se = np.empty((J, l))
    rows = np.arange(trials)

    for k in range(steps):
        j, i = divmod(k, n)
        comp = i // uses
        s = paths[:, j]
        P = slots[s, comp]
        gk = g[:, j]
        snr = gk ** 2 * P / N
        informative = snr > 0
        wk = w[:, k]

        ec = e[:, comp]
        first = informative & ~started[:, comp]
        cont = informative & started[:, comp]
        # transmitted symbol: centred initial state before initialisation, error afterwards
        x = np.where(started[:, comp], np.sqrt(P) * ec, -np.sqrt(P) * ec)
        realized[k] = np.mean(x ** 2)
        scheduled[k] = np.mean(P)
        pos = P > 0
        if np.any(pos):
            ratio = x[pos] ** 2 / P[pos]
            pr_mean[k] = ratio.mean()
            pr_se[k] = ratio.std(ddof=1) / math.sqrt(ratio.size) if ratio.size > 1 else np.inf

        with np.errstate(divide="ignore", invalid="ignore"):
            keep = np.sqrt(1.0 / (1.0 + snr))
            gain = np.sqrt(snr / (1.0 + snr)) / math.sqrt(N)
            new_cont = ec * keep - gain * wk
            new_first = wk / math.sqrt(N)
            lv = log_v[:, comp]
            log_v[:, comp] = np.where(cont, lv - np.log1p(snr),
                                      np.where(first, np.log(var0[comp]) - np.log(np.where(first, snr, 1.0)), lv))
        e[:, comp] = np.where(cont, new_cont, np.where(first, new_first, ec))
        started[:, comp] |= informative

        err_mean[k] = e.mean(axis=0)
        err_se[k] = e.std(axis=0, ddof=1) / math.sqrt(trials)

        # Zbar(k) = Z(k) + A^k eps(k);  Z(k+1) = (A + BK) Z(k) + BK A^k eps(k)
        drive = _power_times_error(A, k, e, 0.5 * log_v)
        with np.errstate(over="ignore", invalid="ignore"):
            Z = Z @ Acl.T + drive @ BK.T
        blown = alive & ~np.all(np.abs(Z) <= OVERFLOW_GUARD, axis=1)
        if np.any(blown):
            alive &= ~blown
            Z[~alive] = np.nan
        ms[k + 1] = np.mean(np.sum(Z[alive] ** 2, axis=1)) if np.any(alive) else np.nan

        if i == n - 1:
            la_emp[j] = logsumexp(2 * np.log(np.abs(e) + 1e-300) + log_v, axis=0) - math.log(trials)
            la_path[j] = logsumexp(log_v, axis=0) - math.log(trials)
            r = e ** 2
            ar_mean[j] = r.mean(axis=0)
            ar_se[j] = r.std(axis=0, ddof=1) / math.sqrt(trials)

    marginal = alpha_recursion(problem, policy, num_blocks=J, log=True,
                               start_distribution=None if start_state is None else np.eye(problem.num_states)[start_state])
    squeeze = (lambda a: a[:, 0]) if l == 1 else (lambda a: a)
    return SimTrace(
        block_len=n, dim=l, trials=trials, states=paths,
        log_alpha_empirical=squeeze(la_emp), log_alpha_path=squeeze(la_path),
        log_alpha_marginal=marginal, alpha_ratio_mean=squeeze(ar_mean), alpha_ratio_se=squeeze(ar_se),
        mean_square_state=ms, error_mean=err_mean, error_se=err_se,
        realized_power=realized, scheduled_power=scheduled,
        power_ratio_mean=pr_mean, power_ratio_se=pr_se, diverged=~alive,
        meta={"seed": seed, "gain": K.tolist(), "horizon_blocks": J, "rows": rows.size},
    )


def empirical_vs_analytic(trace: SimTrace, confidence: float = 0.99) -> ConsistencyReport:
    """Compare a trace with the analytic recursion inside simultaneous confidence bands.

    For every trial ``eps^2 / v`` is chi-square with one degree of freedom
    given the channel path, so its trial average must lie within
    ``z * se`` of 1 at every block; likewise the normalised error must
    average to 0 at every step and ``X^2 / P`` to 1.  ``z`` is Bonferroni
    corrected over all checks so ``confidence`` holds jointly.  The
    maximum relative deviation of the empirical error variance from the
    path-averaged analytic one is reported alongside.

    Raises
    ------
    InsufficientTrials
        With fewer than 1000 trials.
    """
    if trace.trials < MIN_TRIALS:
        raise InsufficientTrials(f"{trace.trials} trials; at least {MIN_TRIALS} are needed")
    a_mean = np.atleast_1d(trace.alpha_ratio_mean)
    a_se = np.atleast_1d(trace.alpha_ratio_se)
    pw = np.isfinite(trace.power_ratio_mean)
    n_checks = a_mean.size + trace.error_mean.size + int(pw.sum())
    z = float(norm.ppf(1 - (1 - confidence) / (2 * n_checks)))

    def zmax(dev, se):
        with np.errstate(divide="ignore", invalid="ignore"):
            q = np.abs(dev) / se
        q = np.where(dev == 0, 0.0, q)
        return float(np.max(q)) if q.size else 0.0

    za = zmax(a_mean - 1.0, a_se)
    ze = zmax(trace.error_mean, trace.error_se)
    zp = zmax(trace.power_ratio_mean[pw] - 1.0, trace.power_ratio_se[pw])
    rel = float(np.max(np.abs(np.expm1(trace.log_alpha_empirical - trace.log_alpha_path))))
    return ConsistencyReport(confidence, z, za, ze, zp, rel, za <= z, ze <= z, zp <= z)


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


def write_trace_csv(trace: SimTrace, path, config: dict | None = None) -> None:
    """Per-block CSV: block_index, state, alpha_analytic, alpha_empirical,
    mean_square_state, realized_power.

    ``state`` is the channel state of trial 0; for vector plants the alpha
    columns hold the sum over components.  A ``#`` header line carries the
    hash of the resolved configuration.
    """
    la = trace.log_alpha_path if trace.dim == 1 else logsumexp(trace.log_alpha_path, axis=1)
    le = trace.log_alpha_empirical if trace.dim == 1 else logsumexp(trace.log_alpha_empirical, axis=1)
    msq = trace.block_mean_square()
    pw = trace.block_realized_power()
    with open(path, "w", newline="") as fh:
        if config is not None:
            fh.write(f"# config_sha256={config_hash(config)}\n")
        wr = csv.writer(fh)
        wr.writerow(["block_index", "state", "alpha_analytic", "alpha_empirical",
                     "mean_square_state", "realized_power"])
        for j in range(trace.num_blocks):
            wr.writerow([j, int(trace.states[0, j]), repr(float(np.exp(la[j]))), repr(float(np.exp(le[j]))),
                         repr(float(msq[j])), repr(float(pw[j]))])
