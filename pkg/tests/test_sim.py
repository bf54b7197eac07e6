import csv
import itertools
import math

import numpy as np
import pytest

from fading_stab import (Channel, FadingProcess, InsufficientTrials, NonSchurGain, Plant, PowerPolicy,
                         Problem, alpha_recursion, closed_loop_matrices, deadbeat_gain,
                         empirical_vs_analytic, run_closed_loop, sample_path, tdma_policy, trial_rng,
                         write_trace_csv)

from conftest import scalar_problem


def direct_closed_loop(problem, policy, trials, blocks, seed, K=None):
    """Literal scheme: explicit decoder estimate, encoder error, closed-form controller sum."""
    n, l = problem.channel.block_len, problem.dim
    N = problem.channel.noise_var
    uses = n // l
    A, B = closed_loop_matrices(problem)
    K = deadbeat_gain(A, B) if K is None else K
    mu, var0 = problem.plant.init_mean, problem.plant.init_var
    slots = policy.slot_powers(l)
    steps = n * blocks
    ms = np.zeros(steps + 1)
    err2 = np.zeros((blocks, l))
    for t in range(trials):
        rng = trial_rng(seed, t)
        z0 = mu + np.sqrt(var0) * rng.standard_normal(l)
        path = sample_path(problem.fading, blocks, rng)
        w = math.sqrt(N) * rng.standard_normal(steps)
        zhat = mu.astype(float).copy()
        v = var0.astype(float).copy()
        started = np.zeros(l, bool)
        Z = z0.copy()
        us = []
        ms[0] += Z @ Z
        for k in range(steps):
            j, i = divmod(k, n)
            c = i // uses
            s = path[j]
            g, P = problem.channel.gains[s], slots[s, c]
            if g * g * P > 0:
                if not started[c]:
                    x = math.sqrt(P / var0[c]) * (z0[c] - mu[c])
                    y = g * x + w[k]
                    zhat[c] = mu[c] + y / (g * math.sqrt(P / var0[c]))
                    v[c] = var0[c] * N / (g * g * P)
                    started[c] = True
                else:
                    eps = zhat[c] - z0[c]
                    x = math.sqrt(P / v[c]) * eps
                    y = g * x + w[k]
                    zhat[c] -= g * math.sqrt(P * v[c]) / (g * g * P + N) * y
                    v[c] *= N / (g * g * P + N)
            zbar = np.linalg.matrix_power(A, k) @ zhat
            for jj in range(1, k + 1):
                zbar = zbar + np.linalg.matrix_power(A, k - jj) @ B[:, 0] * us[jj - 1]
            u = float((K @ zbar)[0])
            us.append(u)
            Z = A @ Z + B[:, 0] * u
            ms[k + 1] += Z @ Z
            if i == n - 1:
                err2[j] += (zhat - z0) ** 2
    return ms / trials, err2 / trials


@pytest.mark.parametrize("case", ["scalar", "markov", "vector", "jordan"])
def test_matches_direct_implementation(case):
    if case == "scalar":
        p = Problem(Plant([1.3], init_mean=[0.7], init_var=[2.0]), Channel([1.0, 0.5, 0.0], 1.0, 4),
                    FadingProcess.iid([0.4, 0.4, 0.2]))
        pol = PowerPolicy([2.0, 3.0, 1.0])
    elif case == "markov":
        p = Problem(Plant([1.2]), Channel([1.0, 0.3], 0.5, 3), FadingProcess.markov([[0.6, 0.4], [0.5, 0.5]]))
        pol = PowerPolicy([1.0, 4.0])
    elif case == "vector":
        p = Problem(Plant([1.1, 1.3], init_mean=[1.0, -1.0]), Channel([1.0, 0.6], 1.0, 4),
                    FadingProcess.iid([0.5, 0.5]))
        pol = tdma_policy(p.plant, p.channel, [3.0, 5.0])
    else:
        p = Problem(Plant([1.15, 1.15], jordan_blocks=(2,)), Channel([1.0], 1.0, 4), FadingProcess.iid([1.0]))
        pol = PowerPolicy(per_slot=[[2.0, 2.0]])
    trials, blocks = 6, 3
    tr = run_closed_loop(p, pol, trials=trials, horizon_blocks=blocks, seed=42)
    ms, err2 = direct_closed_loop(p, pol, trials, blocks, 42)
    np.testing.assert_allclose(tr.mean_square_state, ms, rtol=1e-6, atol=1e-12)
    emp = np.exp(tr.log_alpha_empirical).reshape(blocks, -1)
    np.testing.assert_allclose(emp, err2, rtol=1e-5)


def test_alpha_single_block_formula():
    p = Problem(Plant([1.5]), Channel([1.0, 0.5], 1.0, 20), FadingProcess.iid([0.5, 0.5]))
    a = alpha_recursion(p, PowerPolicy([5.0, 4.7]), path=[0])
    assert a[0] == pytest.approx((1 / 5) * (1 / 6) ** 19, rel=1e-12)


def test_alpha_without_power_stays_at_prior():
    p = Problem(Plant([1.5], init_var=[2.5]), Channel([1.0, 0.5], 1.0, 20), FadingProcess.iid([0.5, 0.5]))
    pol = PowerPolicy([0.0, 0.0])
    np.testing.assert_allclose(alpha_recursion(p, pol, num_blocks=6), 2.5)
    np.testing.assert_allclose(alpha_recursion(p, pol, path=[0, 1, 0]), 2.5)


def _enumerated_alpha(p, pol, J, p0):
    """Expectation over every channel path, weighted by its probability."""
    Q = p.fading.transition_matrix
    m = p.num_states
    total = np.zeros(J)
    for path in itertools.product(range(m), repeat=J):
        prob = p0[path[0]] * np.prod([Q[a, b] for a, b in zip(path, path[1:])])
        if prob > 0:
            total += prob * alpha_recursion(p, pol, path=list(path))
    return total


@pytest.mark.parametrize("fading", [FadingProcess.iid([0.3, 0.5, 0.2]),
                                    FadingProcess.markov([[0.5, 0.3, 0.2], [0.1, 0.6, 0.3], [0.4, 0.0, 0.6]])])
def test_marginal_alpha_equals_path_average(fading):
    p = Problem(Plant([1.2]), Channel([1.0, 0.0, 0.4], 1.0, 3), fading)
    pol = PowerPolicy([2.0, 5.0, 3.0])
    J = 5
    from fading_stab import stationary_distribution
    ref = _enumerated_alpha(p, pol, J, stationary_distribution(fading))
    np.testing.assert_allclose(alpha_recursion(p, pol, num_blocks=J), ref, rtol=1e-12)
    start = np.array([0.0, 1.0, 0.0])
    np.testing.assert_allclose(alpha_recursion(p, pol, num_blocks=J, start_distribution=start),
                               _enumerated_alpha(p, pol, J, start), rtol=1e-12)


def test_marginal_decay_rate():
    p = Problem(Plant([1.5]), Channel([1.0, 0.5], 1.0, 20), FadingProcess.iid([0.5, 0.5]))
    pol = PowerPolicy([5.0, 4.7])
    la = alpha_recursion(p, pol, num_blocks=30, log=True)
    rate = math.log(0.5 * 6.0 ** -20 + 0.5 * (1 + 0.25 * 4.7) ** -20)
    np.testing.assert_allclose(np.diff(la), rate, rtol=1e-12)
    assert np.all(np.isfinite(la))
    # lambda^(2jn) alpha(j) decays at twice the margin rate
    growth = 2 * 20 * math.log(1.45) + rate
    assert growth == pytest.approx(-40 * (-rate / 40 - math.log(1.45)), rel=1e-12)
    assert growth < 0


def test_vector_alpha_per_component():
    p = Problem(Plant([1.1, 1.3]), Channel([1.0], 1.0, 6), FadingProcess.iid([1.0]))
    pol = PowerPolicy(per_slot=[[2.0, 8.0]])
    a = alpha_recursion(p, pol, path=[0, 0])
    assert a.shape == (2, 2)
    np.testing.assert_allclose(a[0], [(1 / 2) * (1 / 3) ** 2, (1 / 8) * (1 / 9) ** 2], rtol=1e-12)
    np.testing.assert_allclose(a[1] / a[0], [(1 / 3) ** 3, (1 / 9) ** 3], rtol=1e-12)


def test_non_schur_gain_rejected(example1):
    p, pol = example1
    with pytest.raises(NonSchurGain):
        run_closed_loop(p, pol, controller_gain=[[0.0]], trials=2, horizon_blocks=1)
    with pytest.raises(NonSchurGain):
        run_closed_loop(p, pol, controller_gain=[[-0.2]], trials=2, horizon_blocks=1)
    run_closed_loop(p, pol, controller_gain=[[-1.0]], trials=2, horizon_blocks=1)


def test_three_equal_jordan_blocks_uncontrollable():
    p = Problem(Plant([1.2, 1.2, 1.2]), Channel([1.0], 1.0, 6), FadingProcess.iid([1.0]))
    with pytest.raises(NonSchurGain):
        run_closed_loop(p, PowerPolicy(per_slot=[[1.0, 1.0, 1.0]]), trials=1, horizon_blocks=1)


def test_deadbeat_is_nilpotent():
    p = Problem(Plant([1.2, 1.2, 1.5], jordan_blocks=(2, 1)), Channel([1.0], 1.0, 6), FadingProcess.iid([1.0]))
    A, B = closed_loop_matrices(p)
    K = deadbeat_gain(A, B)
    assert np.max(np.abs(np.linalg.matrix_power(A + B @ K, 3))) < 1e-8


def test_insufficient_trials(example1):
    p, pol = example1
    tr = run_closed_loop(p, pol, trials=10, horizon_blocks=2)
    with pytest.raises(InsufficientTrials):
        empirical_vs_analytic(tr)


def test_reproducible_across_workers(example1):
    p, pol = example1
    a = run_closed_loop(p, pol, trials=300, horizon_blocks=4, seed=9, workers=1)
    b = run_closed_loop(p, pol, trials=300, horizon_blocks=4, seed=9, workers=4)
    for name in ("mean_square_state", "log_alpha_empirical", "realized_power", "states", "error_mean"):
        assert np.array_equal(getattr(a, name), getattr(b, name))


def test_env_thread_cap(example1, monkeypatch):
    p, pol = example1
    monkeypatch.setenv("FADING_STAB_THREADS", "3")
    a = run_closed_loop(p, pol, trials=50, horizon_blocks=2, seed=1)
    monkeypatch.delenv("FADING_STAB_THREADS")
    b = run_closed_loop(p, pol, trials=50, horizon_blocks=2, seed=1)
    assert np.array_equal(a.mean_square_state, b.mean_square_state)


def test_stabilized_example1(example1):
    p, pol = example1
    tr = run_closed_loop(p, pol, trials=10_000, horizon_blocks=50, seed=3)
    ms = tr.block_mean_square()
    assert ms[-1] * 10 <= tr.mean_square_state[0]
    assert tr.divergence_fraction == 0.0
    rep = empirical_vs_analytic(tr)
    assert rep.consistent


def test_consistency_ten_blocks(example1):
    p, pol = example1
    rep = empirical_vs_analytic(run_closed_loop(p, pol, trials=10_000, horizon_blocks=10, seed=21))
    assert rep.alpha_within_bands and rep.unbiased and rep.power_within_bands


def test_mean_square_grows_above_lambda_max():
    # analytic second moment under deadbeat control: lambda^(2k) alpha, growing at the margin rate
    p = scalar_problem(1.6)
    pol = PowerPolicy([5.0, 4.7])
    la = alpha_recursion(p, pol, num_blocks=20, log=True)
    growth = np.diff(la + 40 * np.arange(20) * math.log(1.6))
    from fading_stab import check
    np.testing.assert_allclose(growth, -40 * check(p, pol).margin, rtol=1e-12)
    assert np.all(growth > 0)
    # every path diverges when only the weak state occurs (its own threshold is 1.475)
    weak = scalar_problem(1.6, fading=FadingProcess.iid([0.0, 1.0]))
    tr = run_closed_loop(weak, pol, trials=200, horizon_blocks=10, seed=5)
    ms = tr.block_mean_square()
    assert np.all(np.diff(np.log(ms)) > 0)


def test_sample_paths_mostly_converge_above_lambda_max():
    # almost-sure convergence despite mean-square divergence: the typical
    # per-block log factor averages 0.5 * (-17.0) + 0.5 * 3.26 < 0
    p = scalar_problem(1.6)
    tr = run_closed_loop(p, PowerPolicy([5.0, 4.7]), trials=2000, horizon_blocks=20, seed=5)
    assert tr.divergence_fraction < 0.01


def test_near_noiseless_channel():
    p = Problem(Plant([1.5]), Channel([1.0], 1e-12, 4), FadingProcess.iid([1.0]))
    tr = run_closed_loop(p, PowerPolicy([1.0]), trials=50, horizon_blocks=2, seed=0)
    assert math.exp(tr.log_alpha_empirical[0]) < 1e-40
    assert math.exp(tr.log_alpha_path[0]) < 1e-40
    assert tr.mean_square_state[4] < 1e-30


def test_realized_power_accounting(example1):
    p, pol = example1
    tr = run_closed_loop(p, pol, trials=4000, horizon_blocks=10, seed=8)
    assert tr.realized_power.mean() == pytest.approx(4.85, rel=0.02)
    assert np.all(np.abs(tr.power_ratio_mean - 1) <= 6 * tr.power_ratio_se)


def test_vector_consistency():
    p = Problem(Plant([1.1, 1.25]), Channel([1.0, 0.5], 1.0, 8), FadingProcess.markov([[0.7, 0.3], [0.4, 0.6]]))
    pol = tdma_policy(p.plant, p.channel, [4.0, 6.0])
    tr = run_closed_loop(p, pol, trials=2000, horizon_blocks=6, seed=4)
    assert tr.log_alpha_path.shape == (6, 2)
    assert empirical_vs_analytic(tr).consistent


def test_overflow_guard_marks_divergence():
    p = Problem(Plant([50.0]), Channel([1.0], 1.0, 20), FadingProcess.iid([1.0]))
    tr = run_closed_loop(p, PowerPolicy([0.0]), trials=20, horizon_blocks=5, seed=0)
    assert tr.divergence_fraction == 1.0


def test_csv_output(example1, tmp_path):
    p, pol = example1
    tr = run_closed_loop(p, pol, trials=20, horizon_blocks=3)
    out = tmp_path / "trace.csv"
    write_trace_csv(tr, out, {"k": 1})
    lines = out.read_text().splitlines()
    assert lines[0].startswith("# config_sha256=")
    rows = list(csv.reader(lines[1:]))
    assert rows[0] == ["block_index", "state", "alpha_analytic", "alpha_empirical",
                       "mean_square_state", "realized_power"]
    assert len(rows) == 4
