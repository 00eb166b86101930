"""Acceptance gate.

One test per criterion, with the stated tolerances and time budgets pinned.
The terminal summary prints a PASS/FAIL line for each (see conftest.py).
The two learning experiments (gridworld and admission control, 40
replications each) run once per session and are shared.
"""

import time
from dataclasses import replace
from importlib import resources

import numpy as np
import pytest

from ara_rl import kernels
from ara_rl.ara import lex_argmax
from ara_rl.environments import (
    control_limit_family,
    gridworld,
    mm1_admission,
    parallel_loops,
    printer_mail,
    queue_length_mean,
    three_state,
)
from ara_rl.harness import load_config, run_experiment, run_replication
from ara_rl.mdp import transition_matrix
from ara_rl.oracle import (
    action_values,
    adjusted_values,
    bias,
    blackwell_classify,
    closed_classes,
    discounted_values,
    enumerate_policies,
    gain,
    laurent_decompose,
    preference_switch,
    q_fixed_point,
    stationary_distribution,
)
from ara_rl.schedule import DecaySchedule
from ara_rl.stats import MetricMatrix, adjust_matrix, conover_pairwise, friedman


def bundled(name):
    return load_config(resources.files("ara_rl") / "configs" / name)


def report_check(failures, label, ok, detail):
    """Collect sub-check outcomes so one run reports every miss, not just the first."""
    print(f"  {'ok ' if ok else 'BAD'} {label}: {detail}")
    if not ok:
        failures.append(f"{label}: {detail}")


@pytest.fixture(scope="session")
def gridworld_runs():
    return run_experiment(bundled("gridworld.json"))


@pytest.fixture(scope="session")
def queue_runs():
    cfg = bundled("mm1.json")
    keep = tuple(a for a in cfg.algorithms if a.kind == "ara" and a.params.gamma1 in (1.0, 0.999))
    return run_experiment(replace(cfg, algorithms=keep))


@pytest.mark.acceptance("oracle exactness on the three-state, printer-mail and parallel-loops examples")
def test_oracle_reproduces_small_example_values():
    bad = []
    t0 = time.perf_counter()
    m = three_state()
    left, right = m.action_id("left"), m.action_id("right")
    pol_a = m.policy({1: left})
    q = action_values(m, discounted_values(m, pol_a, 0.99), 0.99)
    got = np.array([q[0, right], q[1, left], q[1, right], q[2, left]])
    ref = np.array([99.497, 100.502, 100.482, 101.497])
    report_check(bad, "three-state V(0.99)", np.all(np.abs(got - ref) <= 1e-3), got.round(6))
    hq = action_values(m, bias(m, pol_a), 1.0, gain(m, pol_a))
    got = np.array([hq[0, right], hq[1, left], hq[1, right], hq[2, left]])
    report_check(bad, "three-state bias", np.all(np.abs(got - [-0.5, 0.5, 0.5, 1.5]) <= 1e-3), got.round(6))
    t1 = time.perf_counter()

    pm = printer_mail()
    printer, mail = enumerate_policies(pm)
    gains = (gain(pm, printer), gain(pm, mail))
    report_check(bad, "printer-mail gains", gains == (1.0, 2.0), gains)
    switch = preference_switch(pm, printer, mail, 0, 0.5, 0.99)
    report_check(bad, "printer-mail switch", abs(switch - 0.8027) <= 1e-3, switch)
    t2 = time.perf_counter()

    pl = parallel_loops()
    top, bottom = enumerate_policies(pl)
    gains = (gain(pl, top), gain(pl, bottom))
    report_check(bad, "parallel-loops gains", np.allclose(gains, 0.75, atol=1e-12), gains)
    x = (adjusted_values(pl, top, 0.5)[0], adjusted_values(pl, bottom, 0.5)[0])
    report_check(bad, "parallel-loops X(0.5) top", abs(x[0] + 0.480) <= 1e-3, x[0])
    report_check(bad, "parallel-loops X(0.5) bottom", abs(x[1] + 0.746) <= 1e-3, x[1])
    switch = preference_switch(pl, top, bottom, 0, 0.5, 0.99, adjusted=True)
    report_check(bad, "parallel-loops switch", abs(switch - 0.84837) <= 1e-3, switch)
    t3 = time.perf_counter()

    for part, dt in (("three-state", t1 - t0), ("printer-mail", t2 - t1), ("parallel-loops", t3 - t2)):
        report_check(bad, f"{part} time", dt < 1.0, f"{dt:.3f}s")
    assert not bad, bad


@pytest.mark.acceptance("queueing oracle: control-limit sweep, optimality sets and queue lengths")
def test_queue_oracle_control_limit_sweep():
    bad = []
    t0 = time.perf_counter()
    m = mm1_admission(5, 5, 12, 1, 20)
    fam = control_limit_family(m)
    rep = blackwell_classify(m, fam)
    limits = sorted(fam.index(p) for p in rep.gain_optimal)
    report_check(bad, "gain-optimal limits", limits == [2, 3], limits)
    report_check(bad, "optimal gain", abs(rep.gain_value - 30.0) <= 1e-6, rep.gain_value)
    for L in (2, 3):
        report_check(bad, f"gain L={L}", abs(gain(m, fam[L]) - 30.0) <= 1e-6, gain(m, fam[L]))
    report_check(bad, "bias-optimal", rep.bias_optimal == (fam[3],), [fam.index(p) for p in rep.bias_optimal])
    report_check(bad, "Blackwell", rep.blackwell == (fam[3],), [fam.index(p) for p in rep.blackwell])
    for L, ref in ((2, 0.67), (3, 1.12)):
        ql = queue_length_mean(m, stationary_distribution(m, fam[L]))
        report_check(bad, f"queue length L={L}", abs(ql - ref) <= 0.01, ql)
    dt = time.perf_counter() - t0
    report_check(bad, "time", dt < 10.0, f"{dt:.2f}s")
    assert not bad, bad


TABLE_Q = {"Q-Learning γ=0.99": (0.99, 186.509, 191.070),
           "Q-Learning γ=0.80": (0.8, 3.046, 3.011),
           "Q-Learning γ=0.50": (0.5, 0.323, 0.039)}


@pytest.mark.acceptance("Q-learning on printer-mail reaches the tabulated and oracle fixed points")
def test_q_learning_printer_mail_fixed_point():
    bad = []
    t0 = time.perf_counter()
    cfg = bundled("printer_mail.json")
    m = cfg.model
    state = m.state_id(cfg.report_state)
    left, right = m.action_id("left"), m.action_id("right")
    for label, (g, ql, qr) in TABLE_Q.items():
        res = run_replication(cfg, 0, label)
        got = (res.state_values["left"], res.state_values["right"])
        q = q_fixed_point(m, g)
        report_check(bad, f"{label} vs table", abs(got[0] - ql) <= 0.1 and abs(got[1] - qr) <= 0.1, got)
        ora = (q[state, left], q[state, right])
        report_check(bad, f"{label} vs oracle", max(abs(got[0] - ora[0]), abs(got[1] - ora[1])) <= 0.1, ora)
    dt = time.perf_counter() - t0
    report_check(bad, "time", dt < 60.0, f"{dt:.1f}s")
    assert not bad, bad


@pytest.mark.acceptance("ARA on printer-mail: preference, average reward, values and steps to convergence")
def test_ara_printer_mail_convergence():
    bad = []
    t0 = time.perf_counter()
    cfg = bundled("printer_mail.json")
    res = run_replication(cfg, 0, "ARA")
    left, right = res.state_values["left"], res.state_values["right"]
    report_check(bad, "prefers right", right > left, (left, right))
    report_check(bad, "rho", abs(res.final_rho - 2.0) <= 0.01, res.final_rho)
    report_check(bad, "x1(1, left)", abs(left + 13.349) <= 0.5, left)
    report_check(bad, "x1(1, right)", abs(right + 8.787) <= 0.5, right)
    report_check(bad, "converged", bool(res.converged), res.converged)
    steps = res.learn_steps_used
    report_check(bad, "steps within 3x of 1e6", 1e6 / 3 <= steps <= 3e6, steps)
    dt = time.perf_counter() - t0
    report_check(bad, "time", dt < 120.0, f"{dt:.1f}s")
    assert not bad, bad


ARA_GRID = ("ARA γ1=0.99", "ARA γ1=0.999", "ARA γ1=1.00")
Q_GRID = ("Q-Learning γ1=0.99", "Q-Learning γ1=0.999", "Q-Learning γ1=0.50")


@pytest.mark.acceptance("ARA on the gridworld: reward, steps to goal, average reward, Q baselines")
def test_ara_gridworld_performance(gridworld_runs):
    bad = []
    rep = gridworld_runs
    assert rep.failures == []
    assert all(len(rep.results[a]) == 40 for a in ARA_GRID + Q_GRID)
    for a in ARA_GRID:
        rps = rep.summary[a]["reward_per_step"][0]
        stg = rep.summary[a]["steps_to_goal_mean"][0]
        rho = rep.summary[a]["final_rho"][0]
        report_check(bad, f"{a} reward/step", rps >= 5.15, rps)
        report_check(bad, f"{a} steps to goal", 4.9 <= stg <= 5.2, stg)
        report_check(bad, f"{a} rho", abs(rho - 5.215) <= 0.05, rho)
    for a in Q_GRID:
        stg = rep.summary[a]["steps_to_goal_mean"][0]
        report_check(bad, f"{a} steps to goal", stg > 100, stg)
    assert not bad, bad


@pytest.mark.acceptance("ARA on admission control: reward, queue length and average reward per replication")
def test_ara_queue_performance(queue_runs):
    bad = []
    rep = queue_runs
    assert rep.failures == []
    for a, runs in rep.results.items():
        assert len(runs) == 40
        good = sum(r.reward_per_step >= 29.5 and 1.0 <= r.queue_length_mean <= 1.3 for r in runs)
        report_check(bad, f"{a} replications meeting reward and queue targets", good >= 35, f"{good}/40")
        rho = rep.summary[a]["final_rho"][0]
        report_check(bad, f"{a} rho", abs(rho - 30.0) <= 0.5, rho)
    assert not bad, bad


SMALL = [[1.2, 3.4, 2.2, 5.0], [2.0, 3.1, 2.5, 4.4], [0.9, 2.8, 3.3, 4.1]]
TIED = [[7, 9, 8], [6, 5, 7], [9, 7, 6], [8, 8, 9], [5, 6, 4], [7, 9, 9],
        [4, 6, 5], [8, 7, 9], [6, 8, 7], [9, 9, 8]]


@pytest.mark.acceptance("statistics pipeline: reference examples and gridworld grouping structure")
def test_statistics_pipeline(gridworld_runs):
    bad = []
    refs = (
        (SMALL, 8.2, 0.04205418289496614, {(0, 1): 0.004927999702278195, (0, 3): 0.0002350509102998653,
                                          (1, 2): 0.41975308641975306}),
        (TIED, 62 / 37, 0.4326449614270491, {(0, 1): 0.22117904364524238, (0, 2): 0.43048207708381814,
                                            (1, 2): 0.6504205673578869}),
    )
    for rows, stat_ref, p_ref, pairs in refs:
        mm = MetricMatrix(np.array(rows, dtype=float), tuple("ABCD"[: len(rows[0])]))
        stat, p = friedman(mm)
        report_check(bad, f"{len(rows)}x{len(rows[0])} Friedman", abs(stat - stat_ref) <= 1e-10
                     and abs(p - p_ref) <= 1e-10, (stat, p))
        raw = conover_pairwise(mm)
        err = max(abs(raw[i, j] - v) for (i, j), v in pairs.items())
        report_check(bad, f"{len(rows)}x{len(rows[0])} Conover", err <= 1e-10, err)
    adj = adjust_matrix(conover_pairwise(MetricMatrix(np.array(SMALL, dtype=float), tuple("ABCD"))))
    report_check(bad, "3x4 BH", abs(adj[0, 3] - 6 * 0.0002350509102998653) <= 1e-10, adj[0, 3])

    res = gridworld_runs.tests["sum_reward"]
    one_group = any(set(ARA_GRID) <= set(g) for g in res.groups)
    report_check(bad, "ARA variants share a group", one_group, res.groups)
    idx = {l: i for i, l in enumerate(res.labels)}
    worst = max(res.adjusted_p[idx[a], idx[q]] for a in ARA_GRID for q in Q_GRID)
    report_check(bad, "every ARA-vs-Q pair significant", worst < 0.05, worst)
    assert not bad, bad


def _bundled_policies():
    for model in (three_state(), printer_mail(), parallel_loops(), gridworld(2)):
        for pol in enumerate_policies(model):
            if len(closed_classes(transition_matrix(model, pol))) == 1:
                yield model, pol
    m = mm1_admission(5, 5, 12, 1, 20)
    for pol in control_limit_family(m):
        yield m, pol


@pytest.mark.acceptance("property checks: Laurent expansion, selection rule, decay, thread determinism")
def test_property_checks():
    bad = []
    gammas = (0.9, 0.99, 0.999, 0.9999)
    n_pol, worst_identity, worst_ratio = 0, 0.0, 0.0
    for model, pol in _bundled_policies():
        n_pol += 1
        errs = []
        for g in gammas:
            d = laurent_decompose(model, pol, g)
            rec = d.gain / (1 - g) + d.bias + d.error
            worst_identity = max(worst_identity, float(np.max(np.abs(rec - d.discounted) / np.maximum(1, np.abs(rec)))))
            errs.append(np.abs(d.error).max())
        if errs[-2] > 1e-9:
            worst_ratio = max(worst_ratio, errs[-1] / errs[-2])
    report_check(bad, f"Laurent identity over {n_pol} policies", worst_identity < 1e-12, worst_identity)
    report_check(bad, "Laurent error shrinks tenfold per decade", worst_ratio <= 0.11, worst_ratio)

    rng = np.random.default_rng(2019)
    lex_ok = True
    for _ in range(3000):
        n = int(rng.integers(1, 7))
        pairs = [tuple(v) for v in rng.choice(np.arange(-3, 3.5, 0.25), size=(n, 2))]
        eps = float(rng.choice([0.0, 0.25, 1.0]))
        win = lex_argmax(pairs, eps)
        perm = rng.permutation(n)
        back = sorted(int(perm[i]) for i in lex_argmax([pairs[i] for i in perm], eps))
        u = float(rng.random())
        x1 = np.array([[p[0] for p in pairs]])
        x0 = np.array([[p[1] for p in pairs]])
        pick = kernels._lex_pick(x1, x0, 0, np.array([0, n]), np.arange(n), eps, u,
                                 np.empty(n, dtype=np.int64))
        lex_ok &= bool(win) and back == win and pick == win[min(int(u * len(win)), len(win) - 1)]
    report_check(bad, "selection rule laws", lex_ok, "3000 random cases")

    s = DecaySchedule(0.01, 0.5, 50_000, 1e-5)
    vals = np.array([s.value(t) for t in range(0, 2_000_000, 997)])
    report_check(bad, "decay monotone and floored", bool(np.all(np.diff(vals) <= 0) and vals.min() >= 1e-5),
                 vals[-1])

    cfg = replace(bundled("gridworld.json"), replications=4, learn_steps=40_000, eval_steps=2_000)
    rows1 = run_experiment(cfg, threads=1).rows()
    rows4 = run_experiment(cfg, threads=4).rows()
    report_check(bad, "bit-identical across thread counts", rows1 == rows4, f"{len(rows1)} rows")
    assert not bad, bad
