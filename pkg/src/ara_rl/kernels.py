"""Compiled training and evaluation loops.

These are line-by-line transcriptions of the reference learners in
:mod:`ara_rl.ara` and :mod:`ara_rl.qlearn` over the flat arrays of
:class:`ara_rl.mdp.CompiledModel`. Uniforms come in pre-drawn blocks
(``env_u``: branch, reward; ``agent_u``: explore, random action, tie-break)
so the caller controls the random streams. The kernels release the GIL so
replications can run on a thread pool.

Schedules are passed as ``(v0, rate, horizon, floor)`` rows of ``sched``.
"""

from __future__ import annotations

import numpy as np
from numba import njit

LB_RATE = 1.0 / 50.0
LB_SHARE = 0.975

_JIT = dict(nogil=True, cache=True)


@njit(**_JIT)
def _sched(sched, k, t):
    v = sched[k, 0] * sched[k, 1] ** (t / sched[k, 2])
    return v if v > sched[k, 3] else sched[k, 3]


@njit(**_JIT)
def _max_over(table, s, act_ptr, act_ids):
    m = -np.inf
    for i in range(act_ptr[s], act_ptr[s + 1]):
        v = table[s, act_ids[i]]
        if v > m:
            m = v
    return m


@njit(**_JIT)
def _lex_pick(x1, x0, s, act_ptr, act_ids, eps, u_tie, buf):
    lo, hi = act_ptr[s], act_ptr[s + 1]
    k = 0
    for i in range(lo, hi):
        a = act_ids[i]
        a1, a0 = x1[s, a], x0[s, a]
        beaten = False
        for j in range(lo, hi):
            b = act_ids[j]
            b1, b0 = x1[s, b], x0[s, b]
            if b1 > a1 + eps or (abs(b1 - a1) <= eps and b0 > a0 + eps):
                beaten = True
                break
        if not beaten:
            buf[k] = a
            k += 1
    if k == 0:  # cyclic preferences: staged filter, see ara.lex_argmax
        m1 = _max_over(x1, s, act_ptr, act_ids)
        m0 = -np.inf
        for i in range(lo, hi):
            a = act_ids[i]
            if not m1 > x1[s, a] + eps and x0[s, a] > m0:
                m0 = x0[s, a]
        for i in range(lo, hi):
            a = act_ids[i]
            if not m1 > x1[s, a] + eps and not m0 > x0[s, a] + eps:
                buf[k] = a
                k += 1
    idx = int(u_tie * k)
    if idx > k - 1:
        idx = k - 1
    return buf[idx]


@njit(**_JIT)
def _max_pick(q, s, act_ptr, act_ids, eps, u_tie, buf):
    best = _max_over(q, s, act_ptr, act_ids)
    k = 0
    for i in range(act_ptr[s], act_ptr[s + 1]):
        a = act_ids[i]
        if not q[s, a] + eps < best:
            buf[k] = a
            k += 1
    idx = int(u_tie * k)
    if idx > k - 1:
        idx = k - 1
    return buf[idx]


@njit(**_JIT)
def _random_pick(s, act_ptr, act_ids, u):
    n = act_ptr[s + 1] - act_ptr[s]
    idx = int(u * n)
    if idx > n - 1:
        idx = n - 1
    return act_ids[act_ptr[s] + idx]


@njit(**_JIT)
def _env_step(sa_row, br_ptr, br_cum, br_next, br_lo, br_hi, s, a, u_branch, u_reward):
    row = sa_row[s, a]
    j = br_ptr[row]
    end = br_ptr[row + 1] - 1
    while j < end and u_branch >= br_cum[j]:
        j += 1
    r = br_lo[j] + (br_hi[j] - br_lo[j]) * u_reward
    return br_next[j], r


@njit(**_JIT)
def ara_train(
    act_ptr, act_ids, sa_row, br_ptr, br_cum, br_next, br_lo, br_hi,
    x0, x1, scal, s, t0, n_steps, env_u, agent_u,
    gamma0, gamma1, eps, sched, use_lb, tol, window, last_change,
):
    """Run up to ``n_steps`` ARA iterations in place.

    ``scal`` holds ``[rho, rho_lb]`` and is updated in place. Stops early
    once ``window > 0`` consecutive steps changed no table entry by more
    than ``tol``. Returns ``(state, steps_done, last_change)`` where
    ``last_change`` is the global index of the last step that did.
    """
    buf = np.empty(act_ids.shape[0], dtype=np.int64)
    rho, rho_lb = scal[0], scal[1]
    done = 0
    for i in range(n_steps):
        t = t0 + i
        p_exp = _sched(sched, 2, t)
        if agent_u[i, 0] < p_exp:
            a = _random_pick(s, act_ptr, act_ids, agent_u[i, 1])
            rnd = True
        else:
            a = _lex_pick(x1, x0, s, act_ptr, act_ids, eps, agent_u[i, 2], buf)
            rnd = False
        s2, r = _env_step(sa_row, br_ptr, br_cum, br_next, br_lo, br_hi, s, a, env_u[i, 0], env_u[i, 1])
        m1 = _max_over(x1, s2, act_ptr, act_ids)
        if not rnd:
            alpha = _sched(sched, 0, t)
            target = r + m1 - x1[s, a]
            rho = (1.0 - alpha) * rho + alpha * target
            if use_lb and rho < rho_lb:
                rho = rho_lb
        if use_lb:
            lb = (1.0 - LB_RATE) * rho_lb + LB_RATE * (LB_SHARE * rho)
            if lb > rho:
                lb = rho
            rho_lb = lb
        w = _sched(sched, 1, t)
        m0 = _max_over(x0, s2, act_ptr, act_ids)
        old0, old1 = x0[s, a], x1[s, a]
        new0 = (1.0 - w) * old0 + w * (r + gamma0 * m0 - rho)
        new1 = (1.0 - w) * old1 + w * (r + gamma1 * m1 - rho)
        x0[s, a] = new0
        x1[s, a] = new1
        d = max(abs(new0 - old0), abs(new1 - old1))
        if d > tol:
            last_change = t
        s = s2
        done = i + 1
        if window > 0 and t - last_change >= window:
            break
    scal[0] = rho
    scal[1] = rho_lb
    return s, done, last_change


@njit(**_JIT)
def q_train(
    act_ptr, act_ids, sa_row, br_ptr, br_cum, br_next, br_lo, br_hi,
    q, s, t0, n_steps, env_u, agent_u,
    gamma1, eps_opt, sched, tol, window, last_change,
):
    """Q-learning counterpart of :func:`ara_train` (``sched`` rows: unused, w, p_exp)."""
    buf = np.empty(act_ids.shape[0], dtype=np.int64)
    done = 0
    for i in range(n_steps):
        t = t0 + i
        p_exp = _sched(sched, 2, t)
        if agent_u[i, 0] < p_exp:
            a = _random_pick(s, act_ptr, act_ids, agent_u[i, 1])
        else:
            a = _max_pick(q, s, act_ptr, act_ids, eps_opt, agent_u[i, 2], buf)
        s2, r = _env_step(sa_row, br_ptr, br_cum, br_next, br_lo, br_hi, s, a, env_u[i, 0], env_u[i, 1])
        w = _sched(sched, 1, t)
        m = _max_over(q, s2, act_ptr, act_ids)
        old = q[s, a]
        new = (1.0 - w) * old + w * (r + gamma1 * m)
        q[s, a] = new
        if abs(new - old) > tol:
            last_change = t
        s = s2
        done = i + 1
        if window > 0 and t - last_change >= window:
            break
    return s, done, last_change


@njit(**_JIT)
def greedy_eval(
    act_ptr, act_ids, sa_row, br_ptr, br_cum, br_next, br_lo, br_hi,
    x1, x0, lex, eps, s, n_steps, env_u, agent_u, goal, state_metric, acc,
):
    """Follow the frozen greedy policy for ``n_steps`` steps.

    ``lex`` selects the ARA order on ``(x1, x0)``; otherwise ``x1`` is a Q
    table with the ``eps`` winner band. ``acc`` accumulates
    ``[reward sum, goal visits, state_metric sum]`` in place. Returns the
    final state.
    """
    buf = np.empty(act_ids.shape[0], dtype=np.int64)
    for i in range(n_steps):
        if s == goal:
            acc[1] += 1.0
        acc[2] += state_metric[s]
        if lex:
            a = _lex_pick(x1, x0, s, act_ptr, act_ids, eps, agent_u[i, 2], buf)
        else:
            a = _max_pick(x1, s, act_ptr, act_ids, eps, agent_u[i, 2], buf)
        s2, r = _env_step(sa_row, br_ptr, br_cum, br_next, br_lo, br_hi, s, a, env_u[i, 0], env_u[i, 1])
        acc[0] += r
        s = s2
    return s
