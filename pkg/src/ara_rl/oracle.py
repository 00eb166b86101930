"""Exact evaluation of stationary policies on unichain MDPs.

Everything here is dense linear algebra on the chain induced by a policy:
stationary distribution, gain, bias, discounted and average-reward-adjusted
values, plus value-iteration fixed points of the two learners' update rules
and an enumeration-based Blackwell classification.

Two identities carry most of the weight. With ``Pi = 1 pi`` the projection
onto the stationary distribution,

* ``(I - P + Pi) h = r - rho 1`` has a unique solution with ``pi h = 0``
  (the bias), also for periodic recurrent classes;
* ``(I - gamma P + Pi) X = r - rho 1`` gives ``X = V_gamma - rho / (1 - gamma)``
  for ``gamma < 1`` and reduces to the bias at ``gamma = 1``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import brentq
from scipy.sparse.csgraph import connected_components

from .mdp import MdpModel, StationaryPolicy, expected_reward, expected_rewards, transition_matrix

TIE_TOL = 1e-9
BLACKWELL_GRID = (1 - 1e-3, 1 - 1e-4, 1 - 1e-5)


class MultichainError(ValueError):
    """The policy induces more than one closed communicating class."""


class DivergenceError(RuntimeError):
    """Fixed-point iteration did not settle."""


class PolicyCapError(ValueError):
    """Too many deterministic policies to enumerate."""


@dataclass(frozen=True)
class LaurentDecomposition:
    gamma: float
    gain: float
    bias: np.ndarray
    discounted: np.ndarray
    error: np.ndarray


@dataclass(frozen=True)
class OptimalityReport:
    all_policies: int
    gain_optimal: tuple[StationaryPolicy, ...]
    bias_optimal: tuple[StationaryPolicy, ...]
    blackwell: tuple[StationaryPolicy, ...]
    gain_value: float
    gamma_grid: tuple[float, ...]
    gains: dict = field(default_factory=dict)


# -- chain structure ---------------------------------------------------------


def closed_classes(P: np.ndarray) -> list[np.ndarray]:
    """Closed communicating classes (recurrent classes) of a stochastic matrix."""
    adj = P > 0
    n_comp, labels = connected_components(adj, directed=True, connection="strong")
    out = []
    for c in range(n_comp):
        members = np.flatnonzero(labels == c)
        leaves = adj[members][:, labels != c].any()
        if not leaves:
            out.append(members)
    return out


def _stationary_from_matrix(P: np.ndarray) -> np.ndarray:
    classes = closed_classes(P)
    if len(classes) != 1:
        raise MultichainError(
            f"policy induces {len(classes)} closed classes: "
            + ", ".join(str(c.tolist()) for c in classes)
        )
    rec = classes[0]
    Pc = P[np.ix_(rec, rec)]
    k = len(rec)
    # pi (I - Pc + 1 1^T) = 1^T has a unique solution for an irreducible block.
    A = np.eye(k) - Pc + np.ones((k, k))
    pi_c = np.linalg.solve(A.T, np.ones(k))
    pi = np.zeros(P.shape[0])
    pi[rec] = np.clip(pi_c, 0.0, None)
    return pi / pi.sum()


def stationary_distribution(model: MdpModel, pol: StationaryPolicy) -> np.ndarray:
    """Stationary distribution of the chain induced by ``pol``; transient states get 0."""
    return _stationary_from_matrix(transition_matrix(model, pol))


def gain(model: MdpModel, pol: StationaryPolicy) -> float:
    pi = stationary_distribution(model, pol)
    return float(pi @ expected_rewards(model, pol))


def _chain(model, pol):
    P = transition_matrix(model, pol)
    r = expected_rewards(model, pol)
    pi = _stationary_from_matrix(P)
    return P, r, pi, float(pi @ r)


def _adjusted_solve(P, r, pi, rho, gamma):
    n = len(r)
    A = np.eye(n) - gamma * P + np.outer(np.ones(n), pi)
    return np.linalg.solve(A, r - rho)


def bias(model: MdpModel, pol: StationaryPolicy) -> np.ndarray:
    """Bias vector normalized so that ``pi @ bias == 0``."""
    P, r, pi, rho = _chain(model, pol)
    return _adjusted_solve(P, r, pi, rho, 1.0)


def discounted_values(model: MdpModel, pol: StationaryPolicy, gamma: float) -> np.ndarray:
    if not 0.0 <= gamma < 1.0:
        raise ValueError(f"discounted values need 0 <= gamma < 1, got {gamma}")
    P = transition_matrix(model, pol)
    r = expected_rewards(model, pol)
    return np.linalg.solve(np.eye(model.n_states) - gamma * P, r)


def adjusted_values(model: MdpModel, pol: StationaryPolicy, gamma: float) -> np.ndarray:
    """``V_gamma - gain / (1 - gamma)`` per state, computed without the large offset.

    At ``gamma == 1`` this is the bias.
    """
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    P, r, pi, rho = _chain(model, pol)
    return _adjusted_solve(P, r, pi, rho, gamma)


def laurent_decompose(model: MdpModel, pol: StationaryPolicy, gamma: float) -> LaurentDecomposition:
    P, r, pi, rho = _chain(model, pol)
    if not 0.0 <= gamma < 1.0:
        raise ValueError(f"Laurent decomposition needs 0 <= gamma < 1, got {gamma}")
    h = _adjusted_solve(P, r, pi, rho, 1.0)
    v = np.linalg.solve(np.eye(len(r)) - gamma * P, r)
    err = v - rho / (1 - gamma) - h
    return LaurentDecomposition(gamma=gamma, gain=rho, bias=h, discounted=v, error=err)


# -- state-action views ------------------------------------------------------


def _rows(model: MdpModel):
    """Dense per-(s, a) expected reward vector and transition rows."""
    cache = model.__dict__.get("_oracle_rows")
    if cache is not None:
        return cache
    pairs = [(s, a) for s, acts in enumerate(model.actions) for a in acts]
    rbar = np.array([expected_reward(model, s, a) for s, a in pairs])
    P = np.zeros((len(pairs), model.n_states))
    for i, (s, a) in enumerate(pairs):
        for b in model.transitions[(s, a)]:
            P[i, b.next_state] += b.p
    rows = (pairs, rbar, P)
    model.__dict__["_oracle_rows"] = rows
    return rows


def _to_table(model, pairs, vals):
    table = np.full((model.n_states, model.n_action_ids), np.nan)
    for (s, a), v in zip(pairs, vals):
        table[s, a] = v
    return table


def action_values(model: MdpModel, state_values: np.ndarray, gamma: float, rho: float = 0.0) -> np.ndarray:
    """One-step lookahead ``sum_b p [r + gamma v(s') - rho]`` as an (S, A) table.

    Entries for actions a state does not offer are NaN. With the discounted
    values of a policy this gives its Q-values; with its bias (``gamma=1``,
    ``rho=gain``) the state-action bias; with adjusted values the adjusted
    state-action values.
    """
    pairs, rbar, P = _rows(model)
    return _to_table(model, pairs, rbar - rho + gamma * (P @ state_values))


def _greedy_max(table: np.ndarray) -> np.ndarray:
    return np.nanmax(table, axis=1)


def greedy_policy(model: MdpModel, table: np.ndarray) -> StationaryPolicy:
    """Argmax policy of an (S, A) table; ties go to the first listed action."""
    choice = []
    for s, acts in enumerate(model.actions):
        vals = [table[s, a] for a in acts]
        choice.append(acts[int(np.argmax(vals))])
    return StationaryPolicy(tuple(choice))


def _value_iteration(model, gamma, rho, tol, max_sweeps, damping=1.0):
    pairs, rbar, P = _rows(model)
    base = rbar - rho
    # pairs are grouped by state, so a segmented max gives max_a X(s, a).
    row_state = np.array([s for s, _ in pairs])
    starts = np.searchsorted(row_state, np.arange(model.n_states))
    x = np.zeros(len(pairs))
    delta = np.zeros(len(pairs))
    for sweep in range(1, max_sweeps + 1):
        vmax = np.maximum.reduceat(x, starts)
        new = base + gamma * (P @ vmax)
        if damping != 1.0:
            new = (1 - damping) * x + damping * new
        delta = new - x
        x = new
        if np.max(np.abs(delta)) < tol:
            return pairs, x, sweep, delta
        if gamma == 1.0 and sweep % 1000 == 0:
            # A drifting solution moves every entry by the same nonzero amount.
            if np.ptp(delta) < tol and abs(delta.mean()) > tol:
                raise DivergenceError(
                    f"iteration drifts by {delta.mean():.3g} per sweep; rho {rho} is not the optimal gain"
                )
    raise DivergenceError(f"no convergence after {max_sweeps} sweeps (last change {np.max(np.abs(delta)):.3g})")


def _polish(model, pairs, x, gamma, rho):
    """Replace a value-iteration estimate by the exact value of its greedy policy
    when that is at least as close to a fixed point."""
    table = _to_table(model, pairs, x)
    pol = greedy_policy(model, table)
    P = transition_matrix(model, pol)
    r = expected_rewards(model, pol)
    v = np.linalg.solve(np.eye(model.n_states) - gamma * P, r - rho)
    exact = action_values(model, v, gamma, rho)
    def residual(t):
        return np.nanmax(np.abs(action_values(model, _greedy_max(t), gamma, rho) - t))
    return exact if residual(exact) <= residual(table) else table


def adjusted_fixed_point(
    model: MdpModel, gamma: float, rho: float, tol: float = 1e-10, max_sweeps: int = 10**7
) -> np.ndarray:
    """Solve ``X(s,a) = sum_b p [r + gamma max_a' X(s',a') - rho]`` by iteration.

    Returns an (S, A) table with NaN for unavailable actions. At ``gamma == 1``
    the solution exists only when ``rho`` is the optimal gain and is unique up
    to a constant; the iteration is damped (periodic chains would otherwise
    oscillate) and the constant is fixed by making the stationary-weighted
    mean of the greedy entries zero.
    """
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    if gamma < 1.0:
        pairs, x, _, _ = _value_iteration(model, gamma, rho, tol, max_sweeps)
        return _polish(model, pairs, x, gamma, rho)
    pairs, x, _, _ = _value_iteration(model, 1.0, rho, tol, max_sweeps, damping=0.5)
    table = _to_table(model, pairs, x)
    pol = greedy_policy(model, table)
    pi = stationary_distribution(model, pol)
    anchor = sum(pi[s] * table[s, pol[s]] for s in range(model.n_states))
    return table - anchor


def q_fixed_point(model: MdpModel, gamma: float, tol: float = 1e-10, max_sweeps: int = 10**7) -> np.ndarray:
    """Optimal discounted state-action values by value iteration."""
    if not 0.0 <= gamma < 1.0:
        raise ValueError(f"Q fixed point needs 0 <= gamma < 1, got {gamma}")
    pairs, x, _, _ = _value_iteration(model, gamma, 0.0, tol, max_sweeps)
    return _polish(model, pairs, x, gamma, 0.0)


# -- policy enumeration and classification -----------------------------------


def count_policies(model: MdpModel) -> int:
    return math.prod(len(a) for a in model.actions)


def enumerate_policies(model: MdpModel, cap: int = 100_000) -> list[StationaryPolicy]:
    """All deterministic stationary policies, lexicographic in per-state action order."""
    n = count_policies(model)
    if n > cap:
        raise PolicyCapError(
            f"{n} policies exceed the cap of {cap}; pass a structured family "
            "(e.g. control-limit policies) instead"
        )
    return [StationaryPolicy(c) for c in itertools.product(*model.actions)]


def _dominant(members, vectors, tol):
    """Indices whose vector is within ``tol`` of the componentwise max at every entry."""
    best = np.max(np.stack([vectors[i] for i in members]), axis=0)
    return [i for i in members if np.all(vectors[i] >= best - tol)]


def blackwell_classify(
    model: MdpModel,
    policies: Sequence[StationaryPolicy],
    gamma_grid: Sequence[float] = BLACKWELL_GRID,
    tol: float = TIE_TOL,
) -> OptimalityReport:
    """Split candidate policies into gain-, bias- and (grid-)Blackwell-optimal sets.

    Blackwell membership requires a bias-optimal policy to attain the
    componentwise maximum of the discounted values over all candidates at
    every grid discount. Differences are formed as
    ``(rho_a - rho_b) / (1 - gamma) + (X_a - X_b)`` so the large gain term
    does not swamp the comparison.
    """
    if not policies:
        raise ValueError("blackwell_classify needs at least one candidate policy")
    stats = []
    for pol in policies:
        P, r, pi, rho = _chain(model, pol)
        h = _adjusted_solve(P, r, pi, rho, 1.0)
        xs = [_adjusted_solve(P, r, pi, rho, g) for g in gamma_grid]
        stats.append((rho, h, xs))
    gains = np.array([s[0] for s in stats])
    g_best = gains.max()
    idx_all = list(range(len(policies)))
    g_opt = [i for i in idx_all if gains[i] >= g_best - tol]
    b_opt = _dominant(g_opt, {i: stats[i][1] for i in g_opt}, tol)
    bw = []
    for i in b_opt:
        ok = True
        for k, g in enumerate(gamma_grid):
            scale = 1.0 / (1.0 - g)
            for j in idx_all:
                diff = (gains[i] - gains[j]) * scale + (stats[i][2][k] - stats[j][2][k])
                if np.any(diff < -tol):
                    ok = False
                    break
            if not ok:
                break
        if ok:
            bw.append(i)
    pick = lambda ids: tuple(policies[i] for i in ids)
    return OptimalityReport(
        all_policies=len(policies),
        gain_optimal=pick(g_opt),
        bias_optimal=pick(b_opt),
        blackwell=pick(bw),
        gain_value=float(g_best),
        gamma_grid=tuple(gamma_grid),
        gains={policies[i]: float(gains[i]) for i in idx_all},
    )


def preference_switch(
    model: MdpModel,
    pol_a: StationaryPolicy,
    pol_b: StationaryPolicy,
    state: int,
    lo: float,
    hi: float,
    adjusted: bool = False,
) -> float:
    """Discount factor in ``(lo, hi)`` at which ``state`` stops preferring one policy.

    Finds the root of ``V_a(state) - V_b(state)`` (discounted values, or
    adjusted values with ``adjusted=True``) by Brent's method. The gap must
    change sign on the bracket.
    """
    value = adjusted_values if adjusted else discounted_values

    def gap(g):
        return float(value(model, pol_a, g)[state] - value(model, pol_b, g)[state])

    if gap(lo) * gap(hi) > 0:
        raise ValueError(f"value gap does not change sign on [{lo}, {hi}]")
    return float(brentq(gap, lo, hi, xtol=1e-14))
