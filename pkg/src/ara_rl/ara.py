"""Average-reward-adjusted discounted learner (reference implementation).

The learner keeps two tables of adjusted state-action values for discount
factors ``gamma0 < gamma1`` and a separate average-reward estimate ``rho``.
Actions are picked greedily under an epsilon-sensitive lexicographic order
on ``(x1, x0)``: ``x1`` decides unless two actions are within ``epsilon``,
in which case ``x0`` (the more short-sighted table) breaks the tie.

This module is the readable, step-at-a-time version. The harness runs the
compiled kernels in :mod:`ara_rl.kernels`, which perform the same floating
point operations in the same order; tests check the two agree bit-for-bit.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .mdp import MdpModel, Transition, sample_step
from .schedule import DecaySchedule

LB_RATE = 1.0 / 50.0
LB_SHARE = 0.975


@dataclass(frozen=True)
class AraParams:
    """Hyperparameters of the ARA learner.

    ``w`` is the exponential smoothing rate of the value tables (config key
    ``gamma_lr``); ``alpha`` smooths the average-reward estimate.
    """

    gamma0: float = 0.8
    gamma1: float = 1.0
    epsilon: float = 0.25
    alpha: DecaySchedule = DecaySchedule(0.01, 0.5, 50_000, 1e-5)
    w: DecaySchedule = DecaySchedule(0.01, 0.5, 150_000, 1e-3)
    p_exp: DecaySchedule = DecaySchedule(1.0, 0.5, 100_000, 0.01)
    rho_lower_bound: bool = True

    def __post_init__(self):
        if not 0.5 <= self.gamma0 < self.gamma1 <= 1.0:
            raise ValueError(
                f"discount factors must satisfy 0.5 <= gamma0 < gamma1 <= 1, got {self.gamma0}, {self.gamma1}"
            )
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be non-negative, got {self.epsilon}")


@dataclass
class AraLearnerState:
    x0: np.ndarray
    x1: np.ndarray
    rho: float = 0.0
    rho_lb: float = 0.0
    t: int = 0

    @classmethod
    def fresh(cls, model: MdpModel) -> "AraLearnerState":
        shape = (model.n_states, model.n_action_ids)
        return cls(np.zeros(shape), np.zeros(shape))

    def snapshot(self) -> dict:
        return {
            "kind": "ara",
            "x0": self.x0.tolist(),
            "x1": self.x1.tolist(),
            "rho": self.rho,
            "rho_lb": self.rho_lb,
            "t": self.t,
        }

    def to_json(self) -> str:
        return json.dumps(self.snapshot())

    @classmethod
    def from_snapshot(cls, d: dict) -> "AraLearnerState":
        return cls(np.array(d["x0"], dtype=float), np.array(d["x1"], dtype=float), d["rho"], d["rho_lb"], d["t"])


def lex_argmax(pairs: Sequence[tuple[float, float]], epsilon: float) -> list[int]:
    """Maximal indices under the epsilon-sensitive lexicographic order.

    Index ``i`` survives unless some ``j`` beats it by more than ``epsilon``
    in the first component, or ties it within ``epsilon`` there and beats it
    by more than ``epsilon`` in the second.

    "Beats" is not transitive, so with three or more pairs every index can be
    beaten by another (a cycle). In that case the set falls back to a staged
    filter: keep the indices within ``epsilon`` of the best first component,
    then those within ``epsilon`` of the best second component among them.

    >>> lex_argmax([(0.493, 0.555), (0.492, 0.145)], 0.25)
    [0]
    >>> lex_argmax([(0.0, 10.0), (0.2, 5.0), (0.4, 0.0)], 0.25)
    [1]
    """
    if len(pairs) == 0:
        raise ValueError("lex_argmax needs at least one pair")
    out = []
    for i, (a1, a0) in enumerate(pairs):
        beaten = False
        for b1, b0 in pairs:
            if b1 > a1 + epsilon or (abs(b1 - a1) <= epsilon and b0 > a0 + epsilon):
                beaten = True
                break
        if not beaten:
            out.append(i)
    if out:
        return out
    m1 = max(p[0] for p in pairs)
    near = [i for i, p in enumerate(pairs) if not m1 > p[0] + epsilon]
    m0 = max(pairs[i][1] for i in near)
    return [i for i in near if not m0 > pairs[i][1] + epsilon]


def select_action(
    state: AraLearnerState,
    actions: Sequence[int],
    s: int,
    p_exp: float,
    u: Sequence[float],
    epsilon: float,
) -> tuple[int, bool]:
    """Exploratory or lexicographically greedy action for state ``s``.

    ``u`` holds three uniforms: explore-or-not, the random action and the
    tie-break among greedy winners. All three are always consumed so that
    runs with different policies stay aligned on the random stream.
    """
    n = len(actions)
    if u[0] < p_exp:
        return actions[min(int(u[1] * n), n - 1)], True
    win = lex_argmax([(state.x1[s, a], state.x0[s, a]) for a in actions], epsilon)
    k = len(win)
    return actions[win[min(int(u[2] * k), k - 1)]], False


def _max_over(table: np.ndarray, s: int, actions: Sequence[int]) -> float:
    m = -math.inf
    for a in actions:
        v = table[s, a]
        if v > m:
            m = v
    return m


def update_rho(state: AraLearnerState, tr: Transition, alpha: float, next_actions: Sequence[int], lower_bound: bool = True) -> float:
    """Average-reward step on greedy transitions only; reads ``x1`` before it is updated."""
    if tr.was_random_action:
        return state.rho
    target = tr.r + _max_over(state.x1, tr.s_next, next_actions) - state.x1[tr.s, tr.a]
    rho = (1.0 - alpha) * state.rho + alpha * target
    if lower_bound and rho < state.rho_lb:
        rho = state.rho_lb
    state.rho = rho
    return rho


def update_rho_lower_bound(state: AraLearnerState) -> float:
    """Smooth the lower bound toward 97.5% of the current estimate.

    The bound is capped at ``rho`` so the clamp invariant ``rho >= rho_lb``
    also holds while ``rho`` is negative.
    """
    lb = (1.0 - LB_RATE) * state.rho_lb + LB_RATE * (LB_SHARE * state.rho)
    if lb > state.rho:
        lb = state.rho
    state.rho_lb = lb
    return lb


def update_values(state: AraLearnerState, tr: Transition, w: float, gammas: tuple[float, float], next_actions: Sequence[int]) -> float:
    """Smooth both tables toward their adjusted Bellman targets.

    Returns the largest absolute change of the two entries.
    """
    s, a, r, s2 = tr.s, tr.a, tr.r, tr.s_next
    m0 = _max_over(state.x0, s2, next_actions)
    m1 = _max_over(state.x1, s2, next_actions)
    old0, old1 = state.x0[s, a], state.x1[s, a]
    new0 = (1.0 - w) * old0 + w * (r + gammas[0] * m0 - state.rho)
    new1 = (1.0 - w) * old1 + w * (r + gammas[1] * m1 - state.rho)
    state.x0[s, a] = new0
    state.x1[s, a] = new1
    return max(abs(new0 - old0), abs(new1 - old1))


@dataclass
class AraAgent:
    """Step-at-a-time ARA learner bound to one model."""

    model: MdpModel
    params: AraParams
    state: AraLearnerState = field(default=None)

    def __post_init__(self):
        if self.state is None:
            self.state = AraLearnerState.fresh(self.model)

    def step(self, s: int, env_u: Sequence[float], agent_u: Sequence[float]) -> tuple[Transition, float]:
        """One iteration of the learning loop from state ``s``.

        Returns the realized transition and the largest table change.
        """
        st, p = self.state, self.params
        acts = self.model.actions
        a, rnd = select_action(st, acts[s], s, p.p_exp.value(st.t), agent_u, p.epsilon)
        tr = sample_step(self.model, s, a, env_u)
        tr = Transition(tr.s, tr.a, tr.r, tr.s_next, rnd)
        update_rho(st, tr, p.alpha.value(st.t), acts[tr.s_next], p.rho_lower_bound)
        if p.rho_lower_bound:
            update_rho_lower_bound(st)
        change = update_values(st, tr, p.w.value(st.t), (p.gamma0, p.gamma1), acts[tr.s_next])
        st.t += 1
        return tr, change

    def greedy_action(self, s: int, u_tie: float) -> int:
        a, _ = select_action(self.state, self.model.actions[s], s, 0.0, (1.0, 0.0, u_tie), self.params.epsilon)
        return a


def ara_step(model: MdpModel, state: AraLearnerState, params: AraParams, s: int, env_u, agent_u) -> Transition:
    """Functional form of :meth:`AraAgent.step`."""
    tr, _ = AraAgent(model, params, state).step(s, env_u, agent_u)
    return tr
