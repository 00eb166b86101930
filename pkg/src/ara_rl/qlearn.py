"""Watkins Q-learning baseline (reference implementation).

Mirrors :mod:`ara_rl.ara` in structure and random-number use, so both
learners see the same environment draws step for step until their actions
diverge. ``epsilon_opt`` turns the greedy max into "any action within
``epsilon_opt`` of the max".
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .ara import _max_over
from .mdp import MdpModel, Transition, sample_step
from .schedule import DecaySchedule


@dataclass(frozen=True)
class QParams:
    gamma1: float = 0.99
    w: DecaySchedule = DecaySchedule(0.01, 0.5, 150_000, 1e-3)
    p_exp: DecaySchedule = DecaySchedule(1.0, 0.5, 100_000, 0.01)
    epsilon_opt: Optional[float] = None

    def __post_init__(self):
        if not 0.0 <= self.gamma1 < 1.0:
            raise ValueError(f"Q-learning needs 0 <= gamma1 < 1, got {self.gamma1}")
        if self.epsilon_opt is not None and self.epsilon_opt < 0:
            raise ValueError(f"epsilon_opt must be non-negative, got {self.epsilon_opt}")


@dataclass
class QLearnerState:
    q: np.ndarray
    t: int = 0

    @classmethod
    def fresh(cls, model: MdpModel) -> "QLearnerState":
        return cls(np.zeros((model.n_states, model.n_action_ids)))

    def snapshot(self) -> dict:
        return {"kind": "qlearn", "q": self.q.tolist(), "t": self.t}

    def to_json(self) -> str:
        return json.dumps(self.snapshot())

    @classmethod
    def from_snapshot(cls, d: dict) -> "QLearnerState":
        return cls(np.array(d["q"], dtype=float), d["t"])


def q_select_action(
    state: QLearnerState,
    actions: Sequence[int],
    s: int,
    p_exp: float,
    u: Sequence[float],
    epsilon_opt: Optional[float] = None,
) -> tuple[int, bool]:
    """Exploratory or greedy action; ``u`` holds three uniforms as for ARA."""
    n = len(actions)
    if u[0] < p_exp:
        return actions[min(int(u[1] * n), n - 1)], True
    eps = 0.0 if epsilon_opt is None else epsilon_opt
    best = _max_over(state.q, s, actions)
    win = [a for a in actions if not state.q[s, a] + eps < best]
    k = len(win)
    return win[min(int(u[2] * k), k - 1)], False


def q_update(state: QLearnerState, tr: Transition, w: float, gamma1: float, next_actions: Sequence[int]) -> float:
    """One Q-learning update; returns the absolute change of the entry."""
    m = _max_over(state.q, tr.s_next, next_actions)
    old = state.q[tr.s, tr.a]
    new = (1.0 - w) * old + w * (tr.r + gamma1 * m)
    state.q[tr.s, tr.a] = new
    return abs(new - old)


@dataclass
class QAgent:
    model: MdpModel
    params: QParams
    state: QLearnerState = field(default=None)

    def __post_init__(self):
        if self.state is None:
            self.state = QLearnerState.fresh(self.model)

    def step(self, s: int, env_u: Sequence[float], agent_u: Sequence[float]) -> tuple[Transition, float]:
        st, p = self.state, self.params
        acts = self.model.actions
        a, rnd = q_select_action(st, acts[s], s, p.p_exp.value(st.t), agent_u, p.epsilon_opt)
        tr = sample_step(self.model, s, a, env_u)
        tr = Transition(tr.s, tr.a, tr.r, tr.s_next, rnd)
        change = q_update(st, tr, p.w.value(st.t), p.gamma1, acts[tr.s_next])
        st.t += 1
        return tr, change
