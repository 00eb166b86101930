"""Builders for the benchmark MDPs and the command-line environment names.

Each builder returns an immutable :class:`MdpModel`. Per-environment
evaluation hints live in ``model.meta``: ``goal_state`` for the gridworld
and ``queue_length`` (a per-state array) for the admission-control queue.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mdp import Branch, MdpModel, RewardSpec, StationaryPolicy

C0 = RewardSpec.constant(0.0)


def _det(next_state: int, reward: float = 0.0) -> tuple[Branch, ...]:
    return (Branch(1.0, next_state, RewardSpec.constant(reward)),)


def three_state() -> MdpModel:
    """Two 2-cycles sharing state 1; the only choice is left or right in state 1.

    Going left collects 2 on leaving state 1, going right collects 2 on the
    way back, so both policies have gain 1 but differ in bias.
    """
    LEFT, RIGHT = 0, 1
    return MdpModel(
        n_states=3,
        actions=((RIGHT,), (LEFT, RIGHT), (LEFT,)),
        transitions={
            (0, RIGHT): _det(1, 0.0),
            (1, LEFT): _det(0, 2.0),
            (1, RIGHT): _det(2, 0.0),
            (2, LEFT): _det(1, 2.0),
        },
        action_labels=("left", "right"),
        state_labels=("0", "1", "2"),
        name="three-state",
    )


def printer_mail() -> MdpModel:
    """A 5-step loop paying 5 and a 10-step loop paying 20, both through state 1."""
    LEFT, RIGHT = 0, 1
    labels = ["1"] + [str(i) for i in range(2, 6)] + [f"{i}'" for i in range(2, 11)]
    printer = [0, 1, 2, 3, 4]
    mail = [0] + list(range(5, 14))
    tr = {(0, LEFT): _det(printer[1]), (0, RIGHT): _det(mail[1])}
    for loop, pay in ((printer, 5.0), (mail, 20.0)):
        for i in range(1, len(loop)):
            nxt = loop[(i + 1) % len(loop)]
            tr[(loop[i], LEFT)] = _det(nxt, pay if nxt == 0 else 0.0)
    actions = [(LEFT, RIGHT)] + [(LEFT,)] * 13
    return MdpModel(
        n_states=14,
        actions=tuple(actions),
        transitions=tr,
        action_labels=("left", "right"),
        state_labels=tuple(labels),
        name="printer-mail",
    )


def parallel_loops() -> MdpModel:
    """Two 8-step loops from S back to S with equal reward totals (6 each).

    The bottom loop pays its rewards earlier. Rewards: T1->T2 1, T3->T4 4,
    T6->E 1 on top; B3->B4 6 on the bottom.
    """
    UP, DOWN, GO = 0, 1, 2
    labels = ["S"] + [f"T{i}" for i in range(1, 7)] + [f"B{i}" for i in range(1, 7)] + ["E"]
    sid = {name: i for i, name in enumerate(labels)}
    top_pay = {"T1": 1.0, "T3": 4.0, "T6": 1.0}
    bot_pay = {"B3": 6.0}
    tr = {(sid["S"], UP): _det(sid["T1"]), (sid["S"], DOWN): _det(sid["B1"])}
    for prefix, pay in (("T", top_pay), ("B", bot_pay)):
        for i in range(1, 7):
            here = f"{prefix}{i}"
            there = f"{prefix}{i + 1}" if i < 6 else "E"
            tr[(sid[here], GO)] = _det(sid[there], pay.get(here, 0.0))
    tr[(sid["E"], GO)] = _det(sid["S"])
    actions = [(UP, DOWN)] + [(GO,)] * 13
    return MdpModel(
        n_states=14,
        actions=tuple(actions),
        transitions=tr,
        action_labels=("up", "down", "go"),
        state_labels=tuple(labels),
        name="parallel-loops",
    )


@dataclass(frozen=True)
class GridPos:
    row: int
    col: int

    def index(self, n: int) -> int:
        return self.row * n + self.col


GRID_MOVES = {0: (-1, 0), 1: (0, 1), 2: (1, 0), 3: (0, -1)}  # up, right, down, left


def gridworld(n: int) -> MdpModel:
    """Non-episodic n x n grid with the goal in the top-left corner.

    The goal's single action teleports uniformly to any cell (goal included)
    and pays 10. Elsewhere up/right/down/left pay Unif(0, 8); a move that
    would leave the grid keeps the agent in place and pays 1 less.
    State ``row * n + col``.
    """
    if n < 2:
        raise ValueError(f"gridworld needs n >= 2, got {n}")
    RANDOM = 4
    tr = {}
    actions = []
    teleport = tuple(Branch(1.0 / n**2, s, RewardSpec.constant(10.0)) for s in range(n * n))
    for row in range(n):
        for col in range(n):
            s = GridPos(row, col).index(n)
            if s == 0:
                actions.append((RANDOM,))
                tr[(s, RANDOM)] = teleport
                continue
            actions.append((0, 1, 2, 3))
            for a, (dr, dc) in GRID_MOVES.items():
                r2, c2 = row + dr, col + dc
                if 0 <= r2 < n and 0 <= c2 < n:
                    tr[(s, a)] = (Branch(1.0, GridPos(r2, c2).index(n), RewardSpec.uniform(0.0, 8.0)),)
                else:
                    tr[(s, a)] = (Branch(1.0, s, RewardSpec.uniform(-1.0, 7.0)),)
    labels = tuple(f"({r},{c})" for r in range(n) for c in range(n))
    return MdpModel(
        n_states=n * n,
        actions=tuple(actions),
        transitions=tr,
        action_labels=("up", "right", "down", "left", "random"),
        state_labels=labels,
        name=f"gridworld:{n}",
        meta={"goal_state": 0, "size": n},
    )


@dataclass(frozen=True)
class QueueState:
    length: int
    arrival: bool

    def index(self) -> int:
        return 2 * self.length + (1 if self.arrival else 0)


def mm1_admission(lam: float, mu: float, R: float, c: float, max_len: int) -> MdpModel:
    """Uniformized M/M/1 admission control with holding cost ``f(l) = c * l``.

    States ``(l, arrival)`` at index ``2 l + arrival``. With an arrival
    pending the agent may accept (unless the queue is full) or reject; with
    no arrival it can only continue. Every step an arrival happens with
    probability ``lam / (lam + mu)``, otherwise a service completion.

    Rewards are scaled by the uniformization rate ``lam + mu``: accepting
    pays ``R - f(l + 1)``, and every step that leaves the queue at length
    ``l`` costs ``f(l)``.
    """
    if lam <= 0 or mu <= 0:
        raise ValueError(f"arrival and service rates must be positive, got ({lam}, {mu})")
    if max_len < 1:
        raise ValueError(f"max_len must be at least 1, got {max_len}")
    ACCEPT, REJECT, CONT = 0, 1, 2
    nu = lam + mu
    p_arr, p_srv = lam / nu, mu / nu
    tr = {}
    actions = []
    for l in range(max_len + 1):
        down = QueueState(max(l - 1, 0), False).index()
        hold = RewardSpec.constant(-c * l * nu if l else 0.0)
        # no arrival pending
        s = QueueState(l, False).index()
        actions.append((CONT,))
        tr[(s, CONT)] = (Branch(p_arr, QueueState(l, True).index(), hold), Branch(p_srv, down, hold))
        # arrival pending
        s = QueueState(l, True).index()
        rej = (Branch(p_arr, s, hold), Branch(p_srv, down, hold))
        if l < max_len:
            acc_r = RewardSpec.constant((R - c * (l + 1)) * nu)
            tr[(s, ACCEPT)] = (
                Branch(p_arr, QueueState(l + 1, True).index(), acc_r),
                Branch(p_srv, QueueState(l, False).index(), acc_r),
            )
            actions.append((ACCEPT, REJECT))
        else:
            actions.append((REJECT,))
        tr[(s, REJECT)] = rej
    labels = tuple(f"({l},{'T' if arr else 'F'})" for l in range(max_len + 1) for arr in (False, True))
    qlen = np.repeat(np.arange(max_len + 1, dtype=np.float64), 2)
    return MdpModel(
        n_states=2 * (max_len + 1),
        actions=tuple(actions),
        transitions=tr,
        action_labels=("accept", "reject", "continue"),
        state_labels=labels,
        name=f"mm1:{lam:g},{mu:g},{R:g},{c:g},{max_len}",
        meta={"queue_length": qlen, "max_len": max_len},
    )


def control_limit_policy(model: MdpModel, limit: int) -> StationaryPolicy:
    """Admit an arriving job iff the queue holds fewer than ``limit`` jobs."""
    max_len = model.meta["max_len"]
    if not 0 <= limit <= max_len + 1:
        raise ValueError(f"control limit must lie in [0, {max_len + 1}], got {limit}")
    choice = []
    for l in range(max_len + 1):
        choice.append(2)
        choice.append(0 if l < limit and l < max_len else 1)
    return model.policy(choice)


def control_limit_family(model: MdpModel) -> list[StationaryPolicy]:
    return [control_limit_policy(model, L) for L in range(model.meta["max_len"] + 1)]


def queue_length_mean(model: MdpModel, pi: np.ndarray) -> float:
    return float(pi @ model.meta["queue_length"])


class EnvSpecError(ValueError):
    """An environment name could not be parsed."""


BUILDERS = {
    "three-state": three_state,
    "printer-mail": printer_mail,
    "parallel-loops": parallel_loops,
}


def parse_env(spec: str) -> MdpModel:
    """Build a model from a CLI name such as ``gridworld:5`` or ``mm1:5,5,12,1,20``."""
    name, sep, args = spec.strip().partition(":")
    if name in BUILDERS:
        if sep:
            raise EnvSpecError(f"{name!r} takes no parameters (at position {len(name)})")
        return BUILDERS[name]()
    if name == "gridworld":
        try:
            n = int(args)
        except ValueError:
            raise EnvSpecError(f"gridworld needs an integer size, got {args!r} at position {len(name) + 1}") from None
        return gridworld(n)
    if name == "mm1":
        parts = args.split(",")
        if len(parts) != 5:
            raise EnvSpecError(f"mm1 needs lambda,mu,R,c,maxlen; got {len(parts)} fields at position {len(name) + 1}")
        pos = len(name) + 1
        vals = []
        for i, p in enumerate(parts):
            try:
                vals.append(int(p) if i == 4 else float(p))
            except ValueError:
                raise EnvSpecError(f"bad mm1 field {p!r} at position {pos}") from None
            pos += len(p) + 1
        return mm1_admission(*vals)
    known = ", ".join([*BUILDERS, "gridworld:N", "mm1:lambda,mu,R,c,maxlen"])
    raise EnvSpecError(f"unknown environment {name!r} at position 0; known: {known}")
