"""Tabular MDP data model, stationary policies and seeded sampling.

States and actions are dense integer ids. Action ids are global to a model
(``model.action_labels[a]`` names action ``a``) and every state lists the
subset it allows. Rewards hang off transition branches, so a branch
``(p, next_state, reward)`` carries its own reward distribution.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Mapping, Sequence

import numpy as np

PROB_TOL = 1e-12


class ModelError(ValueError):
    """Raised when an MDP violates its structural invariants.

    ``violations`` holds one human-readable line per broken invariant.
    """

    def __init__(self, violations: Sequence[str]):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class InvalidActionError(ValueError):
    """An action was requested that the state does not offer."""

    def __init__(self, s: int, a: int):
        self.s, self.a = s, a
        super().__init__(f"action {a} is not available in state {s}")


@dataclass(frozen=True)
class RewardSpec:
    """Reward distribution of a single transition branch."""

    kind: str
    lo: float
    hi: float

    @classmethod
    def constant(cls, value: float) -> "RewardSpec":
        return cls("constant", float(value), float(value))

    @classmethod
    def uniform(cls, lo: float, hi: float) -> "RewardSpec":
        if lo > hi:
            raise ValueError(f"uniform reward needs lo <= hi, got ({lo}, {hi})")
        return cls("uniform", float(lo), float(hi))

    @property
    def mean(self) -> float:
        if self.kind == "constant":
            return self.lo
        return (self.lo + self.hi) / 2

    def sample(self, u: float) -> float:
        # Same expression as the compiled kernels; keep in sync.
        return self.lo + (self.hi - self.lo) * u

    def to_dict(self) -> dict:
        if self.kind == "constant":
            return {"kind": "constant", "value": self.lo}
        return {"kind": "uniform", "lo": self.lo, "hi": self.hi}

    @classmethod
    def from_dict(cls, d: Mapping) -> "RewardSpec":
        kind = d.get("kind")
        if kind == "constant":
            return cls.constant(d["value"])
        if kind == "uniform":
            return cls.uniform(d["lo"], d["hi"])
        raise ValueError(f"unknown reward kind {kind!r}")


@dataclass(frozen=True)
class Branch:
    p: float
    next_state: int
    reward: RewardSpec


@dataclass(frozen=True)
class StationaryPolicy:
    """Deterministic stationary policy: ``choice[s]`` is the action in ``s``."""

    choice: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "choice", tuple(int(a) for a in self.choice))

    def __getitem__(self, s: int) -> int:
        return self.choice[s]

    def __len__(self) -> int:
        return len(self.choice)


@dataclass(frozen=True)
class Transition:
    s: int
    a: int
    r: float
    s_next: int
    was_random_action: bool = False


@dataclass(frozen=True)
class CompiledModel:
    """Flat array view of an MdpModel used by the numeric kernels.

    ``sa_row[s, a]`` indexes the branch CSR (``br_ptr``) or is -1 when ``a``
    is not offered in ``s``. ``br_cum`` holds cumulative branch probabilities.
    """

    act_ptr: np.ndarray
    act_ids: np.ndarray
    sa_row: np.ndarray
    br_ptr: np.ndarray
    br_cum: np.ndarray
    br_next: np.ndarray
    br_lo: np.ndarray
    br_hi: np.ndarray


@dataclass(frozen=True, eq=False)
class MdpModel:
    """Finite MDP with per-state action sets and branch-level rewards.

    Parameters
    ----------
    n_states:
        Number of states; ids are ``0 .. n_states - 1``.
    actions:
        ``actions[s]`` is the ordered tuple of action ids allowed in ``s``.
    transitions:
        Maps ``(s, a)`` to a tuple of :class:`Branch`.
    action_labels, state_labels:
        Optional names; metadata only.
    """

    n_states: int
    actions: tuple[tuple[int, ...], ...]
    transitions: Mapping[tuple[int, int], tuple[Branch, ...]]
    action_labels: tuple[str, ...] = ()
    state_labels: tuple[str, ...] = ()
    name: str = ""
    meta: Mapping = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "actions", tuple(tuple(int(a) for a in acts) for acts in self.actions))
        object.__setattr__(
            self,
            "transitions",
            {(int(s), int(a)): tuple(brs) for (s, a), brs in self.transitions.items()},
        )
        if not self.action_labels:
            n_ids = 1 + max((a for acts in self.actions for a in acts), default=-1)
            object.__setattr__(self, "action_labels", tuple(str(a) for a in range(n_ids)))
        if not self.state_labels:
            object.__setattr__(self, "state_labels", tuple(str(s) for s in range(self.n_states)))
        violations = check_model(self)
        if violations:
            raise ModelError(violations)

    @property
    def n_action_ids(self) -> int:
        return len(self.action_labels)

    def state_id(self, label: str) -> int:
        return self.state_labels.index(label)

    def action_id(self, label: str) -> int:
        return self.action_labels.index(label)

    def branches(self, s: int, a: int) -> tuple[Branch, ...]:
        try:
            return self.transitions[(s, a)]
        except KeyError:
            raise InvalidActionError(s, a) from None

    def check_policy(self, pol: StationaryPolicy) -> None:
        if len(pol) != self.n_states:
            raise ValueError(f"policy covers {len(pol)} states, model has {self.n_states}")
        for s, a in enumerate(pol.choice):
            if a not in self.actions[s]:
                raise InvalidActionError(s, a)

    def policy(self, choice: Mapping[int, int] | Sequence[int]) -> StationaryPolicy:
        """Build a validated policy; states missing from a mapping take their first action."""
        if isinstance(choice, Mapping):
            full = [choice.get(s, self.actions[s][0]) for s in range(self.n_states)]
        else:
            full = list(choice)
        pol = StationaryPolicy(tuple(full))
        self.check_policy(pol)
        return pol

    @cached_property
    def compiled(self) -> CompiledModel:
        S, A = self.n_states, self.n_action_ids
        act_ptr = np.zeros(S + 1, dtype=np.int64)
        for s in range(S):
            act_ptr[s + 1] = act_ptr[s] + len(self.actions[s])
        act_ids = np.array([a for acts in self.actions for a in acts], dtype=np.int64)
        sa_row = -np.ones((S, A), dtype=np.int64)
        br_ptr = [0]
        cum, nxt, lo, hi = [], [], [], []
        row = 0
        for s in range(S):
            for a in self.actions[s]:
                sa_row[s, a] = row
                row += 1
                brs = self.transitions[(s, a)]
                cum.extend(np.cumsum([b.p for b in brs]).tolist())
                nxt.extend(b.next_state for b in brs)
                lo.extend(b.reward.lo for b in brs)
                hi.extend(b.reward.hi for b in brs)
                br_ptr.append(len(cum))
        return CompiledModel(
            act_ptr=act_ptr,
            act_ids=act_ids,
            sa_row=sa_row,
            br_ptr=np.array(br_ptr, dtype=np.int64),
            br_cum=np.array(cum, dtype=np.float64),
            br_next=np.array(nxt, dtype=np.int64),
            br_lo=np.array(lo, dtype=np.float64),
            br_hi=np.array(hi, dtype=np.float64),
        )

    # -- serialization -------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "n_states": self.n_states,
            "actions": {str(s): list(acts) for s, acts in enumerate(self.actions)},
            "action_labels": list(self.action_labels),
            "state_labels": list(self.state_labels),
            "transitions": [
                {
                    "s": s,
                    "a": a,
                    "branches": [
                        {"p": b.p, "next": b.next_state, "reward": b.reward.to_dict()} for b in brs
                    ],
                }
                for (s, a), brs in sorted(self.transitions.items())
            ],
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_dict(cls, d: Mapping) -> "MdpModel":
        n = int(d["n_states"])
        acts_raw = d["actions"]
        actions = tuple(tuple(acts_raw.get(str(s), acts_raw.get(s, ()))) for s in range(n))
        transitions = {}
        for entry in d["transitions"]:
            brs = tuple(
                Branch(float(b["p"]), int(b["next"]), RewardSpec.from_dict(b["reward"]))
                for b in entry["branches"]
            )
            transitions[(int(entry["s"]), int(entry["a"]))] = brs
        return cls(
            n_states=n,
            actions=actions,
            transitions=transitions,
            action_labels=tuple(d.get("action_labels", ())),
            state_labels=tuple(d.get("state_labels", ())),
            name=d.get("name", ""),
        )

    @classmethod
    def from_json(cls, text: str) -> "MdpModel":
        return cls.from_dict(json.loads(text))


def check_model(model: MdpModel) -> list[str]:
    """Return every invariant violation of ``model`` (empty when clean)."""
    out = []
    if model.n_states < 1:
        out.append(f"n_states must be positive, got {model.n_states}")
    if len(model.actions) != model.n_states:
        out.append(f"actions lists {len(model.actions)} states, expected {model.n_states}")
    for s, acts in enumerate(model.actions):
        if not acts:
            out.append(f"state {s} has no actions")
        if len(set(acts)) != len(acts):
            out.append(f"state {s} lists duplicate actions {acts}")
        for a in acts:
            if not 0 <= a < len(model.action_labels):
                out.append(f"state {s} action {a} has no label")
            if (s, a) not in model.transitions:
                out.append(f"missing transitions for (s={s}, a={a})")
    for (s, a), brs in sorted(model.transitions.items()):
        if s >= len(model.actions) or a not in model.actions[s]:
            out.append(f"transitions given for undeclared pair (s={s}, a={a})")
        if not brs:
            out.append(f"(s={s}, a={a}) has no branches")
            continue
        total = 0.0
        for b in brs:
            if not 0.0 <= b.p <= 1.0:
                out.append(f"(s={s}, a={a}) branch probability {b.p} outside [0, 1]")
            if not 0 <= b.next_state < model.n_states:
                out.append(f"(s={s}, a={a}) next state {b.next_state} out of range")
            total += b.p
        if abs(total - 1.0) > PROB_TOL:
            out.append(f"(s={s}, a={a}) probabilities sum to {total!r}, not 1")
    if len(model.state_labels) != model.n_states:
        out.append("state_labels length does not match n_states")
    return out


class RngStream:
    """Seeded substream keyed by (seed, replication, purpose).

    Streams are Philox generators spawned from one ``SeedSequence`` so any
    two distinct keys are independent and equal keys replay bit-for-bit.
    ``cursor`` counts the uniforms handed out so far.
    """

    PURPOSES = {"env": 0, "agent": 1, "eval_env": 2, "eval_agent": 3}

    def __init__(self, seed: int, replication: int = 0, purpose: str = "env"):
        self.seed = int(seed)
        self.replication = int(replication)
        self.purpose = purpose
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.replication, self.PURPOSES[purpose]))
        self._gen = np.random.Generator(np.random.Philox(ss))
        self.cursor = 0

    def uniforms(self, n: int, width: int = 1) -> np.ndarray:
        """Draw an ``(n, width)`` block of U[0, 1) variates in stream order."""
        out = self._gen.random((n, width))
        self.cursor += n * width
        return out

    def uniform(self) -> float:
        return float(self.uniforms(1, 1)[0, 0])


def _pick_branch(cm: CompiledModel, row: int, u: float) -> int:
    j = int(cm.br_ptr[row])
    end = int(cm.br_ptr[row + 1]) - 1
    while j < end and u >= cm.br_cum[j]:
        j += 1
    return j


def sample_step(model: MdpModel, s: int, a: int, rng: RngStream | np.ndarray) -> Transition:
    """Sample one transition from ``(s, a)``.

    ``rng`` is either an :class:`RngStream` (two uniforms are consumed: one
    picks the branch, one draws the reward) or a pre-drawn pair of uniforms.
    """
    cm = model.compiled
    if not (0 <= s < model.n_states and 0 <= a < model.n_action_ids) or cm.sa_row[s, a] < 0:
        raise InvalidActionError(s, a)
    u = rng.uniforms(1, 2)[0] if isinstance(rng, RngStream) else rng
    j = _pick_branch(cm, int(cm.sa_row[s, a]), float(u[0]))
    r = cm.br_lo[j] + (cm.br_hi[j] - cm.br_lo[j]) * float(u[1])
    return Transition(s, a, float(r), int(cm.br_next[j]))


def expected_reward(model: MdpModel, s: int, a: int) -> float:
    return float(sum(b.p * b.reward.mean for b in model.branches(s, a)))


def expected_rewards(model: MdpModel, pol: StationaryPolicy) -> np.ndarray:
    model.check_policy(pol)
    return np.array([expected_reward(model, s, pol[s]) for s in range(model.n_states)])


def transition_matrix(model: MdpModel, pol: StationaryPolicy) -> np.ndarray:
    """Row-stochastic matrix of the chain induced by ``pol``."""
    model.check_policy(pol)
    P = np.zeros((model.n_states, model.n_states))
    for s in range(model.n_states):
        for b in model.transitions[(s, pol[s])]:
            P[s, b.next_state] += b.p
    return P


def state_action_pairs(model: MdpModel) -> Iterable[tuple[int, int]]:
    for s, acts in enumerate(model.actions):
        for a in acts:
            yield s, a
