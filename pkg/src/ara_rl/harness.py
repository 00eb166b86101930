"""Experiment configuration, replication runs and aggregation.

Random numbers follow a common-random-numbers layout: replication ``k``
owns four independent streams (training environment, training agent,
evaluation environment, evaluation agent). Every step consumes exactly two
environment uniforms and three agent uniforms whatever happens, so two
algorithms with the same seed see identical environment draws at every
step index.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Optional, Sequence

import numpy as np

from . import kernels
from .ara import AraAgent, AraLearnerState, AraParams
from .environments import parse_env
from .mdp import MdpModel, RngStream
from .qlearn import QAgent, QLearnerState, QParams
from .schedule import DecaySchedule

CHUNK = 1 << 16
CONVERGENCE_CAP = 20_000_000


class ConfigError(ValueError):
    """Configuration problems, all collected before raising."""

    def __init__(self, problems: Sequence[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


@dataclass(frozen=True)
class ConvergenceMode:
    window: int = 100_000
    tol: float = 1e-9
    cap: int = CONVERGENCE_CAP


@dataclass(frozen=True)
class AlgorithmConfig:
    label: str
    kind: str  # "ara" or "qlearn"
    params: AraParams | QParams


@dataclass(frozen=True)
class ExperimentConfig:
    env: str
    algorithms: tuple[AlgorithmConfig, ...]
    learn_steps: int = 0
    eval_steps: int = 0
    replications: int = 1
    seed: int = 0
    convergence: Optional[ConvergenceMode] = None
    start_state: int = 0
    name: str = ""
    report_state: Optional[str] = None

    def __post_init__(self):
        problems = []
        if self.replications < 1:
            problems.append(f"replications must be >= 1, got {self.replications}")
        if self.learn_steps < 0 or self.eval_steps < 0:
            problems.append("learn_steps and eval_steps must be non-negative")
        if not self.algorithms:
            problems.append("at least one algorithm is required")
        labels = [a.label for a in self.algorithms]
        if len(set(labels)) != len(labels):
            problems.append(f"algorithm labels must be unique, got {labels}")
        if problems:
            raise ConfigError(problems)

    @cached_property
    def model(self) -> MdpModel:
        return parse_env(self.env)


@dataclass
class ReplicationResult:
    algorithm: str
    replication: int
    sum_reward: float
    eval_steps: int
    steps_to_goal_mean: float
    queue_length_mean: float
    final_rho: float
    learn_steps_used: int
    converged: Optional[bool]
    state_values: dict = field(default_factory=dict)
    learner: AraLearnerState | QLearnerState = field(repr=False, default=None)

    @property
    def reward_per_step(self) -> float:
        return self.sum_reward / self.eval_steps if self.eval_steps else 0.0

    def row(self) -> dict:
        return {
            "algorithm": self.algorithm,
            "replication": self.replication,
            "sum_reward": self.sum_reward,
            "reward_per_step": self.reward_per_step,
            "steps_to_goal_mean": self.steps_to_goal_mean,
            "queue_length_mean": self.queue_length_mean,
            "final_rho": self.final_rho,
            "learn_steps_used": self.learn_steps_used,
            "converged": "" if self.converged is None else int(self.converged),
            **{f"value[{k}]": v for k, v in self.state_values.items()},
        }


# -- config parsing ----------------------------------------------------------

ARA_KEYS = {"gamma0", "gamma1", "epsilon", "alpha", "gamma_lr", "p_exp", "rho_lower_bound"}
Q_KEYS = {"gamma1", "gamma_lr", "p_exp", "epsilon_opt"}
TOP_KEYS = {
    "name", "env", "seed", "replications", "learn_steps", "eval_steps",
    "convergence", "start_state", "defaults", "algorithms", "report_state",
}


def _sched(v, where, problems):
    try:
        return DecaySchedule.from_dict(v)
    except (KeyError, TypeError, ValueError) as exc:
        problems.append(f"{where}: bad schedule {v!r} ({exc})")
        return None


def _algorithm(d: dict, defaults: dict, idx: int, problems: list) -> Optional[AlgorithmConfig]:
    where = f"algorithms[{idx}]"
    kind = d.get("kind")
    label = d.get("label", f"{kind}-{idx}")
    if kind not in ("ara", "qlearn"):
        problems.append(f"{where}: kind must be 'ara' or 'qlearn', got {kind!r}")
        return None
    allowed = ARA_KEYS if kind == "ara" else Q_KEYS
    merged = {k: v for k, v in defaults.items() if k in allowed}
    for k, v in d.items():
        if k in ("kind", "label"):
            continue
        if k not in allowed:
            problems.append(f"{where}: unknown key {k!r} for kind {kind}")
            continue
        merged[k] = v
    n_before = len(problems)
    kw = {}
    for k, v in merged.items():
        if k in ("alpha", "gamma_lr", "p_exp"):
            kw["w" if k == "gamma_lr" else k] = _sched(v, f"{where}.{k}", problems)
        else:
            kw[k] = v
    if len(problems) > n_before:
        return None
    try:
        params = AraParams(**kw) if kind == "ara" else QParams(**kw)
    except (TypeError, ValueError) as exc:
        problems.append(f"{where}: {exc}")
        return None
    return AlgorithmConfig(label, kind, params)


def config_from_dict(d: dict) -> ExperimentConfig:
    """Validate a JSON-style config, reporting every problem at once."""
    problems = []
    for k in d:
        if k not in TOP_KEYS:
            problems.append(f"unknown top-level key {k!r}")
    for k in ("env", "algorithms"):
        if k not in d:
            problems.append(f"missing required key {k!r}")
    if "env" in d:
        try:
            parse_env(d["env"])
        except ValueError as exc:
            problems.append(f"env: {exc}")
    for k in ("seed", "replications", "learn_steps", "eval_steps", "start_state"):
        if k in d and (not isinstance(d[k], int) or isinstance(d[k], bool)):
            problems.append(f"{k} must be an integer, got {d[k]!r}")
    defaults = d.get("defaults", {})
    algos = []
    for i, a in enumerate(d.get("algorithms", [])):
        if not isinstance(a, dict):
            problems.append(f"algorithms[{i}] must be an object")
            continue
        alg = _algorithm(a, defaults, i, problems)
        if alg is not None:
            algos.append(alg)
    conv = None
    if d.get("convergence") is not None:
        c = d["convergence"]
        try:
            conv = ConvergenceMode(int(c.get("window", 100_000)), float(c.get("tol", 1e-9)), int(c.get("cap", CONVERGENCE_CAP)))
        except (AttributeError, TypeError, ValueError) as exc:
            problems.append(f"convergence: {exc}")
    if problems:
        raise ConfigError(problems)
    try:
        return ExperimentConfig(
            env=d["env"],
            algorithms=tuple(algos),
            learn_steps=d.get("learn_steps", 0),
            eval_steps=d.get("eval_steps", 0),
            replications=d.get("replications", 1),
            seed=d.get("seed", 0),
            convergence=conv,
            start_state=d.get("start_state", 0),
            name=d.get("name", ""),
            report_state=d.get("report_state"),
        )
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError([str(exc)]) from None


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError([f"{path}: invalid JSON ({exc})"]) from None
    return config_from_dict(d)


# -- single replication ------------------------------------------------------


def _cm_args(model: MdpModel):
    cm = model.compiled
    return (cm.act_ptr, cm.act_ids, cm.sa_row, cm.br_ptr, cm.br_cum, cm.br_next, cm.br_lo, cm.br_hi)


def _sched_rows(*scheds: DecaySchedule) -> np.ndarray:
    return np.array([s.as_tuple() for s in scheds], dtype=np.float64)


def _train(model, alg, learner, s, budget, env_rng, agent_rng, conv, backend):
    """Train in chunks; returns (state, steps, converged or None)."""
    window = conv.window if conv else 0
    tol = conv.tol if conv else 1e-9
    last = -1
    t = 0
    p = alg.params
    if backend == "python":
        agent = AraAgent(model, p, learner) if alg.kind == "ara" else QAgent(model, p, learner)
    while t < budget:
        n = min(CHUNK, budget - t)
        eu = env_rng.uniforms(n, 2)
        au = agent_rng.uniforms(n, 3)
        if backend == "python":
            done = 0
            for i in range(n):
                tr, change = agent.step(s, eu[i], au[i])
                s = tr.s_next
                if change > tol:
                    last = t + i
                done = i + 1
                if window > 0 and t + i - last >= window:
                    break
        elif alg.kind == "ara":
            scal = np.array([learner.rho, learner.rho_lb])
            s, done, last = kernels.ara_train(
                *_cm_args(model), learner.x0, learner.x1, scal, s, learner.t, n, eu, au,
                p.gamma0, p.gamma1, p.epsilon, _sched_rows(p.alpha, p.w, p.p_exp),
                p.rho_lower_bound, tol, window, last,
            )
            learner.rho, learner.rho_lb = float(scal[0]), float(scal[1])
            learner.t += done
        else:
            eps = 0.0 if p.epsilon_opt is None else p.epsilon_opt
            s, done, last = kernels.q_train(
                *_cm_args(model), learner.q, s, learner.t, n, eu, au,
                p.gamma1, eps, _sched_rows(p.w, p.w, p.p_exp), tol, window, last,
            )
            learner.t += done
        t += done
        if window > 0 and done < n:
            return s, t, True
        if window > 0 and t - 1 - last >= window:
            return s, t, True
    return s, t, (False if window > 0 else None)


def _evaluate(model, alg, learner, s, steps, env_rng, agent_rng):
    goal = int(model.meta.get("goal_state", -1))
    metric = np.asarray(model.meta.get("queue_length", np.zeros(model.n_states)), dtype=np.float64)
    acc = np.zeros(3)
    if alg.kind == "ara":
        x1, x0, lex, eps = learner.x1, learner.x0, True, alg.params.epsilon
    else:
        eps = 0.0 if alg.params.epsilon_opt is None else alg.params.epsilon_opt
        x1, x0, lex = learner.q, learner.q, False
    done = 0
    while done < steps:
        n = min(CHUNK, steps - done)
        eu = env_rng.uniforms(n, 2)
        au = agent_rng.uniforms(n, 3)
        s = kernels.greedy_eval(*_cm_args(model), x1, x0, lex, eps, s, n, eu, au, goal, metric, acc)
        done += n
    return acc


def steps_between_goal_visits(eval_steps: int, visits: int) -> float:
    """Mean steps between goal visits; ``eval_steps - 1`` when the goal is seen at most once."""
    span = max(eval_steps - 1, 0)
    return span / visits if visits >= 2 else float(span)


def run_replication(cfg: ExperimentConfig, rep_index: int, algorithm: AlgorithmConfig | str | None = None,
                    backend: str = "compiled") -> ReplicationResult:
    """Train a fresh learner and evaluate its greedy policy.

    ``backend="python"`` runs the reference learners instead of the compiled
    kernels for training (used to cross-check the kernels).
    """
    if algorithm is None:
        alg = cfg.algorithms[0]
    elif isinstance(algorithm, str):
        alg = next(a for a in cfg.algorithms if a.label == algorithm)
    else:
        alg = algorithm
    model = cfg.model
    learner = AraLearnerState.fresh(model) if alg.kind == "ara" else QLearnerState.fresh(model)
    env_rng = RngStream(cfg.seed, rep_index, "env")
    agent_rng = RngStream(cfg.seed, rep_index, "agent")
    budget = cfg.convergence.cap if cfg.convergence else cfg.learn_steps
    s, used, converged = _train(model, alg, learner, cfg.start_state, budget, env_rng, agent_rng, cfg.convergence, backend)
    acc = _evaluate(
        model, alg, learner, s, cfg.eval_steps,
        RngStream(cfg.seed, rep_index, "eval_env"), RngStream(cfg.seed, rep_index, "eval_agent"),
    )
    values = {}
    if cfg.report_state is not None:
        rs = model.state_id(cfg.report_state)
        table = learner.x1 if alg.kind == "ara" else learner.q
        values = {model.action_labels[a]: float(table[rs, a]) for a in model.actions[rs]}
    has_goal = "goal_state" in model.meta
    has_queue = "queue_length" in model.meta
    return ReplicationResult(
        algorithm=alg.label,
        replication=rep_index,
        sum_reward=float(acc[0]),
        eval_steps=cfg.eval_steps,
        steps_to_goal_mean=steps_between_goal_visits(cfg.eval_steps, int(acc[1])) if has_goal else math.nan,
        queue_length_mean=(float(acc[2]) / cfg.eval_steps if cfg.eval_steps else 0.0) if has_queue else math.nan,
        final_rho=learner.rho if alg.kind == "ara" else math.nan,
        learn_steps_used=used,
        converged=converged,
        state_values=values,
        learner=learner,
    )


def run_to_convergence(cfg: ExperimentConfig, rep_index: int = 0, algorithm=None) -> tuple[ReplicationResult, int]:
    if cfg.convergence is None:
        cfg = replace(cfg, convergence=ConvergenceMode())
    res = run_replication(cfg, rep_index, algorithm)
    return res, res.learn_steps_used


# -- experiments -------------------------------------------------------------


@dataclass
class ExperimentReport:
    config: ExperimentConfig
    results: dict  # label -> list[ReplicationResult] in replication order
    summary: dict  # label -> metric -> (mean, stddev)
    tests: dict  # metric -> stats.SignificanceResult
    failures: list

    def rows(self) -> list[dict]:
        return [r.row() for label in self.results for r in self.results[label]]


METRICS = ("sum_reward", "reward_per_step", "steps_to_goal_mean", "queue_length_mean", "final_rho", "learn_steps_used")


def metrics_for(model: MdpModel) -> list[str]:
    out = ["sum_reward", "reward_per_step"]
    if "goal_state" in model.meta:
        out.append("steps_to_goal_mean")
    if "queue_length" in model.meta:
        out.append("queue_length_mean")
    return out


def summarize(values: Sequence[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=float)
    if arr.size == 0:
        return math.nan, math.nan
    sd = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return float(arr.mean()), sd


def run_experiment(cfg: ExperimentConfig, threads: int = 1, alpha: float = 0.05) -> ExperimentReport:
    """All algorithms x replications, then per-metric summaries and significance tests."""
    from .stats import MetricMatrix, significance

    jobs = [(alg, rep) for alg in cfg.algorithms for rep in range(cfg.replications)]
    cfg.model  # build once before threads share it

    def work(job):
        alg, rep = job
        try:
            return run_replication(cfg, rep, alg)
        except Exception as exc:  # recorded, not fatal
            return exc

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outs = list(pool.map(work, jobs))
    else:
        outs = [work(j) for j in jobs]
    results = {alg.label: [] for alg in cfg.algorithms}
    failures = []
    for (alg, rep), out in zip(jobs, outs):
        if isinstance(out, Exception):
            failures.append((alg.label, rep, repr(out)))
        else:
            results[alg.label].append(out)
    summary = {}
    for label, reps in results.items():
        summary[label] = {m: summarize([getattr(r, m) for r in reps]) for m in METRICS}
    tests = {}
    labels = [a.label for a in cfg.algorithms]
    complete = all(len(results[l]) == cfg.replications for l in labels)
    if complete and len(labels) >= 2 and cfg.replications >= 2 and cfg.eval_steps > 0:
        for m in metrics_for(cfg.model):
            vals = np.array([[getattr(results[l][i], m) for l in labels] for i in range(cfg.replications)])
            tests[m] = significance(MetricMatrix(vals, tuple(labels)), alpha=alpha)
    return ExperimentReport(cfg, results, summary, tests, failures)
