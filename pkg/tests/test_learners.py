import json
import math

import numpy as np
import pytest

from ara_rl.ara import (
    AraAgent,
    AraLearnerState,
    AraParams,
    lex_argmax,
    select_action,
    update_rho,
    update_rho_lower_bound,
    update_values,
)
from ara_rl.environments import printer_mail, three_state
from ara_rl.mdp import RngStream, Transition
from ara_rl.qlearn import QAgent, QLearnerState, QParams, q_select_action, q_update
from ara_rl.schedule import DecaySchedule, schedule_value


# -- schedules -------------------------------------------------------------------

def test_decay_schedule_values():
    s = DecaySchedule(0.01, 0.5, 50_000, 1e-5)
    assert s.value(0) == 0.01
    assert s.value(50_000) == pytest.approx(0.005)
    assert s.value(100_000) == pytest.approx(0.0025)
    assert s.value(10**9) == 1e-5


def test_constant_schedule():
    s = DecaySchedule.constant(0.25)
    assert s.value(0) == s.value(10**8) == 0.25
    assert DecaySchedule.from_dict(0.25) == s


def test_schedule_validation():
    with pytest.raises(ValueError):
        DecaySchedule(1.0, 1.5, 10)
    with pytest.raises(ValueError):
        DecaySchedule(1.0, 0.5, 0)
    with pytest.raises(ValueError):
        DecaySchedule(1.0, 0.5, 10, -1)
    with pytest.raises(ValueError):
        schedule_value(DecaySchedule.constant(1.0), -1)


def test_schedule_dict_round_trip():
    s = DecaySchedule(1.0, 0.5, 100_000, 0.01)
    assert DecaySchedule.from_dict(s.to_dict()) == s
    assert DecaySchedule.from_dict(json.loads(json.dumps(s.to_dict()))) == s


# -- lexicographic selection ----------------------------------------------------

def test_lex_argmax_examples():
    assert lex_argmax([(0.493, 0.555), (0.492, 0.145)], 0.25) == [0]
    assert lex_argmax([(5.0, 1.0)], 0.25) == [0]
    assert lex_argmax([(10.0, 0.0), (3.0, 99.0)], 0.25) == [0]
    assert lex_argmax([(1.0, 1.0), (1.1, 0.9)], 0.25) == [0, 1]
    with pytest.raises(ValueError):
        lex_argmax([], 0.25)


def test_lex_argmax_cycle_falls_back_to_staged_filter():
    # each pair beats the next one: (0,10) > (0.2,5) > (0.4,0) > (0,10)
    pairs = [(0.0, 10.0), (0.2, 5.0), (0.4, 0.0)]
    assert lex_argmax(pairs, 0.25) == [1]


def test_select_action_explores_with_probability_p_exp():
    st = AraLearnerState(np.zeros((3, 2)), np.zeros((3, 2)))
    a, rnd = select_action(st, (0, 1), 1, 1.0, (0.3, 0.75, 0.0), 0.25)
    assert rnd and a == 1
    a, rnd = select_action(st, (0, 1), 1, 0.0, (0.3, 0.75, 0.1), 0.25)
    assert not rnd and a == 0


def test_select_action_prefers_left_in_three_state_example():
    st = AraLearnerState(np.zeros((3, 2)), np.zeros((3, 2)))
    st.x1[1] = (0.493, 0.492)
    st.x0[1] = (0.555, 0.145)
    for u in np.linspace(0, 0.999, 7):
        assert select_action(st, (0, 1), 1, 0.0, (0.5, 0.5, u), 0.25) == (0, False)


def test_select_action_uniform_tie_break():
    st = AraLearnerState(np.zeros((1, 4)), np.zeros((1, 4)))
    u = RngStream(3, 0, "agent").uniforms(100_000, 3)
    counts = np.zeros(4)
    for row in u:
        a, _ = select_action(st, (0, 1, 2, 3), 0, 0.0, row, 0.25)
        counts[a] += 1
    se = math.sqrt(0.25 * 0.75 * 100_000)
    assert np.all(np.abs(counts - 25_000) < 3 * se)


# -- ARA updates -------------------------------------------------------------------

def test_update_rho_full_weight():
    st = AraLearnerState(np.zeros((2, 1)), np.zeros((2, 1)))
    update_rho(st, Transition(0, 0, 2.0, 1), 1.0, (0,), lower_bound=False)
    assert st.rho == 2.0


def test_update_rho_skips_random_actions():
    st = AraLearnerState(np.zeros((2, 1)), np.zeros((2, 1)), rho=0.7)
    update_rho(st, Transition(0, 0, 5.0, 1, was_random_action=True), 1.0, (0,))
    assert st.rho == 0.7


def test_update_rho_reads_values_before_they_change():
    st = AraLearnerState(np.zeros((2, 1)), np.zeros((2, 1)))
    st.x1[0, 0] = 1.0
    st.x1[1, 0] = 3.0
    tr = Transition(0, 0, 1.0, 1)
    update_rho(st, tr, 0.5, (0,), lower_bound=False)
    assert st.rho == pytest.approx(0.5 * (1.0 + 3.0 - 1.0))
    update_values(st, tr, 1.0, (0.8, 1.0), (0,))
    # values use the freshly updated rho
    assert st.x1[0, 0] == pytest.approx(1.0 + 3.0 - 1.5)


def test_rho_lower_bound_clamps_and_tracks():
    st = AraLearnerState(np.zeros((2, 1)), np.zeros((2, 1)), rho=10.0, rho_lb=0.0)
    for _ in range(2000):
        update_rho_lower_bound(st)
    assert st.rho_lb == pytest.approx(9.75, abs=1e-6)
    update_rho(st, Transition(0, 0, -100.0, 1), 1.0, (0,))
    assert st.rho == pytest.approx(st.rho_lb)


def test_rho_lower_bound_never_exceeds_rho():
    st = AraLearnerState(np.zeros((2, 1)), np.zeros((2, 1)), rho=-4.0, rho_lb=0.0)
    update_rho_lower_bound(st)
    assert st.rho_lb <= st.rho


def test_update_values_returns_largest_change():
    st = AraLearnerState(np.zeros((2, 1)), np.zeros((2, 1)), rho=1.0)
    d = update_values(st, Transition(0, 0, 3.0, 1), 0.5, (0.8, 1.0), (0,))
    assert st.x0[0, 0] == st.x1[0, 0] == 1.0
    assert d == 1.0


def test_ara_params_validation():
    with pytest.raises(ValueError):
        AraParams(gamma0=0.4, gamma1=0.9)
    with pytest.raises(ValueError):
        AraParams(gamma0=0.9, gamma1=0.9)
    with pytest.raises(ValueError):
        AraParams(gamma1=1.01)
    with pytest.raises(ValueError):
        AraParams(epsilon=-1)
    AraParams(gamma0=0.5, gamma1=1.0)


def test_learner_snapshot_round_trip():
    m = three_state()
    agent = AraAgent(m, AraParams())
    env, ag = RngStream(0, 0, "env"), RngStream(0, 0, "agent")
    s = 0
    for eu, au in zip(env.uniforms(500, 2), ag.uniforms(500, 3)):
        s = agent.step(s, eu, au)[0].s_next
    snap = json.loads(agent.state.to_json())
    back = AraLearnerState.from_snapshot(snap)
    assert np.array_equal(back.x1, agent.state.x1) and back.rho == agent.state.rho and back.t == 500
    q = QLearnerState(np.arange(6.0).reshape(3, 2), 7)
    assert np.array_equal(QLearnerState.from_snapshot(json.loads(q.to_json())).q, q.q)


# -- Q-learning ------------------------------------------------------------------------

def test_q_update_rule():
    st = QLearnerState(np.zeros((2, 1)))
    st.q[1, 0] = 10.0
    d = q_update(st, Transition(0, 0, 1.0, 1), 0.5, 0.9, (0,))
    assert st.q[0, 0] == pytest.approx(0.5 * (1.0 + 9.0))
    assert d == pytest.approx(5.0)


def test_q_select_action_band():
    st = QLearnerState(np.array([[1.0, 0.95, 0.5]]))
    assert q_select_action(st, (0, 1, 2), 0, 0.0, (0.5, 0.0, 0.99)) == (0, False)
    a, _ = q_select_action(st, (0, 1, 2), 0, 0.0, (0.5, 0.0, 0.99), epsilon_opt=0.1)
    assert a == 1
    a, rnd = q_select_action(st, (0, 1, 2), 0, 1.0, (0.5, 0.9, 0.0))
    assert rnd and a == 2


def test_q_params_validation():
    with pytest.raises(ValueError):
        QParams(gamma1=1.0)
    with pytest.raises(ValueError):
        QParams(epsilon_opt=-0.1)


def test_agents_consume_fixed_uniforms_per_step():
    m = printer_mail()
    for agent in (AraAgent(m, AraParams(gamma1=0.99)), QAgent(m, QParams())):
        tr, change = agent.step(0, np.array([0.5, 0.5]), np.array([0.9, 0.0, 0.0]))
        assert tr.s == 0 and change >= 0
        assert agent.state.t == 1
