import numpy as np
import pytest
from scipy import sparse

from servicenet.mdp import (DiscreteInstance, HeuristicController, MDPConfig, MDPModel, PolicyDomainError,
                            StateSpaceTooLarge, _advance_clocks, bellman_residual,
                            enumerate_states, evaluate_policy, evaluate_policy_by_simulation,
                            legal_actions_discrete, policy_iteration, round_half_up, simulate_discrete,
                            step_outcomes, table_controller, toy_instance, transition_sums, value_iteration)


def one_machine():
    # node 0 = machine, node 1 = base, one unit apart
    return DiscreteInstance(np.array([[0, 1], [1, 0]]), K=1, R=1, allocation=[1])


def two_by_two():
    travel = np.array([[0, 2, 1, 2], [2, 0, 2, 1], [1, 2, 0, 3], [2, 1, 3, 0]])
    return DiscreteInstance(travel, K=2, R=2, allocation=[1, 1])


CFG1 = MDPConfig(t_star=1, lam=0.1, mu=0.5)


def test_config_probabilities():
    assert CFG1.p == pytest.approx(1 - np.exp(-0.1)) and 0 < CFG1.q < 1
    with pytest.raises(ValueError):
        MDPConfig(t_star=1.5, lam=0.1, mu=0.1)
    with pytest.raises(ValueError):
        MDPConfig(t_star=1, lam=0.1, mu=0.1, gamma=1.0)


def test_round_half_up():
    np.testing.assert_array_equal(round_half_up([0.5, 1.5, 2.49, 2.5]), [1, 2, 2, 3])


def test_one_machine_state_space_by_hand():
    model = enumerate_states(one_machine(), CFG1)
    expected = {(((1, 0),), (0,)), (((1, 0),), (1,)), (((1, 0),), (2,)), (((0, 0),), (-1,)), (((0, 0),), (0,))}
    assert set(model.states) == expected


def test_one_machine_optimum_dispatches_and_matches_vi():
    model = enumerate_states(one_machine(), CFG1)
    pi = policy_iteration(model)
    vi = value_iteration(model)
    assert np.abs(pi.V - vi.V).max() <= 1e-8
    for i, s in enumerate(model.states):
        if s[1][0] >= 1:
            assert model.actions[i][pi.policy[i]] == ((0, 0),)


def test_zero_limit_uses_shifted_saturation():
    model = enumerate_states(one_machine(), MDPConfig(t_star=0, lam=0.1, mu=0.5))
    assert {k for s in model.states for k in s[1]} <= {-1, 0, 1}


def test_state_cap():
    with pytest.raises(StateSpaceTooLarge):
        enumerate_states(two_by_two(), MDPConfig(t_star=2, lam=0.1, mu=0.5, state_cap=10))


def test_legal_actions_examples():
    inst = two_by_two()
    s0 = inst.initial_state()
    assert legal_actions_discrete(inst, s0) == [()]
    # engineer 0 just finished machine 0 (standing there, working); empty queue
    s = (((0, 0), (3, 0)), (0, 0))
    acts = legal_actions_discrete(inst, s)
    # 2 redeploy targets times (stay, or the idle engineer moves to the other base)
    assert len(acts) == 2 * 2
    assert all(any(m == 0 for m, _ in a) for a in acts)
    # a waiting (not new) machine and no freed engineer: no relocation allowed
    s = (((2, 0), (3, 0)), (2, 0))
    for a in legal_actions_discrete(inst, s):
        assert all(t < inst.K for _, t in a)


def test_step_outcomes_product_measure():
    inst = DiscreteInstance(np.zeros((4, 4), dtype=int) + 1 - np.eye(4, dtype=int), K=3, R=1, allocation=[1])
    cfg = MDPConfig(t_star=2, lam=0.2, mu=0.2)
    x = (((0, 0),), (-1, 0, 0))
    outs = step_outcomes(inst, cfg, x)
    assert len(outs) == 8
    assert sum(p for _, p, _ in outs) == pytest.approx(1.0, abs=1e-12)
    assert step_outcomes(inst, cfg, (((3, 0),), (1, 1, 1)))[0][1] == 1.0


def test_stage_costs():
    inst = DiscreteInstance(np.ones((4, 4), dtype=int) - np.eye(4, dtype=int), K=3, R=1, allocation=[1])
    cfg = MDPConfig(t_star=2, lam=0.2, mu=0.2)
    sat = cfg.sat
    _, cost, _, _ = _advance_clocks(inst, cfg, (((3, 0),), (0, 0, 0)), set(), set())
    assert cost == 0
    _, cost, _, late = _advance_clocks(inst, cfg, (((3, 0),), (sat - 1, 0, 0)), set(), set())
    assert cost == 1 and late == 1
    _, cost, _, _ = _advance_clocks(inst, cfg, (((3, 0),), (sat, sat, 0)), set(), set())
    assert cost == pytest.approx(2 * 0.001)


def test_self_loop_value():
    cfg = MDPConfig(t_star=1, lam=0.1, mu=0.1, gamma=0.9)
    s = ((), ())
    model = MDPModel(None, cfg, [s], {s: 0}, [s], [[()]], [[0]], sparse.csr_matrix(np.ones((1, 1))),
                     np.array([2.0]))
    assert evaluate_policy(model, np.array([0]))[0] == pytest.approx(2.0 / 0.1)


@pytest.fixture(scope="module")
def small_model():
    return enumerate_states(two_by_two(), MDPConfig(t_star=2, lam=0.05, mu=0.5))


def test_transition_rows_sum_to_one(small_model):
    assert np.abs(transition_sums(small_model) - 1).max() <= 1e-12


def test_policy_iteration_properties(small_model):
    pi = policy_iteration(small_model, keep_history=True)
    for a, b in zip(pi.history, pi.history[1:]):
        assert np.all(b <= a + 1e-9)
    assert bellman_residual(small_model, pi.V) <= 1e-8
    vi = value_iteration(small_model)
    assert np.abs(pi.V - vi.V).max() <= 1e-6


def test_simulation_with_optimal_policy(small_model):
    pi = policy_iteration(small_model)
    ctrl = table_controller(small_model, pi.policy)
    runs = evaluate_policy_by_simulation(small_model.inst, small_model.cfg, lambda: ctrl, runs=3, horizon=300)
    assert all(0 <= r <= 1 for r in runs)
    with pytest.raises(PolicyDomainError):
        ctrl((((0, 9), (3, 0)), (0, 0)))


def test_trivial_instance_is_always_on_time():
    model = enumerate_states(one_machine(), CFG1)
    pi = policy_iteration(model)
    run = simulate_discrete(model.inst, model.cfg, table_controller(model, pi.policy), 2000, seed=1)
    assert run.calls > 0 and run.fraction_on_time == 1.0


def test_heuristic_actions_are_legal(small_model):
    ctrl = HeuristicController(small_model.inst, small_model.cfg)
    for s in small_model.states[:3000]:
        assert ctrl(s) in set(legal_actions_discrete(small_model.inst, s))


def test_toy_instance_shape():
    net, inst = toy_instance()
    assert (inst.K, inst.R, inst.M) == (4, 2, 2)
    assert net.is_feasible()
