import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hetbt.coordination import FailureRecord, Terminal, initial_trees, run_mission
from hetbt.capability_library import ground
from hetbt.mcts import MCTSPlanner, _drop_cycles, mcts_plan
from hetbt.planning import simulate, team_plan
from hetbt.world import holds, parse_predicate

from oracles import bfs_length

P = parse_predicate
GRASP = P("ArmObjectInGrab?(arm1: apple)")


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_plans_replay_to_goal(handoff, seed):
    plan = mcts_plan(handoff, GRASP, budget=200, seed=seed)
    if plan is not None:
        end = simulate(handoff, plan)[-1]
        assert holds(end, GRASP)
        assert len(plan) >= bfs_length(handoff, [GRASP])


def test_same_seed_same_plan(handoff):
    assert mcts_plan(handoff, GRASP, seed=7) == mcts_plan(handoff, GRASP, seed=7)


def test_goal_already_holding(handoff):
    assert mcts_plan(handoff, P("ArmObjectFreeGrab?(arm1)")) == []


def test_unreachable_goal_gives_none(handoff):
    assert mcts_plan(handoff, P("ArmObjectInGrab?(arm1: workbench)"), budget=50, depth=5) is None


def test_bad_budget(handoff):
    with pytest.raises(ValueError):
        mcts_plan(handoff, GRASP, budget=0)
    with pytest.raises(ValueError):
        mcts_plan(handoff, GRASP, depth=0)


def test_prior_steers_rollouts(handoff):
    prior = team_plan(GRASP, handoff)
    plan = mcts_plan(handoff, GRASP, budget=30, seed=1, prior=prior, prior_weight=1.0)
    assert plan is not None and holds(simulate(handoff, plan)[-1], GRASP)


def test_cycles_are_removed(handoff, lib):
    move = lib.template("Quadruped", "MoveToNoObject")
    quad = handoff.robot("quad1")
    there, back = (ground(move, quad, {"target": t}) for t in ("store", "aisle"))
    plan = team_plan(GRASP, handoff)
    loop = [there, back] + plan
    states = simulate(handoff, loop)
    assert states[2] == handoff
    assert _drop_cycles(states, loop) == plan


def test_planner_decision_is_first_leg(handoff):
    d = MCTSPlanner(seed=3).propose(FailureRecord("arm1", 1, GRASP, 0), {}, handoff, {})
    assert d is not None and d.chosen_robot == "quad1" and d.partial


def test_mission_with_mcts(handoff):
    tr = run_mission(handoff, initial_trees(handoff, [GRASP]), MCTSPlanner(seed=0))
    assert tr.terminal is Terminal.ALL_GOALS_MET
