import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hetbt.bt_core import (
    FAILURE,
    RUNNING,
    SUCCESS,
    BTNode,
    Kind,
    action,
    bt_extension,
    bt_melt,
    build_idle_tree,
    build_initial_tree,
    call_help,
    condition,
    fallback,
    insert_priority_subtree,
    make_tree,
    parallel,
    remove_priority_subtree,
    render,
    sequence,
    step_conditions,
    tick,
    validate,
)
from hetbt.errors import EmptyActions, EmptyGoal, GoalNotAchieved, MalformedTree, NodeNotFound, TargetNotLeaf
from hetbt.capability_library import default_library, ground, load_library
from hetbt.planning import backward_chain, simulate
from hetbt.world import apply_action, holds, parse_predicate

from truth_table import FALSE, TRUE, compare

P = parse_predicate


def grab(world, obj="apple", lib=None):
    lib = lib or default_library()
    return ground(lib.template("Arm", "Grab"), world.robot("arm1"), {"object": obj})


def never(node):
    raise AssertionError("effector must not be called")


# --- tick -----------------------------------------------------------------


@pytest.mark.parametrize("mode", ["mixed", "budget"])
def test_truth_table_against_recursive_evaluator(handoff, mode):
    n, bad = compare(handoff, mode)
    assert n == 9363
    assert bad == 0


def test_all_true_sequence_succeeds(handoff):
    t = make_tree("arm1", sequence(condition(TRUE), condition(TRUE)))
    r = tick(t, handoff, never)
    assert r.status is SUCCESS and r.failed_node is None


def test_sequence_short_circuits_on_failure(handoff):
    t = make_tree("arm1", sequence(condition(TRUE), condition(FALSE), condition(TRUE)))
    trace = []
    r = tick(t, handoff, never, trace=trace)
    assert r.status is FAILURE
    assert r.failed_node == (2, FALSE)
    assert 3 not in trace


def test_fallback_running(handoff):
    t = make_tree("arm1", fallback(condition(FALSE), action(grab(handoff))))
    r = tick(t, handoff, lambda n: RUNNING)
    assert r.status is RUNNING and r.failed_node is None


def test_one_action_per_tick(handoff):
    a = grab(handoff)
    calls = []
    t = make_tree("arm1", sequence(action(a), action(a)))
    r = tick(t, handoff, lambda n: calls.append(n.id) or SUCCESS)
    assert calls == [1]
    assert r.status is RUNNING
    assert r.executed_action == a


def test_action_failure_has_no_failed_node(handoff):
    t = make_tree("arm1", sequence(action(grab(handoff))))
    r = tick(t, handoff, lambda n: FAILURE)
    assert r.status is FAILURE and r.failed_node is None


def test_call_help_always_fails(handoff):
    t = make_tree("arm1", sequence(call_help(TRUE)))
    r = tick(t, handoff, never)
    assert r.status is FAILURE
    assert r.failed_node == (1, TRUE)


def test_fallback_reports_last_failing_leaf(handoff):
    other = P("ArmObjectInRange?(arm1: apple)")
    t = make_tree("arm1", fallback(condition(FALSE), sequence(condition(other))))
    r = tick(t, handoff, never)
    assert r.failed_node == (3, other)


def test_parallel_threshold(handoff):
    kids = lambda: [condition(TRUE), condition(FALSE), condition(TRUE)]
    assert tick(make_tree("a", parallel(*kids(), threshold=2)), handoff, never).status is SUCCESS
    r = tick(make_tree("a", parallel(*kids())), handoff, never)
    assert r.status is FAILURE and r.failed_node == (2, FALSE)


def test_malformed_trees_are_rejected(handoff):
    t = make_tree("a", sequence(condition(TRUE)))
    t.root.children[0].children.append(condition(TRUE))
    with pytest.raises(MalformedTree):
        tick(t, handoff, never)
    t = make_tree("a", sequence(condition(TRUE), condition(TRUE)))
    t.root.children[1].id = t.root.children[0].id
    with pytest.raises(MalformedTree):
        validate(t)
    with pytest.raises(MalformedTree):
        validate(make_tree("a", parallel(condition(TRUE), threshold=2)))
    with pytest.raises(MalformedTree):
        validate(make_tree("a", BTNode(-1, Kind.SEQUENCE)))


# --- construction -----------------------------------------------------------


def test_initial_tree_preserves_goal_order():
    goals = [P("QuadContainOpen?(quad1: fridge)"), P("QuadObjectInGrab?(quad1: apple)"), P("QuadContainClose?(quad1: fridge)")]
    t = build_initial_tree(goals, "quad1")
    assert t.tree_id == 1
    assert t.root.kind is Kind.SEQUENCE
    assert [c.pred for c in t.root.children] == goals
    with pytest.raises(EmptyGoal):
        build_initial_tree([], "quad1")


def test_extension_shape_for_single_grab(handoff):
    lib = load_library(semantics="verbatim")
    goal = P("ArmObjectInGrab?(arm1: apple)")
    sub = bt_extension(goal, [grab(handoff, lib=lib)])
    assert sub.kind is Kind.FALLBACK
    assert sub.children[0].pred == goal
    step = sub.children[1]
    assert [c.kind for c in step.children] == [Kind.CONDITION, Kind.CONDITION, Kind.ACTION]
    assert [str(c.pred) for c in step.children[:2]] == ["ArmObjectInRange?(arm1: apple)", "ArmContainOpen?(arm1: apple)"]


def test_extension_errors(handoff):
    with pytest.raises(EmptyActions):
        bt_extension(P("ArmObjectInGrab?(arm1: apple)"), [])
    with pytest.raises(GoalNotAchieved):
        bt_extension(P("ArmObjectInGrab?(arm1: cup)"), [grab(handoff)])
    with pytest.raises(EmptyGoal):
        bt_extension([], [grab(handoff)])


def test_extension_short_circuits_when_goal_holds(handoff):
    goal = P("ArmObjectFreeGrab?(arm1)")
    a = grab(handoff)
    sub = BTNode(-1, Kind.FALLBACK, [condition(goal), sequence(action(a))])
    t = make_tree("arm1", sub)
    assert tick(t, handoff, never).status is SUCCESS


def test_extension_drives_plan_to_goal(apartment):
    goal = P("QuadObjectOnTarget?(quad1: apple, counter)")
    plan = backward_chain(goal, "quad1", apartment)
    assert plan and all(a.robot == "quad1" for a in plan)
    t = make_tree("quad1", bt_extension(goal, plan, apartment))
    w = apartment
    executed = 0
    for _ in range(20):
        box = {}

        def eff(node):
            box["w"] = apply_action(w, node.action.robot, node.action)
            return SUCCESS

        r = tick(t, w, eff)
        if r.executed_action is None:
            break
        executed += 1
        w = box["w"]
    assert holds(w, goal)
    assert executed == len(plan)
    again = tick(t, w, never)
    assert again.status is SUCCESS and again.executed_action is None


def test_step_conditions_end_with_goal(apartment):
    goal = P("QuadObjectInTarget?(quad1: apple, fridge)")
    plan = backward_chain(goal, "quad1", apartment)
    conds = step_conditions(goal, plan, apartment)
    states = simulate(apartment, plan)
    assert len(conds) == len(plan)
    for i, cs in enumerate(conds):
        assert all(holds(states[i], p) for p in cs), i


# --- melt / insert ------------------------------------------------------------


def test_melt_replaces_leaf_in_place(handoff):
    t = build_initial_tree([P("ArmObjectInGrab?(arm1: apple)")], "arm1")
    sub = fallback(condition(TRUE), sequence(condition(TRUE), action(grab(handoff))))
    assert sub.size() == 5
    t2 = bt_melt(t, 1, sub)
    assert t2.size() == 6
    assert t2.root.id == 0 and t2.root.kind is Kind.SEQUENCE
    assert t2.root.children[0].id == t.next_id
    assert t2.tree_id == t.tree_id + 1
    assert t.size() == 2  # original untouched


def test_melt_errors(handoff):
    t = build_initial_tree([TRUE], "arm1")
    with pytest.raises(NodeNotFound):
        bt_melt(t, 99, condition(TRUE))
    with pytest.raises(TargetNotLeaf):
        bt_melt(t, 0, condition(TRUE))


def test_priority_insert_on_idle_and_removal(handoff):
    t = build_idle_tree("quad1")
    sub = sequence(condition(FALSE))
    t2 = insert_priority_subtree(t, sub)
    assert t2.root.tag == "priority"
    r = tick(t2, handoff, never)
    assert r.status is FAILURE and r.failed_node[1] == FALSE
    t3 = insert_priority_subtree(t2, sequence(condition(TRUE)))
    assert t3.root.children[1] is not None and t3.root.children[1].tag == "priority"
    inner = t2.root.children[0].id
    t4 = remove_priority_subtree(t3, inner)
    assert render(t4).count("priority") == 1
    with pytest.raises(NodeNotFound):
        remove_priority_subtree(t4, 12345)


def test_render_format(handoff):
    t = build_initial_tree([P("ArmObjectInGrab?(arm1: apple)")], "arm1")
    t = insert_priority_subtree(t, parallel(condition(TRUE), action(grab(handoff)), threshold=1))
    assert render(t) == (
        "tree 2 owner=arm1\n"
        "  #2 Sequence [priority]\n"
        "    #3 Parallel M=1\n"
        "      #4 Condition ArmObjectFreeGrab?(arm1)\n"
        "      #5 Action Grab(arm1: apple)\n"
        "    #0 Sequence\n"
        "      #1 Condition ArmObjectInGrab?(arm1: apple)\n"
    )


# --- properties ------------------------------------------------------------------

ops = st.lists(st.tuples(st.sampled_from(["melt", "insert", "remove"]), st.integers(0, 50), st.integers(1, 3)), max_size=12)


@settings(max_examples=150, deadline=None)
@given(ops)
def test_structure_survives_any_edit_sequence(handoff, steps):
    a = grab(handoff)
    t = build_initial_tree([TRUE, FALSE], "arm1")
    inserted = []
    ids_seen = set(n.id for n in t.root.walk())
    for op, pick, width in steps:
        sub = sequence(*(condition(FALSE) for _ in range(width)), action(a))
        before = t.tree_id
        if op == "melt":
            leaves = [n.id for n in t.root.walk() if n.kind is Kind.CONDITION]
            t = bt_melt(t, leaves[pick % len(leaves)], sub)
        elif op == "insert":
            nid = t.next_id + 1
            t = insert_priority_subtree(t, sub)
            inserted.append(nid)
        elif inserted:
            t = remove_priority_subtree(t, inserted.pop(pick % len(inserted)))
        else:
            continue
        validate(t)
        assert t.tree_id == before + 1
        new_ids = set(n.id for n in t.root.walk())
        # ids are never reused for different nodes
        assert all(i < t.next_id for i in new_ids)
        ids_seen |= new_ids
    tick(t, handoff, lambda n: SUCCESS)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 4), st.integers(0, 4))
def test_most_recent_insert_is_outermost(handoff, k, pad):
    t = build_idle_tree("quad1")
    roots = []
    for i in range(k):
        roots.append(t.next_id + 1)
        t = insert_priority_subtree(t, sequence(*(condition(TRUE) for _ in range(pad + 1))))
    node = t.root
    for rid in reversed(roots):
        assert node.tag == "priority" and node.children[0].id == rid
        node = node.children[1]
    assert node.kind is Kind.IDLE
