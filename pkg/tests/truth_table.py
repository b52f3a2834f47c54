"""Exhaustive comparison of the tick engine with the recursive evaluator."""

import itertools

from hetbt.bt_core import RUNNING, SUCCESS, FAILURE, Kind, action, condition, fallback, make_tree, parallel, sequence, tick
from hetbt.capability_library import default_library, ground
from hetbt.world import parse_predicate

from oracles import F, R, S, evaluate, number, shapes

TRUE = parse_predicate("ArmObjectFreeGrab?(arm1)")
FALSE = parse_predicate("ArmObjectInGrab?(arm1: apple)")
_STATUS = {S: SUCCESS, F: FAILURE, R: RUNNING}
_BACK = {v: k for k, v in _STATUS.items()}


def _grab(world):
    t = default_library().template("Arm", "Grab")
    return ground(t, world.robot("arm1"), {"object": "apple"})


def build(shape, leaf):
    if shape[0] == "leaf":
        return leaf(shape[1])
    kids = [build(k, leaf) for k in shape[-1]]
    if shape[0] == "seq":
        return sequence(*kids)
    if shape[0] == "fb":
        return fallback(*kids)
    return parallel(*kids, threshold=shape[1])


def cases(depth=3):
    for sh in shapes(depth):
        numbered, k = number(sh)
        for combo in itertools.product((S, F, R), repeat=k):
            yield numbered, combo


def compare(world, mode, depth=3):
    """Run every case; returns (cases, mismatches).

    ``mode`` "actions": every leaf is an Action whose effector reports the
    assigned outcome, no per-tick limit.  "mixed": Success/Failure leaves
    are Conditions, Running leaves are Actions, default one-action limit.
    "budget": all Actions with the default one-action limit.
    """
    grab = _grab(world)
    n = bad = 0
    for shape, combo in cases(depth):
        n += 1
        leaf_ids = []

        def leaf(i):
            o = combo[i]
            if mode == "mixed" and o != R:
                node = condition(TRUE if o == S else FALSE)
            else:
                node = action(grab)
            leaf_ids.append(node)
            return node

        tree = make_tree("arm1", build(shape, leaf))
        order = [nd for nd in tree.root.walk() if nd.kind in (Kind.ACTION, Kind.CONDITION)]
        index = {nd.id: i for i, nd in enumerate(order)}

        def effector(node):
            return _STATUS[combo[index[node.id]]]

        trace = []
        limit = None if mode == "actions" else 1
        res = tick(tree, world, effector, trace=trace, max_actions=limit)
        visits = [index[i] for i in trace if i in index]

        def outcome(i):
            if mode == "mixed" and combo[i] != R:
                return "condition", combo[i]
            return "action", combo[i]

        want_status, want_bad, want_visits = evaluate(shape, outcome, budget=limit)
        got_bad = None if res.failed_node is None else index[res.failed_node[0]]
        if (_BACK[res.status], got_bad, visits) != (want_status, want_bad, want_visits):
            bad += 1
    return n, bad
