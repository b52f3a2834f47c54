"""Behavior trees: nodes, tick semantics, text rendering and the update operators.

Ticks are memory-less: every tick restarts each control node at its first
child.  At most one Action leaf executes per tick of a tree; Action leaves
reached after that return Running without touching the effector.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Iterator, Sequence

from .errors import EmptyActions, EmptyGoal, GoalNotAchieved, MalformedTree, NodeNotFound, TargetNotLeaf
from .capability_library import ActionInstance
from .world import VOCABULARY, Observation, Predicate, WorldState, apply_action, holds


class NodeStatus(Enum):
    SUCCESS = "Success"
    FAILURE = "Failure"
    RUNNING = "Running"


SUCCESS, FAILURE, RUNNING = NodeStatus.SUCCESS, NodeStatus.FAILURE, NodeStatus.RUNNING


class Kind(Enum):
    SEQUENCE = "Sequence"
    FALLBACK = "Fallback"
    PARALLEL = "Parallel"
    CONDITION = "Condition"
    ACTION = "Action"
    CALL_HELP = "CallHelp"
    IDLE = "Idle"


CONTROL = (Kind.SEQUENCE, Kind.FALLBACK, Kind.PARALLEL)
LEAVES = (Kind.CONDITION, Kind.ACTION, Kind.CALL_HELP, Kind.IDLE)


@dataclass
class BTNode:
    id: int
    kind: Kind
    children: list["BTNode"] = field(default_factory=list)
    pred: Predicate | None = None
    action: ActionInstance | None = None
    threshold: int | None = None
    tag: str = ""

    def walk(self) -> Iterator["BTNode"]:
        yield self
        for c in self.children:
            yield from c.walk()

    def size(self) -> int:
        return sum(1 for _ in self.walk())


# constructors; ids are placeholders until a tree reindexes them


def sequence(*children: BTNode, tag: str = "") -> BTNode:
    return BTNode(-1, Kind.SEQUENCE, list(children), tag=tag)


def fallback(*children: BTNode) -> BTNode:
    return BTNode(-1, Kind.FALLBACK, list(children))


def parallel(*children: BTNode, threshold: int | None = None) -> BTNode:
    return BTNode(-1, Kind.PARALLEL, list(children), threshold=len(children) if threshold is None else threshold)


def condition(pred: Predicate) -> BTNode:
    return BTNode(-1, Kind.CONDITION, pred=pred)


def action(inst: ActionInstance) -> BTNode:
    return BTNode(-1, Kind.ACTION, action=inst)


def call_help(pred: Predicate) -> BTNode:
    return BTNode(-1, Kind.CALL_HELP, pred=pred)


def idle() -> BTNode:
    return BTNode(-1, Kind.IDLE)


def _number(node: BTNode, start: int) -> int:
    """Assign preorder ids from ``start``; returns the next free id."""
    nxt = start
    for n in node.walk():
        n.id = nxt
        nxt += 1
    return nxt


@dataclass
class BehaviorTree:
    tree_id: int
    owner: str
    root: BTNode
    next_id: int = 0

    def find(self, node_id: int) -> BTNode:
        for n in self.root.walk():
            if n.id == node_id:
                return n
        raise NodeNotFound(f"node {node_id} not in tree of {self.owner}")

    def parents(self) -> dict[int, BTNode]:
        out = {}
        for n in self.root.walk():
            for c in n.children:
                out[c.id] = n
        return out

    def ancestors(self, node_id: int) -> list[int]:
        """Ids from the node's parent up to the root."""
        par = self.parents()
        self.find(node_id)
        out = []
        cur = node_id
        while cur in par:
            cur = par[cur].id
            out.append(cur)
        return out

    def size(self) -> int:
        return self.root.size()

    def copy(self) -> "BehaviorTree":
        return copy.deepcopy(self)


def make_tree(owner: str, root: BTNode, tree_id: int = 1) -> BehaviorTree:
    root = copy.deepcopy(root)
    return BehaviorTree(tree_id, owner, root, _number(root, 0))


def validate(tree: BehaviorTree) -> None:
    """Raise MalformedTree when any structural invariant fails."""
    seen: set[int] = set()

    def visit(n: BTNode, stack: set[int]):
        if id(n) in stack:
            raise MalformedTree("cycle in tree")
        if n.id in seen:
            raise MalformedTree(f"duplicate node id {n.id}")
        if n.id < 0:
            raise MalformedTree("unnumbered node")
        seen.add(n.id)
        if n.kind in LEAVES:
            if n.children:
                raise MalformedTree(f"leaf {n.id} has children")
            if n.kind in (Kind.CONDITION, Kind.CALL_HELP) and n.pred is None:
                raise MalformedTree(f"{n.kind.value} {n.id} has no predicate")
            if n.kind is Kind.ACTION and n.action is None:
                raise MalformedTree(f"action {n.id} has no instance")
        else:
            if not n.children:
                raise MalformedTree(f"control node {n.id} has no children")
            if n.kind is Kind.PARALLEL and not (1 <= (n.threshold or 0) <= len(n.children)):
                raise MalformedTree(f"parallel {n.id} threshold {n.threshold} out of range")
        stack = stack | {id(n)}
        for c in n.children:
            visit(c, stack)

    visit(tree.root, set())
    if tree.next_id <= max(seen):
        raise MalformedTree("id counter behind existing ids")


# ---------------------------------------------------------------------------
# tick


@dataclass
class TickResult:
    status: NodeStatus
    failed_node: tuple[int, Predicate] | None = None
    executed_action: ActionInstance | None = None


Effector = Callable[[BTNode], NodeStatus]


class _Ctx:
    __slots__ = ("view", "effector", "executed", "budget", "trace")

    def __init__(self, view, effector, trace, budget):
        self.view = view
        self.effector = effector
        self.executed: ActionInstance | None = None
        self.budget = budget  # actions still allowed this tick; None = no limit
        self.trace = trace


def _tick(n: BTNode, ctx: _Ctx) -> tuple[NodeStatus, BTNode | None]:
    if ctx.trace is not None:
        ctx.trace.append(n.id)
    k = n.kind
    if k is Kind.CONDITION:
        return (SUCCESS, None) if holds(ctx.view, n.pred) else (FAILURE, n)
    if k is Kind.CALL_HELP:
        # resolution happens through the allocator, never locally
        return FAILURE, n
    if k is Kind.ACTION:
        if ctx.budget is not None:
            if ctx.budget == 0:
                return RUNNING, None
            ctx.budget -= 1
        if ctx.executed is None:
            ctx.executed = n.action
        return ctx.effector(n), None
    if k is Kind.IDLE:
        return SUCCESS, None
    if k is Kind.SEQUENCE:
        for c in n.children:
            st, leaf = _tick(c, ctx)
            if st is not SUCCESS:
                return st, leaf
        return SUCCESS, None
    if k is Kind.FALLBACK:
        leaf = None
        for c in n.children:
            st, leaf = _tick(c, ctx)
            if st is not FAILURE:
                return st, None
        return FAILURE, leaf
    # parallel: every child is ticked
    succ = fail = 0
    first_leaf = None
    m = n.threshold if n.threshold is not None else len(n.children)
    for c in n.children:
        st, leaf = _tick(c, ctx)
        if st is SUCCESS:
            succ += 1
        elif st is FAILURE:
            fail += 1
            if first_leaf is None:
                first_leaf = leaf
    if succ >= m:
        return SUCCESS, None
    if fail > len(n.children) - m:
        return FAILURE, first_leaf
    return RUNNING, None


def tick(
    tree: BehaviorTree,
    world_view: WorldState | Observation,
    effector: Effector,
    trace: list[int] | None = None,
    max_actions: int | None = 1,
) -> TickResult:
    """One depth-first, left-to-right pass from the root.

    At most ``max_actions`` Action leaves reach the effector; later ones
    report Running.  ``None`` lifts the limit.  A failing Fallback reports
    the failing leaf of its last child, i.e. the deepest recovery option
    that could not start.
    """
    validate(tree)
    ctx = _Ctx(world_view, effector, trace, max_actions)
    status, leaf = _tick(tree.root, ctx)
    failed = (leaf.id, leaf.pred) if status is FAILURE and leaf is not None else None
    return TickResult(status, failed, ctx.executed)


def null_effector(node: BTNode) -> NodeStatus:
    return SUCCESS


# ---------------------------------------------------------------------------
# construction


def build_initial_tree(goal_predicates: Sequence[Predicate], owner: str) -> BehaviorTree:
    if not goal_predicates:
        raise EmptyGoal(f"no goals for {owner}")
    return make_tree(owner, sequence(*(condition(p) for p in goal_predicates)))


def build_idle_tree(owner: str) -> BehaviorTree:
    return make_tree(owner, idle())


def _without_object(p: Predicate) -> Predicate | None:
    if "WithObject" not in p.label:
        return None
    label = p.label.replace("WithObject", "NoObject")
    return replace(p, label=label) if label in VOCABULARY else None


def step_conditions(
    goal: Predicate | Sequence[Predicate], actions: Sequence[ActionInstance], world: WorldState | None = None
) -> list[list[Predicate]]:
    """Conditions under which each suffix of the plan still reaches ``goal``.

    Entry i lists what must hold right before actions[i] so that
    actions[i:] achieve the goal.  With a world the plan is simulated and a
    requirement counts as produced by an action only if that action turned
    it true; without one, Post sets are used.

    Some effects are conditional: Grab makes "in range with object" true
    only if the robot already stands in range.  When an action turns such a
    WithObject fact true without listing it in its Post set, the matching
    NoObject fact is required before the action instead.
    """
    n = len(actions)
    if world is not None:
        states = [world]
        for a in actions:
            states.append(apply_action(states[-1], a.robot, a))
    need: list[Predicate] = _goals(goal)
    out: list[list[Predicate]] = [[] for _ in range(n)]
    for i in range(n - 1, -1, -1):
        a = actions[i]
        if world is not None:
            made = {p for p in need if not holds(states[i], p) and holds(states[i + 1], p)}
        else:
            made = set(a.post)
        carried = [p for p in need if p not in made]
        if world is not None:
            for p in need:
                q = _without_object(p)
                if p in made and p not in a.post and q is not None and holds(states[i], q):
                    carried.append(q)
        cur: list[Predicate] = []
        for p in list(a.pre) + carried:
            if p not in cur:
                cur.append(p)
        out[i] = cur
        need = cur
    return out


def _goals(goal: Predicate | Sequence[Predicate]) -> list[Predicate]:
    goals = [goal] if isinstance(goal, Predicate) else list(goal)
    if not goals:
        raise EmptyGoal("extension needs at least one goal predicate")
    return goals


def bt_extension(
    goal: Predicate | Sequence[Predicate],
    actions: Sequence[ActionInstance],
    world: WorldState | None = None,
) -> BTNode:
    """Recovery subtree ``Fallback(goal, step_n, ..., step_1)``.

    Step i is ``Sequence(conditions_i..., Action_i)``; later steps come first
    so each tick runs the furthest step whose conditions hold.  A list of
    goals is checked as a Sequence of Conditions in the first slot.
    """
    goals = _goals(goal)
    if not actions:
        raise EmptyActions(f"no actions for {goals[0]}")
    if world is None:
        missing = [g for g in goals if g not in actions[-1].post]
        if missing:
            raise GoalNotAchieved(f"{actions[-1]} does not produce {missing[0]}")
    else:
        end = world
        for a in actions:
            end = apply_action(end, a.robot, a)
        missing = [g for g in goals if not holds(end, g)]
        if missing:
            raise GoalNotAchieved(f"plan ending in {actions[-1]} does not reach {missing[0]}")
    conds = step_conditions(goals, actions, world)
    steps = [sequence(*(condition(p) for p in cs), action(a)) for a, cs in zip(actions, conds)]
    check = condition(goals[0]) if len(goals) == 1 else sequence(*(condition(g) for g in goals))
    root = fallback(check, *reversed(steps))
    _number(root, 0)
    return root


def _reindexed(subtree: BTNode, start: int) -> tuple[BTNode, int]:
    sub = copy.deepcopy(subtree)
    return sub, _number(sub, start)


def bt_melt(tree: BehaviorTree, target_node: int, subtree: BTNode) -> BehaviorTree:
    """Replace a Condition/CallHelp leaf in place by ``subtree``.

    The inserted nodes get fresh ids starting at ``tree.next_id`` (preorder),
    so the subtree root's id equals the old ``next_id``.
    """
    new = tree.copy()
    target = new.find(target_node)
    if target.kind not in (Kind.CONDITION, Kind.CALL_HELP):
        raise TargetNotLeaf(f"node {target_node} is a {target.kind.value}")
    sub, nxt = _reindexed(subtree, new.next_id)
    if new.root is target:
        new.root = sub
    else:
        parent = new.parents()[target_node]
        parent.children[parent.children.index(target)] = sub
    new.next_id = nxt
    new.tree_id += 1
    validate(new)
    return new


def insert_priority_subtree(tree: BehaviorTree, subtree: BTNode) -> BehaviorTree:
    """New root ``Sequence(subtree, old_root)``; the subtree is ticked first.

    The wrapper takes id ``tree.next_id`` and the subtree root the one after.
    """
    new = tree.copy()
    wrapper_id = new.next_id
    sub, nxt = _reindexed(subtree, wrapper_id + 1)
    new.root = BTNode(wrapper_id, Kind.SEQUENCE, [sub, new.root], tag="priority")
    new.next_id = nxt
    new.tree_id += 1
    validate(new)
    return new


def remove_priority_subtree(tree: BehaviorTree, subtree_root: int) -> BehaviorTree:
    """Undo one insert_priority_subtree, wherever it now sits in the tree."""
    new = tree.copy()
    par = new.parents()
    wrapper = par.get(subtree_root)
    if wrapper is None or wrapper.tag != "priority" or wrapper.children[0].id != subtree_root:
        raise NodeNotFound(f"{subtree_root} is not a priority subtree of {tree.owner}")
    rest = wrapper.children[1]
    if new.root is wrapper:
        new.root = rest
    else:
        gp = par[wrapper.id]
        gp.children[gp.children.index(wrapper)] = rest
    new.tree_id += 1
    validate(new)
    return new


# ---------------------------------------------------------------------------
# text form


def _label(n: BTNode) -> str:
    k = n.kind
    if k is Kind.PARALLEL:
        return f"Parallel M={n.threshold}"
    if k in (Kind.CONDITION, Kind.CALL_HELP):
        return f"{k.value} {n.pred}"
    if k is Kind.ACTION:
        return f"Action {n.action}"
    if k is Kind.SEQUENCE and n.tag:
        return f"Sequence [{n.tag}]"
    return k.value


def render(tree: BehaviorTree) -> str:
    """One node per line, two spaces of indent per depth level."""
    lines = [f"tree {tree.tree_id} owner={tree.owner}"]

    def visit(n: BTNode, depth: int):
        lines.append(f"{'  ' * (depth + 1)}#{n.id} {_label(n)}")
        for c in n.children:
            visit(c, depth + 1)

    visit(tree.root, 0)
    return "\n".join(lines) + "\n"


def render_node(node: BTNode) -> str:
    return render(BehaviorTree(0, "-", node, 0)).split("\n", 1)[1]
