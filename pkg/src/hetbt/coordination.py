"""The central allocator: failure queue, dispatch and the mission loop.

Each tick: scripted events fire, the allocator dispatches the head of the
failure queue if it has not been dispatched yet, every robot ticks its tree
once in a fixed round-robin order, new failures are queued, and the head is
resolved while its predicate holds in the requester's view.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable, Mapping, TextIO

from .bt_core import (
    RUNNING,
    SUCCESS,
    FAILURE,
    BehaviorTree,
    BTNode,
    NodeStatus,
    TickResult,
    bt_extension,
    bt_melt,
    build_idle_tree,
    build_initial_tree,
    insert_priority_subtree,
    remove_priority_subtree,
    tick,
    validate,
)
from .errors import NodeNotFound, PlannerContractViolation
from .capability_library import ActionInstance, Library, capability_check, default_library
from .planning import CANNOT_COMPLETE, AssignmentDecision, Mode, PlannerPort, validate_decision
from .world import Observation, Predicate, WorldState, apply_event, apply_unchecked, first_unmet, holds, label_class, merge_observations, observe

DEFAULT_MAX_TICKS = 200


@dataclass
class FailureRecord:
    robot: str
    node: int
    predicate: Predicate
    tick: int
    resolved: bool = False
    seq: int = 0
    parent: int | None = None  # seq of the record whose recovery raised this one
    dispatched: bool = False
    decision: AssignmentDecision | None = None
    installed: tuple[str, int] | None = None  # (robot, subtree root id)

    @property
    def key(self) -> tuple[str, int]:
        return (self.robot, self.node)


class FailureQueue:
    """Active records in dispatch order plus every record ever reported."""

    def __init__(self):
        self.active: list[FailureRecord] = []
        self.history: list[FailureRecord] = []

    def __len__(self):
        return len(self.active)

    def head(self) -> FailureRecord | None:
        return self.active[0] if self.active else None

    def find(self, robot: str, node: int) -> FailureRecord | None:
        for r in self.active:
            if r.key == (robot, node):
                return r
        return None

    def by_seq(self, seq: int) -> FailureRecord:
        return self.history[seq]

    def pending_for(self, robot: str) -> int:
        return sum(1 for r in self.active if r.robot == robot)


def report_failure(queue: FailureQueue, record: FailureRecord, front: bool = False) -> FailureQueue:
    """Queue ``record`` unless an unresolved one has the same (robot, node).

    ``front`` puts it ahead of everything (used for failures raised inside a
    recovery that is still in progress).
    """
    if queue.find(record.robot, record.node) is not None:
        return queue
    record.seq = len(queue.history)
    queue.history.append(record)
    if front:
        queue.active.insert(0, record)
    else:
        queue.active.append(record)
    return queue


def resolve(queue: FailureQueue, record: FailureRecord, trees: dict[str, BehaviorTree]) -> None:
    """Mark resolved, drop from the active view, retire delegated subtrees.

    Records raised while recovering this one go with it.
    """
    if record.resolved:
        return
    record.resolved = True
    if record in queue.active:
        queue.active.remove(record)
    _retire(queue, record, trees)


def _priority(decision: AssignmentDecision | None) -> bool:
    return decision is not None and (decision.mode is Mode.DELEGATED or decision.partial)


def _retire(queue: FailureQueue, record: FailureRecord, trees: dict[str, BehaviorTree]) -> None:
    """Take out a priority subtree installed for ``record`` and settle its children."""
    if record.installed is not None and _priority(record.decision):
        owner, root = record.installed
        try:
            trees[owner] = remove_priority_subtree(trees[owner], root)
        except NodeNotFound:
            pass
        record.installed = None
    for child in [r for r in queue.active if r.parent == record.seq]:
        resolve(queue, child, trees)


def leg_done(queue: FailureQueue, record: FailureRecord, trees: dict[str, BehaviorTree], view: WorldState) -> bool:
    """If the partial leg dispatched for ``record`` has finished, retire it.

    The record goes back to undispatched so the allocator plans the rest.
    """
    d = record.decision
    if not record.dispatched or d is None or not d.partial:
        return False
    if not all(holds(view, p) for p in d.until):
        return False
    _retire(queue, record, trees)
    record.dispatched = False
    record.decision = None
    return True


def subtree_owner(queue: FailureQueue, trees: Mapping[str, BehaviorTree], robot: str, node: int) -> FailureRecord | None:
    """Unresolved record whose installed subtree contains ``node``."""
    tree = trees[robot]
    try:
        above = set(tree.ancestors(node)) | {node}
    except NodeNotFound:
        return None
    best = None
    for rec in queue.active:
        if rec.installed is not None and rec.installed[0] == robot and rec.installed[1] in above:
            # innermost installation wins
            if best is None or rec.installed[1] > best.installed[1]:
                best = rec
    return best


# ---------------------------------------------------------------------------
# allocator


@dataclass
class AllocatorStep:
    queue: FailureQueue
    trees: dict[str, BehaviorTree]
    decision: AssignmentDecision | None
    updated: tuple[str, ...] = ()
    cannot_complete: bool = False


def apply_decision(
    record: FailureRecord, decision: AssignmentDecision, trees: dict[str, BehaviorTree]
) -> tuple[str, ...]:
    """Turn a decision into a tree update; returns the robots whose trees changed."""
    goal = list(decision.until) if decision.partial else (decision.goal or record.predicate)
    subtree = bt_extension(goal, decision.actions, decision.start)
    if not _priority(decision):
        tree = trees[record.robot]
        root_id = tree.next_id
        trees[record.robot] = bt_melt(tree, record.node, subtree)
        record.installed = (record.robot, root_id)
        return (record.robot,)
    tree = trees[decision.chosen_robot]
    root_id = tree.next_id + 1
    trees[decision.chosen_robot] = insert_priority_subtree(tree, subtree)
    record.installed = (decision.chosen_robot, root_id)
    return (decision.chosen_robot,)


def step_allocator(
    queue: FailureQueue,
    planner: PlannerPort,
    trees: dict[str, BehaviorTree],
    observations: Mapping[str, Observation],
    world: WorldState,
    library: Library | None = None,
) -> AllocatorStep:
    """Dispatch the head record: plan, validate, update one tree."""
    lib = library or default_library()
    rec = queue.head()
    if rec is None:
        raise ValueError("step_allocator needs a non-empty queue")
    pending = {r.id: queue.pending_for(r.id) for r in world.robots}
    decision = planner.propose(rec, observations, world, pending)
    rec.dispatched = True
    if decision is None:
        return AllocatorStep(queue, trees, None, (), True)
    validate_decision(decision, rec, world, lib)
    if decision.mode is Mode.DELEGATED and not decision.partial:
        chosen_cls = world.robot(decision.chosen_robot).cls
        if label_class(rec.predicate.label) is chosen_cls and not capability_check(rec.predicate, chosen_cls, lib):
            raise PlannerContractViolation(f"{decision.chosen_robot} cannot produce {rec.predicate}")
    rec.decision = decision
    updated = apply_decision(rec, decision, trees)
    return AllocatorStep(queue, trees, decision, updated)


# ---------------------------------------------------------------------------
# execution


class Effector:
    """Executes actions against the authoritative world; one call per tick."""

    def __init__(self, world: WorldState, library: Library):
        self.world = world
        self.library = library
        self.progress: dict[str, tuple[ActionInstance, int]] = {}
        self.executed = 0
        self.robot: str | None = None

    def duration(self, a: ActionInstance) -> int:
        return int(self.world.layout.durations.get(a.name, a.template.duration_ticks))

    def __call__(self, node: BTNode) -> NodeStatus:
        a = node.action
        if a.robot != self.robot:
            return FAILURE
        if first_unmet(self.world, a) is not None:
            self.progress.pop(a.robot, None)
            return FAILURE
        prev = self.progress.get(a.robot)
        elapsed = prev[1] + 1 if prev is not None and prev[0] == a else 1
        self.executed += 1
        if elapsed < self.duration(a):
            self.progress[a.robot] = (a, elapsed)
            return RUNNING
        self.progress.pop(a.robot, None)
        self.world = apply_unchecked(self.world, a)
        return SUCCESS


def _dry(node: BTNode) -> NodeStatus:
    return RUNNING


class Terminal(str, Enum):
    ALL_GOALS_MET = "AllGoalsMet"
    CANNOT_COMPLETE = "CannotComplete"
    BUDGET = "TickBudgetExhausted"


@dataclass
class MissionTrace:
    entries: list[dict[str, Any]] = field(default_factory=list)
    terminal: Terminal | None = None
    ticks: int = 0
    actions: int = 0
    decisions: list[AssignmentDecision] = field(default_factory=list)
    final_world: WorldState | None = None
    trees: dict[str, BehaviorTree] = field(default_factory=dict)
    failures: list[FailureRecord] = field(default_factory=list)

    def finish(self, status: Terminal, tick_no: int) -> None:
        if self.terminal is not None:
            raise RuntimeError("terminal status already set")
        self.terminal = status
        self.ticks = tick_no

    def jsonl(self) -> str:
        return "".join(json.dumps(e, sort_keys=False, separators=(",", ":")) + "\n" for e in self.entries)

    def write(self, fh: TextIO) -> None:
        fh.write(self.jsonl())

    @property
    def delegated(self) -> int:
        return sum(1 for d in self.decisions if d.mode is Mode.DELEGATED)


def initial_trees(world: WorldState, goals: Iterable[Predicate]) -> dict[str, BehaviorTree]:
    """One tree per robot: its goals in order, or an idle placeholder."""
    per: dict[str, list[Predicate]] = {r.id: [] for r in world.robots}
    for g in goals:
        per[g.agent].append(g)
    return {rid: build_initial_tree(gs, rid) if gs else build_idle_tree(rid) for rid, gs in per.items()}


def _entry(tick_no, robot, status, failed, decision, qlen) -> dict[str, Any]:
    return {
        "tick": tick_no,
        "robot": robot,
        "status": status,
        "failed_predicate": failed,
        "decision": decision,
        "queue_len": qlen,
    }


def run_mission(
    world: WorldState,
    trees: dict[str, BehaviorTree],
    planner: PlannerPort,
    max_ticks: int = DEFAULT_MAX_TICKS,
    library: Library | None = None,
    on_tick=None,
) -> MissionTrace:
    """Run the allocate / tick / resolve loop until done or out of ticks."""
    if max_ticks < 1:
        raise ValueError("max_ticks must be >= 1")
    lib = library or default_library()
    trees = dict(trees)
    for t in trees.values():
        validate(t)
    order = [r.id for r in world.robots]
    queue = FailureQueue()
    eff = Effector(world, lib)
    trace = MissionTrace()
    events = sorted(world.layout.events, key=lambda e: e["tick"])

    def obs(rid: str, tick_no: int) -> Observation:
        return observe(eff.world, rid, tick=tick_no)

    def report(rid: str, res: TickResult, tick_no: int) -> None:
        if res.failed_node is None:
            return
        node, pred = res.failed_node
        owner = subtree_owner(queue, trees, rid, node)
        rec = FailureRecord(rid, node, pred, tick_no, parent=None if owner is None else owner.seq)
        report_failure(queue, rec, front=owner is not None)

    def detect(tick_no: int) -> bool:
        """Dry pass over every tree; True when all roots already succeed."""
        ok = True
        for rid in order:
            res = tick(trees[rid], obs(rid, tick_no), _dry)
            report(rid, res, tick_no)
            ok = ok and res.status is SUCCESS
        return ok

    def settle(tick_no: int) -> None:
        while queue.head() is not None:
            h = queue.head()
            if not holds(obs(h.robot, tick_no), h.predicate):
                break
            resolve(queue, h, trees)

    detect(0)
    for tick_no in range(1, max_ticks + 1):
        for ev in events:
            if ev["tick"] == tick_no:
                eff.world = apply_event(eff.world, ev)

        decision_info: dict[str, dict] = {}
        settle(tick_no)
        head = queue.head()
        if head is not None and head.dispatched:
            view = merge_observations(eff.world, [obs(rid, tick_no) for rid in order])
            leg_done(queue, head, trees, view)
        if head is not None and not head.dispatched:
            observations = {rid: obs(rid, tick_no) for rid in order}
            step = step_allocator(queue, planner, trees, observations, eff.world, lib)
            if step.cannot_complete:
                trace.entries.append(
                    _entry(tick_no, head.robot, Terminal.CANNOT_COMPLETE.value, str(head.predicate),
                           {"warning": CANNOT_COMPLETE}, len(queue))
                )
                trace.finish(Terminal.CANNOT_COMPLETE, tick_no)
                break
            trace.decisions.append(step.decision)
            for rid in step.updated:
                decision_info[rid] = step.decision.summary()

        for rid in order:
            eff.robot = rid
            res = tick(trees[rid], obs(rid, tick_no), eff)
            report(rid, res, tick_no)
            trace.entries.append(
                _entry(
                    tick_no,
                    rid,
                    res.status.value,
                    None if res.failed_node is None else str(res.failed_node[1]),
                    decision_info.get(rid),
                    len(queue),
                )
            )
        settle(tick_no)
        if on_tick is not None:
            on_tick(tick_no, eff.world, trees, queue)
        if detect(tick_no) and len(queue) == 0:
            trace.finish(Terminal.ALL_GOALS_MET, tick_no)
            break
    else:
        trace.finish(Terminal.BUDGET, max_ticks)

    trace.actions = eff.executed
    trace.final_world = eff.world
    trace.trees = trees
    trace.failures = list(queue.history)
    return trace
