"""Planner port, the backward-chaining oracle and joint assignment.

The oracle grounds a robot's templates over the entities the goal can
depend on and searches that slice breadth-first, so its plans are shortest.
Label-level regression alone is not enough here: the tabulated Post sets
omit side effects (a drone landing makes its basket reachable), so pruning
templates by Post labels would discard plans that exist.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING, Iterable, Mapping, Protocol, Sequence

from .errors import PlannerContractViolation
from .capability_library import ActionInstance, ActionTemplate, Library, default_library, slot_domain
from .world import (
    CONTAINER,
    ITEM,
    SURFACE,
    Observation,
    Predicate,
    RobotClass,
    WorldState,
    apply_action,
    apply_unchecked,
    first_unmet,
    holds,
    label_class,
    merge_observations,
)

if TYPE_CHECKING:  # pragma: no cover
    from .coordination import FailureRecord

DEFAULT_MAX_DEPTH = 20
CANNOT_COMPLETE = "This Task Cannot be Completed"


class Mode(str, Enum):
    LOCAL = "Local"
    DELEGATED = "Delegated"


@dataclass(frozen=True)
class AssignmentDecision:
    chosen_robot: str
    actions: tuple[ActionInstance, ...]
    mode: Mode
    rationale: str = ""
    goal: Predicate | None = None
    # state the actions are simulated from when building the recovery subtree
    start: WorldState | None = field(default=None, compare=False, repr=False)
    # non-empty for the first leg of a multi-robot plan: the leg is done when
    # these hold, and the request is planned again from there
    until: tuple[Predicate, ...] = ()
    fallback: bool = False

    @property
    def partial(self) -> bool:
        return bool(self.until)

    def summary(self) -> dict:
        out = {
            "mode": self.mode.value,
            "robot": self.chosen_robot,
            "actions": [str(a) for a in self.actions],
            "fallback": self.fallback,
        }
        if self.until:
            out["until"] = [str(p) for p in self.until]
        return out


def _view(obs: Observation | WorldState) -> WorldState:
    return obs.world if isinstance(obs, Observation) else obs


# ---------------------------------------------------------------------------
# relevance by regression


def _carry_any(goal: Predicate) -> bool:
    return not goal.desired or "WithObject" in goal.label or "FreeGrab" in goal.label


def relevant_entities(world: WorldState, goals: Iterable[Predicate]) -> frozenset[str]:
    """Fixed objects, robots, items named by a goal, and items currently carried.

    Other items can be ignored: surfaces, containers and cells have no
    capacity, so an item only ever gets in the way by occupying a hand or a
    basket, and those occupants are kept.  Goals about carrying an unnamed
    item (or negated goals) keep every item.
    """
    goals = list(goals)
    if any(_carry_any(g) for g in goals):
        return frozenset(o.id for o in world.objects) | {r.id for r in world.robots}
    keep = {o.id for o in world.objects if o.kind in (CONTAINER, SURFACE)}
    keep.update(r.id for r in world.robots)
    for g in goals:
        keep.update(a for a in g.args)
    for r in world.robots:
        keep.update(x for x in (r.holding, r.basket) if x is not None)
    return frozenset(keep)


def candidate_actions(
    world: WorldState,
    robots: Sequence[str],
    goals: Sequence[Predicate],
    library: Library,
    prune: bool = True,
) -> list[ActionInstance]:
    """Grounded actions worth searching over, in a fixed order."""
    ents = relevant_entities(world, goals) if prune else None
    out = []
    for rid in robots:
        r = world.robot(rid)
        for t in library.templates(r.cls):
            combos: list[dict[str, str]] = [{}]
            for slot in t.params:
                dom = slot_domain(world, t, slot)
                if ents is not None:
                    dom = [d for d in dom if d in world.layout.loc or d in ents]
                combos = [dict(c, **{slot: v}) for c in combos for v in dom]
            for c in combos:
                if len(set(c.values())) < len(c) or r.id in c.values():
                    continue
                out.append(ActionInstance(t, r.id, tuple((p, c[p]) for p in t.params)))
    return out


# ---------------------------------------------------------------------------
# search


class Successors:
    """Memoised applicable-action expansion over a fixed action list."""

    def __init__(self, actions: Sequence[ActionInstance]):
        self.actions = list(actions)
        self._memo: dict[WorldState, list[tuple[ActionInstance, WorldState]]] = {}

    def __call__(self, w: WorldState) -> list[tuple[ActionInstance, WorldState]]:
        got = self._memo.get(w)
        if got is None:
            got = []
            seen: set[WorldState] = set()
            truth: dict[Predicate, bool] = {}
            for a in self.actions:
                ok = True
                for p in a.pre:
                    t = truth.get(p)
                    if t is None:
                        t = truth[p] = holds(w, p)
                    if not t:
                        ok = False
                        break
                if ok:
                    nxt = apply_unchecked(w, a)
                    # actions with identical outcomes (e.g. MoveTo a cell or to an object in it)
                    # are interchangeable; keep the first in canonical order
                    if nxt != w and nxt not in seen:
                        seen.add(nxt)
                        got.append((a, nxt))
            self._memo[w] = got
        return got


def bfs_plan(
    world: WorldState,
    goals: Sequence[Predicate],
    robots: Sequence[str],
    library: Library | None = None,
    max_depth: int = DEFAULT_MAX_DEPTH,
    prune: bool = True,
    expand: Successors | None = None,
) -> list[ActionInstance] | None:
    """Shortest action sequence (over ``robots``) making every goal hold."""
    lib = library or default_library()
    if all(holds(world, g) for g in goals):
        return []
    expand = expand or Successors(candidate_actions(world, robots, goals, lib, prune))
    parent: dict[WorldState, tuple[WorldState, ActionInstance] | None] = {world: None}
    frontier = [world]
    for _ in range(max_depth):
        nxt_frontier = []
        for w in frontier:
            for a, w2 in expand(w):
                if w2 in parent:
                    continue
                parent[w2] = (w, a)
                if all(holds(w2, g) for g in goals):
                    plan = []
                    cur = w2
                    while parent[cur] is not None:
                        prev, act = parent[cur]
                        plan.append(act)
                        cur = prev
                    return plan[::-1]
                nxt_frontier.append(w2)
        if not nxt_frontier:
            return None
        frontier = nxt_frontier
    return None


_PLAN_CACHE: dict = {}


def backward_chain(
    goal: Predicate,
    robot: str,
    observation: Observation | WorldState,
    max_depth: int = DEFAULT_MAX_DEPTH,
    library: Library | None = None,
) -> list[ActionInstance] | None:
    """Minimal-length single-robot plan achieving ``goal`` from the observed state."""
    if max_depth < 1:
        raise ValueError("max_depth must be >= 1")
    lib = library or default_library()
    w = _view(observation)
    key = (w, w.layout, goal, robot, max_depth, lib.semantics, id(lib))
    if key in _PLAN_CACHE:
        got = _PLAN_CACHE[key]
        return None if got is None else list(got)
    if holds(w, goal):
        plan: list | None = []
    elif robot not in {r.id for r in w.robots}:
        plan = None
    else:
        plan = bfs_plan(w, [goal], [robot], lib, max_depth)
    if len(_PLAN_CACHE) > 20000:
        _PLAN_CACHE.clear()
    _PLAN_CACHE[key] = None if plan is None else tuple(plan)
    return plan


def team_plan(
    goal: Predicate | Sequence[Predicate],
    world: WorldState,
    max_depth: int = DEFAULT_MAX_DEPTH,
    library: Library | None = None,
    robots: Sequence[str] | None = None,
) -> list[ActionInstance] | None:
    """Shortest plan over the union of every robot's actions."""
    lib = library or default_library()
    goals = [goal] if isinstance(goal, Predicate) else list(goal)
    ids = list(robots) if robots is not None else [r.id for r in world.robots]
    key = ("team", world, world.layout, tuple(goals), tuple(ids), max_depth, id(lib))
    if key in _PLAN_CACHE:
        got = _PLAN_CACHE[key]
        return None if got is None else list(got)
    plan = bfs_plan(world, goals, ids, lib, max_depth)
    _PLAN_CACHE[key] = None if plan is None else tuple(plan)
    return plan


def simulate(world: WorldState, actions: Iterable[ActionInstance]) -> list[WorldState]:
    """States before and after each action (raises PreconditionViolated)."""
    states = [world]
    for a in actions:
        states.append(apply_action(states[-1], a.robot, a))
    return states


def first_segment(plan: Sequence[ActionInstance]) -> int:
    """Length of the opening run of same-robot actions."""
    k = 1
    while k < len(plan) and plan[k].robot == plan[0].robot:
        k += 1
    return k


def decision_from_team_plan(
    plan: Sequence[ActionInstance],
    goal: Predicate,
    requester: str,
    view: WorldState,
    rationale: str = "",
) -> AssignmentDecision:
    """Hand out the first robot's leg of a team plan.

    A plan for a single robot is handed out whole.  Otherwise the leg ends
    once the conditions for the rest of the plan and the leg's own effects
    hold; the allocator then plans the same request again from there.
    """
    from .bt_core import step_conditions

    k = first_segment(plan)
    robot = plan[0].robot
    mode = Mode.LOCAL if robot == requester else Mode.DELEGATED
    if k == len(plan):
        return AssignmentDecision(robot, tuple(plan), mode, rationale, goal, view)
    # the leg's own effects count too, so a finished leg always shortens the
    # remaining plan even when the regressed conditions already hold
    end = simulate(view, plan[:k])[-1]
    until = list(step_conditions(goal, plan, view)[k])
    for a in plan[:k]:
        until += [p for p in a.post if p not in until and holds(end, p)]
    until = tuple(until)
    return AssignmentDecision(robot, tuple(plan[:k]), mode, rationale, goal, view, until)


def joint_propose(
    failure: "FailureRecord",
    observations: Mapping[str, Observation],
    world: WorldState | None = None,
    library: Library | None = None,
    pending: Mapping[str, int] | None = None,
    max_depth: int = DEFAULT_MAX_DEPTH,
) -> AssignmentDecision | None:
    """Local plan first, then the best single peer, then a team plan."""
    lib = library or default_library()
    pending = pending or {}
    base = world if world is not None else _view(observations[failure.robot])
    view = merge_observations(base, observations.values())
    goal = failure.predicate

    own = backward_chain(goal, failure.robot, view, max_depth, lib)
    if own is not None:
        return AssignmentDecision(failure.robot, tuple(own), Mode.LOCAL, "", goal, view)

    best = None
    for r in view.robots:
        if r.id == failure.robot:
            continue
        plan = backward_chain(goal, r.id, view, max_depth, lib)
        if plan is None:
            continue
        rank = (len(plan), pending.get(r.id, 0), r.id)
        if best is None or rank < best[0]:
            best = (rank, r.id, plan)
    if best is not None:
        _, rid, plan = best
        return AssignmentDecision(rid, tuple(plan), Mode.DELEGATED, "", goal, view)

    plan = team_plan(goal, view, max_depth, lib)
    if not plan:
        return None
    return decision_from_team_plan(plan, goal, failure.robot, view)


def validate_decision(
    decision: AssignmentDecision,
    failure: "FailureRecord",
    world: WorldState,
    library: Library | None = None,
) -> None:
    """Raise PlannerContractViolation unless the decision is admissible."""
    lib = library or default_library()
    if not decision.actions:
        raise PlannerContractViolation("decision has no actions")
    try:
        chosen = world.robot(decision.chosen_robot)
    except Exception:
        raise PlannerContractViolation(f"unknown robot {decision.chosen_robot!r}") from None
    registry = lib.templates(chosen.cls)
    for a in decision.actions:
        if a.robot != decision.chosen_robot:
            raise PlannerContractViolation(f"{a} is not bound to {decision.chosen_robot}")
        if a.template not in registry:
            raise PlannerContractViolation(f"{a.name} is not in the {chosen.cls.value} registry")
    if decision.mode is Mode.LOCAL and decision.chosen_robot != failure.robot:
        raise PlannerContractViolation("a Local decision must go to the reporting robot")
    if decision.mode is Mode.DELEGATED and decision.chosen_robot == failure.robot:
        raise PlannerContractViolation("a Delegated decision must go to a peer")
    targets = list(decision.until) if decision.until else [failure.predicate]
    if not decision.until and failure.predicate in decision.actions[-1].post:
        return
    start = decision.start if decision.start is not None else world
    try:
        end = simulate(start, decision.actions)[-1]
    except Exception as exc:
        raise PlannerContractViolation(f"plan does not replay: {exc}") from None
    for g in targets:
        if not holds(end, g):
            raise PlannerContractViolation(f"plan does not achieve {g}")


# ---------------------------------------------------------------------------
# planner port


class PlannerPort(Protocol):
    name: str

    def propose(
        self,
        failure: "FailureRecord",
        observations: Mapping[str, Observation],
        world: WorldState,
        pending: Mapping[str, int],
    ) -> AssignmentDecision | None: ...


class OraclePlanner:
    name = "oracle"

    def __init__(self, library: Library | None = None, max_depth: int = DEFAULT_MAX_DEPTH):
        self.library = library or default_library()
        self.max_depth = max_depth

    def propose(self, failure, observations, world, pending):
        return joint_propose(failure, observations, world, self.library, pending, self.max_depth)
