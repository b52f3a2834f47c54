"""UCT search over the team's grounded actions (the baseline planner)."""

from __future__ import annotations

import math
import random
from typing import Mapping, Sequence

from .capability_library import ActionInstance, Library, default_library
from .planning import (
    AssignmentDecision,
    Successors,
    candidate_actions,
    decision_from_team_plan,
)
from .world import Observation, Predicate, WorldState, holds

EXPLORATION = math.sqrt(2.0)
DEFAULT_BUDGET = 500
DEFAULT_DEPTH = 20
PRIOR_WEIGHT = 0.5


class _Node:
    __slots__ = ("state", "parent", "action", "children", "untried", "visits", "value")

    def __init__(self, state, parent, action, untried):
        self.state = state
        self.parent = parent
        self.action = action
        self.children: list[_Node] = []
        self.untried = untried
        self.visits = 0
        self.value = 0.0


def _uct(child: _Node, parent_visits: int) -> float:
    return child.value / child.visits + EXPLORATION * math.sqrt(math.log(parent_visits) / child.visits)


def _drop_cycles(states: list[WorldState], actions: list[ActionInstance]) -> list[ActionInstance]:
    """Cut every loop that returns to an already visited state."""
    keep_states = [states[0]]
    keep_actions: list[ActionInstance] = []
    where = {states[0]: 0}
    for a, s in zip(actions, states[1:]):
        if s in where:
            cut = where[s]
            for dropped in keep_states[cut + 1:]:
                where.pop(dropped, None)
            keep_states = keep_states[: cut + 1]
            keep_actions = keep_actions[:cut]
        else:
            where[s] = len(keep_states)
            keep_states.append(s)
            keep_actions.append(a)
    return keep_actions


def mcts_plan(
    world: WorldState,
    goal: Predicate | Sequence[Predicate],
    budget: int = DEFAULT_BUDGET,
    depth: int = DEFAULT_DEPTH,
    seed: int = 0,
    robots: Sequence[str] | None = None,
    library: Library | None = None,
    prior: Sequence[ActionInstance] | None = None,
    prior_weight: float = PRIOR_WEIGHT,
) -> list[ActionInstance] | None:
    """Plan with ``budget`` UCT iterations, each descending at most ``depth`` actions.

    Reward is 1 at goal states and 0 elsewhere; rollouts pick uniformly among
    applicable actions, or, with probability ``prior_weight`` when a prior is
    given, the earliest applicable action of the prior.  Returns the
    most-visited path if it reaches the goal, otherwise the shortest
    goal-reaching trajectory seen (loops removed), otherwise None.
    """
    if budget < 1 or depth < 1:
        raise ValueError("budget and depth must be >= 1")
    lib = library or default_library()
    goals = [goal] if isinstance(goal, Predicate) else list(goal)
    ids = list(robots) if robots is not None else [r.id for r in world.robots]
    rng = random.Random(seed)
    expand = Successors(candidate_actions(world, ids, goals, lib))
    done: dict[WorldState, bool] = {}
    prior = list(prior or ())

    def is_goal(s: WorldState) -> bool:
        g = done.get(s)
        if g is None:
            g = done[s] = all(holds(s, p) for p in goals)
        return g

    def fresh(s: WorldState) -> list:
        succ = list(expand(s))
        rng.shuffle(succ)
        return succ

    if is_goal(world):
        return []
    root = _Node(world, None, None, fresh(world))
    best: list[ActionInstance] | None = None

    for _ in range(budget):
        node = root
        d = 0
        states = [world]
        acts: list[ActionInstance] = []
        while not node.untried and node.children and not is_goal(node.state) and d < depth:
            pv = node.visits
            node = max(node.children, key=lambda c: _uct(c, pv))
            d += 1
            states.append(node.state)
            acts.append(node.action)
        if node.untried and not is_goal(node.state) and d < depth:
            a, s2 = node.untried.pop()
            child = _Node(s2, node, a, fresh(s2))
            node.children.append(child)
            node = child
            d += 1
            states.append(s2)
            acts.append(a)
        s = node.state
        reward = 1.0 if is_goal(s) else 0.0
        while not reward and d < depth:
            succ = expand(s)
            if not succ:
                break
            pick = None
            if prior and rng.random() < prior_weight:
                names = {a: nxt for a, nxt in succ}
                for p in prior:
                    if p in names:
                        pick = (p, names[p])
                        break
            if pick is None:
                pick = succ[rng.randrange(len(succ))]
            a, s = pick
            d += 1
            states.append(s)
            acts.append(a)
            if is_goal(s):
                reward = 1.0
        if reward:
            plan = _drop_cycles(states, acts)
            if best is None or len(plan) < len(best):
                best = plan
        while node is not None:
            node.visits += 1
            node.value += reward
            node = node.parent

    path: list[ActionInstance] = []
    node = root
    while node.children and not is_goal(node.state):
        node = max(node.children, key=lambda c: (c.visits, c.value))
        path.append(node.action)
    if is_goal(node.state):
        return path
    return best


class MCTSPlanner:
    """Baseline port: searches the full world, hands out the first robot's leg."""

    name = "mcts"

    def __init__(
        self,
        seed: int = 0,
        budget: int = DEFAULT_BUDGET,
        depth: int = DEFAULT_DEPTH,
        library: Library | None = None,
    ):
        self.rng = random.Random(seed)
        self.budget = budget
        self.depth = depth
        self.library = library or default_library()

    def prior(self, failure, observations, world, pending) -> list[ActionInstance] | None:
        return None

    def propose(self, failure, observations: Mapping[str, Observation], world: WorldState, pending):
        seed = self.rng.getrandbits(32)
        prior = self.prior(failure, observations, world, pending)
        plan = mcts_plan(
            world, failure.predicate, self.budget, self.depth, seed, library=self.library, prior=prior
        )
        if not plan:
            return None
        return decision_from_team_plan(plan, failure.predicate, failure.robot, world)
