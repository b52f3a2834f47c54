"""Symbolic world state, partial observation and action effects.

The world is a graph of named locations with integer grid coordinates.
Objects are items (movable), containers (openable, fixed) or surfaces
(fixed).  Robots are arms (immobile, fixed reach set), quadrupeds (move
along unblocked edges) or drones (fly over cells that are not no-fly).

Predicates are evaluated from the facts alone; nothing is cached on the
state apart from index maps.
"""

from __future__ import annotations

import itertools
import math
import random
from collections import deque
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping

import yaml
import jsonschema

from .errors import (
    MalformedPredicate,
    PreconditionViolated,
    SchemaError,
    UnknownEntity,
)

FORMAT_VERSION = 1
DEFAULT_RADIUS = 3.0


class RobotClass(str, Enum):
    ARM = "Arm"
    QUADRUPED = "Quadruped"
    DRONE = "Drone"


PREFIX = {RobotClass.ARM: "Arm", RobotClass.QUADRUPED: "Quad", RobotClass.DRONE: "Drone"}
_CLASS_BY_PREFIX = {v: k for k, v in PREFIX.items()}

# label -> argument roles
AGENT, SUBJECT, TARGET, PAIR = "agent", "subject", "target", "subject+target"

VOCABULARY: dict[str, str] = {
    "ArmObjectFreeGrab": AGENT,
    "ArmContainOpen": SUBJECT,
    "ArmContainClose": SUBJECT,
    "ArmObjectInRange": SUBJECT,
    "ArmObjectInGrab": SUBJECT,
    "ArmObjectInTarget": PAIR,
    "ArmObjectOnTarget": PAIR,
    "QuadFreePath": TARGET,
    "QuadInRangeNoObject": TARGET,
    "QuadInRangeWithObject": TARGET,
    "QuadObjectFreeGrab": AGENT,
    "QuadContainOpen": SUBJECT,
    "QuadContainClose": SUBJECT,
    "QuadCanGetObject": SUBJECT,
    "QuadObjectInGrab": SUBJECT,
    "QuadObjectInTarget": PAIR,
    "QuadObjectOnTarget": PAIR,
    "DroneObjectInBasket": SUBJECT,
    "DroneOnGround": AGENT,
    "DroneInAirNoObject": AGENT,
    "DroneInAirWithObject": AGENT,
    "DroneInRangeNoObject": TARGET,
    "DroneInRangeWithObject": TARGET,
    "DroneAtTargetNoObject": TARGET,
    "DroneAtTargetWithObject": TARGET,
    "DronePathFree": TARGET,
}


def label_class(label: str) -> RobotClass:
    cls = _LABEL_CLASS.get(label)
    if cls is not None:
        return cls
    for prefix, cls in _CLASS_BY_PREFIX.items():
        if label.startswith(prefix):
            return cls
    raise MalformedPredicate(f"label {label!r} has no robot-class prefix")


_LABEL_CLASS: dict[str, RobotClass] = {}
_LABEL_CLASS.update({lab: label_class(lab) for lab in VOCABULARY})


def base_label(label: str) -> str:
    return label[len(PREFIX[label_class(label)]):]


@dataclass(frozen=True, order=True)
class Predicate:
    """A grounded condition.  ``desired`` is the truth value the condition asks for."""

    label: str
    agent: str | None = None
    subject: str | None = None
    target: str | None = None
    desired: bool = True

    def __post_init__(self):
        roles = VOCABULARY.get(self.label)
        if roles is None:
            raise MalformedPredicate(f"unknown condition label {self.label!r}")
        if self.agent is None:
            raise MalformedPredicate(f"{self.label} needs an agent")
        want_subject = roles in (SUBJECT, PAIR)
        want_target = roles in (TARGET, PAIR)
        if (self.subject is not None) != want_subject or (self.target is not None) != want_target:
            raise MalformedPredicate(f"{self.label} takes {roles}, got subject={self.subject} target={self.target}")
        object.__setattr__(self, "args", tuple(a for a in (self.subject, self.target) if a is not None))
        object.__setattr__(self, "cls", _LABEL_CLASS[self.label])

    def negated(self) -> "Predicate":
        return replace(self, desired=not self.desired)

    def __str__(self) -> str:
        inner = self.agent + (": " + ", ".join(self.args) if self.args else "")
        return f"{'' if self.desired else 'not '}{self.label}?({inner})"


def parse_predicate(text: str) -> Predicate:
    """Inverse of ``str(Predicate)``."""
    s = text.strip()
    desired = True
    if s.startswith("not "):
        desired, s = False, s[4:].strip()
    try:
        head, rest = s.split("?(", 1)
        if not rest.endswith(")"):
            raise ValueError
        inner = rest[:-1]
    except ValueError:
        raise MalformedPredicate(f"cannot parse predicate {text!r}") from None
    agent, _, args = inner.partition(":")
    parts = [a.strip() for a in args.split(",")] if args.strip() else []
    roles = VOCABULARY.get(head)
    if roles is None:
        raise MalformedPredicate(f"unknown condition label {head!r}")
    subject = target = None
    if roles == SUBJECT and len(parts) == 1:
        subject = parts[0]
    elif roles == TARGET and len(parts) == 1:
        target = parts[0]
    elif roles == PAIR and len(parts) == 2:
        subject, target = parts
    elif not (roles == AGENT and not parts):
        raise MalformedPredicate(f"wrong arity in {text!r}")
    return Predicate(head, agent.strip(), subject, target, desired)


# ---------------------------------------------------------------------------
# state


@dataclass(frozen=True)
class Location:
    id: str
    x: int
    y: int
    no_fly: bool = False


@dataclass(frozen=True)
class RobotState:
    id: str
    cls: RobotClass
    position: str
    holding: str | None = None
    airborne: bool = False
    basket: str | None = None


ITEM, CONTAINER, SURFACE = "item", "container", "surface"


@dataclass(frozen=True)
class ObjectState:
    id: str
    kind: str
    location: str | None = None  # floor cell for free items; fixed cell for containers/surfaces
    open: bool | None = None
    held_by: str | None = None
    in_container: str | None = None
    on_surface: str | None = None
    in_basket: str | None = None


@dataclass(frozen=True, eq=False)
class Layout:
    """Static part of a scenario: map, arm reach sets, spawn rules, sensing radii."""

    locations: tuple[Location, ...]
    edges: frozenset[tuple[str, str]]
    reach: Mapping[str, frozenset[str]] = field(default_factory=dict)
    robot_spawn: Mapping[str, tuple[str, ...]] = field(default_factory=dict)
    object_spawn: Mapping[str, tuple[str, ...]] = field(default_factory=dict)
    sensing: Mapping[str, float | None] = field(default_factory=dict)
    durations: Mapping[str, int] = field(default_factory=dict)
    events: tuple[dict, ...] = ()
    name: str = ""

    @cached_property
    def loc(self) -> dict[str, Location]:
        return {l.id: l for l in self.locations}

    @cached_property
    def neighbors(self) -> dict[str, frozenset[str]]:
        nb: dict[str, set[str]] = {l.id: set() for l in self.locations}
        for a, b in self.edges:
            nb[a].add(b)
            nb[b].add(a)
        return {k: frozenset(v) for k, v in nb.items()}

    @cached_property
    def by_coords(self) -> dict[tuple[int, int], Location]:
        return {(l.x, l.y): l for l in self.locations}

    def radius_for(self, cls: RobotClass) -> float:
        r = self.sensing.get(cls.value, DEFAULT_RADIUS)
        return math.inf if r is None else float(r)


def edge(a: str, b: str) -> tuple[str, str]:
    return (a, b) if a <= b else (b, a)


@dataclass(frozen=True, eq=False)
class WorldState:
    layout: Layout
    robots: tuple[RobotState, ...]
    objects: tuple[ObjectState, ...]
    blocked: frozenset[tuple[str, str]] = frozenset()
    rng_seed: int = 0

    @cached_property
    def key(self):
        return (self.robots, self.objects, self.blocked)

    @cached_property
    def _hash(self) -> int:
        return hash(self.key)

    def __eq__(self, other):
        if self is other:
            return True
        return isinstance(other, WorldState) and self._hash == other._hash and self.key == other.key

    def __hash__(self):
        return self._hash

    @cached_property
    def _robot_index(self) -> dict[str, int]:
        return {r.id: i for i, r in enumerate(self.robots)}

    @cached_property
    def _object_index(self) -> dict[str, int]:
        return {o.id: i for i, o in enumerate(self.objects)}

    def robot(self, rid: str) -> RobotState:
        try:
            return self.robots[self._robot_index[rid]]
        except KeyError:
            raise UnknownEntity(rid, "robot") from None

    def obj(self, oid: str) -> ObjectState:
        try:
            return self.objects[self._object_index[oid]]
        except KeyError:
            raise UnknownEntity(oid, "object") from None

    def has(self, eid: str) -> bool:
        return eid in self._robot_index or eid in self._object_index or eid in self.layout.loc

    def items(self) -> list[ObjectState]:
        return [o for o in self.objects if o.kind == ITEM]

    def with_robot(self, r: RobotState) -> "WorldState":
        i = self._robot_index[r.id]
        return replace(self, robots=self.robots[:i] + (r,) + self.robots[i + 1:])

    def with_objects(self, *objs: ObjectState) -> "WorldState":
        lst = list(self.objects)
        for o in objs:
            lst[self._object_index[o.id]] = o
        return replace(self, objects=tuple(lst))

    def location_of(self, eid: str) -> str:
        """Cell an entity currently occupies (items follow whoever carries them)."""
        if eid in self.layout.loc:
            return eid
        if eid in self._robot_index:
            return self.robot(eid).position
        o = self.obj(eid)
        if o.held_by is not None:
            return self.robot(o.held_by).position
        if o.in_basket is not None:
            return self.robot(o.in_basket).position
        if o.in_container is not None:
            return self.obj(o.in_container).location
        if o.on_surface is not None:
            return self.obj(o.on_surface).location
        return o.location


@dataclass(frozen=True)
class Observation:
    """A robot's partial view: a restriction of the world to what it can sense."""

    robot: str
    world: WorldState
    tick: int = 0


# ---------------------------------------------------------------------------
# predicate semantics


def _item_accessible(w: WorldState, o: ObjectState) -> bool:
    """Not inside a closed container and not in the basket of a flying drone."""
    if o.in_container is not None:
        return bool(w.obj(o.in_container).open)
    if o.in_basket is not None:
        return not w.robot(o.in_basket).airborne
    return True


def _contain_open(w: WorldState, x: str) -> bool:
    if x in w._robot_index:
        d = w.robot(x)
        return d.cls is RobotClass.DRONE and not d.airborne and d.basket is None
    o = w.obj(x)
    if o.kind == CONTAINER:
        return bool(o.open)
    if o.kind == ITEM:
        return _item_accessible(w, o)
    return True


def _contain_close(w: WorldState, x: str) -> bool:
    if x in w._robot_index:
        return False
    o = w.obj(x)
    if o.kind == CONTAINER:
        return not o.open
    if o.kind == ITEM and o.in_container is not None:
        return not w.obj(o.in_container).open
    return False


def _free(w: WorldState, x: str) -> bool:
    """Item not carried by any robot (in a hand or a flying basket)."""
    if x in w._object_index:
        o = w.obj(x)
        return o.held_by is None and (o.in_basket is None or not w.robot(o.in_basket).airborne)
    return True


def _quad_near(w: WorldState, r: RobotState, t: str) -> bool:
    cell = w.location_of(t)
    return cell == r.position or cell in w.layout.neighbors[r.position]


def path_exists(layout: Layout, blocked: frozenset, start: str, goal: str) -> bool:
    if start == goal:
        return True
    seen = {start}
    todo = deque([start])
    nb = layout.neighbors
    while todo:
        cur = todo.popleft()
        for n in nb[cur]:
            if n in seen or edge(cur, n) in blocked:
                continue
            if n == goal:
                return True
            seen.add(n)
            todo.append(n)
    return False


def line_cells(x0: int, y0: int, x1: int, y1: int) -> list[tuple[int, int]]:
    """Bresenham cells from (x0, y0) to (x1, y1), both ends included."""
    cells = []
    dx, dy = abs(x1 - x0), -abs(y1 - y0)
    sx, sy = (1 if x0 < x1 else -1), (1 if y0 < y1 else -1)
    err = dx + dy
    while True:
        cells.append((x0, y0))
        if x0 == x1 and y0 == y1:
            return cells
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x0 += sx
        if e2 <= dx:
            err += dx
            y0 += sy


def _drone_path_free(w: WorldState, r: RobotState, t: str) -> bool:
    a = w.layout.loc[r.position]
    b = w.layout.loc[w.location_of(t)]
    coords = w.layout.by_coords
    for c in line_cells(a.x, a.y, b.x, b.y):
        cell = coords.get(c)
        if cell is not None and cell.no_fly:
            return False
    return True


def _in_target(w: WorldState, o: str, c: str) -> bool:
    ob = w.obj(o)
    return ob.in_container == c or ob.in_basket == c


_EVAL = {
    # arm
    "ArmObjectFreeGrab": lambda w, r, p: r.holding is None,
    "ArmObjectInGrab": lambda w, r, p: r.holding == p.subject,
    "ArmContainOpen": lambda w, r, p: _contain_open(w, p.subject),
    "ArmContainClose": lambda w, r, p: _contain_close(w, p.subject),
    "ArmObjectInRange": lambda w, r, p: _free(w, p.subject)
    and w.location_of(p.subject) in w.layout.reach.get(r.id, ()),
    "ArmObjectInTarget": lambda w, r, p: _in_target(w, p.subject, p.target),
    "ArmObjectOnTarget": lambda w, r, p: w.obj(p.subject).on_surface == p.target,
    # quadruped
    "QuadFreePath": lambda w, r, p: path_exists(w.layout, w.blocked, r.position, w.location_of(p.target)),
    "QuadInRangeNoObject": lambda w, r, p: _quad_near(w, r, p.target),
    "QuadInRangeWithObject": lambda w, r, p: r.holding is not None and _quad_near(w, r, p.target),
    "QuadObjectFreeGrab": lambda w, r, p: r.holding is None,
    "QuadContainOpen": lambda w, r, p: _contain_open(w, p.subject),
    "QuadContainClose": lambda w, r, p: _contain_close(w, p.subject),
    "QuadCanGetObject": lambda w, r, p: _free(w, p.subject) and _item_accessible(w, w.obj(p.subject)),
    "QuadObjectInGrab": lambda w, r, p: r.holding == p.subject,
    "QuadObjectInTarget": lambda w, r, p: _in_target(w, p.subject, p.target),
    "QuadObjectOnTarget": lambda w, r, p: w.obj(p.subject).on_surface == p.target,
    # drone
    "DroneObjectInBasket": lambda w, r, p: r.basket == p.subject,
    "DroneOnGround": lambda w, r, p: not r.airborne,
    "DroneInAirNoObject": lambda w, r, p: r.airborne,
    "DroneInAirWithObject": lambda w, r, p: r.airborne and r.basket is not None,
    "DroneInRangeNoObject": lambda w, r, p: r.airborne and r.position == w.location_of(p.target),
    "DroneInRangeWithObject": lambda w, r, p: r.airborne
    and r.basket is not None
    and r.position == w.location_of(p.target),
    "DroneAtTargetNoObject": lambda w, r, p: not r.airborne and r.position == w.location_of(p.target),
    "DroneAtTargetWithObject": lambda w, r, p: not r.airborne
    and r.basket is not None
    and r.position == w.location_of(p.target),
    "DronePathFree": lambda w, r, p: _drone_path_free(w, r, p.target),
}


def check_predicate(world: WorldState | Observation, pred: Predicate) -> bool:
    """Truth of ``pred`` (compared against its desired value) in ``world``."""
    w = world.world if isinstance(world, Observation) else world
    r = w.robot(pred.agent)
    if pred.cls is not r.cls:
        raise MalformedPredicate(f"{pred} names a {r.cls.value} agent with a foreign label")
    for a in pred.args:
        if not w.has(a):
            raise UnknownEntity(a, str(pred))
    return _EVAL[pred.label](w, r, pred) == pred.desired


def holds(world: WorldState | Observation, pred: Predicate) -> bool:
    """Like check_predicate, but facts about unseen entities count as false."""
    try:
        return check_predicate(world, pred)
    except UnknownEntity:
        return False


# ---------------------------------------------------------------------------
# effects


def _release(w: WorldState, item: ObjectState) -> ObjectState:
    return replace(item, location=None, held_by=None, in_container=None, on_surface=None, in_basket=None)


def _effect(w: WorldState, r: RobotState, action) -> WorldState:
    name = action.name
    if r.cls is RobotClass.DRONE:
        if name.startswith("TakeOff"):
            return w.with_robot(replace(r, airborne=True))
        if name.startswith("LandOn"):
            return w.with_robot(replace(r, airborne=False, position=w.location_of(action.get("target"))))
        if name.startswith("MoveTo"):
            return w.with_robot(replace(r, position=w.location_of(action.get("target"))))
        raise ValueError(f"no effect model for drone action {name}")

    if name.startswith("MoveTo"):
        return w.with_robot(replace(r, position=w.location_of(action.get("target"))))
    if name == "Open":
        c = w.obj(action.get("container"))
        return w.with_objects(replace(c, open=True))
    if name == "Close":
        c = w.obj(action.get("container"))
        return w.with_objects(replace(c, open=False))
    if name == "Grab":
        o = w.obj(action.get("object"))
        if o.in_basket is not None:
            w = w.with_robot(replace(w.robot(o.in_basket), basket=None))
        w = w.with_objects(replace(_release(w, o), held_by=r.id))
        return w.with_robot(replace(w.robot(r.id), holding=o.id))
    if name == "PutInto":
        o = w.obj(action.get("object"))
        dest = action.get("container")
        if dest in w._robot_index:
            w = w.with_robot(replace(w.robot(dest), basket=o.id))
            w = w.with_objects(replace(_release(w, o), in_basket=dest))
        else:
            w = w.with_objects(replace(_release(w, o), in_container=dest))
        return w.with_robot(replace(w.robot(r.id), holding=None))
    if name == "PutOn":
        o = w.obj(action.get("object"))
        w = w.with_objects(replace(_release(w, o), on_surface=action.get("surface")))
        return w.with_robot(replace(w.robot(r.id), holding=None))
    raise ValueError(f"no effect model for {r.cls.value} action {name}")


def first_unmet(world: WorldState, action) -> Predicate | None:
    for p in action.pre:
        if not holds(world, p):
            return p
    return None


def apply_action(world: WorldState, robot: str, action) -> WorldState:
    """Apply a grounded action after checking every precondition."""
    r = world.robot(robot)
    if action.robot != robot:
        raise ValueError(f"{action} is bound to {action.robot}, not {robot}")
    bad = first_unmet(world, action)
    if bad is not None:
        raise PreconditionViolated(bad, action)
    return _effect(world, r, action)


def apply_unchecked(world: WorldState, action) -> WorldState:
    """Effect only; callers must have verified applicability."""
    return _effect(world, world.robot(action.robot), action)


# ---------------------------------------------------------------------------
# invariants


def check_invariants(world: WorldState) -> list[str]:
    """Return a list of violated world invariants (empty when consistent)."""
    errs = []
    holders: dict[str, str] = {}
    for r in world.robots:
        if r.position not in world.layout.loc:
            errs.append(f"{r.id} at unknown cell {r.position}")
        if r.cls is not RobotClass.DRONE and (r.airborne or r.basket is not None):
            errs.append(f"{r.id} is not a drone but flies or carries a basket")
        if r.cls is RobotClass.DRONE and r.holding is not None:
            errs.append(f"drone {r.id} holds an object")
        for carried in (r.holding, r.basket):
            if carried is None:
                continue
            if carried in holders:
                errs.append(f"{carried} carried by {holders[carried]} and {r.id}")
            holders[carried] = r.id
    for o in world.objects:
        if o.kind != ITEM:
            if o.location not in world.layout.loc:
                errs.append(f"{o.id} fixed at unknown cell {o.location}")
            continue
        places = [x for x in (o.location, o.held_by, o.in_container, o.on_surface, o.in_basket) if x is not None]
        if len(places) != 1:
            errs.append(f"{o.id} has {len(places)} placements")
        if o.held_by is not None and world.robot(o.held_by).holding != o.id:
            errs.append(f"{o.id} held_by {o.held_by} disagrees with robot")
        if o.in_basket is not None and world.robot(o.in_basket).basket != o.id:
            errs.append(f"{o.id} in basket of {o.in_basket} disagrees with robot")
        if o.id in holders and holders[o.id] not in (o.held_by, o.in_basket):
            errs.append(f"{o.id} carried by {holders[o.id]} but not marked")
    return errs


# ---------------------------------------------------------------------------
# observation


def observe(world: WorldState, robot: str, radius: float | None = None, tick: int = 0) -> Observation:
    """Restrict ``world`` to what ``robot`` senses within ``radius`` cells."""
    me = world.robot(robot)
    if radius is None:
        radius = world.layout.radius_for(me.cls)
    here = world.layout.loc[me.position]

    def visible(cell: str | None) -> bool:
        if cell is None:
            return False
        c = world.layout.loc[cell]
        return math.hypot(c.x - here.x, c.y - here.y) <= radius

    robots = tuple(r for r in world.robots if r.id == robot or visible(r.position))
    seen_robots = {r.id for r in robots}
    objects = []
    for o in world.objects:
        mine = robot in (o.held_by, o.in_basket)
        if mine or visible(world.location_of(o.id)):
            # a carried item is only visible together with its carrier
            carrier = o.held_by or o.in_basket
            if carrier is not None and carrier not in seen_robots:
                continue
            objects.append(o)
    # containers of visible items must come along so placement facts stay resolvable
    ids = {o.id for o in objects}
    for o in list(objects):
        for ref in (o.in_container, o.on_surface):
            if ref is not None and ref not in ids:
                objects.append(world.obj(ref))
                ids.add(ref)
    objects.sort(key=lambda o: world._object_index[o.id])
    # drop robots' carried items that are not visible so the view stays consistent
    view = replace(world, robots=robots, objects=tuple(objects))
    return Observation(robot, view, tick)


def merge_observations(world_layout_source: WorldState, observations: Iterable[Observation]) -> WorldState:
    """Union of several views (the allocator's shared picture of the team)."""
    robots: dict[str, RobotState] = {}
    objects: dict[str, ObjectState] = {}
    base = world_layout_source
    for ob in observations:
        for r in ob.world.robots:
            robots[r.id] = r
        for o in ob.world.objects:
            objects[o.id] = o
    r_order = [r.id for r in base.robots]
    o_order = [o.id for o in base.objects]
    return replace(
        base,
        robots=tuple(robots[i] for i in r_order if i in robots),
        objects=tuple(objects[i] for i in o_order if i in objects),
    )


def fact_table(world: WorldState, predicates: Iterable[Predicate]) -> dict[Predicate, bool]:
    return {p: holds(world, p) for p in predicates}


def all_predicates(world: WorldState) -> list[Predicate]:
    """Every positive grounded predicate over the world's agents and entities."""
    entities = [l.id for l in world.layout.locations] + [o.id for o in world.objects] + [
        r.id for r in world.robots
    ]
    items = [o.id for o in world.objects if o.kind == ITEM]
    out = []
    for r in world.robots:
        prefix = PREFIX[r.cls]
        for label, roles in VOCABULARY.items():
            if not label.startswith(prefix) or label_class(label) is not r.cls:
                continue
            if roles == AGENT:
                out.append(Predicate(label, r.id))
            elif roles == SUBJECT:
                out.extend(Predicate(label, r.id, subject=e) for e in entities if e not in world.layout.loc)
            elif roles == TARGET:
                out.extend(Predicate(label, r.id, target=e) for e in entities)
            else:
                out.extend(
                    Predicate(label, r.id, subject=i, target=e)
                    for i in items
                    for e in entities
                    if e != i and e not in world.layout.loc
                )
    return out


# ---------------------------------------------------------------------------
# scripted events


def apply_event(world: WorldState, event: Mapping[str, Any]) -> WorldState:
    if "block" in event:
        a, b = event["block"]
        return replace(world, blocked=world.blocked | {edge(a, b)})
    if "unblock" in event:
        a, b = event["unblock"]
        return replace(world, blocked=world.blocked - {edge(a, b)})
    if "teleport" in event:
        spec = event["teleport"]
        return place_item(world, spec["object"], spec["to"])
    raise SchemaError(f"unknown event {dict(event)!r}", ("events",))


def place_item(world: WorldState, item: str, dest: str) -> WorldState:
    """Put ``item`` on/in/at ``dest`` (a surface, container or cell), releasing any carrier."""
    o = world.obj(item)
    if o.held_by is not None:
        world = world.with_robot(replace(world.robot(o.held_by), holding=None))
    if o.in_basket is not None:
        world = world.with_robot(replace(world.robot(o.in_basket), basket=None))
    o = _release(world, o)
    if dest in world.layout.loc:
        o = replace(o, location=dest)
    else:
        d = world.obj(dest)
        o = replace(o, on_surface=dest) if d.kind == SURFACE else replace(o, in_container=dest)
    return world.with_objects(o)


# ---------------------------------------------------------------------------
# scenario files

_NAME = {"type": "string", "minLength": 1}
_PAIR = {"type": "array", "items": _NAME, "minItems": 2, "maxItems": 2}

SCENARIO_SCHEMA = {
    "type": "object",
    "required": ["format_version", "locations", "robots"],
    "additionalProperties": False,
    "properties": {
        "format_version": {"const": FORMAT_VERSION},
        "name": {"type": "string"},
        "locations": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["id", "x", "y"],
                "additionalProperties": False,
                "properties": {"id": _NAME, "x": {"type": "integer"}, "y": {"type": "integer"}, "no_fly": {"type": "boolean"}},
            },
        },
        "edges": {"type": "array", "items": _PAIR},
        "blocked": {"type": "array", "items": _PAIR},
        "objects": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "kind"],
                "additionalProperties": False,
                "properties": {
                    "id": _NAME,
                    "kind": {"enum": [ITEM, CONTAINER, SURFACE]},
                    "location": _NAME,
                    "open": {"type": "boolean"},
                    "on_surface": _NAME,
                    "in_container": _NAME,
                    "held_by": _NAME,
                    "basket": _NAME,
                    "spawn": {"type": "array", "items": _NAME},
                },
            },
        },
        "robots": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["id", "class", "location"],
                "additionalProperties": False,
                "properties": {
                    "id": _NAME,
                    "class": {"enum": [c.value for c in RobotClass]},
                    "location": _NAME,
                    "airborne": {"type": "boolean"},
                    "reach": {"type": "array", "items": _NAME},
                    "spawn": {"type": "array", "items": _NAME},
                },
            },
        },
        "sensing": {
            "type": "object",
            "additionalProperties": False,
            "properties": {c.value: {"type": ["number", "null"], "minimum": 0} for c in RobotClass},
        },
        "durations": {"type": "object", "additionalProperties": {"type": "integer", "minimum": 1}},
        "events": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["tick"],
                "properties": {
                    "tick": {"type": "integer", "minimum": 1},
                    "block": _PAIR,
                    "unblock": _PAIR,
                    "teleport": {
                        "type": "object",
                        "required": ["object", "to"],
                        "properties": {"object": _NAME, "to": _NAME},
                    },
                },
                "minProperties": 2,
                "maxProperties": 2,
            },
        },
    },
}


def _schema_check(doc: Any) -> None:
    validator = jsonschema.Draft202012Validator(SCENARIO_SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        raise SchemaError(e.message, e.absolute_path)


def scenario_from_dict(doc: Mapping[str, Any]) -> WorldState:
    """Build a world from a parsed scenario document (validated first)."""
    _schema_check(doc)
    locations = tuple(Location(l["id"], l["x"], l["y"], l.get("no_fly", False)) for l in doc["locations"])
    loc_ids = [l.id for l in locations]
    if len(set(loc_ids)) != len(loc_ids):
        raise SchemaError("duplicate location id", ("locations",))
    known_cells = set(loc_ids)

    def cell(ref: str, path) -> str:
        if ref not in known_cells:
            raise SchemaError(f"unknown location {ref!r}", path)
        return ref

    edges = frozenset(edge(cell(a, ("edges", i)), cell(b, ("edges", i))) for i, (a, b) in enumerate(doc.get("edges", [])))
    blocked = frozenset(edge(cell(a, ("blocked", i)), cell(b, ("blocked", i))) for i, (a, b) in enumerate(doc.get("blocked", [])))
    if not blocked <= edges:
        raise SchemaError("blocked edge is not an edge", ("blocked",))

    robots = []
    reach = {}
    robot_spawn = {}
    for i, r in enumerate(doc["robots"]):
        cls = RobotClass(r["class"])
        airborne = r.get("airborne", False)
        if airborne and cls is not RobotClass.DRONE:
            raise SchemaError("only drones can be airborne", ("robots", i, "airborne"))
        if "reach" in r and cls is not RobotClass.ARM:
            raise SchemaError("only arms have a reach set", ("robots", i, "reach"))
        if "spawn" in r and cls is RobotClass.ARM:
            raise SchemaError("arms are immobile", ("robots", i, "spawn"))
        robots.append(RobotState(r["id"], cls, cell(r["location"], ("robots", i, "location")), airborne=airborne))
        if cls is RobotClass.ARM:
            reach[r["id"]] = frozenset(cell(c, ("robots", i, "reach")) for c in r.get("reach", [r["location"]]))
        if "spawn" in r:
            robot_spawn[r["id"]] = tuple(cell(c, ("robots", i, "spawn")) for c in r["spawn"])
    robot_ids = {r.id for r in robots}

    objs = doc.get("objects", [])
    kinds = {o["id"]: o["kind"] for o in objs}
    all_ids = loc_ids + [o["id"] for o in objs] + [r.id for r in robots]
    if len(set(all_ids)) != len(all_ids):
        raise SchemaError("entity ids must be unique across locations, objects and robots", ())

    objects = []
    object_spawn = {}
    robots_by_id = {r.id: r for r in robots}
    for i, o in enumerate(objs):
        path = ("objects", i)
        kind = o["kind"]
        if kind != ITEM:
            if "location" not in o:
                raise SchemaError("fixed objects need a location", path)
            bad = {"on_surface", "in_container", "held_by", "basket", "spawn"} & o.keys()
            if bad:
                raise SchemaError(f"fixed objects cannot have {sorted(bad)}", path)
            if "open" in o and kind != CONTAINER:
                raise SchemaError("only containers open", path + ("open",))
            objects.append(
                ObjectState(o["id"], kind, cell(o["location"], path + ("location",)), open=o.get("open", False) if kind == CONTAINER else None)
            )
            continue
        places = [k for k in ("location", "on_surface", "in_container", "held_by", "basket") if k in o]
        if len(places) != 1:
            raise SchemaError("an item needs exactly one of location/on_surface/in_container/held_by/basket", path)
        k = places[0]
        ref = o[k]
        st = ObjectState(o["id"], ITEM)
        if k == "location":
            st = replace(st, location=cell(ref, path + (k,)))
        elif k == "on_surface":
            if kinds.get(ref) != SURFACE:
                raise SchemaError(f"{ref!r} is not a surface", path + (k,))
            st = replace(st, on_surface=ref)
        elif k == "in_container":
            if kinds.get(ref) != CONTAINER:
                raise SchemaError(f"{ref!r} is not a container", path + (k,))
            st = replace(st, in_container=ref)
        elif k == "held_by":
            rb = robots_by_id.get(ref)
            if rb is None or rb.cls is RobotClass.DRONE or rb.holding is not None:
                raise SchemaError(f"{ref!r} cannot hold {o['id']}", path + (k,))
            robots_by_id[ref] = replace(rb, holding=o["id"])
            st = replace(st, held_by=ref)
        else:
            rb = robots_by_id.get(ref)
            if rb is None or rb.cls is not RobotClass.DRONE or rb.basket is not None:
                raise SchemaError(f"{ref!r} has no free basket", path + (k,))
            robots_by_id[ref] = replace(rb, basket=o["id"])
            st = replace(st, in_basket=ref)
        objects.append(st)
        if "spawn" in o:
            for s in o["spawn"]:
                if s not in known_cells and kinds.get(s) not in (SURFACE, CONTAINER):
                    raise SchemaError(f"spawn target {s!r} is not a cell, surface or container", path + ("spawn",))
            object_spawn[o["id"]] = tuple(o["spawn"])

    for i, ev in enumerate(doc.get("events", [])):
        for key in ("block", "unblock"):
            if key in ev and edge(*ev[key]) not in edges:
                raise SchemaError("event edge is not an edge", ("events", i, key))
        if "teleport" in ev:
            t = ev["teleport"]
            if kinds.get(t["object"]) != ITEM or (t["to"] not in known_cells and t["to"] not in kinds):
                raise SchemaError("bad teleport", ("events", i, "teleport"))

    sensing = dict(doc.get("sensing", {}))
    layout = Layout(
        locations=locations,
        edges=edges,
        reach=reach,
        robot_spawn=robot_spawn,
        object_spawn=object_spawn,
        sensing=sensing,
        durations=dict(doc.get("durations", {})),
        events=tuple(dict(e) for e in doc.get("events", [])),
        name=doc.get("name", ""),
    )
    world = WorldState(layout, tuple(robots_by_id[r.id] for r in robots), tuple(objects), blocked)
    errs = check_invariants(world)
    if errs:
        raise SchemaError("; ".join(errs), ())
    _ = robot_ids
    return world


def load_scenario(source: str | Path | Mapping[str, Any]) -> WorldState:
    """Load a scenario from a YAML path, YAML text or an already parsed mapping."""
    if isinstance(source, Mapping):
        return scenario_from_dict(source)
    p = Path(source) if not isinstance(source, str) or "\n" not in source else None
    text = p.read_text() if p is not None else source
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        path = (f"line {mark.line + 1}",) if mark is not None else ()
        raise SchemaError(f"YAML syntax error: {exc}", path) from None
    if not isinstance(doc, Mapping):
        raise SchemaError("scenario must be a mapping", ())
    world = scenario_from_dict(doc)
    if p is not None and not world.layout.name:
        world = replace(world, layout=replace(world.layout, name=p.stem))
    return world


def scenario_to_dict(world: WorldState) -> dict[str, Any]:
    """Serialize the world (current state plus static layout) as a scenario document."""
    lay = world.layout
    doc: dict[str, Any] = {"format_version": FORMAT_VERSION}
    if lay.name:
        doc["name"] = lay.name
    doc["locations"] = [
        {"id": l.id, "x": l.x, "y": l.y, **({"no_fly": True} if l.no_fly else {})} for l in lay.locations
    ]
    doc["edges"] = [list(e) for e in sorted(lay.edges)]
    if world.blocked:
        doc["blocked"] = [list(e) for e in sorted(world.blocked)]
    objs = []
    for o in world.objects:
        d: dict[str, Any] = {"id": o.id, "kind": o.kind}
        if o.kind != ITEM:
            d["location"] = o.location
            if o.kind == CONTAINER:
                d["open"] = bool(o.open)
        elif o.location is not None:
            d["location"] = o.location
        elif o.on_surface is not None:
            d["on_surface"] = o.on_surface
        elif o.in_container is not None:
            d["in_container"] = o.in_container
        elif o.held_by is not None:
            d["held_by"] = o.held_by
        else:
            d["basket"] = o.in_basket
        if o.id in lay.object_spawn:
            d["spawn"] = list(lay.object_spawn[o.id])
        objs.append(d)
    doc["objects"] = objs
    robots = []
    for r in world.robots:
        d = {"id": r.id, "class": r.cls.value, "location": r.position}
        if r.airborne:
            d["airborne"] = True
        if r.id in lay.reach:
            d["reach"] = sorted(lay.reach[r.id])
        if r.id in lay.robot_spawn:
            d["spawn"] = list(lay.robot_spawn[r.id])
        robots.append(d)
    doc["robots"] = robots
    if lay.sensing:
        doc["sensing"] = dict(lay.sensing)
    if lay.durations:
        doc["durations"] = dict(lay.durations)
    if lay.events:
        doc["events"] = [dict(e) for e in lay.events]
    return doc


def dump_scenario(world: WorldState) -> str:
    return yaml.safe_dump(scenario_to_dict(world), sort_keys=False)


# ---------------------------------------------------------------------------
# randomization


def randomize_initial(world: WorldState, seed: int) -> WorldState:
    """Redraw spawnable robots and items with ``random.Random(seed)`` (Mersenne Twister).

    Only entities that declare a ``spawn`` list move; every choice is uniform
    over that list, drawn in declaration order.
    """
    rng = random.Random(seed)
    lay = world.layout
    for r in world.robots:
        choices = lay.robot_spawn.get(r.id)
        if choices:
            world = world.with_robot(replace(world.robot(r.id), position=rng.choice(choices)))
    for o in world.objects:
        choices = lay.object_spawn.get(o.id)
        if choices:
            world = place_item(world, o.id, rng.choice(choices))
    return replace(world, rng_seed=seed)


def spawn_variants(world: WorldState) -> Iterator[WorldState]:
    """Every start ``randomize_initial`` can produce, in a fixed order."""
    lay = world.layout
    movers = [("robot", r.id, lay.robot_spawn[r.id]) for r in world.robots if lay.robot_spawn.get(r.id)]
    movers += [("object", o.id, lay.object_spawn[o.id]) for o in world.objects if lay.object_spawn.get(o.id)]
    for combo in itertools.product(*(m[2] for m in movers)):
        w = world
        for (kind, eid, _), cell in zip(movers, combo):
            if kind == "robot":
                w = w.with_robot(replace(w.robot(eid), position=cell))
            else:
                w = place_item(w, eid, cell)
        yield w
