"""Robot action libraries: templates with pre/postcondition schemas, grounding, lookup."""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping

import yaml

from .errors import ClassMismatch, HetBTError, IncompleteBinding, SchemaError
from .world import (
    AGENT,
    CONTAINER,
    ITEM,
    PAIR,
    PREFIX,
    SUBJECT,
    SURFACE,
    TARGET,
    VOCABULARY,
    Predicate,
    RobotClass,
    RobotState,
    WorldState,
    base_label,
    label_class,
)

# sha256 of data/library.yaml; guards silent drift of the canonical tables
LIBRARY_SHA256 = "c0478f424e309114d4925404a59db79054bc195f9cf5aa87d13c54df2ce02b7e"

EXPECTED_ACTIONS = {RobotClass.ARM: 5, RobotClass.QUADRUPED: 7, RobotClass.DRONE: 6}
EXPECTED_CONDITIONS = {RobotClass.ARM: 6, RobotClass.QUADRUPED: 8, RobotClass.DRONE: 7}

VERBATIM, CORRECTED = "verbatim", "corrected"


class LibraryDrift(HetBTError):
    pass


@dataclass(frozen=True)
class Schema:
    """A predicate pattern: label plus the template slots filling its arguments."""

    label: str
    slots: tuple[str, ...] = ()

    def bind(self, agent: str, bindings: Mapping[str, str]) -> Predicate:
        try:
            args = [bindings[s] for s in self.slots]
        except KeyError as exc:
            raise IncompleteBinding(f"slot {exc.args[0]!r} unbound for {self.label}") from None
        roles = VOCABULARY[self.label]
        if roles == SUBJECT:
            return Predicate(self.label, agent, subject=args[0])
        if roles == TARGET:
            return Predicate(self.label, agent, target=args[0])
        if roles == PAIR:
            return Predicate(self.label, agent, subject=args[0], target=args[1])
        return Predicate(self.label, agent)

    def __str__(self):
        return f"{self.label}({', '.join(self.slots)})"


@dataclass(frozen=True)
class ActionTemplate:
    name: str
    robot_class: RobotClass
    params: tuple[str, ...]
    pre: tuple[Schema, ...]
    post: tuple[Schema, ...]
    duration_ticks: int = 1

    def __str__(self):
        return f"{self.robot_class.value}.{self.name}({', '.join(self.params)})"


@dataclass(frozen=True)
class ActionInstance:
    template: ActionTemplate
    robot: str
    bindings: tuple[tuple[str, str], ...]

    @property
    def name(self) -> str:
        return self.template.name

    def get(self, slot: str) -> str | None:
        for k, v in self.bindings:
            if k == slot:
                return v
        return None

    @cached_property
    def pre(self) -> tuple[Predicate, ...]:
        b = dict(self.bindings)
        return tuple(s.bind(self.robot, b) for s in self.template.pre)

    @cached_property
    def post(self) -> tuple[Predicate, ...]:
        b = dict(self.bindings)
        return tuple(s.bind(self.robot, b) for s in self.template.post)

    def __str__(self):
        args = ", ".join(v for _, v in self.bindings)
        return f"{self.name}({self.robot}{': ' + args if args else ''})"

    def __reduce__(self):
        # cached_property values live in __dict__; keep pickles small and stable
        return (ActionInstance, (self.template, self.robot, self.bindings))


_SCHEMA_RE = re.compile(r"^\s*([A-Za-z]+)\(\s*([a-z_,\s]*)\)\s*$")


def _parse_schema(text: str, aliases: Mapping[str, str], params: Iterable[str], path) -> Schema:
    m = _SCHEMA_RE.match(text)
    if not m:
        raise SchemaError(f"bad condition schema {text!r}", path)
    label = aliases.get(m.group(1), m.group(1))
    if label not in VOCABULARY:
        raise SchemaError(f"label {label!r} not in the condition vocabulary", path)
    slots = tuple(s.strip() for s in m.group(2).split(",") if s.strip())
    roles = VOCABULARY[label]
    want = {AGENT: 0, SUBJECT: 1, TARGET: 1, PAIR: 2}[roles]
    if len(slots) != want:
        raise SchemaError(f"{label} takes {want} slot(s), got {slots}", path)
    unknown = set(slots) - set(params)
    if unknown:
        raise SchemaError(f"{text!r} uses undeclared slot(s) {sorted(unknown)}", path)
    return Schema(label, slots)


def _dedupe(seq):
    out = []
    for s in seq:
        if s not in out:
            out.append(s)
    return tuple(out)


@dataclass(frozen=True, eq=False)
class Library:
    registries: Mapping[RobotClass, tuple[ActionTemplate, ...]]
    semantics: str = CORRECTED
    raw_rows: Mapping[RobotClass, tuple[tuple[str, tuple[str, ...], tuple[str, ...]], ...]] = field(default_factory=dict)
    checksum: str = ""

    def templates(self, cls: RobotClass) -> tuple[ActionTemplate, ...]:
        return self.registries[RobotClass(cls)]

    def template(self, cls: RobotClass, name: str) -> ActionTemplate:
        for t in self.templates(cls):
            if t.name == name:
                return t
        raise KeyError(f"{cls.value} has no action {name!r}")

    def condition_labels(self, cls: RobotClass) -> list[str]:
        """Distinct condition labels used by the class's Pre/Post sets."""
        labels = []
        for t in self.templates(cls):
            for s in t.pre + t.post:
                if s.label not in labels:
                    labels.append(s.label)
        return labels

    def condition_node_types(self, cls: RobotClass) -> list[str]:
        """Condition node types: labels with the open/closed polarity and the
        carrying variant (NoObject/WithObject) folded into one parametrised node."""
        kinds = []
        for label in self.condition_labels(cls):
            k = base_label(label).replace("NoObject", "").replace("WithObject", "")
            k = "ContainOpen" if k == "ContainClose" else k
            if k not in kinds:
                kinds.append(k)
        return kinds


def _library_path() -> Path:
    return Path(str(resources.files("hetbt") / "data" / "library.yaml"))


def file_checksum(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def load_library(path: str | Path | None = None, semantics: str = CORRECTED, verify: bool = True) -> Library:
    """Load an action library file.

    The canonical file is checksum-verified and its per-class action counts
    are asserted; mutated copies may be loaded with ``verify=False``.
    """
    canonical = path is None
    p = _library_path() if canonical else Path(path)
    digest = file_checksum(p)
    if canonical and verify and LIBRARY_SHA256 != "__FILL__" and digest != LIBRARY_SHA256:
        raise LibraryDrift(f"canonical library checksum changed: {digest}")
    doc = yaml.safe_load(p.read_text())
    if semantics not in (VERBATIM, CORRECTED):
        raise ValueError(f"semantics must be {VERBATIM!r} or {CORRECTED!r}")
    if not isinstance(doc, Mapping) or doc.get("format_version") != 1:
        raise SchemaError("library format_version must be 1", ("format_version",))
    aliases = dict(doc.get("aliases", {}))
    corrections = doc.get("corrections", {}) if semantics == CORRECTED else {}
    registries = {}
    raw = {}
    for cls_name, rows in doc.get("classes", {}).items():
        cls = RobotClass(cls_name)
        fixes = corrections.get(cls_name, {})
        out = []
        raw_rows = []
        for i, row in enumerate(rows):
            path_ = ("classes", cls_name, i)
            params = tuple(row.get("params", []))
            raw_rows.append((row["name"], tuple(row["pre"]), tuple(row["post"])))
            pre = [_parse_schema(s, aliases, params, path_ + ("pre",)) for s in row["pre"]]
            post = [_parse_schema(s, aliases, params, path_ + ("post",)) for s in row["post"]]
            fix = fixes.get(row["name"], {})
            if "pre" in fix:
                pre = [_parse_schema(s, aliases, params, path_ + ("corrections",)) for s in fix["pre"]]
            if "post" in fix:
                post = [_parse_schema(s, aliases, params, path_ + ("corrections",)) for s in fix["post"]]
            pre += [_parse_schema(s, aliases, params, path_ + ("corrections",)) for s in fix.get("pre_add", [])]
            for s in pre + post:
                if label_class(s.label) is not cls:
                    raise SchemaError(f"{s.label} does not belong to {cls.value}", path_)
            out.append(
                ActionTemplate(row["name"], cls, params, _dedupe(pre), _dedupe(post), int(row.get("duration_ticks", 1)))
            )
        registries[cls] = tuple(out)
        raw[cls] = tuple(raw_rows)
    lib = Library(registries, semantics, raw, digest)
    if canonical and verify:
        for cls, n in EXPECTED_ACTIONS.items():
            got = len(lib.templates(cls))
            if got != n:
                raise LibraryDrift(f"{cls.value} library has {got} actions, expected {n}")
    return lib


@lru_cache(maxsize=None)
def default_library(semantics: str = CORRECTED) -> Library:
    return load_library(semantics=semantics)


def registry_for(robot_class: RobotClass | str, library: Library | None = None) -> list[ActionTemplate]:
    lib = library or default_library()
    return list(lib.templates(RobotClass(robot_class)))


def ground(template: ActionTemplate, robot: RobotState, bindings: Mapping[str, str]) -> ActionInstance:
    if robot.cls is not template.robot_class:
        raise ClassMismatch(f"{robot.id} is a {robot.cls.value}; {template} needs {template.robot_class.value}")
    missing = [p for p in template.params if p not in bindings]
    if missing:
        raise IncompleteBinding(f"{template} missing {missing}")
    return ActionInstance(template, robot.id, tuple((p, bindings[p]) for p in template.params))


def capability_check(goal: Predicate, robot_class: RobotClass | str, library: Library | None = None) -> list[ActionTemplate]:
    """Templates of ``robot_class`` whose Post schema can produce ``goal``."""
    cls = RobotClass(robot_class)
    if not goal.desired or label_class(goal.label) is not cls:
        return []
    return [t for t in registry_for(cls, library) if any(s.label == goal.label for s in t.post)]


def unify_post(template: ActionTemplate, goal: Predicate) -> list[dict[str, str]]:
    """Partial bindings under which one of the template's Post schemas equals ``goal``."""
    out = []
    for s in template.post:
        if s.label != goal.label:
            continue
        b: dict[str, str] = {}
        ok = True
        for slot, val in zip(s.slots, goal.args):
            if b.get(slot, val) != val:
                ok = False
            b[slot] = val
        if ok and b not in out:
            out.append(b)
    return out


def slot_domain(world: WorldState, template: ActionTemplate, slot: str) -> list[str]:
    if slot == "object":
        return [o.id for o in world.objects if o.kind == ITEM]
    if slot == "container":
        doms = [o.id for o in world.objects if o.kind == CONTAINER]
        if template.name == "PutInto":
            doms += [r.id for r in world.robots if r.cls is RobotClass.DRONE]
        return doms
    if slot == "surface":
        return [o.id for o in world.objects if o.kind == SURFACE]
    if slot == "target":
        # a move target is a cell or anything standing in one
        return [l.id for l in world.layout.locations] + [o.id for o in world.objects]
    raise SchemaError(f"unknown slot {slot!r}", ())


def groundings(world: WorldState, robot_id: str, library: Library | None = None) -> list[ActionInstance]:
    """All ActionInstances for one robot over the world's entities (deterministic order)."""
    lib = library or default_library()
    r = world.robot(robot_id)
    out = []
    for t in lib.templates(r.cls):
        combos: list[dict[str, str]] = [{}]
        for slot in t.params:
            dom = slot_domain(world, t, slot)
            combos = [dict(c, **{slot: v}) for c in combos for v in dom]
        for c in combos:
            if len(set(c.values())) < len(c) or r.id in c.values():
                continue
            out.append(ActionInstance(t, r.id, tuple((p, c[p]) for p in t.params)))
    return out


def class_prefix(cls: RobotClass) -> str:
    return PREFIX[cls]
