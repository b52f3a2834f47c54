"""Model-backed planning: prompt construction, a recording client, response parsing.

Responses follow a line grammar with one record per line and a closing
``END``.  Goal decompositions::

    GOAL 1 QuadObjectOnTarget?(quad1: bottle, counter)
    END

Help answers (``NONE`` instead of ``ROBOT`` means nobody can help)::

    ROBOT quad1
    ACTION 1 MoveToNoObject(quad1: bath)
    ACTION 2 Grab(quad1: bottle)
    UNTIL ArmObjectInRange?(arm1: bottle)
    END

``UNTIL`` lines are optional; they mark the answer as the first leg of a
longer team plan, finished once all of them hold.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import time
import urllib.request
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

from .errors import (
    CapabilityViolation,
    ConfigError,
    HetBTError,
    MalformedPredicate,
    ParseError,
    TranscriptMissing,
    UnknownEntityInResponse,
    UnknownPredicate,
)
from .capability_library import ActionInstance, Library, default_library, slot_domain
from .mcts import MCTSPlanner
from .planning import (
    AssignmentDecision,
    Mode,
    joint_propose,
    validate_decision,
)
from .world import (
    VOCABULARY,
    Observation,
    Predicate,
    RobotClass,
    WorldState,
    holds,
    label_class,
    merge_observations,
    parse_predicate,
)

MAX_RETRIES = 3
ENV_BASE_URL = "HETBT_LLM_BASE_URL"
ENV_MODEL = "HETBT_LLM_MODEL"
ENV_KEY = "HETBT_LLM_API_KEY"
ENV_TRANSCRIPTS = "HETBT_TRANSCRIPTS"
REFERENCE = "reference"
MODES = ("live", "record", "replay")

PREAMBLE = (
    "You coordinate a team of heterogeneous robots. Each robot runs a behavior "
    "tree built from condition and action nodes. Answer only in the response "
    "format given at the end; do not add commentary."
)

GOAL_FORMAT = """\
Respond with one line per goal condition, in execution order, numbered from 1:
GOAL <n> <Label>?(<robot>[: <arg>, <arg>])
then a final line:
END"""

HELP_FORMAT = """\
Respond with the robot that should act and its actions in order, numbered from 1:
ROBOT <robot>
ACTION <n> <Name>(<robot>[: <arg>, <arg>])
optionally followed by conditions that end this robot's part when the rest needs another robot:
UNTIL <Label>?(<robot>[: <arg>, <arg>])
then a final line:
END
If no robot can establish the condition, respond with the two lines NONE and END."""


# ---------------------------------------------------------------------------
# prompts


@dataclass(frozen=True)
class PromptBundle:
    preamble: str
    node_vocabulary: str
    context: str
    expected_schema: str

    def text(self) -> str:
        return "\n\n".join((self.preamble, self.node_vocabulary, self.context, self.expected_schema)) + "\n"

    def user_text(self) -> str:
        return "\n\n".join((self.node_vocabulary, self.context, self.expected_schema)) + "\n"

    @property
    def request_hash(self) -> str:
        return hashlib.sha256(self.text().encode("utf-8")).hexdigest()

    def with_feedback(self, error: str) -> "PromptBundle":
        note = f"Your previous answer was rejected: {error}\nAnswer again."
        return PromptBundle(self.preamble, self.node_vocabulary, self.context, self.expected_schema + "\n\n" + note)


@dataclass(frozen=True)
class Vocabulary:
    """Condition labels a goal may use, plus the entities it may name."""

    labels: tuple[str, ...]
    robots: tuple[tuple[str, RobotClass], ...]
    entities: tuple[str, ...]

    @classmethod
    def for_world(cls, world: WorldState, library: Library | None = None) -> "Vocabulary":
        lib = library or default_library()
        labels: list[str] = []
        classes = []
        for r in world.robots:
            if r.cls not in classes:
                classes.append(r.cls)
        for c in classes:
            for lab in lib.condition_labels(c):
                if lab not in labels:
                    labels.append(lab)
        entities = tuple(o.id for o in world.objects) + tuple(l.id for l in world.layout.locations)
        return cls(tuple(labels), tuple((r.id, r.cls) for r in world.robots), entities)

    def robot_class(self, rid: str) -> RobotClass | None:
        for r, c in self.robots:
            if r == rid:
                return c
        return None


def _signature(label: str) -> str:
    roles = VOCABULARY[label]
    args = {"agent": "", "subject": ": <object>", "target": ": <target>", "subject+target": ": <object>, <target>"}
    return f"{label}?(<robot>{args[roles]})"


def build_init_prompt(instruction: str, vocabulary: Vocabulary) -> PromptBundle:
    if not instruction.strip():
        raise ValueError("instruction must be non-empty")
    if not vocabulary.labels:
        raise ValueError("condition vocabulary must be non-empty")
    lines = ["Condition nodes:"]
    lines += [f"- {_signature(lab)}" for lab in vocabulary.labels]
    vocab = "\n".join(lines)
    ctx = [
        "Robots: " + ", ".join(f"{r} ({c.value})" for r, c in vocabulary.robots),
        "Entities: " + ", ".join(vocabulary.entities),
        f"Instruction: {instruction.strip()}",
        "Decompose the instruction into the condition nodes that must hold when it is done.",
        "Example, for 'pick up the cup' with robot quad1:",
        "GOAL 1 QuadObjectInGrab?(quad1: cup)",
        "END",
    ]
    return PromptBundle(PREAMBLE, vocab, "\n".join(ctx), GOAL_FORMAT)


def _render_template(t) -> str:
    pre = ", ".join(str(s) for s in t.pre) or "-"
    post = ", ".join(str(s) for s in t.post) or "-"
    params = ", ".join(t.params)
    return f"- {t.name}({params}) pre: {pre} post: {post}"


def render_world(world: WorldState) -> list[str]:
    out = []
    for r in world.robots:
        bits = [f"robot {r.id} {r.cls.value} at {r.position}"]
        if r.holding:
            bits.append(f"holding {r.holding}")
        if r.cls is RobotClass.DRONE:
            bits.append("airborne" if r.airborne else "landed")
            if r.basket:
                bits.append(f"basket {r.basket}")
        out.append(" ".join(bits))
    for o in world.objects:
        bits = [f"object {o.id} {o.kind}"]
        if o.location is not None:
            bits.append(f"at {o.location}")
        if o.open is not None:
            bits.append("open" if o.open else "closed")
        for rel in ("held_by", "in_container", "on_surface", "in_basket"):
            v = getattr(o, rel)
            if v is not None:
                bits.append(f"{rel.replace('_', ' ')} {v}")
        out.append(" ".join(bits))
    return out


def build_help_prompt(
    failure,
    library: Library | None,
    observations: Mapping[str, Observation],
) -> PromptBundle:
    """Failed condition, the actions that could produce it, and what the team sees."""
    lib = library or default_library()
    robots: list[tuple[str, RobotClass]] = []
    for ob in observations.values():
        for r in ob.world.robots:
            if r.id == ob.robot:
                robots.append((r.id, r.cls))
    cat = ["Action catalogs:"]
    seen = []
    for rid, cls in robots:
        cat.append(f"{rid} ({cls.value}):")
        cat += ["  " + _render_template(t) for t in lib.templates(cls)]
        if cls not in seen:
            seen.append(cls)
    goal = failure.predicate
    ctx = [f"Failed condition: {goal} reported by {failure.robot}"]
    producers = [t for c in seen for t in lib.templates(c) if any(s.label == goal.label for s in t.post)]
    ctx.append("Actions whose postconditions include it:")
    ctx += [_render_template(t) for t in producers] or ["- none"]
    for rid, _ in robots:
        ctx.append(f"Observation of {rid}:")
        ctx += ["  " + line for line in render_world(observations[rid].world)]
    return PromptBundle(PREAMBLE, "\n".join(cat), "\n".join(ctx), HELP_FORMAT)


# ---------------------------------------------------------------------------
# parsing

_LINE = re.compile(r"^(GOAL|ACTION)\s+(\d+)\s+(.+?)\s*$")
_ACTION = re.compile(r"^([A-Za-z]+)\(([A-Za-z0-9_]+)(?::\s*(.*))?\)$")


def _lines(response: str) -> list[str]:
    lines = [ln.strip() for ln in response.strip().splitlines()]
    lines = [ln for ln in lines if ln]
    if not lines or lines[-1] != "END":
        raise ParseError("response must end with END", response[-40:])
    if "END" in lines[:-1]:
        raise ParseError("text after END", "END")
    return lines[:-1]


def _predicate(text: str, vocabulary: Vocabulary) -> Predicate:
    if text.startswith("not "):
        raise ParseError("negated conditions are not allowed", text)
    head = text.split("?(", 1)[0]
    if head not in VOCABULARY or head not in vocabulary.labels:
        raise UnknownPredicate("condition not in the vocabulary", head)
    try:
        p = parse_predicate(text)
    except MalformedPredicate:
        raise ParseError("malformed condition", text) from None
    cls = vocabulary.robot_class(p.agent)
    if cls is None:
        raise UnknownEntityInResponse("unknown robot", p.agent)
    if label_class(p.label) is not cls:
        raise UnknownPredicate(f"{p.label} does not belong to a {cls.value}", text)
    for e in (p.subject, p.target):
        if e is not None and e not in vocabulary.entities and vocabulary.robot_class(e) is None:
            raise UnknownEntityInResponse("unknown entity", e)
    return p


def parse_goal_conditions(response: str, vocabulary: Vocabulary) -> list[Predicate]:
    goals: list[Predicate] = []
    for i, ln in enumerate(_lines(response), start=1):
        m = _LINE.match(ln)
        if not m or m.group(1) != "GOAL":
            raise ParseError("expected GOAL <n> <condition>", ln)
        if int(m.group(2)) != i:
            raise ParseError(f"goal numbered {m.group(2)}, expected {i}", ln)
        p = _predicate(m.group(3), vocabulary)
        if p in goals:
            raise ParseError("duplicate goal", ln)
        goals.append(p)
    if not goals:
        raise ParseError("no goals", response)
    return goals


def _action(text: str, robot: str, world: WorldState, library: Library) -> ActionInstance:
    m = _ACTION.match(text)
    if not m:
        raise ParseError("malformed action", text)
    name, rid, args = m.group(1), m.group(2), m.group(3)
    if rid != robot:
        raise CapabilityViolation(f"action bound to {rid}, not the chosen robot {robot}", text)
    cls = world.robot(robot).cls
    try:
        t = library.template(cls, name)
    except KeyError:
        raise CapabilityViolation(f"{name} is not in the {cls.value} registry", text) from None
    vals = [a.strip() for a in args.split(",")] if args and args.strip() else []
    if len(vals) != len(t.params):
        raise ParseError(f"{name} takes {len(t.params)} argument(s)", text)
    known = {o.id for o in world.objects} | {l.id for l in world.layout.locations} | {r.id for r in world.robots}
    for slot, v in zip(t.params, vals):
        if v not in known:
            raise UnknownEntityInResponse("unknown entity", v)
        if v not in slot_domain(world, t, slot) or v == robot:
            raise ParseError(f"{v} cannot fill {slot} of {name}", text)
    if len(set(vals)) < len(vals):
        raise ParseError("repeated argument", text)
    return ActionInstance(t, robot, tuple(zip(t.params, vals)))


def parse_assignment(
    response: str,
    failure,
    world: WorldState,
    library: Library | None = None,
) -> AssignmentDecision | None:
    """Parse and fully validate a help answer; ``None`` when the answer is NONE.

    ``world`` is the allocator's view the answer is checked against.
    """
    lib = library or default_library()
    lines = _lines(response)
    if lines == ["NONE"]:
        return None
    if not lines or not lines[0].startswith("ROBOT "):
        raise ParseError("expected ROBOT <id> first", lines[0] if lines else response)
    robot = lines[0][6:].strip()
    if robot not in {r.id for r in world.robots}:
        raise UnknownEntityInResponse("unknown robot", robot)
    actions: list[ActionInstance] = []
    until: list[Predicate] = []
    vocab = Vocabulary.for_world(world, lib)
    for ln in lines[1:]:
        if ln.startswith("UNTIL "):
            p = _predicate(ln[6:].strip(), vocab)
            if p not in until:
                until.append(p)
            continue
        if until:
            raise ParseError("ACTION after UNTIL", ln)
        m = _LINE.match(ln)
        if not m or m.group(1) != "ACTION":
            raise ParseError("expected ACTION <n> <action>", ln)
        if int(m.group(2)) != len(actions) + 1:
            raise ParseError(f"action numbered {m.group(2)}, expected {len(actions) + 1}", ln)
        actions.append(_action(m.group(3), robot, world, lib))
    if not actions:
        raise ParseError("no actions", response)
    mode = Mode.LOCAL if robot == failure.robot else Mode.DELEGATED
    decision = AssignmentDecision(robot, tuple(actions), mode, "model", failure.predicate, world, tuple(until))
    if decision.partial and all(holds(world, p) for p in until):
        raise ParseError("UNTIL conditions already hold", "UNTIL")
    try:
        validate_decision(decision, failure, world, lib)
    except HetBTError as exc:
        raise ParseError(str(exc), "ACTION") from None
    return decision


def render_goals(goals: Sequence[Predicate]) -> str:
    return "".join(f"GOAL {i} {g}\n" for i, g in enumerate(goals, start=1)) + "END\n"


def render_assignment(decision: AssignmentDecision | None) -> str:
    if decision is None:
        return "NONE\nEND\n"
    lines = [f"ROBOT {decision.chosen_robot}"]
    lines += [f"ACTION {i} {a}" for i, a in enumerate(decision.actions, start=1)]
    lines += [f"UNTIL {p}" for p in decision.until]
    return "\n".join(lines) + "\nEND\n"


# ---------------------------------------------------------------------------
# transcripts and the client


@dataclass(frozen=True)
class ModelTranscript:
    request_hash: str
    prompt: str
    response: str
    parse_outcome: str
    timestamp: str

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=1, sort_keys=True) + "\n"


class TranscriptStore:
    """A directory of ``<sha256>.json`` files, written once and never changed."""

    def __init__(self, root: str | Path):
        self.root = Path(root)

    def path(self, request_hash: str) -> Path:
        return self.root / f"{request_hash}.json"

    def get(self, request_hash: str) -> ModelTranscript | None:
        p = self.path(request_hash)
        if not p.exists():
            return None
        return ModelTranscript(**json.loads(p.read_text()))

    def put(self, t: ModelTranscript) -> None:
        p = self.path(t.request_hash)
        if p.exists():
            return
        self.root.mkdir(parents=True, exist_ok=True)
        tmp = p.with_suffix(".tmp")
        tmp.write_text(t.to_json())
        tmp.replace(p)

    def __len__(self):
        return len(list(self.root.glob("*.json"))) if self.root.exists() else 0


def default_transcript_dir() -> Path:
    env = os.environ.get(ENV_TRANSCRIPTS)
    if env:
        return Path(env)
    from importlib import resources

    return Path(str(resources.files("hetbt") / "data" / "transcripts"))


Endpoint = Callable[[PromptBundle, Any], str]


class HttpEndpoint:
    """Chat-completion style endpoint, temperature 0."""

    def __init__(self, base_url: str, model: str, key: str | None = None, timeout: float = 60.0):
        self.url = base_url.rstrip("/") + "/chat/completions"
        self.model = model
        self.key = key
        self.timeout = timeout

    def __call__(self, bundle: PromptBundle, hint: Any = None) -> str:
        body = {
            "model": self.model,
            "temperature": 0,
            "messages": [
                {"role": "system", "content": bundle.preamble},
                {"role": "user", "content": bundle.user_text()},
            ],
        }
        req = urllib.request.Request(self.url, data=json.dumps(body).encode(), method="POST")
        req.add_header("Content-Type", "application/json")
        if self.key:
            req.add_header("Authorization", f"Bearer {self.key}")
        with urllib.request.urlopen(req, timeout=self.timeout) as resp:
            doc = json.loads(resp.read())
        return doc["choices"][0]["message"]["content"]


@dataclass(frozen=True)
class InitHint:
    goals: tuple[Predicate, ...]


@dataclass(frozen=True)
class HelpHint:
    failure: Any
    observations: Mapping[str, Observation]
    world: WorldState
    pending: Mapping[str, int]
    library: Library


def reference_responder(bundle: PromptBundle, hint: Any) -> str:
    """Stand-in model: answers from ground truth and the search planner.

    Only usable when recording, where the caller passes the structured
    request alongside the prompt text.
    """
    if isinstance(hint, InitHint):
        return render_goals(hint.goals)
    if isinstance(hint, HelpHint):
        d = joint_propose(hint.failure, hint.observations, hint.world, hint.library, hint.pending)
        return render_assignment(d)
    raise ConfigError("the reference responder needs the structured request")


def endpoint_from_env(env: Mapping[str, str] | None = None) -> Endpoint:
    env = os.environ if env is None else env
    base = env.get(ENV_BASE_URL)
    if not base:
        raise ConfigError(f"set {ENV_BASE_URL} (or '{REFERENCE}') to query a model")
    if base == REFERENCE:
        return reference_responder
    model = env.get(ENV_MODEL)
    if not model:
        raise ConfigError(f"set {ENV_MODEL}")
    return HttpEndpoint(base, model, env.get(ENV_KEY))


class ModelClient:
    """Sends prompts in one of three modes.

    ``replay`` answers only from the store and never opens a connection;
    ``record`` answers from the store when it can and stores what it fetches;
    ``live`` always asks the endpoint and stores nothing.
    """

    def __init__(self, mode: str = "replay", store: TranscriptStore | None = None, endpoint: Endpoint | None = None):
        if mode not in MODES:
            raise ConfigError(f"llm mode must be one of {MODES}, got {mode!r}")
        self.mode = mode
        self.store = store if store is not None else TranscriptStore(default_transcript_dir())
        self._endpoint = endpoint
        self.requests = 0  # endpoint calls

    @property
    def endpoint(self) -> Endpoint:
        if self._endpoint is None:
            self._endpoint = endpoint_from_env()
        return self._endpoint

    def complete(self, bundle: PromptBundle, hint: Any = None) -> str:
        key = bundle.request_hash
        if self.mode != "live":
            t = self.store.get(key)
            if t is not None:
                return t.response
            if self.mode == "replay":
                raise TranscriptMissing(f"no transcript for request {key}")
        self.requests += 1
        response = self.endpoint(bundle, hint)
        if self.mode == "record":
            stamp = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
            self.store.put(ModelTranscript(key, bundle.text(), response, "unparsed", stamp))
        return response


# ---------------------------------------------------------------------------
# planners


def ask_goals(client: ModelClient, instruction: str, world: WorldState, goals_hint=(), library=None) -> list[Predicate]:
    """Goal conditions for an instruction, retried on bad answers.

    Raises the last parse error when every attempt fails; callers fall back
    to the authored goals.
    """
    vocab = Vocabulary.for_world(world, library)
    bundle = build_init_prompt(instruction, vocab)
    hint = InitHint(tuple(goals_hint))
    err: HetBTError | None = None
    for _ in range(1 + MAX_RETRIES):
        try:
            return parse_goal_conditions(client.complete(bundle, hint), vocab)
        except ParseError as exc:
            err = exc
            bundle = bundle.with_feedback(str(exc))
    raise err


class LLMPlanner:
    """Asks the model who should help; falls back to the search planner."""

    name = "llm"

    def __init__(self, client: ModelClient, library: Library | None = None):
        self.client = client
        self.library = library or default_library()
        self.fallbacks = 0

    def ask(self, failure, observations, world, pending):
        """Returns (decision, answered); ``answered`` is False after all retries fail."""
        view = merge_observations(world, [observations[k] for k in observations])
        bundle = build_help_prompt(failure, self.library, observations)
        hint = HelpHint(failure, observations, world, pending, self.library)
        for _ in range(1 + MAX_RETRIES):
            try:
                text = self.client.complete(bundle, hint)
                return parse_assignment(text, failure, view, self.library), True
            except ParseError as exc:
                bundle = bundle.with_feedback(str(exc))
        return None, False

    def propose(self, failure, observations, world, pending):
        decision, answered = self.ask(failure, observations, world, pending)
        if answered:
            return decision
        self.fallbacks += 1
        d = joint_propose(failure, observations, world, self.library, pending)
        return None if d is None else _tag_fallback(d)


def _tag_fallback(d: AssignmentDecision) -> AssignmentDecision:
    return replace(d, fallback=True)


class LLMMCTSPlanner(MCTSPlanner):
    """Tree search whose rollouts lean on the model's suggested actions."""

    name = "llm-mcts"

    def __init__(self, client: ModelClient, seed: int = 0, library: Library | None = None, **kw):
        super().__init__(seed=seed, library=library, **kw)
        self.llm = LLMPlanner(client, self.library)

    def prior(self, failure, observations, world, pending):
        decision, _ = self.llm.ask(failure, observations, world, pending)
        return None if decision is None else list(decision.actions)
