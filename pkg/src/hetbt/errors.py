"""Exception types raised across the package."""


class HetBTError(Exception):
    """Base class for all package errors."""


# behavior trees
class MalformedTree(HetBTError):
    pass


class EmptyGoal(HetBTError):
    pass


class EmptyActions(HetBTError):
    pass


class GoalNotAchieved(HetBTError):
    pass


class NodeNotFound(HetBTError):
    pass


class TargetNotLeaf(HetBTError):
    pass


# world
class MalformedPredicate(HetBTError):
    pass


class UnknownEntity(HetBTError):
    def __init__(self, entity, context=""):
        self.entity = entity
        super().__init__(f"unknown entity {entity!r}" + (f" ({context})" if context else ""))


class PreconditionViolated(HetBTError):
    def __init__(self, predicate, action=None):
        self.predicate = predicate
        self.action = action
        where = f" for {action}" if action is not None else ""
        super().__init__(f"precondition {predicate} violated{where}")


class SchemaError(HetBTError):
    def __init__(self, message, path=()):
        self.path = tuple(path)
        loc = "/".join(str(p) for p in self.path) or "<root>"
        super().__init__(f"{loc}: {message}")


# capability library
class ClassMismatch(HetBTError):
    pass


class IncompleteBinding(HetBTError):
    pass


# planning / coordination
class PlannerContractViolation(HetBTError):
    pass


# model bridge
class ParseError(HetBTError):
    def __init__(self, message, span=None):
        self.span = span
        super().__init__(message if span is None else f"{message}: {span!r}")


class UnknownPredicate(ParseError):
    pass


class UnknownEntityInResponse(ParseError):
    pass


class CapabilityViolation(ParseError):
    pass


class TranscriptMissing(HetBTError):
    pass


# harness
class ConfigError(HetBTError):
    pass


class EmptyOutcomes(HetBTError):
    pass
