"""Exception hierarchy shared by all orbitlab modules."""

from __future__ import annotations


class OrbitlabError(Exception):
    """Base class for every error raised by orbitlab."""


class ExprSyntaxError(OrbitlabError):
    def __init__(self, message: str, offset: int, text: str = ""):
        self.offset = offset
        self.text = text
        super().__init__(f"{message} at byte offset {offset}")


class UnknownIdentifierError(ExprSyntaxError):
    pass


class VariableIndexError(OrbitlabError):
    """A component references x_i with i larger than the family dimension."""


class EvaluationError(OrbitlabError):
    def __init__(self, message: str, field: int | None = None, component: int | None = None):
        self.field = field
        self.component = component
        where = ""
        if field is not None:
            where = f" (field Y{field + 1}"
            where += f", component {component + 1})" if component is not None else ")"
        super().__init__(message + where)


class DivergenceError(OrbitlabError):
    """Integrated state left the guard ball."""


class DegenerateBasisError(OrbitlabError):
    pass


class DegeneratePointError(OrbitlabError):
    """The frame has rank zero at the requested point."""


class ShrinkRadiusError(OrbitlabError):
    """The coordinate block degenerates inside the requested chart radius."""


class PreconditionError(OrbitlabError):
    pass


class ScenarioError(OrbitlabError):
    def __init__(self, message: str, pointer: str = ""):
        self.pointer = pointer
        super().__init__(f"{pointer or '/'}: {message}")


class IllConditionedWarning(RuntimeWarning):
    """The regularized least-norm iteration did not settle on the delta ladder."""

    def __init__(self, message: str, last_iterates=()):
        self.last_iterates = tuple(last_iterates)
        super().__init__(message)
