"""Exception types shared across the package."""

from __future__ import annotations


class DxChainError(Exception):
    """Base class for all package errors."""


class CaseValidationError(DxChainError):
    """A case record violated one or more invariants.

    Carries every violation found, not just the first, so callers can
    report them all at once.
    """

    def __init__(self, violations: list[str], record_index: int | None = None):
        self.violations = list(violations)
        self.record_index = record_index
        where = f" (record {record_index})" if record_index is not None else ""
        super().__init__(f"invalid case{where}: " + "; ".join(self.violations))


class DuplicateCaseIdError(DxChainError):
    def __init__(self, case_id: str):
        self.case_id = case_id
        super().__init__(f"duplicate case_id: {case_id!r}")


class DatasetFormatError(DxChainError):
    """The case file could not be parsed in the requested format."""


class GatewayError(DxChainError):
    """Base class for model-gateway failures."""


class TransportError(GatewayError):
    """Remote call failed after exhausting the retry budget."""

    def __init__(self, message: str, attempts: int):
        self.attempts = attempts
        super().__init__(f"{message} (after {attempts} attempts)")


class ScriptedMissError(GatewayError):
    """A strict scripted fixture has no entry for the requested key."""

    def __init__(self, node_tag: str, turn_index: int):
        self.node_tag = node_tag
        self.turn_index = turn_index
        super().__init__(f"no scripted response for ({node_tag!r}, {turn_index})")


class SchemaViolationError(GatewayError):
    """Structured output still violated its schema after all repairs."""

    def __init__(self, schema_id: str, violations: list[str]):
        self.schema_id = schema_id
        self.violations = list(violations)
        super().__init__(
            f"output for schema {schema_id!r} invalid after repairs: "
            + "; ".join(self.violations)
        )


class PlanningError(DxChainError):
    """The planner could not produce a usable strategy set."""


class RetrievalError(DxChainError):
    """The case index could not be built or queried."""


class SessionStepError(DxChainError):
    """step() was called on a session that already finished."""


class AdjudicationError(DxChainError):
    """Judge or debate output could not be reconciled with the draft."""


class TraceError(DxChainError):
    """Base class for trace persistence problems."""


class TraceVersionError(TraceError):
    def __init__(self, found: object, expected: int):
        self.found = found
        self.expected = expected
        super().__init__(f"trace schema version {found!r} is not supported (expected {expected})")


class TraceParseError(TraceError):
    def __init__(self, path: str, line_no: int, reason: str):
        self.path = path
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: {reason}")


class MissingReferenceError(DxChainError):
    def __init__(self, case_id: str):
        self.case_id = case_id
        super().__init__(f"no reference diagnoses for case_id {case_id!r}")
