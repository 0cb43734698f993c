"""Exception hierarchy. Each family maps to a CLI exit code."""

from __future__ import annotations


class InterlensError(Exception):
    exit_code = 1


class ConfigError(InterlensError, ValueError):
    exit_code = 2


class KnowledgeBaseError(ConfigError):
    """Invalid rule set: unknown predicate field, duplicate id, bad param reference."""


class InputError(InterlensError):
    exit_code = 3


class ParseError(InputError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ValidationError(InputError, ValueError):
    def __init__(self, message: str, event_id: str | None = None):
        self.event_id = event_id
        if event_id is not None:
            message = f"event {event_id!r}: {message}"
        super().__init__(message)


class ConsistencyError(InputError):
    pass


class ManifestError(InputError):
    pass


class BackendError(InterlensError):
    exit_code = 4


class RetriableBackendError(BackendError):
    pass


class FixtureMissError(BackendError, KeyError):
    def __init__(self, request_key: str, where: str = ""):
        self.request_key = request_key
        super().__init__(f"no replay fixture for request {request_key}" + (f" in {where}" if where else ""))

    def __str__(self) -> str:
        return self.args[0]


class JudgmentError(BackendError):
    pass


class AlignmentError(BackendError):
    def __init__(self, message: str, event_id: str):
        self.event_id = event_id
        super().__init__(f"event {event_id!r}: {message}")
