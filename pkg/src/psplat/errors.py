"""Exception hierarchy. Each error carries the CLI exit code it maps to."""

from __future__ import annotations


class PsplatError(Exception):
    exit_code = 1


class PipelineError(PsplatError):
    """A stage ran but its inputs cannot produce a result."""

    exit_code = 1


class MissingArtifactError(PsplatError):
    exit_code = 2

    def __init__(self, path, what: str = "artifact"):
        self.path = str(path)
        super().__init__(f"missing {what}: {self.path}")


class MalformedFileError(PsplatError):
    exit_code = 3

    def __init__(self, path, offset: int, reason: str):
        self.path = str(path)
        self.offset = int(offset)
        self.reason = reason
        super().__init__(f"{self.path}: malformed at byte {self.offset}: {reason}")


class ConfigError(PsplatError):
    """Parameter out of range or inconsistent inputs (dimension mismatch etc.)."""

    exit_code = 4


class StaleArtifactError(PsplatError):
    exit_code = 5


class MetricGateError(PsplatError):
    exit_code = 6


class GenerationError(PsplatError):
    exit_code = 1
