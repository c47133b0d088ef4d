"""
Exception hierarchy for the laboratory.

Every rejected input raises a LabError subclass. LabError derives from
ValueError so callers that only know "bad value" keep working.
"""

from typing import Optional


class LabError(ValueError):
    """Base class for every rejected input or failed invariant."""


class ShapeError(LabError):
    """Tensor or vector shapes disagree."""


class ConfigError(LabError):
    """Invalid experiment configuration; `pointer` names the offending field."""

    def __init__(self, message: str, pointer: str = ""):
        self.pointer = pointer
        super().__init__(f"{pointer}: {message}" if pointer else message)


class IdxFormatError(LabError):
    """Malformed IDX file."""

    def __init__(self, message: str, path: str, offset: int):
        self.path = path
        self.offset = offset
        super().__init__(f"{path} @ byte {offset}: {message}")


class AggregationError(LabError):
    """Aggregation rule preconditions violated."""


class ArtifactMissingError(LabError, FileNotFoundError):
    """A run artifact needed by an analysis is absent."""

    def __init__(self, path: str):
        self.path = path
        super().__init__(f"missing artifact: {path}")
