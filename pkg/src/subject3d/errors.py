"""Exception types shared across the package."""

from __future__ import annotations


class Subject3DError(Exception):
    """Base class for all package errors."""


class ShapeError(Subject3DError):
    """Tensor shape or range violates a documented contract."""


class ScheduleError(Subject3DError):
    """Invalid noise-schedule construction or timestep."""


class NonFiniteError(Subject3DError):
    """A model output, loss, or sample became NaN/Inf.

    ``context`` carries the failing step or iteration index so the caller
    can report where the computation diverged.
    """

    def __init__(self, message: str, context: dict | None = None):
        super().__init__(message)
        self.context = context or {}


class GroupMismatchError(Subject3DError):
    """Parameter-group names or shapes disagree with a snapshot/checkpoint."""


class ConfigError(Subject3DError):
    """Malformed or unknown keys in a run configuration."""


class IntegrityError(Subject3DError):
    """An artifact on disk does not match its recorded hash, or is missing."""


class JudgeTransportError(Subject3DError):
    """The judge endpoint could not be reached (after retries, if any)."""


class JudgeResponseError(Subject3DError):
    """The judge reply could not be parsed; ``raw`` preserves the payload."""

    def __init__(self, message: str, raw: str = ""):
        super().__init__(message)
        self.raw = raw
