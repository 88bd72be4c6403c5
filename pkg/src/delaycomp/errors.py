"""Exception types shared across the package."""

from __future__ import annotations


class DelayCompError(Exception):
    """Base class for all package errors."""


class ShapeMismatchError(DelayCompError, ValueError):
    """Two rasters (or a raster and the camera) disagree on dimensions."""

    def __init__(self, what: str, expected: tuple, got: tuple):
        self.expected = tuple(expected)
        self.got = tuple(got)
        super().__init__(f"{what}: expected shape {self.expected}, got {self.got}")


class DataError(DelayCompError):
    """A file on disk is missing, corrupt, or inconsistent.

    Attributes:
        path: Offending file or directory.
        reason: Human-readable explanation.
    """

    def __init__(self, path, reason: str):
        self.path = str(path)
        self.reason = reason
        super().__init__(f"{self.path}: {reason}")


class GeometryError(DelayCompError, ValueError):
    """A geometric configuration is degenerate."""


class MetricError(DelayCompError, ValueError):
    """A metric cannot be evaluated on the given inputs."""
