"""Exception taxonomy shared across the library.

The CLI maps these onto exit codes: usage problems exit 1, data/format
problems exit 2, runtime failures exit 3.
"""

from __future__ import annotations


class TavlaError(Exception):
    """Base class for library errors."""


class ShapeError(TavlaError, ValueError):
    """An operand has the wrong shape. Message names both shapes."""


class ConfigError(TavlaError, ValueError):
    """A configuration value is invalid or inconsistent."""


class UsageError(TavlaError, RuntimeError):
    """An API or CLI was called in an unsupported way."""


class NumericError(TavlaError, ArithmeticError):
    """Non-finite values reached a numerically sensitive operation."""


class FormatError(TavlaError, ValueError):
    """A serialized payload is malformed. Message names the byte offset."""


class DegeneracyError(TavlaError, ValueError):
    """Geometric input is too degenerate to resolve (for example a
    near-zero direction vector during orthonormalization)."""


class ValidationError(TavlaError, ValueError):
    """Structured data (episode, checkpoint, scene) failed validation."""


class GenerationError(TavlaError, RuntimeError):
    """Procedural generation could not satisfy its constraints."""


class ExpertError(TavlaError, RuntimeError):
    """The scripted expert could not make progress on a task."""


class CoverageError(TavlaError, RuntimeError):
    """A query fell outside the region covered by available data."""
