"""
Exception hierarchy shared by every module of the lab.

All domain errors except ``AttackAborted`` also subclass ``ValueError`` so
callers that only care about "bad input" can keep catching that.
"""

from typing import Any, List, Optional, Sequence, Tuple


class LeakageLabError(Exception):
    """Root of every error raised by this package."""


# --- autodiff -------------------------------------------------------------


class AutodiffError(LeakageLabError, ValueError):
    """Base class for graph construction and differentiation errors."""


class ShapeMismatchError(AutodiffError):
    """An operation received operands whose shapes it cannot combine."""

    def __init__(self, op: str, *shapes: Tuple[int, ...]):
        self.op = op
        self.shapes = shapes
        rendered = ", ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"shape mismatch in '{op}': {rendered}")


class NanDetectedError(AutodiffError):
    """An operation produced NaN values."""

    def __init__(self, op: str):
        self.op = op
        super().__init__(f"NaN produced by '{op}'")


class NonScalarRootError(AutodiffError):
    """grad() was asked to differentiate a non-scalar root."""


class UnreachableLeafError(AutodiffError):
    """A requested leaf does not influence the differentiated root."""


class NonFiniteValueError(AutodiffError):
    """A function evaluated during a finite-difference check was not finite."""


# --- model zoo / fed-sim / attack -----------------------------------------


class InvalidRangeError(LeakageLabError, ValueError):
    """Initialization range with low >= high."""


class LabelOutOfRangeError(LeakageLabError, ValueError):
    """Class index outside [0, C)."""


class MisalignedGradientError(LeakageLabError, ValueError):
    """Gradient sets whose names or shapes do not line up."""


class EmptyDatasetError(LeakageLabError, ValueError):
    """A client dataset with no samples."""


class DegenerateGradientError(LeakageLabError, ValueError):
    """Output-layer gradient is identically zero; no label can be read off it."""


class AttackAborted(LeakageLabError):
    """A step failed mid-attack. ``result`` holds the partial history."""

    def __init__(self, message: str, result: Any, cause: Optional[BaseException] = None):
        super().__init__(message)
        self.result = result
        self.__cause__ = cause


# --- stop-control / metrics / data-io -------------------------------------


class ControllerError(LeakageLabError, ValueError):
    """Invalid observation fed to a stop controller."""


class MetricError(LeakageLabError, ValueError):
    """Metric inputs that cannot be compared."""


class DatasetFormatError(LeakageLabError, ValueError):
    """Malformed dataset bytes; ``offset`` is the byte position at fault."""

    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} (at byte offset {offset})")


# --- harness --------------------------------------------------------------


class ConfigError(LeakageLabError, ValueError):
    """Experiment document failed to parse or validate.

    Args:
        issues: (line, key path, message) triples; line is None when the key
            does not appear in the document (e.g. a missing required key).
    """

    def __init__(self, issues: Sequence[Tuple[Optional[int], str, str]]):
        self.issues: List[Tuple[Optional[int], str, str]] = list(issues)
        lines = []
        for line, key, message in self.issues:
            where = f"line {line}" if line is not None else "document"
            lines.append(f"{where}: {key}: {message}")
        super().__init__("invalid experiment config:\n  " + "\n  ".join(lines))
