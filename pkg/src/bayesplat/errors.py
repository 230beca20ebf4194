"""Exception hierarchy for bayesplat.

Input problems subclass ``ValueError`` so callers that only know about the
standard library still catch them. Numerical faults subclass ``ArithmeticError``.
"""

from __future__ import annotations

from typing import Optional, Sequence


class BayesplatError(Exception):
    """Base class for every error raised by this package."""


# =============================================================================
# GEOMETRY AND INFERENCE
# =============================================================================


class AngleNearPi(BayesplatError, ValueError):
    """The rotation angle is too close to pi for a unique logarithm."""

    def __init__(self, angle: float):
        super().__init__(f"rotation angle {angle:.9f} rad is within 1e-6 of pi; re-anchor before taking the logarithm")
        self.angle = angle


class EmptyBatch(BayesplatError, ValueError):
    """A point batch with no valid entries was given where points are required."""


class DimensionMismatch(BayesplatError, ValueError):
    """Array shapes that must agree do not."""


class NonPsdScale(BayesplatError, ArithmeticError):
    """A NIW scale matrix lost positive definiteness."""

    def __init__(self, component: int, min_eigenvalue: float):
        super().__init__(f"scale matrix of component {component} is not positive definite (min eigenvalue {min_eigenvalue:.3e})")
        self.component = component
        self.min_eigenvalue = min_eigenvalue


class SingularInformation(BayesplatError, ArithmeticError):
    """A pose information matrix could not be inverted."""


class Diverged(BayesplatError, RuntimeError):
    """Iterative pose refinement kept increasing its residual."""

    def __init__(self, residuals: Sequence[float]):
        history = ", ".join(f"{r:.4g}" for r in residuals)
        super().__init__(f"pose refinement diverged (residual history: {history})")
        self.residuals = list(residuals)


# =============================================================================
# DATA AND FILES
# =============================================================================


class DatasetError(BayesplatError, OSError):
    """A dataset directory could not be read."""


class MissingIndexFile(DatasetError):
    """A required index file (rgb.txt, depth.txt) is missing."""

    def __init__(self, name: str, directory: str):
        super().__init__(f"MissingIndexFile: {name} not found in {directory}")
        self.name = name
        self.directory = directory


class NoAssociation(DatasetError):
    """A frame has no partner within the association window."""


class TooFewPairs(BayesplatError, ValueError):
    """Trajectory association produced fewer pairs than alignment needs."""

    def __init__(self, count: int, required: int = 3):
        super().__init__(f"only {count} associated pose pairs, need at least {required}")
        self.count = count
        self.required = required


class TrajectoryFormatError(BayesplatError, ValueError):
    """A trajectory file line could not be parsed."""

    def __init__(self, line: int, reason: str, path: Optional[str] = None):
        where = f"{path}:{line}" if path else f"line {line}"
        super().__init__(f"{where}: {reason}")
        self.line = line
        self.path = path


class ConfigError(BayesplatError, ValueError):
    """A configuration key is unknown or its value cannot be coerced."""

    def __init__(self, key: str, reason: str, line: Optional[int] = None):
        where = f" (line {line})" if line is not None else ""
        super().__init__(f"config key '{key}'{where}: {reason}")
        self.key = key
        self.line = line
