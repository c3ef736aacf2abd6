"""Exception types shared across the package.

Every failure mode the library promises to detect has a dedicated type so
callers (the joint-motion loop, the CLI) can react per case instead of
pattern-matching messages.
"""

from __future__ import annotations


class JointMotionError(Exception):
    """Base class for all package-specific errors."""


class ShapeMismatch(JointMotionError):
    """Array arguments disagree on frame/point/pixel counts."""


class EmptyInput(JointMotionError):
    """An operation received no data (zero points, zero total weight)."""


class BehindCamera(JointMotionError):
    """Projection requested for a point at or behind the camera plane."""


class InvalidQuery(JointMotionError):
    """A query pixel has no valid depth to unproject from."""


class DegenerateInput(JointMotionError):
    """A closed-form fit has no unique solution (rank-deficient input)."""


class InsufficientObservations(JointMotionError):
    """Bundle adjustment has no frame with enough usable observations."""


class NumericalFailure(JointMotionError):
    """A solver produced a non-finite cost or an unsolvable system."""


class ImageTooSmall(JointMotionError):
    """Pyramid construction needs at least a 16x16 base resolution."""


class QueryOutsideImage(JointMotionError):
    """A correlation query projects outside the image bounds."""


class InfeasibleSpec(JointMotionError):
    """A scene specification cannot be realized (quotas, geometry)."""


class NoVisiblePoints(JointMotionError):
    """A metric has no entries to average after masking."""


class FormatError(JointMotionError):
    """A file on disk does not parse as the expected record format."""
