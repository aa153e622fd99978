"""Exception types shared across the toolkit.

Every error raised on bad data or bad configuration derives from
:class:`ThermidError` so callers (and the CLI) can distinguish data problems
from programming mistakes.
"""

from __future__ import annotations


class ThermidError(Exception):
    """Base class for all toolkit errors."""


# ---------------------------------------------------------------------------
# trace


class MissingColumn(ThermidError):
    """A required CSV column is absent or misnamed."""


class NonMonotoneTime(ThermidError):
    """Timestamps are not strictly increasing or not uniformly spaced."""


class OutOfRangeValue(ThermidError):
    """A field value lies outside its physical range; names the offending row."""


class UpsampleUnsupported(ThermidError):
    """Requested resampling rate exceeds the source rate."""


class TooShort(ThermidError):
    """Not enough samples for the requested operation."""


class KTooLarge(ThermidError):
    """More folds requested than samples available."""


# ---------------------------------------------------------------------------
# plant


class UnstableParams(ThermidError):
    """The continuous thermal network has an eigenvalue with nonnegative real part."""


# ---------------------------------------------------------------------------
# features


class SearchSpaceTooLarge(ThermidError):
    """Exhaustive subset search would exceed the configured cap."""


# ---------------------------------------------------------------------------
# identification


class RankDeficient(ThermidError):
    """Subspace projection rank is below the requested model order."""


class DimensionMismatch(ThermidError):
    """Input/output arrays disagree in shape with the model or each other."""


class SingularNormalEquations(ThermidError):
    """Levenberg-Marquardt damping escalation was exhausted without an acceptable step."""


class NonFiniteLoss(ThermidError):
    """Training loss became NaN or infinite."""


class TooEarly(ThermidError):
    """A lag window reaches before the start of the trace."""


# ---------------------------------------------------------------------------
# evaluation


class LengthMismatch(ThermidError):
    """Prediction and measurement series differ in length."""
