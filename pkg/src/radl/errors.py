"""Exception types shared across the package."""


class RadlError(Exception):
    """Base class for all package-specific errors."""


class MalformedDoc(RadlError):
    """Layout document is not valid JSON or is missing a required field."""


class InvalidBBox(RadlError):
    """Bounding box violates 0 <= x1 < x2 <= 1, 0 <= y1 < y2 <= 1."""


class TooManyInstances(RadlError):
    """Layout exceeds the configured instance cap."""


class ShapeMismatch(RadlError):
    """Array arguments do not conform in shape."""


class NoBranches(RadlError):
    """Fusion was called with an empty branch sequence."""


class MissingCache(RadlError):
    """A backward routine was called without its forward cache."""


class StepOutOfRange(RadlError):
    """Diffusion step index outside 1..T."""


class PlacementFailure(RadlError):
    """Scene generator could not place instances without overlap."""


class NonFiniteLoss(RadlError):
    """Training loss became NaN or infinite."""

    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value!r} at step {step}")
        self.step = step
        self.value = value


class UnknownColor(RadlError):
    """Color name missing from the HSV range table."""
