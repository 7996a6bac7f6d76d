"""Exception taxonomy shared across the package."""


class PlanarMatchError(Exception):
    """Base class for all errors raised by this package."""


class InvalidHypothesis(PlanarMatchError):
    """Attribute block violates its bounds or produces a degenerate corner quad."""


class SingularSystem(PlanarMatchError):
    """Linear system for a homography is rank deficient (degenerate geometry)."""


class PointAtInfinity(PlanarMatchError):
    """Projective mapping sent a point to the plane at infinity."""


class DegenerateFit(PlanarMatchError):
    """Correspondence set is too degenerate to fit a homography."""


class OutOfModel(PlanarMatchError):
    """Fitted attributes fall outside the declared parameter bounds."""


class AllInvalid(PlanarMatchError):
    """Every candidate hypothesis in a neighborhood is invalid."""


class AllMasked(PlanarMatchError):
    """An attention window contains no usable keys."""


class GenerationFailed(PlanarMatchError):
    """Scene rejection sampling exhausted its attempt budget."""


class InsufficientValid(PlanarMatchError):
    """Not enough valid ground-truth entries to satisfy a sampling request."""


class EstimationFailed(PlanarMatchError):
    """Robust pose estimation could not find a usable consensus."""
