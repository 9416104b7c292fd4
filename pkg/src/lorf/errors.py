"""Exception hierarchy shared across the pipeline."""


class LorfError(Exception):
    pass


# geometry
class AngleNearPi(LorfError):
    """Rotation too close to pi for a stable log; caller must re-anchor."""


class BehindCamera(LorfError):
    pass


class NonPositiveDepth(LorfError):
    pass


# raster
class OutOfBounds(LorfError):
    pass


class TooManyLevels(LorfError):
    pass


# depth objective
class NoValidPixels(LorfError):
    pass


class EmptyAnchorMask(LorfError):
    pass


# bundle adjustment
class AllPointsInvalid(LorfError):
    pass


class SolveFailed(LorfError):
    pass


# radiance
class FrozenField(LorfError):
    pass


class DegenerateRay(LorfError):
    pass


class NoOverlapRays(LorfError):
    pass


# scheduler
class ProviderUnavailable(LorfError):
    pass


class InsufficientFrames(LorfError):
    pass


# metrics
class DegenerateGeometry(LorfError):
    pass


class TooShort(LorfError):
    pass


class ShapeMismatch(LorfError):
    pass


class TooSmall(LorfError):
    pass


# synthetic oracle
class CameraInsideGeometry(LorfError):
    pass
