"""Exception hierarchy shared by all pose4d modules."""


class Pose4DError(Exception):
    """Base class for every error raised by this package."""


class NonFinite(Pose4DError, ValueError):
    pass


class BehindCamera(Pose4DError, ValueError):
    pass


class NonPositiveDepth(Pose4DError, ValueError):
    pass


class OutOfDomain(Pose4DError, ValueError):
    pass


class DegenerateDirection(Pose4DError, ValueError):
    pass


class InvalidPose(Pose4DError, ValueError):
    """Rotation is not orthonormal or has the wrong shape."""


class InvalidIntrinsics(Pose4DError, ValueError):
    pass


class DegenerateOrbit(Pose4DError, ValueError):
    pass


class UnknownMotion(Pose4DError, ValueError):
    pass


class InsufficientLandmarks(Pose4DError, ValueError):
    pass


class SingularNormalEquations(Pose4DError, ArithmeticError):
    pass


class TooSmallImage(Pose4DError, ValueError):
    pass


class InsufficientExamples(Pose4DError, ValueError):
    pass


class DivergedLoss(Pose4DError, ArithmeticError):
    pass


class EmptyDepth(Pose4DError, ValueError):
    pass


class EmptyInput(Pose4DError, ValueError):
    pass


class ShapeMismatch(Pose4DError, ValueError):
    pass


class EmptyMask(Pose4DError, ValueError):
    pass


class EmptyCloud(Pose4DError, ValueError):
    pass


class ConfigInvalid(Pose4DError, ValueError):
    pass


class StageFailed(Pose4DError, RuntimeError):
    def __init__(self, stage, message):
        super().__init__(f"stage {stage!r} failed: {message}")
        self.stage = stage
