"""Exception hierarchy shared by all modules."""


class HandoverError(Exception):
    """Base class for every error raised by this package."""


# geometry
class NonPositiveDepth(HandoverError):
    pass


class ZeroDisparity(HandoverError):
    pass


class DegeneratePoints(HandoverError):
    pass


class ChordTooLong(HandoverError):
    pass


# perception
class TooFewPoints(HandoverError):
    pass


class NoValidCandidate(HandoverError):
    pass


class NoInliers(HandoverError):
    pass


class InsufficientObservation(HandoverError):
    def __init__(self, message, inlier_count=0):
        super().__init__(message)
        self.inlier_count = inlier_count


# kinematics
class Unreachable(HandoverError):
    pass


class BothUnreachable(HandoverError):
    pass


# servo
class EstimationFailed(HandoverError):
    pass


class NotConverged(HandoverError):
    """Servo loop ran out of iterations; carries the last estimate."""

    def __init__(self, message, estimate=None, iterations=0):
        super().__init__(message)
        self.estimate = estimate
        self.iterations = iterations


class AcquisitionFailed(HandoverError):
    pass


class PositioningFailed(HandoverError):
    pass


# grasp
class GripperOffscreen(HandoverError):
    pass


class MaxStepsExceeded(HandoverError):
    def __init__(self, message, axis=None):
        super().__init__(message)
        self.axis = axis


class DegenerateDemos(HandoverError):
    pass


class GraspMissed(HandoverError):
    def __init__(self, message, mode="Y", residual=None):
        super().__init__(message)
        self.mode = mode
        self.residual = residual


# harness
class IoFailure(HandoverError):
    pass


class ConfigError(HandoverError):
    pass
