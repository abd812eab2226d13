"""Exception and warning types shared across the library."""


class KpslamError(Exception):
    """Base class for all library-specific errors."""


class NonPositiveDepth(KpslamError):
    """A point sits at or behind the camera plane (z <= 1e-6 m)."""


class InvalidIntrinsics(KpslamError):
    """Camera intrinsics are not usable (non-positive focal/size)."""


class SingularCovariance(KpslamError):
    """A 2x2 covariance is numerically singular (cond > 1e12)."""


class ZeroAxis(KpslamError):
    """A symmetry axis with (near-)zero norm was supplied."""


class AllBehindCamera(KpslamError):
    """No model keypoint has positive depth under the given pose."""


class NotVisible(KpslamError):
    """No keypoint of the object projects with positive depth."""


class TooFewCorrespondences(KpslamError):
    """Fewer than the minimal number of 2D-3D correspondences."""


class DegenerateConfiguration(KpslamError):
    """Minimal P3P set is collinear or has coincident bearings."""


class NoConsensus(KpslamError):
    """RANSAC failed to find a model with the minimum consensus."""


class NotConverged(KpslamError):
    """Iterative refinement hit its budget before the tolerance."""


class NoCameraPose(KpslamError):
    """No camera hypothesis survived voting and no fallback was given."""


class DuplicateMeasurement(KpslamError):
    """A (frame, object, keypoint) measurement was inserted twice."""


class UnknownFrame(KpslamError):
    """A frame id was referenced before any pose was stored for it."""


class UnknownObject(KpslamError):
    """An object id was referenced that the scene does not contain."""


class EmptyCloud(KpslamError):
    """A point-cloud metric was asked to run on zero points."""


class EmptyList(KpslamError):
    """A summary statistic was asked to run on an empty sequence."""


class LengthMismatch(KpslamError):
    """Paired sequences have different lengths."""


class InfeasibleScene(KpslamError):
    """Scene generation could not satisfy the visibility constraints."""


class EmptyValidSetWarning(UserWarning):
    """A training target has no valid keypoints; loss degenerates to BCE."""
