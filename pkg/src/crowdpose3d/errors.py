"""Exception hierarchy shared by every stage of the pipeline."""

from __future__ import annotations


class CrowdPoseError(Exception):
    """Base class for all errors raised by this package."""


# geometry
class PointAtInfinity(CrowdPoseError, ValueError):
    pass


class DegenerateSystem(CrowdPoseError, ValueError):
    """The homogeneous least-squares solution is not unique."""


class DegenerateGeometry(CrowdPoseError, ValueError):
    pass


# homography
class DegenerateConfiguration(CrowdPoseError, ValueError):
    pass


class NumericalFailure(CrowdPoseError, ArithmeticError):
    pass


class IndexMismatch(CrowdPoseError, ValueError):
    pass


# matching
class ViewMismatch(CrowdPoseError, ValueError):
    pass


class InvalidCost(CrowdPoseError, ValueError):
    pass


class RingTopologyError(CrowdPoseError, ValueError):
    pass


class MissingFeet(CrowdPoseError, ValueError):
    pass


# reconstruction
class ZeroLengthBone(CrowdPoseError, ArithmeticError):
    def __init__(self, bone: int, joints: tuple[int, int]):
        super().__init__(f"bone {bone} between joints {joints} has zero length")
        self.bone = bone
        self.joints = joints


# synthetic scenes
class InfeasibleSpec(CrowdPoseError, ValueError):
    pass


# metrics
class NoMatches(CrowdPoseError, ValueError):
    pass


class MissingConstants(CrowdPoseError, ValueError):
    pass


class NoGroundTruth(CrowdPoseError, ValueError):
    pass


# input files and configuration
class InputParseError(CrowdPoseError, ValueError):
    pass


class ConfigError(CrowdPoseError, ValueError):
    pass
