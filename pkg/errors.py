#!/usr/bin/env python3
"""
Error types for the RHRSegNet pipeline
Every failure an operation can report is a subclass of RHRSegError
"""


class RHRSegError(Exception):
    """Base class for all pipeline errors"""


class ShapeError(RHRSegError):
    """Tensor shapes do not satisfy an operation's contract"""


class ChannelMismatch(ShapeError):
    """Channel count of a tensor disagrees with the layer it is fed to"""


class NonPositiveOutput(ShapeError):
    """Convolution arithmetic produced a spatial size below 1"""


class AlignmentError(ShapeError):
    """Image and label are not spatially aligned"""


class SizeMismatch(ShapeError):
    """Two accumulators were built for different class counts"""


class InvalidConfig(RHRSegError, ValueError):
    """Configuration violates an invariant"""


class LayoutError(RHRSegError):
    """Dataset root does not match the declared layout"""


class InvalidPrediction(RHRSegError):
    """Prediction map contains the ignore value or out-of-range ids"""


class NoClassesPresent(RHRSegError):
    """Mean IoU requested over an empty set of classes"""


class CheckpointError(RHRSegError):
    """Checkpoint archive is missing, corrupt or incompatible"""


__all__ = [
    'RHRSegError',
    'ShapeError',
    'ChannelMismatch',
    'NonPositiveOutput',
    'AlignmentError',
    'SizeMismatch',
    'InvalidConfig',
    'LayoutError',
    'InvalidPrediction',
    'NoClassesPresent',
    'CheckpointError',
]
