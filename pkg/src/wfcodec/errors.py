"""Exception hierarchy shared by every wfcodec module."""


class WfcodecError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(WfcodecError):
    """Tensor or filter-bank geometry is invalid or inconsistent."""


class ParameterError(WfcodecError):
    """A scalar argument is out of its documented range."""


class FormatError(WfcodecError):
    """A serialized file is corrupt, truncated, or of the wrong kind."""


class StateError(WfcodecError):
    """A stream state machine was driven out of protocol."""


class WeightError(WfcodecError):
    """A named parameter is missing or its shape disagrees with the config."""
