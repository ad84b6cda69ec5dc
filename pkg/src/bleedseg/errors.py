"""Exception types shared across the package."""


class BleedsegError(Exception):
    """Base class for all package errors."""


class ShapeError(BleedsegError):
    """Extent/channel mismatch or an impossible geometry request."""


class ParameterError(BleedsegError):
    """A scalar parameter is outside its documented range."""


class ConfigError(BleedsegError):
    """An architecture or run configuration is invalid."""


class TilingError(BleedsegError):
    """An input extent violates the valid-tiling constraint."""


class LabelError(BleedsegError):
    """A class ID is outside 0..C-1 or inconsistent with declared counts."""


class FormatError(BleedsegError):
    """A file does not conform to its binary/JSON contract."""


class PlacementError(BleedsegError):
    """A synthetic lesion cannot be placed within the requested extents."""


class StateError(BleedsegError):
    """An activation tape or optimizer state is stale or mismatched."""
