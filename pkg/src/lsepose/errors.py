"""Exception hierarchy shared by all pipeline stages."""


class LsePoseError(Exception):
    """Base class for every error raised by this package."""


class MeshParseError(LsePoseError, ValueError):
    """A mesh file is malformed or references out-of-range vertices."""


class EmptyMeshError(LsePoseError, ValueError):
    """A mesh has no usable (non-degenerate) triangles."""


class DegenerateFrameError(LsePoseError, ValueError):
    """The neighbourhood covariance has rank 0, no local frame exists."""


class DegenerateConfigurationError(LsePoseError, ValueError):
    """Too few or collinear 3D points were given to the PnP solver."""


class PnPFailure(LsePoseError, RuntimeError):
    """The PnP solver could not produce a finite pose."""


class FormatError(LsePoseError, ValueError):
    """Binary file has a bad magic number, unsupported version or is truncated."""


class SchemaError(LsePoseError, ValueError):
    """A JSON document is missing required keys or has wrong types."""


class ConfigError(LsePoseError, ValueError):
    """A pipeline configuration value is missing or out of its domain."""
