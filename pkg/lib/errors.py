#!/usr/bin/env python3
"""
Error categories for the situation recognizer

Each category carries the process exit code the CLI reports for it.
"""


class SituError(Exception):
    """Base class for every error raised by the package"""
    exit_code = 1


class ConfigError(SituError):
    """Invalid configuration or artifact produced under another configuration"""
    exit_code = 2


class SchemaError(SituError):
    """Malformed annotation, lexicon, checkpoint, gallery or prediction file"""
    exit_code = 3


class NumericalError(SituError):
    """NaN/Inf at an op boundary, or a non-deterministic objective"""
    exit_code = 4


class ShapeError(NumericalError, ValueError):
    """Tensor shapes or dimensions do not agree"""


class GraphError(NumericalError):
    """Backward requested on a value that is not on the tape"""


class DegenerateBoxError(SchemaError, ValueError):
    """Box with zero or negative area"""


class PrerequisiteError(SituError):
    """A stage was started without the artifacts it needs"""
    exit_code = 5


class GalleryError(PrerequisiteError):
    """Gallery missing, stale, or failed to build"""
