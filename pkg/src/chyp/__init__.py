"""Multi-hypothesis illuminant estimation for camera color constancy."""

__version__ = "0.1.0"
