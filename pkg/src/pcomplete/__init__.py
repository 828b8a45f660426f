"""Point cloud completion with Siamese codeword matching and residual refinement."""

__version__ = "0.1.0"

from .errors import PointCloudParseError, StateError  # noqa: F401
