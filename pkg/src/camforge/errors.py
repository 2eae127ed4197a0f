"""Exception types shared across the package."""


class CamforgeError(Exception):
    """Base class for all package-specific failures."""


class ShapeError(CamforgeError, ValueError):
    """Tensor or layer dimensions are inconsistent; message names the axis."""


class GraphError(CamforgeError, ValueError):
    """Model graph is malformed (bad hook point, branch output mismatch)."""


class SurgeryError(CamforgeError, ValueError):
    """Model cannot be modified as requested (already edited, bad topology)."""


class ModelFormatError(CamforgeError, ValueError):
    """Model container is corrupt, truncated, or has a foreign magic/version."""


class TrainingError(CamforgeError, RuntimeError):
    """Training run failed; message names the epoch where it happened."""
