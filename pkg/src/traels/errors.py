"""Exception types shared across the package."""


class TraelsError(Exception):
    """Base class for all package-specific errors."""


class DegenerateOrientationError(TraelsError):
    """Orientation too close to the gimbal singularity for Euler algebra."""


class UninitializedAnchorError(TraelsError):
    """Grid anchor used before being initialized."""


class MeasurementError(TraelsError):
    """Malformed measurement (mask/value mismatch, bad covariance)."""


class SingularInnovationError(TraelsError):
    """Innovation covariance is not invertible."""


class InsufficientExcitationError(TraelsError):
    """Calibration log lacks the required maneuvers."""


class ZeroVarianceTemplateError(TraelsError):
    """Template has no color variance on its valid cells; matching is undefined."""


class NdtDivergenceError(TraelsError):
    """Registration score decreased without recovery over the iteration budget."""


class InsufficientOverlapError(TraelsError):
    """Too few scan points fall inside occupied map voxels to register."""


class DegenerateHessianError(TraelsError):
    """Registration Hessian carries no curvature; the fix must be rejected."""


class ScenarioError(TraelsError):
    """Scenario or world specification is invalid."""


class SchemaError(TraelsError):
    """A data file does not conform to its documented schema."""
