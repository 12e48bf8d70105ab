"""Terrain-referenced GNSS-denied localization toolkit.

Dual asynchronous EKFs fuse inertial, heading and wheel-odometry measurements;
two terrain-referenced engines (overhead raster correlation and point-cloud
NDT registration) supply global corrections; a deterministic synthetic-world
simulator and a distance-sampled trajectory-error suite close the loop.
"""

from .atlis import AtlisConfig, AtlisEngine, CorrelationSurface, ncc_match, rasterize, search_window, weighted_fix
from .estimator import (
    DualEstimator,
    Ekf,
    Measurement,
    StateEstimate,
    fuse,
    mahalanobis,
    predict,
)
from .fixes import FixKind, TrnFix
from .geometry import FrameTag, GridAnchor, Pose6D, anchor_to_utm, compose, utm_to_anchor, wrap_angle
from .maps import AprioriMap, RasterPatch
from .orienteer import (
    NdtGrid,
    NdtResult,
    OrienteerConfig,
    OrienteerEngine,
    ScoreTracker,
    build_grid,
    ndt_score,
    register,
    scale_covariance,
    track_score,
)
from .proprioception import (
    CalibrationLog,
    CalibrationReport,
    SlipPolicy,
    calibrate_mount_and_wheel,
    estimate_sensor_covariance,
    slip_gate,
    wheel_covariance,
)
from .ybe import YawBiasEstimator, YawBiasState, compute_yaw_bias_sample, correct_heading

__version__ = "0.1.0"
