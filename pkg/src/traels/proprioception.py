"""Wheel odometry covariance, slip rejection, sensor adapters and calibration.

Encoder speed is fused as a body-frame forward velocity whose variance grows
with speed and acceleration; disagreement with the filter inflates it further
in fixed steps.  Offline calibration recovers sensor offsets and variances,
the IMU mount rotation and the wheel scale from a logged drive containing a
long straight segment and a full turn in place.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InsufficientExcitationError
from .estimator import ACC, ANG, OMEGA, VEL, Measurement
from .geometry import Pose6D, rotation_zyx, wrap_angle

GRAVITY = 9.80665


def wheel_covariance(x_dot: float, x_ddot: float, a: float, b: float, c: float) -> float:
    """Encoder forward-speed variance, growing with speed and acceleration.

    The standard deviation is sqrt(a + b|x_dot| + c|x_ddot|); magnitudes keep
    the radicand positive for reverse driving and decelerations.  Returns the
    variance (m/s)^2.
    """
    if a <= 0 or b < 0 or c < 0:
        raise ValueError(f"tuning constants must satisfy a > 0, b >= 0, c >= 0 (got {a}, {b}, {c})")
    radicand = a + b * abs(x_dot) + c * abs(x_ddot)
    if radicand <= 0:
        raise ValueError(f"non-positive radicand {radicand} from constants ({a}, {b}, {c})")
    return radicand


@dataclass(frozen=True)
class SlipPolicy:
    """Step-wise covariance inflation schedule for wheel slip rejection."""

    thresholds: tuple = (2.0, 4.0, 6.0)
    factors: tuple = (10.0, 100.0, 1000.0)
    max_inflation: float = 1000.0

    def __post_init__(self):
        t = tuple(float(x) for x in self.thresholds)
        f = tuple(float(x) for x in self.factors)
        if len(t) != len(f):
            raise ValueError("thresholds and factors must have the same length")
        if any(t2 <= t1 for t1, t2 in zip(t, t[1:])):
            raise ValueError("thresholds must be strictly ascending")
        if any(x < 1.0 for x in f) or any(f2 < f1 for f1, f2 in zip(f, f[1:])):
            raise ValueError("factors must be >= 1 and non-decreasing")
        if f and self.max_inflation < max(f):
            raise ValueError("max_inflation must cap the largest factor")
        object.__setattr__(self, "thresholds", t)
        object.__setattr__(self, "factors", f)


def slip_gate(d: float, base_cov: float, policy: SlipPolicy) -> float:
    """Inflate a wheel-odometry variance by the factor of the highest
    Mahalanobis threshold crossed, capped so recovery stays possible."""
    if d < 0:
        raise ValueError(f"Mahalanobis distance must be non-negative, got {d}")
    factor = 1.0
    for threshold, f in zip(policy.thresholds, policy.factors):
        if d > threshold:
            factor = f
    return base_cov * min(factor, policy.max_inflation)


def estimate_sensor_covariance(samples, offset: float) -> float:
    """Variance of offset-adjusted samples, collected while the vehicle holds
    near-constant velocity on a smooth surface: sum((x - offset)^2) / (N - 1)."""
    x = np.asarray(samples, dtype=float).ravel()
    if x.size < 2:
        raise ValueError(f"need at least 2 samples, got {x.size}")
    return float(np.sum((x - offset) ** 2) / (x.size - 1))


@dataclass
class CalibrationReport:
    """Offsets, variances, mount rotation and wheel scale from a drive log."""

    gyro_offsets: np.ndarray
    accel_offsets: np.ndarray
    gyro_variance: np.ndarray
    accel_variance: np.ndarray
    mount_rotation: Pose6D
    wheel_scale: float

    def __post_init__(self):
        self.gyro_offsets = np.asarray(self.gyro_offsets, dtype=float).reshape(3)
        self.accel_offsets = np.asarray(self.accel_offsets, dtype=float).reshape(3)
        self.gyro_variance = np.asarray(self.gyro_variance, dtype=float).reshape(3)
        self.accel_variance = np.asarray(self.accel_variance, dtype=float).reshape(3)
        if (self.gyro_variance <= 0).any() or (self.accel_variance <= 0).any():
            raise ValueError("calibrated variances must be positive")
        if not 0.8 < self.wheel_scale < 1.2:
            raise ValueError(f"wheel scale {self.wheel_scale:.4f} outside the plausible (0.8, 1.2) band")

    def to_dict(self) -> dict:
        return {
            "gyro_offsets": self.gyro_offsets.tolist(),
            "accel_offsets": self.accel_offsets.tolist(),
            "gyro_variance": self.gyro_variance.tolist(),
            "accel_variance": self.accel_variance.tolist(),
            "mount_rotation_rpy": self.mount_rotation.orientation.tolist(),
            "wheel_scale": self.wheel_scale,
        }


@dataclass
class CalibrationLog:
    """Time-aligned truth and raw sensor streams for offline calibration.

    Truth twist and acceleration are body-frame; IMU accelerometer rows are
    specific force in the sensor frame (gravity included).
    """

    truth_stamps: np.ndarray
    truth_positions: np.ndarray
    truth_orientations: np.ndarray
    truth_velocities: np.ndarray
    truth_omegas: np.ndarray
    truth_accels: np.ndarray
    imu_stamps: np.ndarray
    imu_accels: np.ndarray
    imu_gyros: np.ndarray
    encoder_stamps: np.ndarray
    encoder_speeds: np.ndarray


def _interp_rows(t_out, t_in, rows):
    out = np.empty((t_out.size, rows.shape[1]))
    for j in range(rows.shape[1]):
        out[:, j] = np.interp(t_out, t_in, rows[:, j])
    return out


def _find_straight_segment(log: CalibrationLog, min_length: float, yaw_tol=np.deg2rad(2.0)):
    """Longest moving run with nearly constant yaw; returns (i0, i1, length)."""
    yaw = log.truth_orientations[:, 2]
    speed = np.linalg.norm(log.truth_velocities[:, :2], axis=1)
    moving = speed > 0.1
    best = None
    i = 0
    n = len(yaw)
    while i < n:
        if not moving[i]:
            i += 1
            continue
        j = i
        while j + 1 < n and moving[j + 1] and abs(wrap_angle(yaw[j + 1] - yaw[i])) < yaw_tol:
            j += 1
        seg = np.diff(log.truth_positions[i : j + 1, :2], axis=0)
        length = float(np.sum(np.linalg.norm(seg, axis=1)))
        if best is None or length > best[2]:
            best = (i, j, length)
        i = j + 1
    if best is None or best[2] < min_length:
        have = 0.0 if best is None else best[2]
        raise InsufficientExcitationError(
            f"straight segment of {have:.1f} m found, need >= {min_length:.0f} m"
        )
    return best


def _find_turn_in_place(log: CalibrationLog, min_rotation=2.0 * np.pi):
    speed = np.linalg.norm(log.truth_velocities[:, :2], axis=1)
    turning = (speed < 0.05) & (np.abs(log.truth_omegas[:, 2]) > 0.05)
    i = 0
    n = len(speed)
    while i < n:
        if not turning[i]:
            i += 1
            continue
        j = i
        while j + 1 < n and turning[j + 1]:
            j += 1
        dt = np.diff(log.truth_stamps[i : j + 1])
        rotated = float(np.abs(np.sum(log.truth_omegas[i:j, 2] * dt)))
        if rotated >= min_rotation:
            return i, j
        i = j + 1
    raise InsufficientExcitationError("no in-place rotation of >= 360 deg found")


def _solve_mount_rotation(measured: np.ndarray, reference: np.ndarray, weights: np.ndarray) -> Pose6D:
    """Least-squares rotation R with reference ~ R @ measured (Wahba problem)."""
    B = (reference * weights[:, None]).T @ measured
    U, _, Vt = np.linalg.svd(B)
    D = np.diag([1.0, 1.0, np.linalg.det(U @ Vt)])
    R = U @ D @ Vt
    from .geometry import euler_from_rotation

    return Pose6D(np.zeros(3), euler_from_rotation(R))


def calibrate_mount_and_wheel(
    log: CalibrationLog,
    min_straight: float = 50.0,
    gravity: float = GRAVITY,
) -> CalibrationReport:
    """Recover wheel scale, IMU mount rotation, sensor offsets and variances.

    Wheel scale is the ratio of true to encoder-integrated distance over the
    straight segment.  The mount rotation minimizes the misalignment between
    measured specific-force / angular-rate vectors and their truth-implied
    vehicle-frame counterparts; tilt is pinned by gravity and yaw by the
    acceleration episodes, so both maneuvers are required.
    """
    i0, i1, true_len = _find_straight_segment(log, min_straight)
    _find_turn_in_place(log)

    t0, t1 = log.truth_stamps[i0], log.truth_stamps[i1]
    enc_mask = (log.encoder_stamps >= t0) & (log.encoder_stamps <= t1)
    if enc_mask.sum() < 2:
        raise InsufficientExcitationError("no encoder samples over the straight segment")
    enc_len = float(
        np.trapezoid(np.abs(log.encoder_speeds[enc_mask]), log.encoder_stamps[enc_mask])
    )
    if enc_len <= 0:
        raise InsufficientExcitationError("encoder reports zero distance over the straight segment")
    wheel_scale = true_len / enc_len

    # Truth-implied vehicle-frame references at the IMU stamps.
    ts = log.imu_stamps
    ang = _interp_rows(ts, log.truth_stamps, log.truth_orientations)
    acc = _interp_rows(ts, log.truth_stamps, log.truth_accels)
    omg = _interp_rows(ts, log.truth_stamps, log.truth_omegas)
    g_world = np.array([0.0, 0.0, -gravity])
    f_ref = np.empty_like(acc)
    for k in range(ts.size):
        R_wb = rotation_zyx(*ang[k])
        f_ref[k] = acc[k] - R_wb.T @ g_world

    pairs_meas = [log.imu_accels]
    pairs_ref = [f_ref]
    pairs_w = [np.linalg.norm(f_ref, axis=1)]
    spin = np.linalg.norm(omg, axis=1) > 0.2
    if spin.any():
        pairs_meas.append(log.imu_gyros[spin])
        pairs_ref.append(omg[spin])
        # Rate vectors are ~100x smaller than gravity; reweight so they matter.
        pairs_w.append(np.linalg.norm(omg[spin], axis=1) * 10.0)
    meas = np.vstack(pairs_meas)
    ref = np.vstack(pairs_ref)
    w = np.concatenate(pairs_w)
    norm_m = np.linalg.norm(meas, axis=1)
    norm_r = np.linalg.norm(ref, axis=1)
    keep = (norm_m > 1e-6) & (norm_r > 1e-6)
    mount = _solve_mount_rotation(
        meas[keep] / norm_m[keep, None], ref[keep] / norm_r[keep, None], w[keep]
    )

    R_m = mount.rotation()
    accel_offsets = np.mean(log.imu_accels - f_ref @ R_m, axis=0)
    gyro_offsets = np.mean(log.imu_gyros - omg @ R_m, axis=0)

    # Variances over the constant-velocity heart of the straight segment,
    # offset-adjusted per axis as in the covariance collection procedure.
    seg = (ts >= t0) & (ts <= t1)
    accel_var = np.empty(3)
    gyro_var = np.empty(3)
    for axis in range(3):
        a_samples = log.imu_accels[seg, axis]
        g_samples = log.imu_gyros[seg, axis]
        accel_var[axis] = max(
            estimate_sensor_covariance(a_samples, float(np.mean(a_samples))), 1e-12
        )
        gyro_var[axis] = max(
            estimate_sensor_covariance(g_samples, float(np.mean(g_samples))), 1e-12
        )

    return CalibrationReport(
        gyro_offsets=gyro_offsets,
        accel_offsets=accel_offsets,
        gyro_variance=gyro_var,
        accel_variance=accel_var,
        mount_rotation=mount,
        wheel_scale=wheel_scale,
    )


# ---------------------------------------------------------------------------
# Measurement adapters


def imu_measurement(
    stamp: float,
    specific_force: np.ndarray,
    attitude_rp: tuple[float, float],
    accel_variance,
    mount: Pose6D | None = None,
    offsets: np.ndarray | None = None,
    gravity: float = GRAVITY,
    source: str = "imu",
) -> Measurement:
    """Convert an accelerometer specific-force sample into a body-frame
    kinematic acceleration measurement, removing gravity with the current
    attitude estimate and undoing the mount rotation."""
    f = np.asarray(specific_force, dtype=float).copy()
    if offsets is not None:
        f -= offsets
    if mount is not None:
        f = mount.rotation() @ f
    roll, pitch = attitude_rp
    R_wb = rotation_zyx(roll, pitch, 0.0)
    a_body = f + R_wb.T @ np.array([0.0, 0.0, -gravity])
    var = np.asarray(accel_variance, dtype=float)
    cov = np.diag(var) if var.ndim == 1 else var
    return Measurement(
        values=a_body,
        mask=np.arange(ACC.start, ACC.stop),
        covariance=cov,
        stamp=stamp,
        source=source,
    )


def ins_measurement(
    stamp: float,
    rpy: np.ndarray,
    omega: np.ndarray,
    attitude_variance,
    gyro_variance,
    yaw_correction: float = 0.0,
    source: str = "ins",
) -> Measurement:
    """Attitude + angular velocity from the gyro-compassing INS.  The current
    yaw-bias estimate is added to the measured heading before fusion."""
    rpy = np.asarray(rpy, dtype=float).copy()
    rpy[2] = wrap_angle(rpy[2] + yaw_correction)
    values = np.concatenate([rpy, np.asarray(omega, dtype=float)])
    cov = np.zeros((6, 6))
    cov[:3, :3] = np.diag(np.broadcast_to(attitude_variance, 3))
    cov[3:, 3:] = np.diag(np.broadcast_to(gyro_variance, 3))
    mask = np.concatenate(
        [np.arange(ANG.start, ANG.stop), np.arange(OMEGA.start, OMEGA.stop)]
    )
    return Measurement(
        values=values,
        mask=mask,
        covariance=cov,
        stamp=stamp,
        source=source,
    )


def wheel_measurement(stamp: float, speed: float, variance: float, source: str = "wheel") -> Measurement:
    """Body-frame forward speed from the encoders."""
    return Measurement(
        values=np.array([speed]),
        mask=np.array([VEL.start]),
        covariance=np.array([[variance]]),
        stamp=stamp,
        source=source,
    )
