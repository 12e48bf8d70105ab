"""15-state EKF core and the dual local/global filter arrangement.

The state vector is q = [x y z | roll pitch yaw | vx vy vz | wx wy wz | ax ay az]:
pose in the inertial frame, twist and linear acceleration in the vehicle frame.
An omnidirectional kinematic model integrates body-frame twist/acceleration
into the inertial frame; measurements observe arbitrary subsets of q.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import MeasurementError, SingularInnovationError
from .geometry import FrameTag, Pose6D, rotation_zyx, wrap_angle

STATE_DIM = 15
STATE_NAMES = (
    "x", "y", "z", "roll", "pitch", "yaw",
    "vx", "vy", "vz", "wx", "wy", "wz",
    "ax", "ay", "az",
)
POS = slice(0, 3)
ANG = slice(3, 6)
VEL = slice(6, 9)
OMEGA = slice(9, 12)
ACC = slice(12, 15)
ANGLE_INDICES = (3, 4, 5)

# Eigenvalue floor applied when covariance conditioning is triggered.
COV_EIG_FLOOR = 1e-12


@dataclass
class Measurement:
    """Partial observation of the state.

    ``mask`` lists the observed state-component indices; ``values`` and
    ``covariance`` are expressed in that order.
    """

    values: np.ndarray
    mask: np.ndarray
    covariance: np.ndarray
    stamp: float
    source: str = ""

    def __post_init__(self):
        self.values = np.atleast_1d(np.asarray(self.values, dtype=float))
        self.mask = np.atleast_1d(np.asarray(self.mask, dtype=int))
        self.covariance = np.atleast_2d(np.asarray(self.covariance, dtype=float))
        k = self.mask.size
        if k == 0:
            raise MeasurementError("measurement mask is empty")
        if self.values.size != k:
            raise MeasurementError(
                f"mask ({k}) and values ({self.values.size}) lengths differ"
            )
        if self.covariance.shape != (k, k):
            raise MeasurementError(
                f"covariance shape {self.covariance.shape} does not match mask size {k}"
            )
        if np.unique(self.mask).size != k or self.mask.min() < 0 or self.mask.max() >= STATE_DIM:
            raise MeasurementError("mask must be unique state indices in [0, 15)")
        if not np.allclose(self.covariance, self.covariance.T, atol=1e-9):
            raise MeasurementError("measurement covariance is not symmetric")
        try:
            np.linalg.cholesky(self.covariance + 1e-15 * np.eye(k))
        except np.linalg.LinAlgError:
            raise MeasurementError("measurement covariance is not positive semidefinite")


@dataclass
class StateEstimate:
    """Full state with covariance, stamp and frame tag."""

    mean: np.ndarray
    covariance: np.ndarray
    stamp: float
    frame: FrameTag = FrameTag.LOCAL

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float).reshape(STATE_DIM).copy()
        self.covariance = np.asarray(self.covariance, dtype=float).reshape(
            STATE_DIM, STATE_DIM
        ).copy()
        self.mean[ANG] = wrap_angle(self.mean[ANG])
        if not np.allclose(self.covariance, self.covariance.T, atol=1e-9):
            raise MeasurementError("state covariance is not symmetric")

    def pose(self) -> Pose6D:
        return Pose6D(self.mean[POS], self.mean[ANG])

    def copy(self) -> "StateEstimate":
        return StateEstimate(self.mean.copy(), self.covariance.copy(), self.stamp, self.frame)


def euler_rate_matrix(roll: float, pitch: float) -> np.ndarray:
    """Map body angular velocity to Z-Y-X Euler angle rates."""
    sr, cr = np.sin(roll), np.cos(roll)
    tp = np.tan(pitch)
    cp = np.cos(pitch)
    return np.array(
        [
            [1.0, sr * tp, cr * tp],
            [0.0, cr, -sr],
            [0.0, sr / cp, cr / cp],
        ]
    )


def _rotation_derivatives(roll, pitch, yaw):
    """d(R)/d(roll), d(R)/d(pitch), d(R)/d(yaw) for the Z-Y-X convention."""
    cr, sr = np.cos(roll), np.sin(roll)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cy, sy = np.cos(yaw), np.sin(yaw)
    Rz = np.array([[cy, -sy, 0], [sy, cy, 0], [0, 0, 1]])
    Ry = np.array([[cp, 0, sp], [0, 1, 0], [-sp, 0, cp]])
    Rx = np.array([[1, 0, 0], [0, cr, -sr], [0, sr, cr]])
    dRx = np.array([[0, 0, 0], [0, -sr, -cr], [0, cr, -sr]])
    dRy = np.array([[-sp, 0, cp], [0, 0, 0], [-cp, 0, -sp]])
    dRz = np.array([[-sy, -cy, 0], [cy, -sy, 0], [0, 0, 0]])
    return Rz @ Ry @ dRx, Rz @ dRy @ Rx, dRz @ Ry @ Rx


def motion_model(mean: np.ndarray, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Propagate the mean by ``dt`` and return (new_mean, jacobian).

    Body-frame velocity and acceleration are rotated into the inertial frame
    for position, body rates are mapped through the Euler-rate matrix for
    orientation; velocity integrates acceleration; acceleration is constant.
    """
    roll, pitch, yaw = mean[ANG]
    v = mean[VEL]
    w = mean[OMEGA]
    a = mean[ACC]

    R = rotation_zyx(roll, pitch, yaw)
    E = euler_rate_matrix(roll, pitch)
    u = v * dt + 0.5 * a * dt * dt

    out = mean.copy()
    out[POS] = mean[POS] + R @ u
    out[ANG] = wrap_angle(mean[ANG] + (E @ w) * dt)
    out[VEL] = v + a * dt

    F = np.eye(STATE_DIM)
    dRr, dRp, dRy = _rotation_derivatives(roll, pitch, yaw)
    F[POS, ANG.start + 0] = dRr @ u
    F[POS, ANG.start + 1] = dRp @ u
    F[POS, ANG.start + 2] = dRy @ u
    F[POS, VEL] = R * dt
    F[POS, ACC] = R * (0.5 * dt * dt)

    sr, cr = np.sin(roll), np.cos(roll)
    cp, sp = np.cos(pitch), np.sin(pitch)
    tp = sp / cp
    # d(E w)/d(roll) and d(E w)/d(pitch); yaw does not enter E.
    dEw_dr = np.array(
        [
            cr * tp * w[1] - sr * tp * w[2],
            -sr * w[1] - cr * w[2],
            (cr * w[1] - sr * w[2]) / cp,
        ]
    )
    dEw_dp = np.array(
        [
            (sr * w[1] + cr * w[2]) / (cp * cp),
            0.0,
            (sr * w[1] + cr * w[2]) * sp / (cp * cp),
        ]
    )
    F[ANG, ANG.start + 0] += dEw_dr * dt
    F[ANG, ANG.start + 1] += dEw_dp * dt
    F[ANG, OMEGA] = E * dt
    F[VEL, ACC] = np.eye(3) * dt
    return out, F


def _symmetrize(P: np.ndarray) -> np.ndarray:
    return 0.5 * (P + P.T)


def _condition_covariance(P: np.ndarray) -> np.ndarray:
    """Symmetrize; if the matrix lost positive definiteness, clamp eigenvalues."""
    P = _symmetrize(P)
    try:
        np.linalg.cholesky(P + COV_EIG_FLOOR * np.eye(STATE_DIM))
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh(P)
        vals = np.maximum(vals, COV_EIG_FLOOR)
        P = _symmetrize(vecs @ (vals[:, None] * vecs.T))
    return P


def predict(state: StateEstimate, dt: float, process_noise: np.ndarray) -> StateEstimate:
    """EKF prediction step.  ``process_noise`` is a 15-vector of continuous
    noise densities (variance per second) or a full 15x15 matrix."""
    if dt < 0:
        raise ValueError(f"dt must be non-negative, got {dt}")
    q = np.asarray(process_noise, dtype=float)
    Q = np.diag(q) if q.ndim == 1 else q
    mean, F = motion_model(state.mean, dt)
    cov = _condition_covariance(F @ state.covariance @ F.T + Q * dt)
    return StateEstimate(mean, cov, state.stamp + dt, state.frame)


def _fuse_arrays(mean, cov, m: Measurement):
    """Kalman update on raw arrays; returns (mean, cov) without conditioning."""
    idx = m.mask
    r = m.values - mean[idx]
    angular = np.isin(idx, ANGLE_INDICES)
    if angular.any():
        r[angular] = wrap_angle(r[angular])
    S = cov[np.ix_(idx, idx)] + m.covariance
    try:
        K = np.linalg.solve(S, cov[idx, :]).T
    except np.linalg.LinAlgError:
        raise SingularInnovationError(f"innovation covariance singular for {m.source!r}")
    mean = mean + K @ r
    mean[ANG] = wrap_angle(mean[ANG])
    # Joseph form keeps the posterior PSD under roundoff.
    A = np.eye(STATE_DIM)
    A[:, idx] -= K
    cov = A @ cov @ A.T + K @ m.covariance @ K.T
    return mean, _symmetrize(cov)


def fuse(state: StateEstimate, m: Measurement) -> StateEstimate:
    """Fuse one partial measurement into the state (standard EKF update)."""
    mean, cov = _fuse_arrays(state.mean.copy(), state.covariance, m)
    return StateEstimate(mean, _condition_covariance(cov), max(state.stamp, m.stamp), state.frame)


def mahalanobis(state: StateEstimate, m: Measurement) -> float:
    """Innovation magnitude normalized by the innovation covariance."""
    idx = m.mask
    r = m.values - state.mean[idx]
    angular = np.isin(idx, ANGLE_INDICES)
    if angular.any():
        r[angular] = wrap_angle(r[angular])
    S = state.covariance[np.ix_(idx, idx)] + m.covariance
    try:
        x = np.linalg.solve(S, r)
    except np.linalg.LinAlgError:
        raise SingularInnovationError("innovation covariance singular")
    return float(np.sqrt(max(r @ x, 0.0)))


class Ekf:
    """Single EKF instance over the 15-dimensional kinematic state.

    Mutations happen through a timestamp-ordered measurement sequence;
    measurements older than the filter stamp by more than the lateness
    window are dropped (and counted) rather than re-filtered.
    """

    def __init__(
        self,
        initial: StateEstimate,
        process_noise,
        lateness_window: float = 0.5,
    ):
        self._mean = initial.mean.copy()
        self._cov = initial.covariance.copy()
        self._stamp = initial.stamp
        self.frame = initial.frame
        q = np.asarray(process_noise, dtype=float)
        self._Q = np.diag(q) if q.ndim == 1 else q.copy()
        self.lateness_window = lateness_window
        self.dropped_late = 0
        self.fused_count = 0

    @property
    def stamp(self) -> float:
        return self._stamp

    @property
    def mean(self) -> np.ndarray:
        return self._mean

    @property
    def covariance(self) -> np.ndarray:
        return self._cov

    def state(self) -> StateEstimate:
        return StateEstimate(self._mean.copy(), self._cov.copy(), self._stamp, self.frame)

    def pose(self) -> Pose6D:
        return Pose6D(self._mean[POS], self._mean[ANG])

    def predict_to(self, stamp: float) -> None:
        dt = stamp - self._stamp
        if dt < 0:
            raise ValueError(f"cannot predict backwards ({dt:+.4f} s)")
        if dt == 0.0:
            return
        mean, F = motion_model(self._mean, dt)
        self._mean = mean
        self._cov = _condition_covariance(F @ self._cov @ F.T + self._Q * dt)
        self._stamp = stamp

    def fuse(self, m: Measurement) -> bool:
        """Fuse a measurement at the current state.  Returns False if the
        measurement was dropped for exceeding the lateness window."""
        if m.stamp < self._stamp - self.lateness_window:
            self.dropped_late += 1
            return False
        self._mean, cov = _fuse_arrays(self._mean, self._cov, m)
        self._cov = _condition_covariance(cov)
        self._stamp = max(self._stamp, m.stamp)
        self.fused_count += 1
        return True

    def mahalanobis(self, m: Measurement) -> float:
        return mahalanobis(self.state(), m)


class DualEstimator:
    """Local (continuous) and global (corrected) filters plus their transform.

    The local filter never sees TRN fixes, so its pose trajectory stays
    continuous for control; the global filter fuses the local twist plus TRN
    corrections and may jump.  The local->global transform is recomputed at
    every global update so measurements can be carried between frames.
    """

    def __init__(
        self,
        initial_local: StateEstimate,
        initial_global: StateEstimate,
        process_noise_local,
        process_noise_global,
        zero_velocity_std: float = 0.05,
        lateness_window: float = 0.5,
    ):
        self.local = Ekf(initial_local, process_noise_local, lateness_window)
        self.local.frame = FrameTag.LOCAL
        self.global_ = Ekf(initial_global, process_noise_global, lateness_window)
        self.global_.frame = FrameTag.GLOBAL
        self.zero_velocity_std = zero_velocity_std
        self.transform_lg = self.global_.pose() @ self.local.pose().inverse()
        self.max_local_step = 0.0

    def step_local(
        self,
        stamp: float,
        imu_measurements=(),
        ins_measurement: Measurement | None = None,
        wheel_measurement: Measurement | None = None,
    ) -> StateEstimate:
        """One local cycle: predict to ``stamp``, fuse the cycle's proprioceptive
        measurements (timestamp-ordered), and inject the zero lateral/vertical
        velocity pseudo-measurement."""
        before = self.local.mean[POS].copy()
        self.local.predict_to(stamp)
        pending = list(imu_measurements)
        if ins_measurement is not None:
            pending.append(ins_measurement)
        if wheel_measurement is not None:
            pending.append(wheel_measurement)
        pending.sort(key=lambda m: m.stamp)
        for m in pending:
            self.local.fuse(m)
        sigma = self.zero_velocity_std
        self.local.fuse(
            Measurement(
                values=np.zeros(2),
                mask=np.array([VEL.start + 1, VEL.start + 2]),
                covariance=np.eye(2) * sigma * sigma,
                stamp=stamp,
                source="zero_velocity",
            )
        )
        step = float(np.linalg.norm(self.local.mean[POS] - before))
        self.max_local_step = max(self.max_local_step, step)
        return self.local.state()

    def local_twist_measurement(self, stamp: float) -> Measurement:
        """Local twist + linear acceleration packaged for the global filter."""
        idx = np.arange(VEL.start, ACC.stop)
        return Measurement(
            values=self.local.mean[idx].copy(),
            mask=idx,
            covariance=self.local.covariance[np.ix_(idx, idx)].copy(),
            stamp=stamp,
            source="local_twist",
        )

    def step_global(
        self,
        stamp: float,
        fixes=(),
        local_twist: Measurement | None = None,
    ) -> StateEstimate:
        """One global cycle: predict, fuse the local twist and any TRN fixes
        (already in measurement form), then refresh the L->G transform."""
        self.global_.predict_to(stamp)
        if local_twist is None:
            local_twist = self.local_twist_measurement(stamp)
        self.global_.fuse(local_twist)
        for m in sorted(fixes, key=lambda m: m.stamp):
            self.global_.fuse(m)
        self.transform_lg = self.global_.pose() @ self.local.pose().inverse()
        return self.global_.state()
