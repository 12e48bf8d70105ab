"""Online yaw bias estimation from local/global displacement divergence.

The local filter dead-reckons, so a heading bias rotates its displacement
vectors relative to the terrain-corrected global ones.  The signed angle
between paired displacement segments measures the residual bias; admitted
samples (long enough segments, taken while corrections are actively shrinking
the position uncertainty) feed a moving average with outlier rejection, and
the estimate is added to every INS heading before the filters consume it.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose6D, wrap_angle

# Floor for the MAD scale so windows of near-identical samples do not reject
# everything within floating noise of the median.
_MAD_FLOOR = 1e-4


def compute_yaw_bias_sample(d_global: np.ndarray, d_local: np.ndarray, min_displacement: float = 50.0) -> float:
    """Signed planar angle (rad) from the local to the global displacement.

    Magnitude matches the arccos of the normalized dot product; the sign comes
    from the z-component of d_local x d_global so the result can be *added* to
    the measured heading to reduce error.  The global displacement must exceed
    ``min_displacement`` for an acceptable signal-to-noise ratio.
    """
    dG = np.asarray(d_global, dtype=float).reshape(2)
    dL = np.asarray(d_local, dtype=float).reshape(2)
    nG = float(np.hypot(*dG))
    nL = float(np.hypot(*dL))
    if nG <= min_displacement:
        raise ValueError(f"global displacement {nG:.1f} m below the {min_displacement:.0f} m gate")
    if nL == 0.0:
        raise ValueError("local displacement is zero")
    cross = dL[0] * dG[1] - dL[1] * dG[0]
    dot = float(dL @ dG)
    return float(np.arctan2(cross, dot))


@dataclass
class YawBiasState:
    """Anchors, admitted-sample history and the published estimate."""

    anchor_stamp: float | None = None
    anchor_local: Pose6D | None = None
    anchor_global: Pose6D | None = None
    samples: deque = field(default_factory=lambda: deque(maxlen=10))
    estimate: float = 0.0
    trace_window: deque = field(default_factory=lambda: deque(maxlen=10))


class YawBiasEstimator:
    """Accumulates displacement-angle samples and maintains the bias estimate.

    ``update`` is called once per global filter cycle with synchronized local
    and global pose snapshots plus the trace of the global xy position
    covariance.  When the global displacement since the last anchor exceeds
    the gate and the covariance trend is declining, a sample is taken and the
    anchors reset so segments never overlap.
    """

    def __init__(
        self,
        min_displacement: float = 50.0,
        window: int = 10,
        trend_window: int = 10,
        trend_decline: float = 0.01,
        mad_multiplier: float = 3.0,
        max_step: float = np.deg2rad(0.5),
    ):
        self.min_displacement = min_displacement
        self.trend_decline = trend_decline
        self.mad_multiplier = mad_multiplier
        self.max_step = max_step
        self.state = YawBiasState(
            samples=deque(maxlen=window), trace_window=deque(maxlen=trend_window)
        )
        self.history: list[tuple[float, float]] = []

    @property
    def estimate(self) -> float:
        return self.state.estimate

    def admit_sample(self, global_cov_trace: float) -> bool:
        """True iff the position-covariance trace has declined over the trend
        window, i.e. corrections are actively reducing the uncertainty."""
        w = self.state.trace_window
        if len(w) < w.maxlen:
            return False
        return global_cov_trace <= w[0] * (1.0 - self.trend_decline)

    def update_bias(self, sample: float) -> float:
        """Fold an admitted (absolute) bias sample into the moving average.

        Samples further than ``mad_multiplier`` MADs from the window median
        are discarded; the estimate moves toward the surviving mean by at most
        ``max_step`` per update.
        """
        st = self.state
        st.samples.append(float(sample))
        arr = np.array(st.samples)
        med = np.median(arr)
        mad = max(np.median(np.abs(arr - med)), _MAD_FLOOR)
        kept = arr[np.abs(arr - med) <= self.mad_multiplier * mad]
        target = float(np.mean(kept)) if kept.size else st.estimate
        step = np.clip(target - st.estimate, -self.max_step, self.max_step)
        st.estimate = wrap_angle(st.estimate + step)
        if abs(st.estimate) >= np.pi / 2:
            raise ValueError(
                f"yaw bias estimate {np.rad2deg(st.estimate):.1f} deg exceeds 90 deg; "
                "configuration is broken"
            )
        return st.estimate

    def update(
        self,
        stamp: float,
        local_pose: Pose6D,
        global_pose: Pose6D,
        global_cov_trace: float,
    ) -> float | None:
        """Per-global-cycle hook.  Returns the new sample if one was taken."""
        st = self.state
        admissible = self.admit_sample(global_cov_trace)
        st.trace_window.append(float(global_cov_trace))
        if st.anchor_local is None:
            st.anchor_stamp = stamp
            st.anchor_local = local_pose
            st.anchor_global = global_pose
            return None
        dG = global_pose.position[:2] - st.anchor_global.position[:2]
        if float(np.hypot(*dG)) <= self.min_displacement:
            return None
        if not admissible:
            return None
        dL = local_pose.position[:2] - st.anchor_local.position[:2]
        if float(np.hypot(*dL)) == 0.0:
            return None
        residual = compute_yaw_bias_sample(dG, dL, self.min_displacement)
        # The correction active over the segment already rotated dL; the
        # stored sample estimates the *total* bias so the average is stable.
        sample = wrap_angle(residual + st.estimate)
        self.update_bias(sample)
        self.history.append((stamp, st.estimate))
        st.anchor_stamp = stamp
        st.anchor_local = local_pose
        st.anchor_global = global_pose
        return sample


def correct_heading(measured_yaw: float, bias_estimate: float) -> float:
    """Apply the additive yaw-bias model: corrected = wrap(measured + bias)."""
    return float(wrap_angle(measured_yaw + bias_estimate))
