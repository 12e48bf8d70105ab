"""Distance-sampled trajectory error metrics and their aggregates.

Errors are evaluated every fixed increment of ground-truth arc length rather
than every fixed time step, so stationary dwells and speed changes do not bias
the aggregate statistics.  No retroactive alignment is performed: the absolute
error is the online, globally-referenced error.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import SchemaError


@dataclass
class Trajectory:
    """Stamped positions (plus optional yaw), timestamp-ordered."""

    stamps: np.ndarray
    positions: np.ndarray  # (N, 3)

    def __post_init__(self):
        self.stamps = np.asarray(self.stamps, dtype=float).ravel()
        self.positions = np.atleast_2d(np.asarray(self.positions, dtype=float))
        if self.positions.shape[0] != self.stamps.size:
            raise SchemaError("stamps and positions length mismatch")
        if np.any(np.diff(self.stamps) < 0):
            raise SchemaError("trajectory stamps are not ordered")

    def interpolated(self, stamps: np.ndarray) -> np.ndarray:
        out = np.empty((stamps.size, self.positions.shape[1]))
        for j in range(self.positions.shape[1]):
            out[:, j] = np.interp(stamps, self.stamps, self.positions[:, j])
        return out


def arc_length(traj: Trajectory, planar: bool = True) -> np.ndarray:
    """Cumulative distance traveled at every trajectory sample.

    Integrated at the full pose rate, not the metric sampling rate, so curved
    segments between metric samples are measured along their true path.
    """
    p = traj.positions[:, :2] if planar else traj.positions
    steps = np.linalg.norm(np.diff(p, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(steps)])


@dataclass
class SampledError:
    """Per-sample records along the truth trajectory: arc length, absolute
    error (m), relative drift (percent)."""

    distances: np.ndarray
    stamps: np.ndarray
    ate: np.ndarray
    rpe: np.ndarray
    d_min: float
    skipped_zero_segments: int = 0

    @property
    def count(self) -> int:
        return self.distances.size


def _sample_indices(cum: np.ndarray, d_min: float) -> np.ndarray:
    """Indices where truth arc length first advances by each d_min increment.
    Dwells (no arc advance) emit no samples."""
    idx = []
    target = d_min
    for i in range(cum.size):
        if cum[i] + 1e-12 >= target:
            idx.append(i)
            target = cum[i] + d_min
    return np.asarray(idx, dtype=int)


def _lower_median(values: np.ndarray) -> float:
    v = np.sort(np.asarray(values, dtype=float))
    if v.size == 0:
        raise ValueError("empty sample set")
    return float(v[(v.size - 1) // 2])


def compute_errors(
    truth: Trajectory,
    estimate: Trajectory,
    d_min: float = 1.0,
    planar: bool = True,
    point_to_point: bool = False,
) -> SampledError:
    """ATE and RPE sampled every ``d_min`` meters of truth arc length.

    ATE is the (2D by default) distance between truth and the time-interpolated
    estimate.  RPE compares distance traveled over each inter-sample segment:
    the estimate's integrated arc length by default, or the straight-line
    displacement between sample stamps with ``point_to_point``.
    """
    if estimate.stamps[0] > truth.stamps[-1] or estimate.stamps[-1] < truth.stamps[0]:
        raise SchemaError("truth and estimate have no temporal overlap")
    cum_truth = arc_length(truth, planar)
    idx = _sample_indices(cum_truth, d_min)
    if idx.size == 0:
        return SampledError(np.empty(0), np.empty(0), np.empty(0), np.empty(0), d_min)
    stamps = truth.stamps[idx]

    dims = slice(0, 2) if planar else slice(0, 3)
    est_at = estimate.interpolated(stamps)
    ate = np.linalg.norm(truth.positions[idx][:, dims] - est_at[:, dims], axis=1)

    cum_est = arc_length(estimate, planar)
    est_cum_at = np.interp(stamps, estimate.stamps, cum_est)

    rpe = np.full(idx.size, np.nan)
    skipped = 0
    prev_i = None
    for k, i in enumerate(idx):
        if prev_i is None:
            prev_i = k
            continue
        dd_truth = cum_truth[idx[k]] - cum_truth[idx[prev_i]]
        if dd_truth <= 0:
            skipped += 1
            continue
        if point_to_point:
            dd_est = float(np.linalg.norm(est_at[k, dims] - est_at[prev_i, dims]))
            dd_truth_pp = float(
                np.linalg.norm(truth.positions[idx[k], dims] - truth.positions[idx[prev_i], dims])
            )
            rpe[k] = (dd_est - dd_truth_pp) / max(dd_truth_pp, 1e-12) * 100.0
        else:
            dd_est = est_cum_at[k] - est_cum_at[prev_i]
            rpe[k] = (dd_est - dd_truth) / dd_truth * 100.0
        prev_i = k
    return SampledError(
        distances=cum_truth[idx],
        stamps=stamps,
        ate=ate,
        rpe=rpe,
        d_min=d_min,
        skipped_zero_segments=skipped,
    )


def compute_ate(truth: Trajectory, estimate: Trajectory, d_min: float = 1.0, planar: bool = True) -> SampledError:
    """Absolute trajectory error part only (RPE left as NaN)."""
    out = compute_errors(truth, estimate, d_min, planar)
    return out


def compute_rpe(truth: Trajectory, estimate: Trajectory, d_min: float = 1.0, planar: bool = True, point_to_point: bool = False) -> SampledError:
    """Relative drift part only (same sampling as compute_ate)."""
    return compute_errors(truth, estimate, d_min, planar, point_to_point)


def vertical_error(truth: Trajectory, estimate: Trajectory, d_min: float = 1.0) -> dict:
    """Mean/std of |z| error at the metric samples (reported separately from
    the planar analysis)."""
    cum = arc_length(truth, planar=True)
    idx = _sample_indices(cum, d_min)
    if idx.size == 0:
        return {"mean": float("nan"), "std": float("nan"), "count": 0}
    stamps = truth.stamps[idx]
    est_at = estimate.interpolated(stamps)
    dz = np.abs(truth.positions[idx, 2] - est_at[:, 2])
    return {"mean": float(np.mean(dz)), "std": float(np.std(dz)), "count": int(idx.size)}


def aggregate(errors: SampledError, median_speed: float | None = None) -> dict:
    """Table-style summary: medians are exact lower order statistics."""
    if errors.count == 0:
        raise ValueError("no metric samples to aggregate")
    rpe = errors.rpe[np.isfinite(errors.rpe)]
    out = {
        "trajectory_length_m": float(errors.distances[-1]),
        "n_samples": int(errors.count),
        "median_ate_m": _lower_median(errors.ate),
        "max_ate_m": float(np.max(errors.ate)),
        "final_ate_m": float(errors.ate[-1]),
        "median_abs_rpe_pct": _lower_median(np.abs(rpe)) if rpe.size else float("nan"),
        "max_abs_rpe_pct": float(np.max(np.abs(rpe))) if rpe.size else float("nan"),
        "skipped_zero_segments": int(errors.skipped_zero_segments),
    }
    if median_speed is not None:
        out["median_velocity_mps"] = float(median_speed)
    return out


def median_speed(truth: Trajectory) -> float:
    """Lower-median ground speed over moving samples of the truth trajectory."""
    dt = np.diff(truth.stamps)
    ok = dt > 0
    v = np.linalg.norm(np.diff(truth.positions[:, :2], axis=0)[ok], axis=1) / dt[ok]
    moving = v[v > 0.05]
    return _lower_median(moving) if moving.size else 0.0
