"""Terrain-referenced fixes: the correction messages both TRN engines emit."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .estimator import ANG, POS, Measurement
from .geometry import Pose6D


class FixKind(enum.Enum):
    POSITION_2D = "position_2d"
    POSE_6D = "pose_6d"


@dataclass
class TrnFix:
    """Global position (2D) or pose (6D) correction with quality diagnostics.

    ``value`` is a length-2 (x, y) array for POSITION_2D or a Pose6D for
    POSE_6D; ``covariance`` matches (2x2 or 6x6, PSD).
    """

    kind: FixKind
    value: object
    covariance: np.ndarray
    stamp: float
    source: str = ""
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        self.covariance = np.atleast_2d(np.asarray(self.covariance, dtype=float))
        expect = 2 if self.kind is FixKind.POSITION_2D else 6
        if self.covariance.shape != (expect, expect):
            raise ValueError(
                f"{self.kind.value} fix needs a {expect}x{expect} covariance, "
                f"got {self.covariance.shape}"
            )
        if self.kind is FixKind.POSITION_2D:
            self.value = np.asarray(self.value, dtype=float).reshape(2)
        elif not isinstance(self.value, Pose6D):
            raise ValueError("POSE_6D fix value must be a Pose6D")

    def to_measurement(self) -> Measurement:
        """Convert to the estimator's partial-state measurement form."""
        if self.kind is FixKind.POSITION_2D:
            return Measurement(
                values=self.value.copy(),
                mask=np.array([0, 1]),
                covariance=self.covariance.copy(),
                stamp=self.stamp,
                source=self.source or "trn_position",
            )
        pose: Pose6D = self.value
        return Measurement(
            values=np.concatenate([pose.position, pose.orientation]),
            mask=np.arange(POS.start, ANG.stop),
            covariance=self.covariance.copy(),
            stamp=self.stamp,
            source=self.source or "trn_pose",
        )
