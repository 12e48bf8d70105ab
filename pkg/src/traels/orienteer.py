"""Point-cloud terrain matching: NDT registration producing 6D pose fixes.

The reference cloud is compressed into per-voxel Gaussians; registration runs
Newton ascent on the sum of per-point Gaussian likelihoods.  Optimizer
diagnostics (normalized score against a running reference, inverse-Hessian
eigenstructure) are converted heuristically into the fix covariance: the
Hessian defines the shape, the score defines the overall confidence.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateHessianError, InsufficientOverlapError, NdtDivergenceError
from .fixes import FixKind, TrnFix
from .geometry import Pose6D, rotation_zyx, wrap_angle


@dataclass
class NdtGrid:
    """Fixed-resolution voxel map of Gaussians fitted to a reference cloud."""

    cell_size: float
    means: np.ndarray
    inv_covs: np.ndarray
    counts: np.ndarray
    _min_index: np.ndarray
    _dims: np.ndarray
    _lut: np.ndarray

    @property
    def n_cells(self) -> int:
        return self.means.shape[0]

    def lookup(self, points: np.ndarray) -> np.ndarray:
        """Row index of the voxel containing each point, -1 where unoccupied."""
        idx = np.floor(points / self.cell_size).astype(np.int64) - self._min_index
        return self._rows_from_indices(idx)

    def _rows_from_indices(self, idx: np.ndarray) -> np.ndarray:
        inside = np.all((idx >= 0) & (idx < self._dims), axis=1)
        rows = np.full(idx.shape[0], -1, dtype=np.int64)
        flat = (idx[inside, 0] * self._dims[1] + idx[inside, 1]) * self._dims[2] + idx[inside, 2]
        rows[inside] = self._lut[flat]
        return rows

    def neighborhood_pairs(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(point_index, voxel_row) pairs over each point's containing voxel
        and its six face neighbors.  The neighbor contributions keep the score
        continuous across cell boundaries, which Newton ascent needs."""
        base = np.floor(points / self.cell_size).astype(np.int64) - self._min_index
        pis, rows = [], []
        for off in _FACE_NEIGHBORHOOD:
            r = self._rows_from_indices(base + off)
            hit = r >= 0
            pis.append(np.nonzero(hit)[0])
            rows.append(r[hit])
        return np.concatenate(pis), np.concatenate(rows)


_FACE_NEIGHBORHOOD = np.array(
    [[0, 0, 0], [1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]],
    dtype=np.int64,
)


def build_grid(
    points: np.ndarray,
    cell_size: float = 1.0,
    min_points: int = 5,
    eig_ratio_floor: float = 0.01,
) -> NdtGrid:
    """Voxelize a cloud into per-cell Gaussian statistics.

    Cells with fewer than ``min_points`` points are dropped; each covariance is
    regularized so its smallest eigenvalue is at least ``eig_ratio_floor``
    times its largest, keeping planar cells invertible.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[0] == 0:
        raise ValueError("reference cloud is empty")
    pts = pts[:, :3]
    vox = np.floor(pts / cell_size).astype(np.int64)
    vmin = vox.min(axis=0)
    dims = vox.max(axis=0) - vmin + 1
    flat = ((vox[:, 0] - vmin[0]) * dims[1] + (vox[:, 1] - vmin[1])) * dims[2] + (
        vox[:, 2] - vmin[2]
    )
    order = np.argsort(flat, kind="stable")
    flat_sorted = flat[order]
    pts_sorted = pts[order]
    uniq, start, counts = np.unique(flat_sorted, return_index=True, return_counts=True)

    keep = counts >= min_points
    uniq, start, counts = uniq[keep], start[keep], counts[keep]
    if uniq.size == 0:
        raise ValueError(f"no voxel holds >= {min_points} points at {cell_size} m cells")

    means = np.empty((uniq.size, 3))
    inv_covs = np.empty((uniq.size, 3, 3))
    for i, (s, c) in enumerate(zip(start, counts)):
        block = pts_sorted[s : s + c]
        mu = block.mean(axis=0)
        d = block - mu
        cov = d.T @ d / (c - 1)
        vals, vecs = np.linalg.eigh(cov)
        floor = eig_ratio_floor * max(vals[-1], 1e-12)
        vals = np.maximum(vals, floor)
        means[i] = mu
        inv_covs[i] = vecs @ np.diag(1.0 / vals) @ vecs.T

    lut = np.full(int(np.prod(dims)), -1, dtype=np.int64)
    lut[uniq] = np.arange(uniq.size)
    return NdtGrid(
        cell_size=cell_size,
        means=means,
        inv_covs=inv_covs,
        counts=counts,
        _min_index=vmin,
        _dims=dims,
        _lut=lut,
    )


@dataclass
class NdtResult:
    """Registration output: optimized pose plus optimizer diagnostics."""

    pose: Pose6D
    q_s: float
    inv_hessian: np.ndarray
    eigenvalues: np.ndarray
    iterations: int
    converged: bool
    n_points: int


def _pose_vector(p: Pose6D) -> np.ndarray:
    return np.concatenate([p.position, p.orientation])


def _vector_pose(v: np.ndarray) -> Pose6D:
    return Pose6D(v[:3], wrap_angle(v[3:]))


def _rotation_and_derivatives(roll, pitch, yaw):
    """R, its three first derivatives and six second derivatives (upper
    triangle order rr, rp, ry, pp, py, yy) with respect to (roll, pitch, yaw)."""
    cr, sr = np.cos(roll), np.sin(roll)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cy, sy = np.cos(yaw), np.sin(yaw)
    Rx = np.array([[1, 0, 0], [0, cr, -sr], [0, sr, cr]])
    Ry = np.array([[cp, 0, sp], [0, 1, 0], [-sp, 0, cp]])
    Rz = np.array([[cy, -sy, 0], [sy, cy, 0], [0, 0, 1]])
    dRx = np.array([[0, 0, 0], [0, -sr, -cr], [0, cr, -sr]])
    dRy = np.array([[-sp, 0, cp], [0, 0, 0], [-cp, 0, -sp]])
    dRz = np.array([[-sy, -cy, 0], [cy, -sy, 0], [0, 0, 0]])
    ddRx = np.array([[0, 0, 0], [0, -cr, sr], [0, -sr, -cr]])
    ddRy = np.array([[-cp, 0, -sp], [0, 0, 0], [sp, 0, -cp]])
    ddRz = np.array([[-cy, sy, 0], [-sy, -cy, 0], [0, 0, 0]])
    R = Rz @ Ry @ Rx
    first = np.stack([Rz @ Ry @ dRx, Rz @ dRy @ Rx, dRz @ Ry @ Rx])
    second = np.stack(
        [
            Rz @ Ry @ ddRx,   # roll, roll
            Rz @ dRy @ dRx,   # roll, pitch
            dRz @ Ry @ dRx,   # roll, yaw
            Rz @ ddRy @ Rx,   # pitch, pitch
            dRz @ dRy @ Rx,   # pitch, yaw
            ddRz @ Ry @ Rx,   # yaw, yaw
        ]
    )
    return R, first, second


_SECOND_PAIRS = ((0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2))


# Exponent gain of the Gaussian-plus-uniform mixture approximation; < 1 fattens
# the per-cell Gaussians, which keeps a usable attraction basin around thin
# structures (walls, trunks) instead of a near-delta score spike.
SCORE_SHARPNESS = 0.45


def ndt_score(scan: np.ndarray, pose: Pose6D, grid: NdtGrid, sharpness: float = SCORE_SHARPNESS) -> float:
    """Per-point normalized NDT score of a scan placed at ``pose``."""
    pts = np.asarray(scan, dtype=float)[:, :3]
    world = pose.apply(pts)
    pi, rows = grid.neighborhood_pairs(world)
    if pi.size == 0:
        return 0.0
    d = world[pi] - grid.means[rows]
    q = np.einsum("ni,nij,nj->n", d, grid.inv_covs[rows], d)
    return float(np.sum(np.exp(-0.5 * sharpness * q))) / pts.shape[0]


def _score_only(scan: np.ndarray, pose_v: np.ndarray, grid: NdtGrid, sharpness: float) -> float:
    """Raw (unnormalized) score at a pose vector."""
    world = scan @ rotation_zyx(pose_v[3], pose_v[4], pose_v[5]).T + pose_v[:3]
    pi, rows = grid.neighborhood_pairs(world)
    if pi.size == 0:
        return 0.0
    d = world[pi] - grid.means[rows]
    q = np.einsum("ni,nij,nj->n", d, grid.inv_covs[rows], d)
    return float(np.sum(np.exp(-0.5 * sharpness * q)))


def _score_grad_hess(scan: np.ndarray, pose_v: np.ndarray, grid: NdtGrid, sharpness: float = SCORE_SHARPNESS):
    """Raw (unnormalized) score, gradient and Hessian at a pose vector."""
    pts = scan
    roll, pitch, yaw = pose_v[3:]
    R, dR, ddR = _rotation_and_derivatives(roll, pitch, yaw)
    world = pts @ R.T + pose_v[:3]
    pi, rows = grid.neighborhood_pairs(world)
    n_hit = int(np.unique(pi).size)
    if pi.size == 0:
        return 0.0, np.zeros(6), np.zeros((6, 6)), 0
    p = pts[pi]
    d = world[pi] - grid.means[rows]
    S = sharpness * grid.inv_covs[rows]
    q = np.einsum("ni,nij,nj->n", d, S, d)
    e = np.exp(-0.5 * q)

    # Jacobian of the transformed point: translation block is identity,
    # rotation block is dR/dangle applied to the raw point.
    n_pairs = pi.size
    J_rot = np.einsum("aij,nj->nia", dR, p)  # one 3x3 per pair per angle
    Sd = np.einsum("nij,nj->ni", S, d)
    a = np.empty((n_pairs, 6))
    a[:, :3] = Sd
    a[:, 3:] = np.einsum("ni,nia->na", Sd, J_rot)

    grad = -(e[:, None] * a).sum(axis=0)

    # J^T S J blocks.
    SJ_rot = np.einsum("nij,nja->nia", S, J_rot)
    JtSJ = np.empty((n_pairs, 6, 6))
    JtSJ[:, :3, :3] = S
    JtSJ[:, :3, 3:] = SJ_rot
    JtSJ[:, 3:, :3] = SJ_rot.transpose(0, 2, 1)
    JtSJ[:, 3:, 3:] = np.einsum("nia,nib->nab", J_rot, SJ_rot)

    # Second-derivative term d^T S d2x'/dp2, nonzero only on angle pairs.
    dd = np.einsum("kij,nj->nik", ddR, p)  # (n, 3, 6 pairs)
    Sd_dd = np.einsum("ni,nik->nk", Sd, dd)
    curv = np.zeros((n_pairs, 6, 6))
    for k, (i, j) in enumerate(_SECOND_PAIRS):
        curv[:, 3 + i, 3 + j] = Sd_dd[:, k]
        if i != j:
            curv[:, 3 + j, 3 + i] = Sd_dd[:, k]

    outer = np.einsum("ni,nj->nij", a, a)
    hess = (e[:, None, None] * (outer - JtSJ - curv)).sum(axis=0)
    return float(e.sum()), grad, hess, n_hit


def _seed_pose(pts: np.ndarray, v0: np.ndarray, grid: NdtGrid, radius: float, step: float, yaw_seeds, sharpness: float) -> np.ndarray:
    """Pick the best-scoring pose on a small local lattice around the guess.

    Thin structures leave score plateaus between cells; starting Newton from
    the best of a handful of deterministic seeds restores capture out to the
    documented perturbation envelope without a global search.  All
    translations of one yaw seed are scored in a single vectorized pass.
    """
    sub = pts[:: max(1, pts.shape[0] // 500)]
    n = sub.shape[0]
    steps = np.arange(-radius, radius + 1e-9, step)
    gx, gy = np.meshgrid(steps, steps)
    lattice = np.c_[gx.ravel(), gy.ravel(), np.zeros(gx.size)]
    best_v, best_s = v0.copy(), -np.inf
    for dyaw in yaw_seeds:
        v = v0.copy()
        v[5] = wrap_angle(v[5] + dyaw)
        base = sub @ rotation_zyx(v[3], v[4], v[5]).T + v[:3]
        world = (base[None, :, :] + lattice[:, None, :]).reshape(-1, 3)
        pi, rows = grid.neighborhood_pairs(world)
        if pi.size == 0:
            continue
        d = world[pi] - grid.means[rows]
        q = np.einsum("ni,nij,nj->n", d, grid.inv_covs[rows], d)
        scores = np.bincount(pi // n, weights=np.exp(-0.5 * sharpness * q), minlength=lattice.shape[0])
        k = int(np.argmax(scores))
        if scores[k] > best_s:
            best_s = float(scores[k])
            best_v = v.copy()
            best_v[:3] += lattice[k]
    return best_v


def register(
    scan: np.ndarray,
    initial: Pose6D,
    grid: NdtGrid,
    max_iterations: int = 30,
    gradient_tol: float = 1e-6,
    min_overlap: float = 0.10,
    seed_radius: float = 1.0,
    seed_step: float = 0.25,
    seed_yaws=(0.0, -0.07, 0.07),
    sharpness: float = SCORE_SHARPNESS,
) -> NdtResult:
    """Align a vehicle-frame scan to the voxel map by Newton ascent.

    The initial pose must be inside the capture envelope (``seed_radius`` in
    translation, the seeded yaws in heading); there is no global search.
    Raises on insufficient overlap with occupied voxels or on score divergence.
    """
    pts = np.asarray(scan, dtype=float)
    if pts.ndim != 2 or pts.shape[0] == 0:
        raise ValueError("scan is empty")
    pts = pts[:, :3]
    n = pts.shape[0]

    v = _pose_vector(initial)
    score0, grad, hess, n_hit = _score_grad_hess(pts, v, grid, sharpness)
    if n_hit < min_overlap * n:
        raise InsufficientOverlapError(
            f"{n_hit}/{n} scan points fall in occupied voxels (< {min_overlap:.0%})"
        )
    score = score0
    if seed_radius > 0:
        v = _seed_pose(pts, v, grid, seed_radius, seed_step, seed_yaws, sharpness)
        score, grad, hess, _ = _score_grad_hess(pts, v, grid, sharpness)

    converged = False
    iterations = 0
    for iterations in range(1, max_iterations + 1):
        if np.linalg.norm(grad) / n < gradient_tol:
            converged = True
            break
        # Saddle-free Newton ascent: negative curvature directions are scaled
        # by |lambda| so the step stays bounded, with trust regions of one
        # cell in translation and 0.1 rad in rotation.
        vals, vecs = np.linalg.eigh(-hess)
        vals = np.maximum(np.abs(vals), 1e-3 * max(float(np.abs(vals).max()), 1e-12))
        step = vecs @ ((vecs.T @ grad) / vals)
        t_norm = float(np.linalg.norm(step[:3]))
        if t_norm > grid.cell_size:
            step *= grid.cell_size / t_norm
        r_norm = float(np.linalg.norm(step[3:]))
        if r_norm > 0.1:
            step *= 0.1 / r_norm
        improved = False
        for alpha in (1.0, 0.5, 0.25, 0.1, 0.03, 0.01, 0.003, 0.001):
            trial = v + alpha * step
            trial[3:] = wrap_angle(trial[3:])
            s = _score_only(pts, trial, grid, sharpness)
            if s > score:
                v, score = trial, s
                _, grad, hess, _ = _score_grad_hess(pts, v, grid, sharpness)
                improved = True
                break
        if not improved:
            converged = np.linalg.norm(grad) / n < gradient_tol * 100
            break

    if score < score0:
        raise NdtDivergenceError(
            f"score decreased from {score0:.3f} to {score:.3f} after {iterations} iterations"
        )

    vals, vecs = np.linalg.eigh(-0.5 * (hess + hess.T))
    vals = np.maximum(vals, 1e-12)
    inv_hessian = vecs @ np.diag(1.0 / vals) @ vecs.T
    eigenvalues = np.sort(1.0 / vals)
    return NdtResult(
        pose=_vector_pose(v),
        q_s=score / n,
        inv_hessian=inv_hessian,
        eigenvalues=eigenvalues,
        iterations=iterations,
        converged=converged,
        n_points=n,
    )


class ScoreTracker:
    """FIFO window of accepted scores with their moving average."""

    def __init__(self, window: int = 10):
        self.window = deque(maxlen=window)

    def add(self, q_s: float) -> "ScoreTracker":
        self.window.append(float(q_s))
        return self

    @property
    def reference(self) -> float | None:
        if not self.window:
            return None
        return float(np.mean(self.window))


def track_score(tracker: ScoreTracker, q_s: float) -> ScoreTracker:
    """Append a score to the tracker's FIFO window."""
    return tracker.add(q_s)


def scale_covariance(
    result: NdtResult,
    tracker: ScoreTracker,
    a: float = 5.0,
    b: float = 1.0,
    floor: float = 1e-4,
    cap: float = 1e2,
) -> TrnFix:
    """Convert optimizer diagnostics into a 6D pose fix with covariance.

    Confidence A is a logistic comparison of the current normalized score
    against the windowed reference (bootstrap: the first score is its own
    reference, A = 0.5).  B = b * Q_H^2 with Q_H the largest inverse-Hessian
    eigenvalue; each eigenvalue is squared and divided by A*B, and the
    covariance is rebuilt in the inverse-Hessian eigenbasis so its shape
    follows the curvature of the registration objective.
    """
    q_h = float(np.max(result.eigenvalues))
    B = b * q_h * q_h
    if B == 0.0:
        raise DegenerateHessianError("inverse Hessian has zero curvature; fix rejected")
    reference = tracker.reference
    if reference is None:
        reference = result.q_s
    A = 1.0 / (1.0 + np.exp(-a * (result.q_s - reference)))
    vals, vecs = np.linalg.eigh(0.5 * (result.inv_hessian + result.inv_hessian.T))
    sigmas = np.clip(vals * vals / (A * B), floor, cap)
    cov = vecs @ np.diag(sigmas) @ vecs.T
    tracker.add(result.q_s)
    return TrnFix(
        kind=FixKind.POSE_6D,
        value=result.pose,
        covariance=0.5 * (cov + cov.T),
        stamp=0.0,
        source="orienteer",
        diagnostics={
            "q_s": result.q_s,
            "q_h": q_h,
            "confidence": float(A),
            "iterations": result.iterations,
            "converged": result.converged,
        },
    )


@dataclass
class OrienteerConfig:
    cell_size: float = 1.0
    a: float = 5.0
    b: float = 1.0
    score_window: int = 10
    cov_floor: float = 1e-4
    cov_cap: float = 1e2
    max_points: int = 50_000
    period: float = 5.0
    max_iterations: int = 30


class OrienteerEngine:
    """Stateful worker: registers decimated scans against the voxelized
    reference cloud and emits pose fixes with heuristic covariance."""

    def __init__(self, apriori_cloud: np.ndarray, config: OrienteerConfig | None = None, rng=None):
        self.config = config or OrienteerConfig()
        self.grid = build_grid(apriori_cloud, self.config.cell_size)
        self.tracker = ScoreTracker(self.config.score_window)
        self._rng = rng or np.random.default_rng(0)
        self.match_count = 0
        self.reject_count = 0
        self.diagnostics_log: list[dict] = []

    def try_match(
        self,
        stamp: float,
        scan_vehicle: np.ndarray,
        initial: Pose6D,
        pos_sigma: float | None = None,
        yaw_sigma: float | None = None,
    ) -> TrnFix | None:
        """Register one scan.  The seeding envelope shrinks with the supplied
        position/heading uncertainty so confident operation stays cheap."""
        pts = np.asarray(scan_vehicle, dtype=float)[:, :3]
        if pts.shape[0] == 0:
            return None
        if pts.shape[0] > self.config.max_points:
            keep = self._rng.choice(pts.shape[0], self.config.max_points, replace=False)
            pts = pts[np.sort(keep)]
        seed_radius = 1.0 if pos_sigma is None else float(np.clip(3.0 * pos_sigma, 0.3, 1.2))
        if yaw_sigma is not None and 3.0 * yaw_sigma < np.deg2rad(2.0):
            seed_yaws = (0.0,)
        else:
            seed_yaws = (0.0, -0.07, 0.07)
        try:
            result = register(
                pts,
                initial,
                self.grid,
                self.config.max_iterations,
                seed_radius=seed_radius,
                seed_yaws=seed_yaws,
            )
            fix = scale_covariance(
                result,
                self.tracker,
                self.config.a,
                self.config.b,
                self.config.cov_floor,
                self.config.cov_cap,
            )
        except (InsufficientOverlapError, NdtDivergenceError, DegenerateHessianError):
            self.reject_count += 1
            return None
        fix.stamp = stamp
        self.match_count += 1
        self.diagnostics_log.append({"stamp": stamp, **fix.diagnostics})
        return fix
