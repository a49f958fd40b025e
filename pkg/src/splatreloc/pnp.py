"""Pose estimation from 2D-3D correspondences.

Provides:
  * ``umeyama_align``: closed-form rigid alignment of two point sets (SVD
    with a determinant sign correction, scale fixed to 1),
  * ``epnp``: control-point PnP — world points are rewritten in barycentric
    coordinates of four control points (centroid + principal axes), the
    camera-frame control points are recovered from the null space of a
    2n x 12 projection system, and the pose follows by rigid alignment,
  * ``refine_ba``: Levenberg-Marquardt minimization of (optionally
    Huber-robustified) reprojection error with an analytic Jacobian,
  * ``solve_pnp``: seeded RANSAC around minimal EPnP hypotheses with a final
    robust refinement on the consensus set.

Poses are camera-to-world throughout; reprojection uses the inverse.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .errors import CheiralityViolation, DegenerateGeometry, InsufficientMatches, NoConsensus
from .geometry import (
    CameraIntrinsics,
    Pose,
    matrix_to_quat,
    quat_from_rotvec,
    quat_multiply,
    quat_to_matrix,
)

MIN_CORRESPONDENCES = 6
#: Tetrahedron volume below which control points count as coplanar (m^3).
COPLANAR_VOLUME_EPS = 1e-9

_PAIRS = list(combinations(range(4), 2))


@dataclass(frozen=True)
class Correspondence:
    """One observed pixel and its world-space 3D point."""

    pixel: np.ndarray  # (2,)
    point: np.ndarray  # (3,)

    def __post_init__(self) -> None:
        object.__setattr__(self, "pixel", np.asarray(self.pixel, dtype=np.float64).reshape(2))
        object.__setattr__(self, "point", np.asarray(self.point, dtype=np.float64).reshape(3))


@dataclass
class SolverReport:
    """Outcome of a pose solve."""

    pose: Pose
    inlier_count: int
    mean_reprojection_error: float  # pixels
    iterations: int
    converged: bool


@dataclass(frozen=True)
class ControlPointSet:
    """Four control points spanning a point cloud, plus barycentric weights."""

    control_points: np.ndarray  # (4, 3) world frame
    weights: np.ndarray  # (n, 4); weights @ control_points reproduces the cloud


def _stack(corrs: list[Correspondence]) -> tuple[np.ndarray, np.ndarray]:
    pixels = np.array([c.pixel for c in corrs])
    points = np.array([c.point for c in corrs])
    return pixels, points


def compute_control_points(points: np.ndarray) -> ControlPointSet:
    """Centroid + principal-axis control points and barycentric weights.

    The three non-centroid control points sit one standard deviation along
    each principal axis of the cloud, so the four of them span a tetrahedron
    whenever the points are not coplanar.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3 or points.shape[0] < 4:
        raise ValueError("need an (n, 3) array with n >= 4")
    centroid = points.mean(axis=0)
    centered = points - centroid
    _, svals, vt = np.linalg.svd(centered, full_matrices=False)
    axis_lengths = svals / np.sqrt(points.shape[0])
    control = np.vstack([centroid, centroid + axis_lengths[:, None] * vt])

    volume = abs(np.linalg.det(control[1:] - control[0])) / 6.0
    if volume < COPLANAR_VOLUME_EPS:
        raise DegenerateGeometry(
            f"control points span volume {volume:.3e} m^3; points are (near-)coplanar"
        )

    # Barycentric weights: solve [C^T; 1] a_i = [p_i; 1] for every point.
    M = np.vstack([control.T, np.ones(4)])  # (4, 4)
    rhs = np.vstack([points.T, np.ones(points.shape[0])])  # (4, n)
    weights = np.linalg.solve(M, rhs).T
    return ControlPointSet(control_points=control, weights=weights)


def umeyama_align(points_a: np.ndarray, points_b: np.ndarray) -> Pose:
    """Rigid transform (R, t) minimizing sum ||b_i - (R a_i + t)||^2.

    Classic absolute-orientation solution: SVD of the cross-covariance with a
    determinant sign correction so the result is always a proper rotation.
    Scale is fixed at 1.
    """
    a = np.asarray(points_a, dtype=np.float64)
    b = np.asarray(points_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"point sets differ in shape: {a.shape} vs {b.shape}")
    if a.ndim != 2 or a.shape[1] != 3 or a.shape[0] < 3:
        raise ValueError("need (n, 3) arrays with n >= 3")

    mu_a = a.mean(axis=0)
    mu_b = b.mean(axis=0)
    H = (a - mu_a).T @ (b - mu_b)
    U, svals, Vt = np.linalg.svd(H)
    if svals[1] <= max(svals[0], 1.0) * 1e-12:
        raise DegenerateGeometry("point set is (near-)collinear; rotation is not unique")
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    t = mu_b - R @ mu_a
    return Pose(matrix_to_quat(R), t)


def _distance_residuals(betas: np.ndarray, kernel: np.ndarray, world_dists: np.ndarray):
    """Residuals and Jacobian of the control-point distance constraints.

    kernel is (N, 4, 3): N null-space basis vectors reshaped as candidate
    camera-frame control points.  Residual per pair (a, b):
    ||sum_k beta_k (v_k[a] - v_k[b])||^2 - d_ab^2.
    """
    diffs = np.array([kernel[:, a, :] - kernel[:, b, :] for a, b in _PAIRS])  # (6, N, 3)
    combo = np.einsum("k,pkd->pd", betas, diffs)  # (6, 3)
    residuals = np.einsum("pd,pd->p", combo, combo) - world_dists**2
    jac = 2.0 * np.einsum("pd,pkd->pk", combo, diffs)  # (6, N)
    return residuals, jac


def _initial_betas(kernel: np.ndarray, world_dists: np.ndarray, n_basis: int) -> np.ndarray:
    """Closed-form seed for the distance-constraint unknowns."""
    diffs = np.array([kernel[:, a, :] - kernel[:, b, :] for a, b in _PAIRS])  # (6, N, 3)
    d2 = world_dists**2
    if n_basis == 1:
        dv = diffs[:, 0, :]
        num = float(np.sum(np.linalg.norm(dv, axis=1) * world_dists))
        den = float(np.sum(np.sum(dv * dv, axis=1)))
        return np.array([num / max(den, 1e-18)])
    if n_basis == 2:
        L = np.column_stack(
            [
                np.einsum("pd,pd->p", diffs[:, 0], diffs[:, 0]),
                2.0 * np.einsum("pd,pd->p", diffs[:, 0], diffs[:, 1]),
                np.einsum("pd,pd->p", diffs[:, 1], diffs[:, 1]),
            ]
        )
        b11, b12, b22 = np.linalg.lstsq(L, d2, rcond=None)[0]
        beta1 = np.sqrt(abs(b11))
        beta2 = np.sqrt(abs(b22)) * (1.0 if b12 >= 0 else -1.0)
        return np.array([beta1, beta2])
    # n_basis == 3: six unknowns (b11, b12, b13, b22, b23, b33), six equations.
    L = np.column_stack(
        [
            np.einsum("pd,pd->p", diffs[:, 0], diffs[:, 0]),
            2.0 * np.einsum("pd,pd->p", diffs[:, 0], diffs[:, 1]),
            2.0 * np.einsum("pd,pd->p", diffs[:, 0], diffs[:, 2]),
            np.einsum("pd,pd->p", diffs[:, 1], diffs[:, 1]),
            2.0 * np.einsum("pd,pd->p", diffs[:, 1], diffs[:, 2]),
            np.einsum("pd,pd->p", diffs[:, 2], diffs[:, 2]),
        ]
    )
    sol = np.linalg.lstsq(L, d2, rcond=None)[0]
    b11, b12, b13, b22, _, b33 = sol
    beta1 = np.sqrt(abs(b11))
    beta2 = np.sqrt(abs(b22)) * (1.0 if b12 >= 0 else -1.0)
    beta3 = np.sqrt(abs(b33)) * (1.0 if b13 >= 0 else -1.0)
    return np.array([beta1, beta2, beta3])


_BETA_GN_ITERS = 10


def _refine_betas(betas: np.ndarray, kernel: np.ndarray, world_dists: np.ndarray) -> np.ndarray:
    """Gauss-Newton on the distance constraints, fixed iteration budget."""
    for _ in range(_BETA_GN_ITERS):
        residuals, jac = _distance_residuals(betas, kernel, world_dists)
        step, *_ = np.linalg.lstsq(jac, -residuals, rcond=None)
        betas = betas + step
    return betas


def _mean_reproj_error(pixels: np.ndarray, points: np.ndarray, cam, pose: Pose) -> float:
    w2c = pose.inverse()
    pts_cam = points @ w2c.rotation_matrix().T + w2c.translation
    z = pts_cam[:, 2]
    if np.any(z <= 0):
        return np.inf
    proj = cam.project(pts_cam)
    return float(np.mean(np.linalg.norm(proj - pixels, axis=1)))


def epnp(corrs: list[Correspondence], cam: CameraIntrinsics) -> SolverReport:
    """Control-point PnP on all correspondences (no outlier handling).

    Builds the 2n x 12 homogeneous system tying camera-frame control points
    to the observations, recovers them from the null space (trying kernel
    dimensions 1-3 with Gauss-Newton-refined combination weights), and picks
    the candidate with the lowest reprojection error.
    """
    if len(corrs) < MIN_CORRESPONDENCES:
        raise InsufficientMatches(
            f"epnp needs at least {MIN_CORRESPONDENCES} correspondences, got {len(corrs)}"
        )
    pixels, points = _stack(corrs)
    ctrl = compute_control_points(points)  # raises DegenerateGeometry when coplanar
    alphas = ctrl.weights  # (n, 4)
    n = points.shape[0]

    # Rows: sum_j a_ij * (fx * x_j + (cx - u_i) * z_j) = 0 and the y analog.
    M = np.zeros((2 * n, 12))
    u, v = pixels[:, 0], pixels[:, 1]
    for j in range(4):
        a_j = alphas[:, j]
        M[0::2, 3 * j + 0] = a_j * cam.fx
        M[0::2, 3 * j + 2] = a_j * (cam.cx - u)
        M[1::2, 3 * j + 1] = a_j * cam.fy
        M[1::2, 3 * j + 2] = a_j * (cam.cy - v)

    _, _, Vt = np.linalg.svd(M, full_matrices=True)
    null_basis = Vt[::-1]  # rows ordered by ascending singular value
    world_dists = np.array(
        [np.linalg.norm(ctrl.control_points[a] - ctrl.control_points[b]) for a, b in _PAIRS]
    )

    best: tuple[float, Pose, int] | None = None
    for n_basis in (1, 2, 3):
        kernel = null_basis[:n_basis].reshape(n_basis, 4, 3)
        betas = _initial_betas(kernel, world_dists, n_basis)
        betas = _refine_betas(betas, kernel, world_dists)
        ctrl_cam = np.einsum("k,kij->ij", betas, kernel)  # (4, 3)
        pts_cam = alphas @ ctrl_cam
        if np.sum(pts_cam[:, 2] > 0) < n / 2:
            pts_cam = -pts_cam
        if np.any(pts_cam[:, 2] <= 0):
            continue
        try:
            w2c = umeyama_align(points, pts_cam)
        except DegenerateGeometry:
            continue
        pose = w2c.inverse()
        err = _mean_reproj_error(pixels, points, cam, pose)
        if not np.isfinite(err):
            continue
        if best is None or err < best[0]:
            best = (err, pose, n_basis)

    if best is None:
        raise CheiralityViolation("epnp found no candidate with all points in front of the camera")
    err, pose, _ = best
    return SolverReport(
        pose=pose,
        inlier_count=n,
        mean_reprojection_error=err,
        iterations=_BETA_GN_ITERS,
        converged=True,
    )


def apply_delta(pose: Pose, delta: np.ndarray) -> Pose:
    """Left-multiply `pose` by the rigid perturbation (exp(omega), nu).

    delta packs (omega_x, omega_y, omega_z, nu_x, nu_y, nu_z): rotation first,
    translation second.  The perturbed pose is R' = exp(omega) R and
    t' = exp(omega) t + nu.
    """
    delta = np.asarray(delta, dtype=np.float64).reshape(6)
    dq = quat_from_rotvec(delta[:3])
    R_delta = quat_to_matrix(dq)
    return Pose(quat_multiply(dq, pose.rotation), R_delta @ pose.translation + delta[3:])


def reprojection_residuals(
    corrs: list[Correspondence], cam: CameraIntrinsics, pose: Pose
) -> tuple[np.ndarray, np.ndarray]:
    """Pixel residuals and their Jacobian for a camera-to-world pose.

    Residual per correspondence: observed - projected, stacked to a (2n,)
    vector.  The (2n, 6) Jacobian is taken with respect to the 6-vector
    perturbation used by ``apply_delta`` (3 rotation, 3 translation),
    evaluated at delta = 0.
    """
    if not corrs:
        raise ValueError("no correspondences")
    pixels, points = _stack(corrs)
    R = pose.rotation_matrix()
    Rwc = R.T
    pts_cam = (points - pose.translation) @ R
    z = pts_cam[:, 2]
    if np.any(z <= cam.near):
        raise CheiralityViolation("a correspondence projects behind the near plane")

    proj = cam.project(pts_cam)
    residuals = (pixels - proj).reshape(-1)

    # dq/d(omega) = R^T [P]_x, dq/d(nu) = -R^T  (q = camera-frame point).
    n = points.shape[0]
    P = points
    skew = np.zeros((n, 3, 3))
    skew[:, 0, 1] = -P[:, 2]
    skew[:, 0, 2] = P[:, 1]
    skew[:, 1, 0] = P[:, 2]
    skew[:, 1, 2] = -P[:, 0]
    skew[:, 2, 0] = -P[:, 1]
    skew[:, 2, 1] = P[:, 0]
    dq_domega = np.einsum("ij,njk->nik", Rwc, skew)
    dq_dnu = -Rwc  # constant across points

    inv_z = 1.0 / z
    dproj_dq = np.zeros((n, 2, 3))
    dproj_dq[:, 0, 0] = cam.fx * inv_z
    dproj_dq[:, 0, 2] = -cam.fx * pts_cam[:, 0] * inv_z**2
    dproj_dq[:, 1, 1] = cam.fy * inv_z
    dproj_dq[:, 1, 2] = -cam.fy * pts_cam[:, 1] * inv_z**2

    J = np.empty((n, 2, 6))
    J[:, :, :3] = -dproj_dq @ dq_domega
    J[:, :, 3:] = -dproj_dq @ dq_dnu
    return residuals, J.reshape(2 * n, 6)


@dataclass(frozen=True)
class BundleAdjustConfig:
    """Levenberg-Marquardt settings for pose-only refinement."""

    max_iters: int = 50
    huber_delta: float | None = 2.0  # pixels; None disables the robust loss
    init_damping: float = 1e-3
    step_tol: float = 1e-10
    cost_tol: float = 1e-12


def _robust_cost_and_weights(
    residuals: np.ndarray, huber_delta: float | None
) -> tuple[float, np.ndarray]:
    """Huber cost and IRLS weights per correspondence (residuals are (2n,))."""
    errs = np.linalg.norm(residuals.reshape(-1, 2), axis=1)
    if huber_delta is None:
        return float(0.5 * np.sum(errs**2)), np.ones_like(errs)
    small = errs <= huber_delta
    cost = float(
        np.sum(np.where(small, 0.5 * errs**2, huber_delta * (errs - 0.5 * huber_delta)))
    )
    weights = np.where(small, 1.0, huber_delta / np.maximum(errs, 1e-12))
    return cost, weights


def refine_ba(
    corrs: list[Correspondence],
    cam: CameraIntrinsics,
    init_pose: Pose,
    config: BundleAdjustConfig | None = None,
) -> SolverReport:
    """Pose-only bundle adjustment by Levenberg-Marquardt.

    Minimizes the (optionally Huber-robustified) reprojection error starting
    from ``init_pose``.  Correspondences behind the camera at the initial
    pose are excluded up front (at least 6 must remain); steps that raise the
    cost or push a kept point behind the camera are rejected and the damping
    increased, so the accepted-step cost is monotonically non-increasing.
    """
    config = config or BundleAdjustConfig()
    if len(corrs) < MIN_CORRESPONDENCES:
        raise InsufficientMatches(
            f"refine_ba needs at least {MIN_CORRESPONDENCES} correspondences, got {len(corrs)}"
        )

    pixels, points = _stack(corrs)
    w2c = init_pose.inverse()
    z = (points @ w2c.rotation_matrix().T + w2c.translation)[:, 2]
    visible = z > cam.near
    if int(np.count_nonzero(visible)) < MIN_CORRESPONDENCES:
        raise CheiralityViolation(
            f"initial pose sees only {int(np.count_nonzero(visible))} correspondences"
        )
    active = [c for c, keep in zip(corrs, visible) if keep]

    pose = init_pose
    residuals, J = reprojection_residuals(active, cam, pose)
    cost, weights = _robust_cost_and_weights(residuals, config.huber_delta)

    damping = config.init_damping
    iterations = 0
    converged = False
    for _ in range(config.max_iters):
        iterations += 1
        w2 = np.repeat(weights, 2)
        JTJ = J.T @ (J * w2[:, None])
        g = J.T @ (w2 * residuals)

        accepted = False
        for _ in range(25):
            H = JTJ + damping * np.eye(6)
            try:
                step = np.linalg.solve(H, -g)
            except np.linalg.LinAlgError:
                damping *= 10.0
                continue
            candidate = apply_delta(pose, step)
            try:
                cand_res, cand_J = reprojection_residuals(active, cam, candidate)
            except CheiralityViolation:
                damping *= 10.0
                continue
            cand_cost, cand_weights = _robust_cost_and_weights(cand_res, config.huber_delta)
            if cand_cost <= cost:
                step_norm = float(np.linalg.norm(step))
                cost_drop = cost - cand_cost
                pose, residuals, J = candidate, cand_res, cand_J
                cost, weights = cand_cost, cand_weights
                damping = max(damping / 3.0, 1e-12)
                accepted = True
                if step_norm < config.step_tol or cost_drop < config.cost_tol:
                    converged = True
                break
            damping *= 10.0
        if not accepted:
            # No damping level improved the cost: gradient is numerically zero.
            converged = True
            break
        if converged:
            break

    errs = np.linalg.norm(residuals.reshape(-1, 2), axis=1)
    return SolverReport(
        pose=pose,
        inlier_count=len(active),
        mean_reprojection_error=float(errs.mean()),
        iterations=iterations,
        converged=converged,
    )


@dataclass(frozen=True)
class RansacConfig:
    """Settings for the robust PnP solve."""

    iterations: int = 256
    inlier_threshold: float = 3.0  # pixels
    min_inliers: int = 6
    seed: int = 0
    refine: BundleAdjustConfig = BundleAdjustConfig()


def _reproj_errors(pixels: np.ndarray, points: np.ndarray, cam, pose: Pose) -> np.ndarray:
    """Per-correspondence reprojection error; inf where behind the camera."""
    w2c = pose.inverse()
    pts_cam = points @ w2c.rotation_matrix().T + w2c.translation
    z = pts_cam[:, 2]
    errs = np.full(points.shape[0], np.inf)
    front = z > cam.near
    if np.any(front):
        proj = cam.project(pts_cam[front])
        errs[front] = np.linalg.norm(proj - pixels[front], axis=1)
    return errs


def solve_pnp(
    corrs: list[Correspondence],
    cam: CameraIntrinsics,
    config: RansacConfig | None = None,
) -> SolverReport:
    """Robust pose solve: seeded RANSAC over minimal EPnP + LM refinement.

    The correspondence list is canonicalized (sorted) before sampling, so the
    result is invariant to input order for a fixed seed.  Runs the full,
    fixed iteration budget for determinism.
    """
    config = config or RansacConfig()
    if len(corrs) < MIN_CORRESPONDENCES:
        raise InsufficientMatches(
            f"solve_pnp needs at least {MIN_CORRESPONDENCES} correspondences, got {len(corrs)}"
        )

    pixels, points = _stack(corrs)
    order = np.lexsort(
        (points[:, 2], points[:, 1], points[:, 0], pixels[:, 1], pixels[:, 0])
    )
    corrs_sorted = [corrs[i] for i in order]
    pixels, points = pixels[order], points[order]
    n = len(corrs_sorted)

    rng = np.random.default_rng(config.seed)
    best_inliers: np.ndarray | None = None
    best_pose: Pose | None = None
    best_score = (-1, np.inf)  # (inlier count, mean inlier error)
    for _ in range(config.iterations):
        sample = rng.choice(n, size=MIN_CORRESPONDENCES, replace=False)
        try:
            hypothesis = epnp([corrs_sorted[i] for i in sample], cam)
        except (DegenerateGeometry, CheiralityViolation):
            continue
        errs = _reproj_errors(pixels, points, cam, hypothesis.pose)
        inliers = errs < config.inlier_threshold
        count = int(np.count_nonzero(inliers))
        if count < config.min_inliers:
            continue
        mean_err = float(errs[inliers].mean())
        # Prefer more inliers; break ties on lower mean inlier error.
        if count > best_score[0] or (count == best_score[0] and mean_err < best_score[1]):
            best_score = (count, mean_err)
            best_inliers = inliers
            best_pose = hypothesis.pose

    if best_inliers is None or best_pose is None:
        raise NoConsensus(
            f"no hypothesis reached {config.min_inliers} inliers at "
            f"{config.inlier_threshold} px over {config.iterations} iterations"
        )

    inlier_corrs = [c for c, keep in zip(corrs_sorted, best_inliers) if keep]
    try:
        init = epnp(inlier_corrs, cam).pose
    except (DegenerateGeometry, CheiralityViolation, InsufficientMatches):
        init = best_pose  # refine straight from the winning hypothesis
    refined = refine_ba(inlier_corrs, cam, init, config.refine)

    final_errs = _reproj_errors(pixels, points, cam, refined.pose)
    final_inliers = final_errs < config.inlier_threshold
    mean_err = float(final_errs[final_inliers].mean()) if np.any(final_inliers) else np.inf
    return SolverReport(
        pose=refined.pose,
        inlier_count=int(np.count_nonzero(final_inliers)),
        mean_reprojection_error=mean_err,
        iterations=refined.iterations,
        converged=refined.converged,
    )
