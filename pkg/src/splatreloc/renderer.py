"""CPU rasterizer for Gaussian splat scenes.

Projection follows the EWA splatting recipe: the world covariance
R diag(s^2) R^T is rotated into the camera frame and pushed through the
pinhole Jacobian

    J = [[fx/z, 0, -fx*x/z^2],
         [0, fy/z, -fy*y/z^2]],

giving a 2x2 screen-space covariance, regularized by +0.3 px^2 on the
diagonal.  Compositing walks Gaussians front to back, accumulating

    C += c_i * alpha_i * T,   T *= (1 - alpha_i),

and finishes with sky blending rgb = C + (1 - O) * sky.  The depth channel is
the alpha-weighted mean of the contributing Gaussians' center depths,
normalized by accumulated opacity, and is only marked valid where the
accumulated opacity reaches 0.5 (zero elsewhere, meaning "sky").
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ImageFormatError
from .geometry import CameraIntrinsics, Pose
from .scene import Gaussian3D, SplatScene

#: Diagonal regularization added to every screen-space covariance (px^2).
COV2D_REGULARIZATION = 0.3
#: Gaussians are cut off beyond 3 sigma of screen-space extent.
EXTENT_SIGMA = 3.0
#: Per-pixel compositing stops once transmittance drops below this.
TRANSMITTANCE_FLOOR = 1e-4
#: Accumulated opacity needed before the depth channel counts as valid.
DEPTH_VALID_OPACITY = 0.5


@dataclass(frozen=True)
class ProjectedGaussian:
    """Screen-space footprint of one Gaussian."""

    mean2d: np.ndarray  # (2,) pixel center
    cov2d: np.ndarray  # (2, 2) screen covariance, regularized
    depth: float  # camera-frame z of the center
    opacity: float
    color: np.ndarray  # (3,)


@dataclass
class RenderOutput:
    """Rasterized RGB, depth, and accumulated-opacity images."""

    rgb: np.ndarray  # (H, W, 3) in [0, 1]
    depth: np.ndarray  # (H, W) meters; 0 where sky / low opacity
    opacity: np.ndarray  # (H, W) accumulated alpha in [0, 1]


def _quats_to_matrices(quats: np.ndarray) -> np.ndarray:
    """Batch of (N, 4) wxyz unit quaternions to (N, 3, 3) rotation matrices."""
    w, x, y, z = quats[:, 0], quats[:, 1], quats[:, 2], quats[:, 3]
    R = np.empty((quats.shape[0], 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def _project_arrays(
    means: np.ndarray,
    quats: np.ndarray,
    scales: np.ndarray,
    pose: Pose,
    cam: CameraIntrinsics,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Project all Gaussians; returns (keep_mask, mean2d, cov2d, depth, radius).

    Culls Gaussians behind the near plane and those whose 3-sigma screen
    extent misses the image entirely.  Entries for culled Gaussians are
    undefined and must be ignored via the mask.
    """
    n = means.shape[0]
    if n == 0:
        empty = np.zeros(0)
        return np.zeros(0, dtype=bool), np.zeros((0, 2)), np.zeros((0, 2, 2)), empty, empty

    R_c2w = pose.rotation_matrix()
    pts_cam = (means - pose.translation) @ R_c2w  # row-wise R^T (p - t)
    z = pts_cam[:, 2]
    keep = z > cam.near

    z_safe = np.where(keep, z, 1.0)
    inv_z = 1.0 / z_safe
    u = cam.fx * pts_cam[:, 0] * inv_z + cam.cx
    v = cam.fy * pts_cam[:, 1] * inv_z + cam.cy
    mean2d = np.column_stack([u, v])

    # World covariance rotated into the camera frame.
    Rg = _quats_to_matrices(quats)
    RS = Rg * scales[:, None, :]  # R @ diag(s)
    cov_world = RS @ np.transpose(RS, (0, 2, 1))
    Rwc = R_c2w.T
    cov_cam = np.einsum("ij,njk,lk->nil", Rwc, cov_world, Rwc)

    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = cam.fx * inv_z
    J[:, 0, 2] = -cam.fx * pts_cam[:, 0] * inv_z**2
    J[:, 1, 1] = cam.fy * inv_z
    J[:, 1, 2] = -cam.fy * pts_cam[:, 1] * inv_z**2
    cov2d = J @ cov_cam @ np.transpose(J, (0, 2, 1))
    cov2d[:, 0, 0] += COV2D_REGULARIZATION
    cov2d[:, 1, 1] += COV2D_REGULARIZATION

    # 3-sigma radius from the larger eigenvalue of the 2x2 covariance.
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    mid = 0.5 * (a + c)
    disc = np.sqrt(np.maximum(mid**2 - (a * c - b**2), 0.0))
    radius = EXTENT_SIGMA * np.sqrt(np.maximum(mid + disc, 1e-12))

    keep &= (u + radius >= 0.0) & (u - radius <= cam.width - 1)
    keep &= (v + radius >= 0.0) & (v - radius <= cam.height - 1)
    return keep, mean2d, cov2d, z, radius


def project_gaussian(
    gaussian: Gaussian3D, pose: Pose, cam: CameraIntrinsics
) -> ProjectedGaussian | None:
    """Screen-space footprint of one Gaussian, or None if culled."""
    keep, mean2d, cov2d, depth, _ = _project_arrays(
        gaussian.mean[None, :], gaussian.rotation[None, :], gaussian.scale[None, :], pose, cam
    )
    if not keep[0]:
        return None
    return ProjectedGaussian(
        mean2d=mean2d[0],
        cov2d=cov2d[0],
        depth=float(depth[0]),
        opacity=gaussian.opacity,
        color=gaussian.color.copy(),
    )


def render(scene: SplatScene, pose: Pose, cam: CameraIntrinsics) -> RenderOutput:
    """Rasterize the scene from `pose` into RGB, depth, and opacity images."""
    H, W = cam.height, cam.width
    rgb = np.zeros((H, W, 3))
    opacity = np.zeros((H, W))
    depth_sum = np.zeros((H, W))
    trans = np.ones((H, W))

    arrays = scene.arrays()
    keep, mean2d, cov2d, z, radius = _project_arrays(
        arrays["means"], arrays["quats"], arrays["scales"], pose, cam
    )
    idx = np.flatnonzero(keep)
    if idx.size:
        # Front-to-back order with a content-based tie break so the output is
        # independent of the order Gaussians appear in the scene list.
        m = arrays["means"][idx]
        order = np.lexsort((m[:, 0], m[:, 1], m[:, 2], z[idx]))
        idx = idx[order]

        opac = arrays["opacities"]
        colors = arrays["colors"]
        cutoff_q = EXTENT_SIGMA**2
        for i in idx:
            cx, cy = mean2d[i]
            r = radius[i]
            x0 = max(int(np.floor(cx - r)), 0)
            x1 = min(int(np.ceil(cx + r)) + 1, W)
            y0 = max(int(np.floor(cy - r)), 0)
            y1 = min(int(np.ceil(cy + r)) + 1, H)
            if x0 >= x1 or y0 >= y1:
                continue
            T_patch = trans[y0:y1, x0:x1]
            if T_patch.max() < TRANSMITTANCE_FLOOR:
                continue

            a, b, c = cov2d[i, 0, 0], cov2d[i, 0, 1], cov2d[i, 1, 1]
            det = a * c - b * b
            if det <= 0.0:
                continue
            dx = np.arange(x0, x1) - cx
            dy = np.arange(y0, y1) - cy
            # Mahalanobis distance via the inverse covariance (c, -b, a)/det.
            q = (
                c * dx[None, :] ** 2
                - 2.0 * b * dy[:, None] * dx[None, :]
                + a * dy[:, None] ** 2
            ) / det
            g = np.where(q <= cutoff_q, np.exp(-0.5 * q), 0.0)
            alpha = opac[i] * g
            weight = alpha * T_patch
            rgb[y0:y1, x0:x1] += weight[:, :, None] * colors[i]
            opacity[y0:y1, x0:x1] += weight
            depth_sum[y0:y1, x0:x1] += weight * z[i]
            T_patch *= 1.0 - alpha

    rgb += (1.0 - opacity[:, :, None]) * scene.sky_color
    valid = opacity >= DEPTH_VALID_OPACITY
    depth = np.zeros((H, W))
    np.divide(depth_sum, opacity, out=depth, where=valid)
    return RenderOutput(rgb=np.clip(rgb, 0.0, 1.0), depth=depth, opacity=opacity)


def save_ppm(path: str | Path, image: np.ndarray) -> None:
    """Write an RGB float image in [0, 1] as a binary P6 PPM (8-bit)."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError("expected an (H, W, 3) image")
    data = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    header = f"P6\n{image.shape[1]} {image.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + data.tobytes())


def load_ppm(path: str | Path) -> np.ndarray:
    """Read a binary P6 PPM into an (H, W, 3) float image in [0, 1]."""
    raw = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    # Header: magic, width, height, maxval; '#' starts a comment to end of line.
    while len(tokens) < 4 and pos < len(raw):
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if pos > start:
            tokens.append(raw[start:pos])
    if len(tokens) < 4 or tokens[0] != b"P6":
        raise ImageFormatError(f"{path}: not a binary P6 PPM")
    try:
        width, height, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError:
        raise ImageFormatError(f"{path}: malformed PPM header") from None
    if maxval != 255:
        raise ImageFormatError(f"{path}: only maxval 255 is supported")
    pos += 1  # single whitespace after maxval
    expected = width * height * 3
    data = raw[pos : pos + expected]
    if len(data) != expected:
        raise ImageFormatError(f"{path}: truncated pixel data")
    pixels = np.frombuffer(data, dtype=np.uint8).reshape(height, width, 3)
    return pixels.astype(np.float64) / 255.0


def save_depth(path: str | Path, depth: np.ndarray) -> None:
    """Write a depth image as '<w><h><1>' int32 header + float32 data, LE."""
    depth = np.asarray(depth)
    if depth.ndim != 2:
        raise ValueError("expected an (H, W) depth image")
    header = struct.pack("<iii", depth.shape[1], depth.shape[0], 1)
    Path(path).write_bytes(header + depth.astype("<f4").tobytes())


def load_depth(path: str | Path) -> np.ndarray:
    """Read a raw float32 depth dump written by `save_depth`."""
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise ImageFormatError(f"{path}: missing depth header")
    width, height, channels = struct.unpack("<iii", raw[:12])
    if channels != 1 or width <= 0 or height <= 0:
        raise ImageFormatError(f"{path}: bad depth header ({width}x{height}x{channels})")
    expected = width * height * 4
    data = raw[12 : 12 + expected]
    if len(data) != expected:
        raise ImageFormatError(f"{path}: truncated depth data")
    return np.frombuffer(data, dtype="<f4").reshape(height, width).astype(np.float64)
