"""Gaussian splat scenes: container types, file format, synthetic generation.

Scene file layout (ASCII, whitespace separated):

    gsplat v1 <count>
    sky <r> <g> <b>
    <mx> <my> <mz> <qw> <qx> <qy> <qz> <sx> <sy> <sz> <opacity> <r> <g> <b>
    ...

The ``sky`` line is optional and defaults to black.  Each record holds the
Gaussian mean (m), orientation quaternion (q, wxyz), per-axis standard
deviations (s, meters), opacity in (0, 1], and RGB color in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import SplatFormatError
from .geometry import CameraIntrinsics, Pose, Trajectory, look_at, quat_normalize, quat_to_matrix

RECORD_FIELDS = 14

#: Camera used by the synthetic generator's visibility guarantee and by the
#: command-line defaults: QVGA pinhole with a ~65 degree horizontal FOV.
DEFAULT_CAMERA = CameraIntrinsics(fx=250.0, fy=250.0, cx=160.0, cy=120.0, width=320, height=240)


@dataclass(frozen=True)
class Gaussian3D:
    """One anisotropic 3D Gaussian primitive."""

    mean: np.ndarray  # (3,) world position
    rotation: np.ndarray  # unit quaternion (w, x, y, z)
    scale: np.ndarray  # (3,) per-axis standard deviations, meters, > 0
    opacity: float  # (0, 1]
    color: np.ndarray  # (3,) RGB in [0, 1]

    def __post_init__(self) -> None:
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float64).reshape(3))
        object.__setattr__(self, "rotation", quat_normalize(self.rotation))
        scale = np.asarray(self.scale, dtype=np.float64).reshape(3)
        if np.any(scale <= 0):
            raise ValueError("gaussian scale components must be positive")
        object.__setattr__(self, "scale", scale)
        if not 0.0 < self.opacity <= 1.0:
            raise ValueError("gaussian opacity must lie in (0, 1]")
        color = np.asarray(self.color, dtype=np.float64).reshape(3)
        if np.any(color < 0.0) or np.any(color > 1.0):
            raise ValueError("gaussian color must lie in [0, 1]")
        object.__setattr__(self, "color", color)

    def covariance(self) -> np.ndarray:
        """World-frame 3x3 covariance R diag(s^2) R^T."""
        R = quat_to_matrix(self.rotation)
        return R @ np.diag(self.scale**2) @ R.T


@dataclass
class SplatScene:
    """A list of Gaussian primitives plus a background sky color."""

    gaussians: list[Gaussian3D] = field(default_factory=list)
    sky_color: np.ndarray = field(default_factory=lambda: np.zeros(3))
    _arrays_cache: dict | None = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        sky = np.asarray(self.sky_color, dtype=np.float64).reshape(3)
        if np.any(sky < 0.0) or np.any(sky > 1.0):
            raise ValueError("sky color must lie in [0, 1]")
        self.sky_color = sky

    def __len__(self) -> int:
        return len(self.gaussians)

    def arrays(self) -> dict[str, np.ndarray]:
        """Stack all primitives into flat arrays (means, quats, scales, ...).

        Cached after the first call: scenes are treated as immutable once
        built, which keeps repeated rendering of large scenes cheap.
        """
        if self._arrays_cache is not None and len(self._arrays_cache["opacities"]) == len(self):
            return self._arrays_cache
        n = len(self.gaussians)
        if n == 0:
            cache = {
                "means": np.zeros((0, 3)),
                "quats": np.zeros((0, 4)),
                "scales": np.zeros((0, 3)),
                "opacities": np.zeros(0),
                "colors": np.zeros((0, 3)),
            }
        else:
            cache = {
                "means": np.array([g.mean for g in self.gaussians]),
                "quats": np.array([g.rotation for g in self.gaussians]),
                "scales": np.array([g.scale for g in self.gaussians]),
                "opacities": np.array([g.opacity for g in self.gaussians]),
                "colors": np.array([g.color for g in self.gaussians]),
            }
        self._arrays_cache = cache
        return cache


def save_splat_scene(path: str | Path, scene: SplatScene) -> None:
    """Write a scene in the ``gsplat v1`` ASCII format."""
    lines = [f"gsplat v1 {len(scene.gaussians)}"]
    lines.append("sky " + " ".join(repr(float(v)) for v in scene.sky_color))
    for g in scene.gaussians:
        record = np.concatenate([g.mean, g.rotation, g.scale, [g.opacity], g.color])
        lines.append(" ".join(repr(float(v)) for v in record))
    Path(path).write_text("\n".join(lines) + "\n")


def _parse_record(fields: list[str], index: int, path: str | Path) -> Gaussian3D:
    if len(fields) != RECORD_FIELDS:
        raise SplatFormatError(
            f"{path}: record {index}: expected {RECORD_FIELDS} fields, got {len(fields)}"
        )
    try:
        values = np.array([float(f) for f in fields])
    except ValueError as exc:
        raise SplatFormatError(f"{path}: record {index}: {exc}") from None
    if not np.all(np.isfinite(values)):
        raise SplatFormatError(f"{path}: record {index}: non-finite value")
    if np.any(values[7:10] <= 0.0):
        raise SplatFormatError(f"{path}: record {index}: scale must be positive")
    if not 0.0 < values[10] <= 1.0:
        raise SplatFormatError(f"{path}: record {index}: opacity must lie in (0, 1]")
    if np.any(values[11:14] < 0.0) or np.any(values[11:14] > 1.0):
        raise SplatFormatError(f"{path}: record {index}: color must lie in [0, 1]")
    return Gaussian3D(
        mean=values[0:3],
        rotation=values[3:7],
        scale=values[7:10],
        opacity=float(values[10]),
        color=values[11:14],
    )


def load_splat_scene(path: str | Path) -> SplatScene:
    """Read a ``gsplat v1`` scene file, validating every record."""
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not lines:
        raise SplatFormatError(f"{path}: empty file")
    header = lines[0].split()
    if len(header) != 3 or header[0] != "gsplat" or header[1] != "v1":
        raise SplatFormatError(f"{path}: bad header {lines[0]!r}")
    try:
        count = int(header[2])
    except ValueError:
        raise SplatFormatError(f"{path}: bad header count {header[2]!r}") from None
    if count < 0:
        raise SplatFormatError(f"{path}: negative count in header")

    body = lines[1:]
    sky = np.zeros(3)
    if body and body[0].split()[0] == "sky":
        sky_fields = body[0].split()[1:]
        if len(sky_fields) != 3:
            raise SplatFormatError(f"{path}: sky line must have 3 components")
        try:
            sky = np.array([float(f) for f in sky_fields])
        except ValueError as exc:
            raise SplatFormatError(f"{path}: sky line: {exc}") from None
        if not np.all(np.isfinite(sky)) or np.any(sky < 0.0) or np.any(sky > 1.0):
            raise SplatFormatError(f"{path}: sky color must lie in [0, 1]")
        body = body[1:]

    if len(body) != count:
        raise SplatFormatError(f"{path}: header promises {count} records, found {len(body)}")
    gaussians = [_parse_record(line.split(), i, path) for i, line in enumerate(body)]
    return SplatScene(gaussians=gaussians, sky_color=sky)


@dataclass(frozen=True)
class SyntheticSceneConfig:
    """Parameters for the random scene / trajectory generator."""

    n_gaussians: int = 4000
    extent: float = 5.0  # half-width of the cube holding the Gaussian means
    trajectory_length: float = 12.0  # metric length of the camera path
    anchor_spacing: float = 3.0  # target spacing for downstream anchor maps

    def __post_init__(self) -> None:
        if self.n_gaussians < 1:
            raise ValueError("n_gaussians must be >= 1")
        if self.extent <= 0 or self.trajectory_length <= 0 or self.anchor_spacing <= 0:
            raise ValueError("extent, trajectory_length, anchor_spacing must be positive")


#: Generator bounds shared with tests: opacity and per-axis scale ranges.
OPACITY_RANGE = (0.5, 1.0)
SCALE_RANGE = (0.05, 0.5)
_MIN_VISIBLE = 50


def _count_in_frustum(means: np.ndarray, pose: Pose, cam: CameraIntrinsics) -> int:
    """Number of means with positive depth that project inside the image."""
    R = pose.rotation_matrix()
    pts_cam = (means - pose.translation) @ R
    z = pts_cam[:, 2]
    front = z > cam.near
    if not np.any(front):
        return 0
    uv = cam.project(pts_cam[front])
    return int(np.count_nonzero(cam.contains(uv)))


def generate_synthetic_scene(
    seed: int, config: SyntheticSceneConfig | None = None
) -> tuple[SplatScene, Trajectory]:
    """Deterministic random scene plus a ground-truth camera trajectory.

    Gaussian means are uniform inside the +/- extent cube around the origin;
    opacities lie in [0.5, 1.0] and per-axis scales in [0.05, 0.5] m.  The
    camera path is a straight line offset from the cloud, every pose aimed at
    the cloud center, so each pose keeps at least min(50, n) Gaussians inside
    the default camera frustum.
    """
    config = config or SyntheticSceneConfig()
    rng = np.random.default_rng(seed)

    n = config.n_gaussians
    means = rng.uniform(-config.extent, config.extent, size=(n, 3))
    quats = rng.normal(size=(n, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    scales = rng.uniform(SCALE_RANGE[0], SCALE_RANGE[1], size=(n, 3))
    opacities = rng.uniform(OPACITY_RANGE[0], OPACITY_RANGE[1], size=n)
    colors = rng.uniform(0.0, 1.0, size=(n, 3))
    sky = rng.uniform(0.0, 1.0, size=3)

    gaussians = [
        Gaussian3D(means[i], quats[i], scales[i], float(opacities[i]), colors[i])
        for i in range(n)
    ]
    scene = SplatScene(gaussians=gaussians, sky_color=sky)

    # Straight path parallel to x at a stand-off distance, each pose looking at
    # the cloud center.  The stand-off keeps the whole cube in front of the
    # near plane from every pose while staying close enough that visible
    # depths span a wide range, which keeps pose solving well conditioned.
    standoff = 1.6 * config.extent
    step = config.anchor_spacing / 6.0
    n_poses = max(2, int(round(config.trajectory_length / step)) + 1)
    xs = np.linspace(-config.trajectory_length / 2.0, config.trajectory_length / 2.0, n_poses)
    trajectory = Trajectory()
    for i, x in enumerate(xs):
        pose = look_at(np.array([x, 0.0, -standoff]), np.zeros(3))
        trajectory.append(i, pose)

    required = min(_MIN_VISIBLE, n)
    for idx, pose in trajectory:
        visible = _count_in_frustum(means, pose, DEFAULT_CAMERA)
        if visible < required:
            raise RuntimeError(
                f"synthetic pose {idx} sees only {visible} Gaussians (< {required})"
            )
    return scene, trajectory
