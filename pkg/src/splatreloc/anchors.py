"""Anchor database: spaced keyframe renders used to coarse-localize queries.

Anchors are trajectory poses subsampled at a metric spacing; each stores its
rendered RGB, rendered depth, and a compact global appearance descriptor.
Retrieval ranks anchors by cosine similarity of that descriptor.

The 192-dim global descriptor concatenates an 8x8 block-mean grayscale
thumbnail (64 values) with a 128-bin gradient-orientation histogram, each
half L2-normalized before the joint normalization, so it is invariant to
uniform brightness scaling.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import TrajectoryTooShort
from .geometry import CameraIntrinsics, Pose, Trajectory
from .renderer import load_depth, load_ppm, render, save_depth, save_ppm
from .scene import SplatScene
from .features import to_grayscale

GLOBAL_DESCRIPTOR_DIM = 192
_THUMB = 8
_ORI_BINS = 128


def global_descriptor(image: np.ndarray) -> np.ndarray:
    """192-dim appearance fingerprint: thumbnail + orientation histogram."""
    gray = to_grayscale(image)
    H, W = gray.shape

    row_edges = np.linspace(0, H, _THUMB + 1).astype(int)
    col_edges = np.linspace(0, W, _THUMB + 1).astype(int)
    thumb = np.empty((_THUMB, _THUMB))
    for r in range(_THUMB):
        for c in range(_THUMB):
            block = gray[row_edges[r] : row_edges[r + 1], col_edges[c] : col_edges[c + 1]]
            thumb[r, c] = block.mean() if block.size else 0.0

    gy, gx = np.gradient(gray)
    mag = np.hypot(gx, gy).ravel()
    ori = np.arctan2(gy, gx).ravel()
    bins = np.floor((ori + np.pi) / (2.0 * np.pi) * _ORI_BINS).astype(int) % _ORI_BINS
    hist = np.bincount(bins, weights=mag, minlength=_ORI_BINS)

    def unit(vec: np.ndarray) -> np.ndarray:
        norm = float(np.linalg.norm(vec))
        return vec / norm if norm > 1e-12 else vec

    descriptor = np.concatenate([unit(thumb.ravel()), unit(hist)])
    return unit(descriptor)


@dataclass(frozen=True)
class AnchorRecord:
    """One keyframe: pose, stored render, and global descriptor."""

    anchor_id: int
    source_index: int  # originating trajectory frame index
    pose: Pose
    rgb: np.ndarray  # (H, W, 3) in [0, 1], quantized to 8-bit levels
    depth: np.ndarray  # (H, W) meters, float32-rounded; 0 marks sky
    descriptor: np.ndarray  # (192,)


@dataclass
class AnchorDatabase:
    """All anchors for one scene plus the camera they were rendered with."""

    camera: CameraIntrinsics
    spacing: float
    records: list[AnchorRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)


def _quantize_record(
    anchor_id: int, source_index: int, pose: Pose, rgb: np.ndarray, depth: np.ndarray
) -> AnchorRecord:
    """Snap images to their on-disk precision so save/load round-trips exactly."""
    rgb_q = np.clip(np.round(rgb * 255.0), 0, 255) / 255.0
    depth_q = depth.astype(np.float32).astype(np.float64)
    return AnchorRecord(
        anchor_id=anchor_id,
        source_index=source_index,
        pose=pose,
        rgb=rgb_q,
        depth=depth_q,
        descriptor=global_descriptor(rgb_q),
    )


def build_anchor_db(
    scene: SplatScene,
    trajectory: Trajectory,
    cam: CameraIntrinsics,
    spacing: float,
) -> AnchorDatabase:
    """Subsample the trajectory at `spacing` meters and render each anchor.

    The first pose always becomes an anchor; each subsequent pose is kept
    once it is at least `spacing` from the last kept one.  Gaps between
    consecutive anchors must stay within [0.5, 2] x spacing, which fails only
    when the input trajectory itself is sparser than the requested spacing.
    """
    if spacing <= 0:
        raise ValueError("anchor spacing must be positive")
    if len(trajectory) == 0:
        raise TrajectoryTooShort("trajectory is empty")
    if trajectory.path_length() < spacing:
        raise TrajectoryTooShort(
            f"trajectory spans {trajectory.path_length():.3f} m < spacing {spacing} m"
        )

    picked: list[tuple[int, Pose]] = []
    last_t: np.ndarray | None = None
    for index, pose in trajectory:
        if last_t is None or float(np.linalg.norm(pose.translation - last_t)) >= spacing:
            picked.append((index, pose))
            last_t = pose.translation

    gaps = [
        float(np.linalg.norm(b[1].translation - a[1].translation))
        for a, b in zip(picked, picked[1:])
    ]
    for gap in gaps:
        if not (0.5 * spacing <= gap <= 2.0 * spacing):
            raise ValueError(
                f"anchor gap {gap:.3f} m outside [{0.5 * spacing}, {2.0 * spacing}]; "
                "trajectory is too sparse for the requested spacing"
            )

    records = []
    for anchor_id, (index, pose) in enumerate(picked):
        out = render(scene, pose, cam)
        records.append(_quantize_record(anchor_id, index, pose, out.rgb, out.depth))
    return AnchorDatabase(camera=cam, spacing=spacing, records=records)


def retrieve(query_image: np.ndarray, db: AnchorDatabase) -> int:
    """Anchor id with the highest descriptor cosine similarity (ties: lowest id)."""
    if not db.records:
        raise ValueError("anchor database is empty")
    q = global_descriptor(query_image)
    sims = np.array([float(q @ rec.descriptor) for rec in db.records])
    return int(np.argmax(sims))


def save_anchor_db(path: str | Path, db: AnchorDatabase) -> None:
    """Persist to a directory: index.json plus per-anchor PPM and depth files."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for rec in db.records:
        rgb_name = f"anchor_{rec.anchor_id:03d}.ppm"
        depth_name = f"anchor_{rec.anchor_id:03d}.depth"
        save_ppm(root / rgb_name, rec.rgb)
        save_depth(root / depth_name, rec.depth)
        entries.append(
            {
                "id": rec.anchor_id,
                "source_index": rec.source_index,
                "pose": [float(v) for v in rec.pose.as_array()],
                "rgb": rgb_name,
                "depth": depth_name,
                "descriptor": [float(v) for v in rec.descriptor],
            }
        )
    cam = db.camera
    index = {
        "format": "anchordb v1",
        "spacing": db.spacing,
        "camera": {
            "fx": cam.fx,
            "fy": cam.fy,
            "cx": cam.cx,
            "cy": cam.cy,
            "width": cam.width,
            "height": cam.height,
            "near": cam.near,
        },
        "anchors": entries,
    }
    (root / "index.json").write_text(json.dumps(index, sort_keys=True, indent=2) + "\n")


def load_anchor_db(path: str | Path) -> AnchorDatabase:
    """Reload a directory written by ``save_anchor_db``."""
    root = Path(path)
    index = json.loads((root / "index.json").read_text())
    if index.get("format") != "anchordb v1":
        raise ValueError(f"{root}: not an anchor database (format {index.get('format')!r})")
    c = index["camera"]
    cam = CameraIntrinsics(
        fx=c["fx"], fy=c["fy"], cx=c["cx"], cy=c["cy"],
        width=c["width"], height=c["height"], near=c["near"],
    )
    records = []
    for entry in index["anchors"]:
        records.append(
            AnchorRecord(
                anchor_id=entry["id"],
                source_index=entry["source_index"],
                pose=Pose.from_array(np.array(entry["pose"])),
                rgb=load_ppm(root / entry["rgb"]),
                depth=load_depth(root / entry["depth"]),
                descriptor=np.array(entry["descriptor"]),
            )
        )
    records.sort(key=lambda r: r.anchor_id)
    return AnchorDatabase(camera=cam, spacing=index["spacing"], records=records)
