"""Feature detection and matching between a query image and a rendered view.

The built-in detector is a multi-scale Harris corner detector with greedy
non-maximum suppression.  Descriptors are SIFT-like 128-vectors: a 4x4 grid
of 8-bin gradient-orientation histograms sampled around the keypoint at the
detection scale, L2-normalized.  Matching is mutual nearest neighbor with a
ratio test; confidence is 1 - (best / second-best distance).

An oracle matcher is provided for controlled experiments: it manufactures
ground-truth correspondences from rendered depth and known poses, with
configurable pixel noise and outlier contamination.

Match-exchange file format (ASCII):

    matches v1 <query_w> <query_h> <ref_w> <ref_h> <count>
    <u_query> <v_query> <u_ref> <v_ref> <confidence>
    ...
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import MatchFileError
from .geometry import CameraIntrinsics, Pose

MIN_IMAGE_DIM = 32
DESCRIPTOR_DIM = 128


@dataclass(frozen=True)
class Keypoint:
    """A detected interest point with detection scale and strength."""

    position: np.ndarray  # (2,) sub-pixel (u, v)
    scale: float  # blur sigma at which the corner was found
    score: float  # normalized response in [0, 1]


@dataclass(frozen=True)
class FeatureMatch:
    """One query-to-reference pixel correspondence."""

    pixel_query: np.ndarray  # (2,) in the query image
    pixel_ref: np.ndarray  # (2,) in the reference (rendered) image
    confidence: float  # in [0, 1]

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "pixel_query", np.asarray(self.pixel_query, dtype=np.float64).reshape(2)
        )
        object.__setattr__(
            self, "pixel_ref", np.asarray(self.pixel_ref, dtype=np.float64).reshape(2)
        )
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError("match confidence must lie in [0, 1]")


@dataclass(frozen=True)
class DetectorConfig:
    """Knobs for the Harris detector and descriptor extraction."""

    scales: tuple[float, ...] = (1.0, 2.0, 4.0)
    harris_k: float = 0.04
    rel_threshold: float = 0.01  # keep responses above rel_threshold * max
    abs_threshold: float = 1e-10
    nms_radius: float = 4.0
    max_keypoints: int = 2048


@dataclass(frozen=True)
class MatcherConfig:
    """Knobs for descriptor matching."""

    ratio: float = 0.8
    mutual: bool = True


def to_grayscale(image: np.ndarray) -> np.ndarray:
    """Luminance of an (H, W, 3) image, or pass (H, W) through unchanged."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        return image
    return 0.299 * image[:, :, 0] + 0.587 * image[:, :, 1] + 0.114 * image[:, :, 2]


def _harris_response(gray: np.ndarray, sigma: float, k: float) -> np.ndarray:
    """Harris corner response det(M) - k * trace(M)^2 at blur scale sigma."""
    smoothed = gaussian_filter(gray, sigma, mode="nearest")
    gy, gx = np.gradient(smoothed)
    sxx = gaussian_filter(gx * gx, 1.5 * sigma, mode="nearest")
    sxy = gaussian_filter(gx * gy, 1.5 * sigma, mode="nearest")
    syy = gaussian_filter(gy * gy, 1.5 * sigma, mode="nearest")
    return (sxx * syy - sxy * sxy) - k * (sxx + syy) ** 2


def _subpixel_refine(response: np.ndarray, row: int, col: int) -> np.ndarray:
    """Quadratic peak interpolation, clamped to half a pixel per axis."""
    u, v = float(col), float(row)
    if 0 < col < response.shape[1] - 1:
        left, mid, right = response[row, col - 1], response[row, col], response[row, col + 1]
        denom = left - 2.0 * mid + right
        if abs(denom) > 1e-12:
            u += float(np.clip(0.5 * (left - right) / denom, -0.5, 0.5))
    if 0 < row < response.shape[0] - 1:
        top, mid, bot = response[row - 1, col], response[row, col], response[row + 1, col]
        denom = top - 2.0 * mid + bot
        if abs(denom) > 1e-12:
            v += float(np.clip(0.5 * (top - bot) / denom, -0.5, 0.5))
    return np.array([u, v])


def _describe(
    gx: np.ndarray, gy: np.ndarray, keypoint_uv: np.ndarray, sigma: float
) -> np.ndarray | None:
    """128-dim gradient-orientation patch descriptor (4x4 cells x 8 bins).

    Samples a 16x16 grid spaced by the detection sigma around the keypoint,
    using bilinear interpolation of the precomputed image gradients.  Returns
    None when the support window leaves the image or the patch is flat.
    """
    H, W = gx.shape
    u0, v0 = keypoint_uv
    offsets = (np.arange(16) - 7.5) * sigma
    us = u0 + offsets[None, :] + np.zeros((16, 1))
    vs = v0 + offsets[:, None] + np.zeros((1, 16))
    if us.min() < 0 or us.max() > W - 2 or vs.min() < 0 or vs.max() > H - 2:
        return None

    uf = np.floor(us).astype(int)
    vf = np.floor(vs).astype(int)
    au = us - uf
    av = vs - vf

    def sample(img: np.ndarray) -> np.ndarray:
        return (
            img[vf, uf] * (1 - au) * (1 - av)
            + img[vf, uf + 1] * au * (1 - av)
            + img[vf + 1, uf] * (1 - au) * av
            + img[vf + 1, uf + 1] * au * av
        )

    gx_s = sample(gx)
    gy_s = sample(gy)
    mag = np.hypot(gx_s, gy_s)
    ori = np.arctan2(gy_s, gx_s)  # [-pi, pi]

    bins = np.floor((ori + np.pi) / (2.0 * np.pi) * 8.0).astype(int) % 8
    desc = np.zeros((4, 4, 8))
    for block_row in range(4):
        for block_col in range(4):
            sub_bins = bins[block_row * 4 : block_row * 4 + 4, block_col * 4 : block_col * 4 + 4]
            sub_mag = mag[block_row * 4 : block_row * 4 + 4, block_col * 4 : block_col * 4 + 4]
            desc[block_row, block_col] = np.bincount(
                sub_bins.ravel(), weights=sub_mag.ravel(), minlength=8
            )
    flat = desc.reshape(-1)
    norm = float(np.linalg.norm(flat))
    if norm < 1e-12:
        return None
    return flat / norm


def detect_and_describe(
    image: np.ndarray, config: DetectorConfig | None = None
) -> tuple[list[Keypoint], np.ndarray]:
    """Detect Harris keypoints and compute their descriptors.

    Returns keypoints sorted by descending score (ties broken by position)
    and an (N, 128) descriptor array aligned with the keypoint list.
    """
    config = config or DetectorConfig()
    gray = to_grayscale(image)
    if min(gray.shape) < MIN_IMAGE_DIM:
        raise ValueError(
            f"image must be at least {MIN_IMAGE_DIM}px on each side, got {gray.shape}"
        )

    candidates: list[tuple[float, float, float, np.ndarray]] = []  # score, v, u, (u, v, sigma)
    global_max = 0.0
    responses = {}
    for sigma in config.scales:
        resp = _harris_response(gray, sigma, config.harris_k)
        responses[sigma] = resp
        global_max = max(global_max, float(resp.max(initial=0.0)))
    if global_max <= config.abs_threshold:
        return [], np.zeros((0, DESCRIPTOR_DIM))

    threshold = max(config.abs_threshold, config.rel_threshold * global_max)
    for sigma in config.scales:
        resp = responses[sigma]
        # 3x3 local maxima above threshold.
        interior = resp[1:-1, 1:-1]
        is_peak = (
            (interior >= resp[:-2, :-2]) & (interior >= resp[:-2, 1:-1]) & (interior >= resp[:-2, 2:])
            & (interior >= resp[1:-1, :-2]) & (interior >= resp[1:-1, 2:])
            & (interior >= resp[2:, :-2]) & (interior >= resp[2:, 1:-1]) & (interior >= resp[2:, 2:])
            & (interior > threshold)
        )
        rows, cols = np.nonzero(is_peak)
        for row, col in zip(rows + 1, cols + 1):
            uv = _subpixel_refine(resp, row, col)
            score = float(resp[row, col] / global_max)
            candidates.append((score, uv[1], uv[0], np.array([uv[0], uv[1], sigma])))

    # Greedy NMS across scales: strongest first, suppress within nms_radius.
    # A coarse occupancy grid keeps the neighbor search O(1) per candidate.
    candidates.sort(key=lambda c: (-c[0], c[1], c[2]))
    kept: list[tuple[float, np.ndarray]] = []
    cell = max(config.nms_radius, 1.0)
    r2 = config.nms_radius**2
    occupied: dict[tuple[int, int], list[np.ndarray]] = {}
    for score, _, _, packed in candidates:
        uv = packed[:2]
        key = (int(uv[0] // cell), int(uv[1] // cell))
        suppressed = False
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for other in occupied.get((key[0] + dx, key[1] + dy), ()):
                    if float(np.sum((uv - other) ** 2)) < r2:
                        suppressed = True
                        break
                if suppressed:
                    break
            if suppressed:
                break
        if suppressed:
            continue
        kept.append((score, packed))
        occupied.setdefault(key, []).append(uv)
        if len(kept) >= 4 * config.max_keypoints:
            break

    gradients = {}
    for sigma in config.scales:
        gy, gx = np.gradient(gaussian_filter(gray, sigma, mode="nearest"))
        gradients[sigma] = (gx, gy)
    keypoints: list[Keypoint] = []
    descriptors: list[np.ndarray] = []
    for score, packed in kept:
        uv, sigma = packed[:2], float(packed[2])
        gx, gy = gradients[sigma]
        desc = _describe(gx, gy, uv, sigma)
        if desc is None:
            continue
        keypoints.append(Keypoint(position=uv, scale=sigma, score=score))
        descriptors.append(desc)
        if len(keypoints) >= config.max_keypoints:
            break
    if not keypoints:
        return [], np.zeros((0, DESCRIPTOR_DIM))
    return keypoints, np.array(descriptors)


def match_features(
    keypoints_a: list[Keypoint],
    descriptors_a: np.ndarray,
    keypoints_b: list[Keypoint],
    descriptors_b: np.ndarray,
    config: MatcherConfig | None = None,
) -> list[FeatureMatch]:
    """Mutual nearest-neighbor matching with a two-sided ratio test.

    Side ``a`` is the query image, side ``b`` the reference.  Each keypoint
    appears in at most one match.  Confidence is 1 minus the worse of the two
    directions' ratio, clamped to [0, 1], so the result is symmetric in its
    arguments (up to swapping pixel roles).
    """
    config = config or MatcherConfig()
    na, nb = len(keypoints_a), len(keypoints_b)
    if na == 0 or nb == 0:
        return []

    # Squared euclidean distances via the unit-norm descriptor dot products.
    dots = descriptors_a @ descriptors_b.T
    d2 = np.maximum(2.0 - 2.0 * dots, 0.0)

    nn_ab = np.argmin(d2, axis=1)
    nn_ba = np.argmin(d2, axis=0)

    def ratio_along(dist_row: np.ndarray, best_idx: int) -> float:
        if dist_row.size < 2:
            return 0.0
        best = np.sqrt(dist_row[best_idx])
        rest = np.delete(dist_row, best_idx)
        second = np.sqrt(rest.min())
        if second < 1e-12:
            return 1.0
        return float(best / second)

    candidates = []
    for ia in range(na):
        ib = int(nn_ab[ia])
        if config.mutual and int(nn_ba[ib]) != ia:
            continue
        ratio_a = ratio_along(d2[ia, :], ib)
        ratio_b = ratio_along(d2[:, ib], ia)
        worst = max(ratio_a, ratio_b)
        if worst > config.ratio:
            continue
        confidence = float(np.clip(1.0 - worst, 0.0, 1.0))
        candidates.append((float(d2[ia, ib]), ia, ib, confidence))

    # Enforce one-to-one greedily, best (smallest) distance first.
    candidates.sort(key=lambda c: (c[0], c[1], c[2]))
    used_a: set[int] = set()
    used_b: set[int] = set()
    matches = []
    for _, ia, ib, confidence in candidates:
        if ia in used_a or ib in used_b:
            continue
        used_a.add(ia)
        used_b.add(ib)
        matches.append(
            FeatureMatch(
                pixel_query=keypoints_a[ia].position,
                pixel_ref=keypoints_b[ib].position,
                confidence=confidence,
            )
        )
    return matches


@dataclass(frozen=True)
class MatchStats:
    """Aggregate statistics over one set of matches."""

    count: int
    mean_confidence: float
    uniformity: float  # 8x8 occupancy entropy / log(64), in [0, 1]


def match_stats(matches: list[FeatureMatch], cam: CameraIntrinsics) -> MatchStats:
    """Count, mean confidence, and spatial uniformity of query-side pixels."""
    if not matches:
        return MatchStats(count=0, mean_confidence=0.0, uniformity=0.0)
    pixels = np.array([m.pixel_query for m in matches])
    confidences = np.array([m.confidence for m in matches])
    cols = np.minimum((pixels[:, 0] / cam.width * 8).astype(int), 7)
    rows = np.minimum((pixels[:, 1] / cam.height * 8).astype(int), 7)
    counts = np.bincount(rows * 8 + cols, minlength=64).astype(np.float64)
    p = counts[counts > 0] / counts.sum()
    entropy = float(-np.sum(p * np.log(p)))
    return MatchStats(
        count=len(matches),
        mean_confidence=float(confidences.mean()),
        uniformity=entropy / np.log(64.0),
    )


@dataclass(frozen=True)
class OracleConfig:
    """Controls for the ground-truth-driven match generator."""

    n: int = 150
    pixel_noise_sigma: float = 0.0
    outlier_fraction: float = 0.0
    seed: int = 0
    border_margin: int = 3  # reference pixels sampled this far from the edge

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ValueError("oracle n must be >= 1")
        if not 0.0 <= self.outlier_fraction <= 1.0:
            raise ValueError("outlier_fraction must lie in [0, 1]")
        if self.pixel_noise_sigma < 0.0:
            raise ValueError("pixel_noise_sigma must be non-negative")


def oracle_match(
    query_pose_gt: Pose,
    ref_pose: Pose,
    ref_depth: np.ndarray,
    cam: CameraIntrinsics,
    config: OracleConfig,
    rng: np.random.Generator | None = None,
) -> tuple[list[FeatureMatch], np.ndarray]:
    """Manufacture correspondences from rendered depth and known poses.

    Samples up to ``config.n`` valid-depth reference pixels (away from the
    image border), lifts them through the reference depth into world space,
    and projects them into the ground-truth query view.  Samples that fall
    outside the query image are dropped, so the returned count tracks the
    view overlap.  Gaussian pixel noise is added on the query side (clamped
    to the image), and a fixed fraction of the survivors is replaced by
    uniform random query pixels (outliers, confidence 0).

    Returns the matches and a boolean outlier mask aligned with them.
    """
    if rng is None:
        rng = np.random.default_rng(config.seed)
    m = config.border_margin
    valid = ref_depth > 0.0
    if m > 0:
        valid[:m, :] = False
        valid[-m:, :] = False
        valid[:, :m] = False
        valid[:, -m:] = False
    rows, cols = np.nonzero(valid)
    if rows.size < config.n:
        raise ValueError(
            f"reference depth has only {rows.size} valid interior pixels, need {config.n}"
        )
    pick = rng.choice(rows.size, size=config.n, replace=False)
    ref_px = np.column_stack([cols[pick], rows[pick]]).astype(np.float64)

    depths = ref_depth[rows[pick], cols[pick]]
    pts_world = ref_pose.apply(cam.backproject(ref_px, depths))

    w2c = query_pose_gt.inverse()
    pts_query = pts_world @ w2c.rotation_matrix().T + w2c.translation
    in_front = pts_query[:, 2] > cam.near
    query_px = np.full((config.n, 2), -1.0)
    query_px[in_front] = cam.project(pts_query[in_front])
    keep = in_front & cam.contains(query_px)

    ref_px = ref_px[keep]
    query_px = query_px[keep]
    kept = ref_px.shape[0]

    if config.pixel_noise_sigma > 0.0:
        query_px = query_px + rng.normal(0.0, config.pixel_noise_sigma, size=query_px.shape)
        query_px[:, 0] = np.clip(query_px[:, 0], 0.0, cam.width - 1e-3)
        query_px[:, 1] = np.clip(query_px[:, 1], 0.0, cam.height - 1e-3)

    outlier_mask = np.zeros(kept, dtype=bool)
    n_outliers = int(round(kept * config.outlier_fraction))
    if n_outliers > 0:
        chosen = rng.choice(kept, size=n_outliers, replace=False)
        outlier_mask[chosen] = True
        query_px[chosen, 0] = rng.uniform(0.0, cam.width - 1e-3, size=n_outliers)
        query_px[chosen, 1] = rng.uniform(0.0, cam.height - 1e-3, size=n_outliers)

    matches = [
        FeatureMatch(
            pixel_query=query_px[i],
            pixel_ref=ref_px[i],
            confidence=0.0 if outlier_mask[i] else 1.0,
        )
        for i in range(kept)
    ]
    return matches, outlier_mask


def save_matches(
    path: str | Path,
    matches: list[FeatureMatch],
    query_size: tuple[int, int],
    ref_size: tuple[int, int],
) -> None:
    """Write matches in the ``matches v1`` exchange format (sizes are (w, h))."""
    qw, qh = query_size
    rw, rh = ref_size
    lines = [f"matches v1 {qw} {qh} {rw} {rh} {len(matches)}"]
    for match in matches:
        fields = [*match.pixel_query, *match.pixel_ref, match.confidence]
        lines.append(" ".join(repr(float(v)) for v in fields))
    Path(path).write_text("\n".join(lines) + "\n")


def load_matches(
    path: str | Path,
    query_size: tuple[int, int],
    ref_size: tuple[int, int],
) -> list[FeatureMatch]:
    """Read a ``matches v1`` file, validating sizes, bounds, and confidences."""
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not lines:
        raise MatchFileError(f"{path}: empty file")
    header = lines[0].split()
    if len(header) != 7 or header[0] != "matches" or header[1] != "v1":
        raise MatchFileError(f"{path}: bad header {lines[0]!r}")
    try:
        qw, qh, rw, rh, count = (int(v) for v in header[2:])
    except ValueError:
        raise MatchFileError(f"{path}: non-integer header field") from None
    if (qw, qh) != tuple(query_size) or (rw, rh) != tuple(ref_size):
        raise MatchFileError(
            f"{path}: header sizes {(qw, qh)}/{(rw, rh)} do not match images "
            f"{tuple(query_size)}/{tuple(ref_size)}"
        )
    if count != len(lines) - 1:
        raise MatchFileError(f"{path}: header promises {count} matches, found {len(lines) - 1}")

    matches = []
    for lineno, line in enumerate(lines[1:], start=2):
        fields = line.split()
        if len(fields) != 5:
            raise MatchFileError(f"{path}: line {lineno}: expected 5 fields, got {len(fields)}")
        try:
            uq, vq, ur, vr, conf = (float(f) for f in fields)
        except ValueError as exc:
            raise MatchFileError(f"{path}: line {lineno}: {exc}") from None
        if not all(np.isfinite([uq, vq, ur, vr, conf])):
            raise MatchFileError(f"{path}: line {lineno}: non-finite value")
        if not (0.0 <= uq < qw and 0.0 <= vq < qh):
            raise MatchFileError(f"{path}: line {lineno}: query pixel out of bounds")
        if not (0.0 <= ur < rw and 0.0 <= vr < rh):
            raise MatchFileError(f"{path}: line {lineno}: reference pixel out of bounds")
        if not 0.0 <= conf <= 1.0:
            raise MatchFileError(f"{path}: line {lineno}: confidence out of [0, 1]")
        matches.append(FeatureMatch(np.array([uq, vq]), np.array([ur, vr]), conf))
    return matches
