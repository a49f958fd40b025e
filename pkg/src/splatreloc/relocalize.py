"""Iterative render-match-solve relocalization of a monocular query image.

The loop retrieves the most similar anchor once, takes its pose as the
initial estimate, then repeats:

  1. render the scene at the current estimate (the first iteration reuses
     the anchor's stored render),
  2. match query features against the render,
  3. lift matched render pixels through the rendered depth into world space,
  4. solve a robust PnP for a new estimate,

until the pose update falls below both the translation and rotation
thresholds (converged), the iteration budget runs out (max_iterations), or
an iteration cannot produce a usable pose (failed, keeping the best previous
estimate).  Every completed iteration leaves a diagnostic trace.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np

from .anchors import AnchorDatabase, AnchorRecord, retrieve
from .errors import MatchFileError, SplatRelocError
from .features import (
    DetectorConfig,
    FeatureMatch,
    MatcherConfig,
    OracleConfig,
    detect_and_describe,
    load_matches,
    match_features,
    match_stats,
    oracle_match,
)
from .geometry import CameraIntrinsics, Pose, pose_delta
from .pnp import Correspondence, RansacConfig, solve_pnp
from .renderer import render
from .scene import SplatScene

STATUS_CONVERGED = "converged"
STATUS_MAX_ITERATIONS = "max_iterations"
STATUS_FAILED = "failed"


def lift_to_3d(
    matches: list[FeatureMatch], anchor: AnchorRecord, cam: CameraIntrinsics
) -> list[Correspondence]:
    """Turn 2D-2D matches into 2D-3D correspondences via rendered depth.

    The reference pixel's depth is sampled bilinearly; a match is dropped
    when any of its four depth neighbors is invalid (sky) or the sample
    window leaves the image.  Surviving reference pixels are back-projected
    and mapped through the anchor pose into world coordinates.
    """
    corrs: list[Correspondence] = []
    depth = anchor.depth
    H, W = depth.shape
    for match in matches:
        u, v = match.pixel_ref
        u0, v0 = int(np.floor(u)), int(np.floor(v))
        if u0 < 0 or v0 < 0 or u0 + 1 > W - 1 or v0 + 1 > H - 1:
            continue
        patch = depth[v0 : v0 + 2, u0 : u0 + 2]
        if np.any(patch <= 0.0):
            continue
        au, av = u - u0, v - v0
        d = (
            patch[0, 0] * (1 - au) * (1 - av)
            + patch[0, 1] * au * (1 - av)
            + patch[1, 0] * (1 - au) * av
            + patch[1, 1] * au * av
        )
        point_cam = cam.backproject(match.pixel_ref[None, :], np.array([d]))[0]
        corrs.append(
            Correspondence(pixel=match.pixel_query, point=anchor.pose.apply(point_cam))
        )
    return corrs


@dataclass
class MatchOutcome:
    """Matches plus the wall-clock cost of producing them."""

    matches: list[FeatureMatch]
    detect_ms: float = 0.0
    match_ms: float = 0.0


class Matcher(Protocol):
    """Pluggable query-to-render matching strategy."""

    def match_pair(
        self, query_image: np.ndarray, reference: AnchorRecord, iteration: int
    ) -> MatchOutcome: ...


class ReferenceMatcher:
    """Detector + descriptor matching between the query and the render."""

    def __init__(
        self,
        detector: DetectorConfig | None = None,
        matcher: MatcherConfig | None = None,
    ) -> None:
        self.detector = detector or DetectorConfig()
        self.matcher = matcher or MatcherConfig()
        self._query_cache: tuple[np.ndarray, tuple, np.ndarray] | None = None

    def _query_features(self, query_image: np.ndarray):
        cached = self._query_cache
        if cached is not None and cached[0] is query_image:
            return cached[1], cached[2]
        keypoints, descriptors = detect_and_describe(query_image, self.detector)
        self._query_cache = (query_image, keypoints, descriptors)
        return keypoints, descriptors

    def match_pair(
        self, query_image: np.ndarray, reference: AnchorRecord, iteration: int
    ) -> MatchOutcome:
        t0 = time.perf_counter()
        kp_q, desc_q = self._query_features(query_image)
        kp_r, desc_r = detect_and_describe(reference.rgb, self.detector)
        t1 = time.perf_counter()
        matches = match_features(kp_q, desc_q, kp_r, desc_r, self.matcher)
        t2 = time.perf_counter()
        return MatchOutcome(
            matches=matches,
            detect_ms=(t1 - t0) * 1e3,
            match_ms=(t2 - t1) * 1e3,
        )


class OracleMatcher:
    """Ground-truth-driven matcher for controlled experiments.

    Ignores image content entirely: correspondences come from the reference
    render's depth and the known true query pose, with configured noise and
    outlier contamination.  Deterministic per (config.seed, iteration).
    """

    def __init__(self, query_pose_gt: Pose, cam: CameraIntrinsics, config: OracleConfig) -> None:
        self.query_pose_gt = query_pose_gt
        self.cam = cam
        self.config = config

    def match_pair(
        self, query_image: np.ndarray, reference: AnchorRecord, iteration: int
    ) -> MatchOutcome:
        t0 = time.perf_counter()
        rng = np.random.default_rng([self.config.seed, iteration])
        matches, _ = oracle_match(
            self.query_pose_gt, reference.pose, reference.depth, self.cam, self.config, rng
        )
        return MatchOutcome(matches=matches, match_ms=(time.perf_counter() - t0) * 1e3)


class ExternalMatcher:
    """Reads per-iteration match files produced by an outside tool.

    Expects ``<query_id>_iter<k>.matches`` inside ``directory``; a missing
    file yields an empty outcome (the loop then reports a failed status).
    """

    def __init__(self, directory: str | Path, query_id: str, cam: CameraIntrinsics) -> None:
        self.directory = Path(directory)
        self.query_id = query_id
        self.cam = cam

    def match_pair(
        self, query_image: np.ndarray, reference: AnchorRecord, iteration: int
    ) -> MatchOutcome:
        t0 = time.perf_counter()
        path = self.directory / f"{self.query_id}_iter{iteration}.matches"
        if not path.exists():
            return MatchOutcome(matches=[], match_ms=(time.perf_counter() - t0) * 1e3)
        size = (self.cam.width, self.cam.height)
        matches = load_matches(path, size, size)
        return MatchOutcome(matches=matches, match_ms=(time.perf_counter() - t0) * 1e3)


@dataclass(frozen=True)
class RelocalizeConfig:
    """Loop termination and robustness settings."""

    max_iterations: int = 10
    trans_eps: float = 0.01  # meters
    rot_eps: float = 0.01  # radians
    min_matches: int = 12
    ransac: RansacConfig = RansacConfig()


@dataclass
class IterationTrace:
    """Diagnostics for one loop iteration."""

    iteration: int  # 1-based
    pose: Pose  # estimate after this iteration
    match_count: int
    mean_confidence: float
    uniformity: float
    trans_delta: float  # update size vs the previous estimate, meters
    rot_delta: float  # radians
    detect_ms: float = 0.0
    match_ms: float = 0.0
    pnp_ms: float = 0.0
    render_ms: float = 0.0


@dataclass
class RelocalizationResult:
    """Final pose with status and per-iteration diagnostics."""

    final_pose: Pose
    status: str  # converged | max_iterations | failed
    anchor_id: int
    traces: list[IterationTrace] = field(default_factory=list)
    message: str = ""

    def to_dict(self, include_timings: bool = False) -> dict:
        traces = []
        for tr in self.traces:
            entry = {
                "iteration": tr.iteration,
                "pose": [float(v) for v in tr.pose.as_array()],
                "match_count": tr.match_count,
                "mean_confidence": tr.mean_confidence,
                "uniformity": tr.uniformity,
                "trans_delta": tr.trans_delta,
                "rot_delta": tr.rot_delta,
            }
            if include_timings:
                entry.update(
                    detect_ms=tr.detect_ms,
                    match_ms=tr.match_ms,
                    pnp_ms=tr.pnp_ms,
                    render_ms=tr.render_ms,
                )
            traces.append(entry)
        return {
            "status": self.status,
            "anchor_id": self.anchor_id,
            "message": self.message,
            "final_pose": [float(v) for v in self.final_pose.as_array()],
            "iterations": len(self.traces),
            "traces": traces,
        }

    def timings_dict(self) -> dict:
        return {
            "traces": [
                {
                    "iteration": tr.iteration,
                    "detect_ms": tr.detect_ms,
                    "match_ms": tr.match_ms,
                    "pnp_ms": tr.pnp_ms,
                    "render_ms": tr.render_ms,
                }
                for tr in self.traces
            ]
        }


def relocalize(
    query_image: np.ndarray,
    scene: SplatScene,
    db: AnchorDatabase,
    matcher: Matcher,
    config: RelocalizeConfig | None = None,
) -> RelocalizationResult:
    """Estimate the query's camera-to-world pose against the anchor map."""
    config = config or RelocalizeConfig()
    cam = db.camera
    if query_image.shape[:2] != (cam.height, cam.width):
        raise ValueError(
            f"query image is {query_image.shape[1]}x{query_image.shape[0]} but the "
            f"database camera expects {cam.width}x{cam.height}"
        )
    anchor_id = retrieve(query_image, db)
    anchor = db.records[anchor_id]

    current = anchor.pose
    traces: list[IterationTrace] = []

    def finish(status: str, message: str = "") -> RelocalizationResult:
        return RelocalizationResult(
            final_pose=current, status=status, anchor_id=anchor_id,
            traces=traces, message=message,
        )

    for iteration in range(1, config.max_iterations + 1):
        render_ms = 0.0
        if iteration == 1:
            reference = anchor
        else:
            t0 = time.perf_counter()
            out = render(scene, current, cam)
            render_ms = (time.perf_counter() - t0) * 1e3
            reference = AnchorRecord(
                anchor_id=-1,
                source_index=-1,
                pose=current,
                rgb=out.rgb,
                depth=out.depth,
                descriptor=np.zeros(0),
            )

        try:
            outcome = matcher.match_pair(query_image, reference, iteration)
        except MatchFileError as exc:
            traces.append(
                IterationTrace(
                    iteration=iteration, pose=current, match_count=0,
                    mean_confidence=0.0, uniformity=0.0,
                    trans_delta=0.0, rot_delta=0.0, render_ms=render_ms,
                )
            )
            return finish(STATUS_FAILED, f"iteration {iteration}: {exc}")
        stats = match_stats(outcome.matches, cam)

        def failed_trace(reason: str) -> RelocalizationResult:
            traces.append(
                IterationTrace(
                    iteration=iteration, pose=current,
                    match_count=stats.count, mean_confidence=stats.mean_confidence,
                    uniformity=stats.uniformity, trans_delta=0.0, rot_delta=0.0,
                    detect_ms=outcome.detect_ms, match_ms=outcome.match_ms,
                    render_ms=render_ms,
                )
            )
            return finish(STATUS_FAILED, f"iteration {iteration}: {reason}")

        if stats.count < config.min_matches:
            return failed_trace(
                f"{stats.count} matches < min_matches {config.min_matches}"
            )

        corrs = lift_to_3d(outcome.matches, reference, cam)
        if len(corrs) < config.min_matches:
            return failed_trace(
                f"{len(corrs)} lifted correspondences < min_matches {config.min_matches}"
            )

        t0 = time.perf_counter()
        try:
            report = solve_pnp(corrs, cam, config.ransac)
        except SplatRelocError as exc:
            return failed_trace(f"pose solve failed: {exc}")
        pnp_ms = (time.perf_counter() - t0) * 1e3

        trans_delta, rot_delta = pose_delta(report.pose, current)
        current = report.pose
        traces.append(
            IterationTrace(
                iteration=iteration, pose=current,
                match_count=stats.count, mean_confidence=stats.mean_confidence,
                uniformity=stats.uniformity,
                trans_delta=trans_delta, rot_delta=rot_delta,
                detect_ms=outcome.detect_ms, match_ms=outcome.match_ms,
                pnp_ms=pnp_ms, render_ms=render_ms,
            )
        )
        if trans_delta <= config.trans_eps and rot_delta <= config.rot_eps:
            return finish(STATUS_CONVERGED)

    return finish(STATUS_MAX_ITERATIONS)


def save_result(path: str | Path, result: RelocalizationResult, query_id: str | None = None) -> None:
    """Write the result JSON (no wall-clock fields, so reruns are identical)."""
    payload = result.to_dict(include_timings=False)
    if query_id is not None:
        payload["query_id"] = query_id
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def save_result_timings(path: str | Path, result: RelocalizationResult) -> None:
    """Write the wall-clock sidecar for the timing report."""
    Path(path).write_text(json.dumps(result.timings_dict(), sort_keys=True, indent=2) + "\n")
