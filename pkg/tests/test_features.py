"""Keypoint detection, descriptor matching, the ground-truth match generator,
and the match exchange format."""

import numpy as np
import pytest
from scipy.ndimage import gaussian_filter

from splatreloc import (
    FeatureMatch,
    MatchFileError,
    OracleConfig,
    Pose,
    load_matches,
    match_features,
    oracle_match,
    save_matches,
)
from splatreloc.features import (
    DESCRIPTOR_DIM,
    DetectorConfig,
    MatcherConfig,
    detect_and_describe,
    match_stats,
    to_grayscale,
)
from splatreloc.renderer import render


def square_image(corner=(50, 60), size=(31, 26), shape=(96, 128)):
    """Bright axis-aligned rectangle on black, softened for stable gradients."""
    img = np.zeros(shape)
    x0, y0 = corner
    img[y0 : y0 + size[1], x0 : x0 + size[0]] = 1.0
    img = gaussian_filter(img, 1.0)
    return np.stack([img] * 3, axis=-1)


@pytest.fixture(scope="module")
def render_pair(small_scene, small_trajectory, cam):
    """Two renders of the shared scene from slightly offset viewpoints."""
    pose_ref = small_trajectory.poses[0]
    pose_query = Pose(pose_ref.rotation, pose_ref.translation + np.array([0.2, 0.0, 0.0]))
    out_ref = render(small_scene, pose_ref, cam)
    out_query = render(small_scene, pose_query, cam)
    return pose_ref, out_ref, pose_query, out_query


# ===========================================================================
# Grayscale conversion
# ===========================================================================


class TestToGrayscale:
    def test_luminance_weights(self):
        img = np.zeros((2, 2, 3))
        img[0, 0] = [1, 0, 0]
        img[0, 1] = [0, 1, 0]
        img[1, 0] = [0, 0, 1]
        img[1, 1] = [1, 1, 1]
        gray = to_grayscale(img)
        assert gray[0, 0] == pytest.approx(0.299)
        assert gray[0, 1] == pytest.approx(0.587)
        assert gray[1, 0] == pytest.approx(0.114)
        assert gray[1, 1] == pytest.approx(1.0)

    def test_2d_passthrough(self):
        img = np.random.default_rng(0).uniform(0, 1, (4, 5))
        np.testing.assert_array_equal(to_grayscale(img), img)


# ===========================================================================
# Detector
# ===========================================================================


class TestDetector:
    def test_finds_square_corners_within_2px(self):
        kps, _ = detect_and_describe(square_image())
        assert len(kps) >= 4
        for corner in [(50.0, 60.0), (80.0, 60.0), (50.0, 85.0), (80.0, 85.0)]:
            nearest = min(
                np.linalg.norm(kp.position - np.array(corner)) for kp in kps
            )
            assert nearest < 2.0

    def test_deterministic(self):
        img = square_image()
        kps_a, desc_a = detect_and_describe(img)
        kps_b, desc_b = detect_and_describe(img)
        assert len(kps_a) == len(kps_b)
        for a, b in zip(kps_a, kps_b):
            np.testing.assert_array_equal(a.position, b.position)
            assert a.score == b.score
        np.testing.assert_array_equal(desc_a, desc_b)

    def test_constant_image_yields_nothing(self):
        kps, desc = detect_and_describe(np.full((64, 64, 3), 0.5))
        assert kps == []
        assert desc.shape == (0, DESCRIPTOR_DIM)

    def test_too_small_image_raises(self):
        with pytest.raises(ValueError, match="32"):
            detect_and_describe(np.zeros((16, 64, 3)))

    def test_descriptors_unit_norm(self, render_pair):
        _, out_ref, _, _ = render_pair
        _, desc = detect_and_describe(out_ref.rgb)
        assert desc.shape[1] == DESCRIPTOR_DIM
        np.testing.assert_allclose(np.linalg.norm(desc, axis=1), 1.0, atol=1e-9)

    def test_sorted_by_descending_score(self, render_pair):
        _, out_ref, _, _ = render_pair
        kps, _ = detect_and_describe(out_ref.rgb)
        scores = [kp.score for kp in kps]
        assert scores == sorted(scores, reverse=True)

    def test_max_keypoints_respected(self, render_pair):
        _, out_ref, _, _ = render_pair
        config = DetectorConfig(max_keypoints=10)
        kps, desc = detect_and_describe(out_ref.rgb, config)
        assert len(kps) <= 10
        assert desc.shape[0] == len(kps)

    def test_keypoints_inside_image(self, render_pair):
        _, out_ref, _, _ = render_pair
        kps, _ = detect_and_describe(out_ref.rgb)
        H, W = out_ref.rgb.shape[:2]
        for kp in kps:
            assert 0 <= kp.position[0] < W
            assert 0 <= kp.position[1] < H

    def test_nms_enforces_min_spacing(self, render_pair):
        _, out_ref, _, _ = render_pair
        config = DetectorConfig(nms_radius=6.0)
        kps, _ = detect_and_describe(out_ref.rgb, config)
        pts = np.array([kp.position for kp in kps])
        diffs = pts[:, None, :] - pts[None, :, :]
        dists = np.linalg.norm(diffs, axis=-1) + np.eye(len(pts)) * 1e9
        assert dists.min() >= 6.0 - 1e-9


# ===========================================================================
# Matching
# ===========================================================================


class TestMatchFeatures:
    def test_self_matching_is_identity(self, render_pair):
        _, out_ref, _, _ = render_pair
        kps, desc = detect_and_describe(out_ref.rgb)
        matches = match_features(kps, desc, kps, desc)
        assert len(matches) == len(kps)
        for m in matches:
            np.testing.assert_array_equal(m.pixel_query, m.pixel_ref)
            assert m.confidence == pytest.approx(1.0)

    def test_symmetric_under_swap(self, render_pair):
        _, out_ref, _, out_query = render_pair
        kps_a, desc_a = detect_and_describe(out_query.rgb)
        kps_b, desc_b = detect_and_describe(out_ref.rgb)
        forward = match_features(kps_a, desc_a, kps_b, desc_b)
        backward = match_features(kps_b, desc_b, kps_a, desc_a)
        fwd_pairs = {(tuple(m.pixel_query), tuple(m.pixel_ref)) for m in forward}
        bwd_pairs = {(tuple(m.pixel_ref), tuple(m.pixel_query)) for m in backward}
        assert fwd_pairs == bwd_pairs

    def test_one_to_one(self, render_pair):
        _, out_ref, _, out_query = render_pair
        kps_a, desc_a = detect_and_describe(out_query.rgb)
        kps_b, desc_b = detect_and_describe(out_ref.rgb)
        matches = match_features(kps_a, desc_a, kps_b, desc_b)
        ref_keys = [tuple(m.pixel_ref) for m in matches]
        query_keys = [tuple(m.pixel_query) for m in matches]
        assert len(set(ref_keys)) == len(ref_keys)
        assert len(set(query_keys)) == len(query_keys)

    def test_stricter_ratio_gives_subset(self, render_pair):
        _, out_ref, _, out_query = render_pair
        kps_a, desc_a = detect_and_describe(out_query.rgb)
        kps_b, desc_b = detect_and_describe(out_ref.rgb)
        loose = match_features(kps_a, desc_a, kps_b, desc_b, MatcherConfig(ratio=0.9))
        strict = match_features(kps_a, desc_a, kps_b, desc_b, MatcherConfig(ratio=0.6))
        loose_pairs = {(tuple(m.pixel_query), tuple(m.pixel_ref)) for m in loose}
        strict_pairs = {(tuple(m.pixel_query), tuple(m.pixel_ref)) for m in strict}
        assert strict_pairs <= loose_pairs

    def test_confidences_in_range(self, render_pair):
        _, out_ref, _, out_query = render_pair
        kps_a, desc_a = detect_and_describe(out_query.rgb)
        kps_b, desc_b = detect_and_describe(out_ref.rgb)
        for m in match_features(kps_a, desc_a, kps_b, desc_b):
            assert 0.0 <= m.confidence <= 1.0

    def test_empty_inputs(self):
        assert match_features([], np.zeros((0, 128)), [], np.zeros((0, 128))) == []

    def test_cross_view_matches_agree_with_geometry(self, render_pair, cam):
        """Lift each reference match pixel through the rendered depth and
        reproject into the true query camera: matched pixels must land there."""
        pose_ref, out_ref, pose_query, out_query = render_pair
        kps_q, desc_q = detect_and_describe(out_query.rgb)
        kps_r, desc_r = detect_and_describe(out_ref.rgb)
        matches = match_features(kps_q, desc_q, kps_r, desc_r)
        assert len(matches) >= 30

        w2c = pose_query.inverse()
        checked, good = 0, 0
        for m in matches:
            iu, iv = int(round(m.pixel_ref[0])), int(round(m.pixel_ref[1]))
            if not (0 <= iu < cam.width and 0 <= iv < cam.height):
                continue
            d = out_ref.depth[iv, iu]
            if d <= 0:
                continue
            world = pose_ref.apply(cam.backproject(m.pixel_ref, np.array([d])))[0]
            local = w2c.apply(world)
            if local[2] <= 0:
                continue
            projected = cam.project(local[None])[0]
            checked += 1
            if np.linalg.norm(projected - m.pixel_query) < 3.0:
                good += 1
        assert checked >= 30
        assert good / checked >= 0.9


# ===========================================================================
# Match statistics
# ===========================================================================


class TestMatchStats:
    def test_empty(self, cam):
        stats = match_stats([], cam)
        assert stats.count == 0
        assert stats.mean_confidence == 0.0
        assert stats.uniformity == 0.0

    def test_uniform_coverage_is_one(self, cam):
        """One match per 8x8 grid cell maximizes the occupancy entropy."""
        matches = [
            FeatureMatch(
                pixel_query=np.array([20.0 + 40.0 * i, 15.0 + 30.0 * j]),
                pixel_ref=np.zeros(2),
                confidence=1.0,
            )
            for i in range(8)
            for j in range(8)
        ]
        stats = match_stats(matches, cam)
        assert stats.count == 64
        assert stats.uniformity == pytest.approx(1.0, abs=1e-12)

    def test_single_cell_is_zero(self, cam):
        matches = [
            FeatureMatch(np.array([10.0 + 0.1 * k, 10.0]), np.zeros(2), 0.5)
            for k in range(5)
        ]
        assert match_stats(matches, cam).uniformity == pytest.approx(0.0, abs=1e-12)

    def test_mean_confidence(self, cam):
        matches = [
            FeatureMatch(np.array([10.0, 10.0]), np.zeros(2), 0.2),
            FeatureMatch(np.array([200.0, 200.0]), np.zeros(2), 0.8),
        ]
        assert match_stats(matches, cam).mean_confidence == pytest.approx(0.5)


# ===========================================================================
# Ground-truth match generator
# ===========================================================================


def flat_depth(cam, value=5.0):
    return np.full((cam.height, cam.width), value)


class TestOracleMatch:
    def test_zero_noise_is_reprojection_exact(self, cam):
        """Each clean match's reference pixel, lifted through the depth and
        projected into the query camera, hits the query pixel exactly."""
        ref_pose = Pose.identity()
        query_pose = Pose(
            np.array([1.0, 0.0, 0.0, 0.0]), np.array([0.3, -0.1, 0.2])
        )
        depth = flat_depth(cam)
        config = OracleConfig(n=200, seed=5)
        matches, outliers = oracle_match(query_pose, ref_pose, depth, cam, config)
        assert not outliers.any()
        w2c = query_pose.inverse()
        for m in matches:
            iu, iv = int(m.pixel_ref[0]), int(m.pixel_ref[1])
            world = ref_pose.apply(
                cam.backproject(m.pixel_ref, np.array([depth[iv, iu]]))
            )[0]
            projected = cam.project(w2c.apply(world)[None])[0]
            np.testing.assert_allclose(projected, m.pixel_query, atol=1e-9)

    def test_same_pose_keeps_all_samples(self, cam):
        pose = Pose.identity()
        matches, _ = oracle_match(
            pose, pose, flat_depth(cam), cam, OracleConfig(n=150, seed=1)
        )
        assert len(matches) == 150
        for m in matches:
            np.testing.assert_allclose(m.pixel_query, m.pixel_ref, atol=1e-9)

    def test_reference_pixels_respect_border_margin(self, cam):
        config = OracleConfig(n=300, seed=2, border_margin=3)
        matches, _ = oracle_match(
            Pose.identity(), Pose.identity(), flat_depth(cam), cam, config
        )
        for m in matches:
            assert 3 <= m.pixel_ref[0] < cam.width - 3
            assert 3 <= m.pixel_ref[1] < cam.height - 3

    def test_noise_standard_deviation(self, cam):
        """With identical poses the query-side displacement is exactly the
        injected gaussian noise."""
        pose = Pose.identity()
        sigma = 1.5
        config = OracleConfig(n=400, pixel_noise_sigma=sigma, seed=3)
        matches, _ = oracle_match(pose, pose, flat_depth(cam), cam, config)
        residuals = np.array([m.pixel_query - m.pixel_ref for m in matches]).ravel()
        assert abs(residuals.std() - sigma) < 0.2
        assert abs(residuals.mean()) < 0.2

    def test_outlier_count_exact(self, cam):
        config = OracleConfig(n=100, outlier_fraction=0.2, seed=4)
        matches, outliers = oracle_match(
            Pose.identity(), Pose.identity(), flat_depth(cam), cam, config
        )
        assert len(matches) == 100
        assert int(outliers.sum()) == 20
        for m, is_outlier in zip(matches, outliers):
            assert m.confidence == (0.0 if is_outlier else 1.0)

    def test_deterministic_per_rng(self, cam):
        config = OracleConfig(n=50, pixel_noise_sigma=0.5, outlier_fraction=0.1, seed=9)
        a, mask_a = oracle_match(
            Pose.identity(), Pose.identity(), flat_depth(cam), cam, config
        )
        b, mask_b = oracle_match(
            Pose.identity(), Pose.identity(), flat_depth(cam), cam, config
        )
        np.testing.assert_array_equal(mask_a, mask_b)
        for ma, mb in zip(a, b):
            np.testing.assert_array_equal(ma.pixel_query, mb.pixel_query)
            np.testing.assert_array_equal(ma.pixel_ref, mb.pixel_ref)

    def test_external_rng_overrides_seed(self, cam):
        config = OracleConfig(n=50, seed=0)
        rng_a = np.random.default_rng([123, 1])
        rng_b = np.random.default_rng([123, 1])
        a, _ = oracle_match(
            Pose.identity(), Pose.identity(), flat_depth(cam), cam, config, rng_a
        )
        b, _ = oracle_match(
            Pose.identity(), Pose.identity(), flat_depth(cam), cam, config, rng_b
        )
        for ma, mb in zip(a, b):
            np.testing.assert_array_equal(ma.pixel_ref, mb.pixel_ref)

    def test_too_few_valid_pixels_raises(self, cam):
        depth = np.zeros((cam.height, cam.width))
        depth[100:103, 100:103] = 5.0
        with pytest.raises(ValueError, match="valid"):
            oracle_match(
                Pose.identity(), Pose.identity(), depth, cam, OracleConfig(n=100)
            )

    def test_overlap_loss_drops_matches(self, cam):
        """A strongly rotated query sees only part of the reference frustum."""
        from splatreloc.geometry import quat_from_axis_angle

        query = Pose(
            quat_from_axis_angle(np.array([0.0, 1.0, 0.0]), np.radians(25.0)),
            np.zeros(3),
        )
        matches, _ = oracle_match(
            query, Pose.identity(), flat_depth(cam), cam, OracleConfig(n=200, seed=6)
        )
        assert 0 < len(matches) < 200

    def test_bad_config_raises(self):
        with pytest.raises(ValueError):
            OracleConfig(n=0)
        with pytest.raises(ValueError):
            OracleConfig(outlier_fraction=1.5)
        with pytest.raises(ValueError):
            OracleConfig(pixel_noise_sigma=-1.0)


# ===========================================================================
# Match exchange format
# ===========================================================================


class TestMatchFileFormat:
    def make_matches(self, n=20, seed=0):
        rng = np.random.default_rng(seed)
        return [
            FeatureMatch(
                pixel_query=np.array([rng.uniform(0, 319.9), rng.uniform(0, 239.9)]),
                pixel_ref=np.array([rng.uniform(0, 319.9), rng.uniform(0, 239.9)]),
                confidence=float(rng.uniform(0, 1)),
            )
            for _ in range(n)
        ]

    def test_roundtrip_exact(self, tmp_path):
        matches = self.make_matches(n=500)
        path = tmp_path / "m.matches"
        size = (320, 240)
        save_matches(path, matches, size, size)
        back = load_matches(path, size, size)
        assert len(back) == 500
        for a, b in zip(matches, back):
            np.testing.assert_array_equal(a.pixel_query, b.pixel_query)
            np.testing.assert_array_equal(a.pixel_ref, b.pixel_ref)
            assert a.confidence == b.confidence

    def test_header_contents(self, tmp_path):
        path = tmp_path / "m.matches"
        save_matches(path, self.make_matches(3), (320, 240), (320, 240))
        assert path.read_text().splitlines()[0] == "matches v1 320 240 320 240 3"

    def test_empty_match_list_roundtrips(self, tmp_path):
        path = tmp_path / "m.matches"
        save_matches(path, [], (320, 240), (320, 240))
        assert load_matches(path, (320, 240), (320, 240)) == []

    def test_bad_header_raises(self, tmp_path):
        path = tmp_path / "m.matches"
        path.write_text("matches v2 320 240 320 240 0\n")
        with pytest.raises(MatchFileError, match="header"):
            load_matches(path, (320, 240), (320, 240))

    def test_size_mismatch_raises(self, tmp_path):
        path = tmp_path / "m.matches"
        save_matches(path, [], (320, 240), (320, 240))
        with pytest.raises(MatchFileError, match="sizes"):
            load_matches(path, (640, 480), (320, 240))

    def test_count_mismatch_raises(self, tmp_path):
        path = tmp_path / "m.matches"
        path.write_text("matches v1 320 240 320 240 2\n1.0 1.0 1.0 1.0 0.5\n")
        with pytest.raises(MatchFileError, match="promises 2"):
            load_matches(path, (320, 240), (320, 240))

    def test_out_of_bounds_pixel_names_line(self, tmp_path):
        path = tmp_path / "m.matches"
        path.write_text(
            "matches v1 320 240 320 240 2\n"
            "1.0 1.0 1.0 1.0 0.5\n"
            "400.0 1.0 1.0 1.0 0.5\n"
        )
        with pytest.raises(MatchFileError, match="line 3"):
            load_matches(path, (320, 240), (320, 240))

    def test_bad_confidence_raises(self, tmp_path):
        path = tmp_path / "m.matches"
        path.write_text("matches v1 320 240 320 240 1\n1.0 1.0 1.0 1.0 1.5\n")
        with pytest.raises(MatchFileError, match="confidence"):
            load_matches(path, (320, 240), (320, 240))

    def test_non_finite_value_raises(self, tmp_path):
        path = tmp_path / "m.matches"
        path.write_text("matches v1 320 240 320 240 1\nnan 1.0 1.0 1.0 0.5\n")
        with pytest.raises(MatchFileError, match="finite"):
            load_matches(path, (320, 240), (320, 240))
