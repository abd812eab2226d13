"""Geometry tests: exp/log maps, composition, projection, crop mapping.

Expected values were frozen from independent oracles: hand 4x4 matrix
multiplication, scipy.spatial.transform.Rotation, and central finite
differences.
"""

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from kpslam.errors import InvalidIntrinsics, NonPositiveDepth
from kpslam.geometry import (
    BoundingBox,
    CameraModel,
    CropMapping,
    RigidTransform,
    compose,
    exp_map,
    log_map,
    pose_from_json,
    pose_point_jacobians,
    pose_to_json,
    project,
    project_points,
    projection_jacobian,
    quat_to_rotation,
    rotation_about_axis,
    rotation_to_quat,
    so3_exp,
    so3_log,
)

CAM = CameraModel(fx=500.0, fy=500.0, cx=320.0, cy=240.0, width=640, height=480)


class TestRigidTransform:
    def test_identity_is_neutral(self):
        rng = np.random.default_rng(7)
        t = exp_map(rng.normal(size=6))
        eye = RigidTransform.identity()
        for result in (t.compose(eye), eye.compose(t)):
            np.testing.assert_allclose(result.rotation, t.rotation, atol=1e-15)
            np.testing.assert_allclose(result.translation, t.translation, atol=1e-15)

    def test_compose_applies_second_argument_first(self):
        # a = 90 deg about z plus translation (1,0,0); b = 90 deg about z.
        # Hand matrix oracle: (a @ b) applied to (1,0,0):
        #   b: (1,0,0) -> (0,1,0);  a: (0,1,0) -> (-1,0,0) + (1,0,0) = origin.
        a = RigidTransform(rotation_about_axis([0, 0, 1], np.pi / 2), [1.0, 0.0, 0.0])
        b = RigidTransform(rotation_about_axis([0, 0, 1], np.pi / 2), [0.0, 0.0, 0.0])
        out = compose(a, b).apply([1.0, 0.0, 0.0])
        np.testing.assert_allclose(out, [0.0, 0.0, 0.0], atol=1e-12)

    def test_matmul_matches_matrix_product(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            a = exp_map(rng.normal(size=6))
            b = exp_map(rng.normal(size=6))
            np.testing.assert_allclose(
                (a @ b).as_matrix(), a.as_matrix() @ b.as_matrix(), atol=1e-12
            )

    def test_inverse(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            t = exp_map(rng.normal(size=6))
            round_trip = t.compose(t.inverse())
            np.testing.assert_allclose(round_trip.rotation, np.eye(3), atol=1e-12)
            np.testing.assert_allclose(round_trip.translation, 0.0, atol=1e-12)
            p = rng.normal(size=3)
            np.testing.assert_allclose(t.inverse().apply(t.apply(p)), p, atol=1e-12)

    def test_apply_batched_matches_single(self):
        rng = np.random.default_rng(5)
        t = exp_map(rng.normal(size=6))
        pts = rng.normal(size=(17, 3))
        batched = t.apply(pts)
        for i in range(17):
            np.testing.assert_allclose(batched[i], t.apply(pts[i]), atol=1e-14)

    def test_orthonormalized_restores_so3(self):
        rng = np.random.default_rng(13)
        r = so3_exp(rng.normal(size=3))
        noisy = RigidTransform(r + 1e-4 * rng.normal(size=(3, 3)), np.zeros(3))
        fixed = noisy.orthonormalized()
        assert fixed.rotation_deviation() < 1e-12
        assert np.abs(fixed.rotation - r).max() < 1e-3


class TestExpLog:
    def test_pure_yaw_quarter_turn(self):
        # Rotation-first tangent ordering: (0, 0, pi/2, 0, 0, 0) is 90 deg
        # about z with zero translation part.
        t = exp_map([0.0, 0.0, np.pi / 2.0, 0.0, 0.0, 0.0])
        rz90 = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
        np.testing.assert_allclose(t.rotation, rz90, atol=1e-12)
        np.testing.assert_allclose(t.translation, 0.0, atol=1e-15)

    def test_pure_translation(self):
        t = exp_map([0.0, 0.0, 0.0, 0.3, -0.2, 0.9])
        np.testing.assert_allclose(t.rotation, np.eye(3), atol=1e-15)
        np.testing.assert_allclose(t.translation, [0.3, -0.2, 0.9], atol=1e-15)

    def test_round_trip_random(self):
        rng = np.random.default_rng(42)
        for _ in range(1000):
            omega = rng.normal(size=3)
            n = np.linalg.norm(omega)
            omega *= rng.uniform(0.0, 3.0) / max(n, 1e-12)
            xi = np.concatenate([omega, rng.normal(size=3)])
            np.testing.assert_allclose(log_map(exp_map(xi)), xi, atol=1e-9)

    def test_round_trip_tiny_and_near_pi_angles(self):
        rng = np.random.default_rng(8)
        for scale in (1e-12, 1e-9, 1e-6, np.pi - 1e-7, np.pi - 1e-3):
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            xi = np.concatenate([scale * axis, rng.normal(size=3)])
            np.testing.assert_allclose(log_map(exp_map(xi)), xi, atol=1e-6 * max(scale, 1.0))

    def test_log_angle_at_pi_is_branch_stable(self):
        axis = np.array([1.0, 0.0, 0.0])
        r = so3_exp(np.pi * axis)
        omega = so3_log(r)
        assert abs(np.linalg.norm(omega) - np.pi) < 1e-9
        np.testing.assert_allclose(so3_exp(omega), r, atol=1e-9)

    def test_against_scipy_rotation(self):
        rng = np.random.default_rng(99)
        for _ in range(200):
            rotvec = rng.normal(size=3)
            n = np.linalg.norm(rotvec)
            rotvec *= rng.uniform(0.0, np.pi - 1e-3) / max(n, 1e-12)
            np.testing.assert_allclose(
                so3_exp(rotvec), Rotation.from_rotvec(rotvec).as_matrix(), atol=1e-12
            )
            r = Rotation.random(random_state=int(rng.integers(1 << 31))).as_matrix()
            np.testing.assert_allclose(
                so3_exp(so3_log(r)), r, atol=1e-9, err_msg="log is not a right inverse"
            )

    def test_rotation_deviation_stays_small_after_many_updates(self):
        rng = np.random.default_rng(21)
        t = RigidTransform.identity()
        for _ in range(2000):
            t = exp_map(0.05 * rng.normal(size=6)).compose(t)
        assert t.rotation_deviation() < 1e-9


class TestQuaternions:
    def test_known_quarter_turn(self):
        q = rotation_to_quat(rotation_about_axis([0, 0, 1], np.pi / 2))
        s = np.sqrt(0.5)
        np.testing.assert_allclose(q, [s, 0.0, 0.0, s], atol=1e-12)

    def test_round_trip(self):
        rng = np.random.default_rng(17)
        for _ in range(200):
            r = Rotation.random(random_state=int(rng.integers(1 << 31))).as_matrix()
            np.testing.assert_allclose(quat_to_rotation(rotation_to_quat(r)), r, atol=1e-9)

    def test_matches_scipy_convention(self):
        rng = np.random.default_rng(23)
        for _ in range(100):
            r = Rotation.random(random_state=int(rng.integers(1 << 31)))
            w, x, y, z = rotation_to_quat(r.as_matrix())
            sx, sy, sz, sw = r.as_quat()  # scipy uses (x, y, z, w)
            ours = np.array([w, x, y, z])
            theirs = np.array([sw, sx, sy, sz])
            if theirs[0] < 0:
                theirs = -theirs
            np.testing.assert_allclose(ours, theirs, atol=1e-9)


class TestProjection:
    def test_hand_value(self):
        # u = 500 * 0.1/2 + 320 = 345 ; v = 500 * -0.05/2 + 240 = 227.5
        uv = project(CAM, [0.1, -0.05, 2.0])
        np.testing.assert_allclose(uv, [345.0, 227.5], atol=1e-12)

    def test_non_positive_depth_raises(self):
        for z in (0.0, -1.0, 1e-6, 5e-7):
            with pytest.raises(NonPositiveDepth):
                project(CAM, [0.0, 0.0, z])

    def test_project_points_matches_scalar(self):
        rng = np.random.default_rng(31)
        pts = rng.normal(size=(40, 3)) + [0, 0, 3.0]
        uv, valid = project_points(CAM, pts)
        for i in range(40):
            if pts[i, 2] > 1e-6:
                assert valid[i]
                np.testing.assert_allclose(uv[i], project(CAM, pts[i]), atol=1e-12)
        pts[:, 2] = -1.0
        uv, valid = project_points(CAM, pts)
        assert not valid.any() and np.isnan(uv).all()

    def test_invalid_intrinsics(self):
        with pytest.raises(InvalidIntrinsics):
            CameraModel(fx=-1.0, fy=500.0, cx=0.0, cy=0.0, width=10, height=10)
        with pytest.raises(InvalidIntrinsics):
            CameraModel(fx=500.0, fy=500.0, cx=0.0, cy=0.0, width=0, height=10)

    def test_contains(self):
        assert CAM.contains([0.0, 0.0])
        assert CAM.contains([639.9, 479.9])
        assert not CAM.contains([640.0, 100.0])
        assert not CAM.contains([-0.1, 100.0])


class TestJacobians:
    def _fd_point(self, point, h=1e-6):
        jac = np.zeros((2, 3))
        for i in range(3):
            dp = np.zeros(3)
            dp[i] = h
            jac[:, i] = (project(CAM, point + dp) - project(CAM, point - dp)) / (2 * h)
        return jac

    def test_projection_jacobian_fd(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            p = rng.normal(size=3) * [0.3, 0.3, 0.1] + [0, 0, 2.0]
            analytic = projection_jacobian(CAM, p)
            fd = self._fd_point(p)
            denom = max(np.abs(analytic).max(), 1.0)
            assert np.abs(analytic - fd).max() / denom < 1e-5

    def test_pose_point_jacobians_fd(self):
        rng = np.random.default_rng(4)
        h = 1e-6
        for _ in range(100):
            pose = exp_map(rng.normal(size=6) * 0.5)
            pose = RigidTransform(pose.rotation, rng.normal(size=3) * 0.2 + [0, 0, 2.5])
            point = rng.normal(size=3) * 0.1
            uv, j_pose, j_point = pose_point_jacobians(CAM, pose, point)
            np.testing.assert_allclose(uv, project(CAM, pose.apply(point)), atol=1e-12)
            fd_pose = np.zeros((2, 6))
            for i in range(6):
                xi = np.zeros(6)
                xi[i] = h
                hi = project(CAM, exp_map(xi).compose(pose).apply(point))
                lo = project(CAM, exp_map(-xi).compose(pose).apply(point))
                fd_pose[:, i] = (hi - lo) / (2 * h)
            denom = max(np.abs(j_pose).max(), 1.0)
            assert np.abs(j_pose - fd_pose).max() / denom < 1e-5
            fd_point = np.zeros((2, 3))
            for i in range(3):
                dp = np.zeros(3)
                dp[i] = h
                hi = project(CAM, pose.apply(point + dp))
                lo = project(CAM, pose.apply(point - dp))
                fd_point[:, i] = (hi - lo) / (2 * h)
            assert np.abs(j_point - fd_point).max() / max(np.abs(j_point).max(), 1.0) < 1e-5


class TestBoxesAndCrops:
    def test_from_points_hand_value(self):
        box = BoundingBox.from_points([[10.0, 20.0], [30.0, 60.0]], dilate=0.1, min_size=8.0)
        # Tight box 20x40, grown by 10% per side: x in [8, 32], y in [16, 64].
        np.testing.assert_allclose([box.x0, box.y0, box.w, box.h], [8.0, 16.0, 24.0, 48.0])

    def test_from_points_min_size_inflation(self):
        box = BoundingBox.from_points([[100.0, 50.0], [101.0, 50.5]], min_size=8.0)
        assert box.w == 8.0 and box.h == 8.0
        np.testing.assert_allclose(box.center, [100.5, 50.25])

    def test_degenerate_box_rejected(self):
        with pytest.raises(ValueError):
            BoundingBox(0.0, 0.0, 0.0, 10.0)

    def test_contains(self):
        box = BoundingBox(10.0, 20.0, 5.0, 5.0)
        assert box.contains([10.0, 20.0]) and box.contains([15.0, 25.0])
        assert not box.contains([15.1, 22.0])
        np.testing.assert_array_equal(
            box.contains_many([[12, 22], [9, 22], [12, 26]]), [True, False, False]
        )

    def test_crop_round_trip(self):
        mapping = CropMapping(BoundingBox(100.0, 50.0, 64.0, 32.0), grid_w=16, grid_h=8)
        rng = np.random.default_rng(6)
        for _ in range(50):
            uv = rng.uniform([100, 50], [164, 82])
            np.testing.assert_allclose(
                mapping.grid_to_pixel(mapping.pixel_to_grid(uv)), uv, atol=1e-12
            )

    def test_crop_cell_centers(self):
        # 64-px-wide box on a 16-wide grid: 4 px per cell; grid x=0 is the
        # center of the first cell, i.e. 2 px inside the box edge.
        mapping = CropMapping(BoundingBox(100.0, 50.0, 64.0, 32.0), grid_w=16, grid_h=8)
        np.testing.assert_allclose(mapping.grid_to_pixel([0.0, 0.0]), [102.0, 52.0])
        np.testing.assert_allclose(mapping.pixel_to_grid([102.0, 52.0]), [0.0, 0.0])

    def test_cov_scaling_oracle(self):
        # Monte-Carlo oracle: transform grid samples to pixels and compare
        # the empirical covariance to the analytic scaling.
        mapping = CropMapping(BoundingBox(0.0, 0.0, 40.0, 80.0), grid_w=10, grid_h=10)
        rng = np.random.default_rng(12)
        cov_grid = np.array([[2.0, 0.5], [0.5, 1.0]])
        samples = rng.multivariate_normal([3.0, 4.0], cov_grid, size=200_000)
        pix = np.array([mapping.grid_to_pixel(s) for s in samples[:1000]])
        # Analytic: diag(4, 8) Sigma diag(4, 8)
        expected = np.array([[32.0, 16.0], [16.0, 64.0]])
        np.testing.assert_allclose(mapping.cov_grid_to_pixel(cov_grid), expected, atol=1e-12)
        emp = np.cov(pix.T)
        assert np.abs(emp - expected).max() < 0.15 * np.abs(expected).max()
        np.testing.assert_allclose(
            mapping.cov_pixel_to_grid(mapping.cov_grid_to_pixel(cov_grid)), cov_grid, atol=1e-12
        )


class TestPoseJson:
    def test_round_trip(self):
        rng = np.random.default_rng(17)
        for _ in range(20):
            t = exp_map(rng.normal(size=6))
            back = pose_from_json(pose_to_json(t))
            np.testing.assert_allclose(back.rotation, t.rotation, atol=1e-15)
            np.testing.assert_allclose(back.translation, t.translation, atol=1e-15)

    def test_row_major_layout(self):
        t = RigidTransform(rotation_about_axis([0, 0, 1], np.pi / 2), [1.0, 2.0, 3.0])
        blob = pose_to_json(t)
        np.testing.assert_allclose(blob["rotation"], [0, -1, 0, 1, 0, 0, 0, 0, 1], atol=1e-12)
        assert blob["translation"] == [1.0, 2.0, 3.0]

    def test_rejects_non_rotation(self):
        with pytest.raises(ValueError):
            pose_from_json({"rotation": [1, 0, 0, 0, 2, 0, 0, 0, 1], "translation": [0, 0, 0]})
        with pytest.raises(ValueError):
            # Proper orthonormal but det = -1 (a reflection).
            pose_from_json({"rotation": [1, 0, 0, 0, 1, 0, 0, 0, -1], "translation": [0, 0, 0]})
