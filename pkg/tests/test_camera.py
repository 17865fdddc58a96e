import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.spatial.transform import Rotation

from facetwin.camera import (BehindCameraError, DegenerateConfigurationError, Extrinsics, Intrinsics, epnp_pose,
                             frontal_rotation, init_intrinsics, load_pose, project, quat_from_matrix,
                             quat_from_rotvec, quat_mul, quat_normalize, quat_to_matrix, reprojection_rmse,
                             save_pose)
from facetwin.synthetic import make_head


def rotation_error_deg(r1, r2):
    return np.degrees(Rotation.from_matrix(r1 @ r2.T).magnitude())


def test_init_intrinsics_published_formula():
    k = init_intrinsics(1000, 800)
    assert k.f == 1000 and k.fs == 1.0
    assert (k.cx, k.cy) == (500.0, 400.0)
    sq = init_intrinsics(512, 512)
    assert (sq.cx, sq.cy, sq.f) == (256.0, 256.0, 512.0)
    one = init_intrinsics(1, 1)
    assert one.f == 1.0


def test_init_intrinsics_literal_transposed_convention():
    k = init_intrinsics(1000, 800, swap_principal_point=True)
    assert (k.cx, k.cy) == (400.0, 500.0)


def test_intrinsics_invariants():
    with pytest.raises(ValueError):
        Intrinsics(0.0, 1, 1)
    with pytest.raises(ValueError):
        Intrinsics(1.0, 1, 1, fs=-1)
    k = Intrinsics(800.0, 10, 20, 1.5)
    np.testing.assert_array_equal(k.matrix, [[1200, 0, 10], [0, 1200, 20], [0, 0, 1]])


def test_project_optical_axis_and_offset():
    k = Intrinsics(1000.0, 320.0, 240.0)
    for z in (0.5, 10.0, 1e4):
        np.testing.assert_allclose(project(np.array([0.0, 0.0, z]), Extrinsics(), k), [320.0, 240.0])
    np.testing.assert_allclose(project(np.array([1.0, 0.0, 1000.0]), Extrinsics(), k), [321.0, 240.0])


def test_project_behind_camera():
    with pytest.raises(BehindCameraError):
        project(np.array([0.0, 0.0, -5.0]), Extrinsics(), Intrinsics(100.0, 0, 0))


def test_quaternion_conversions_against_scipy(rng):
    for _ in range(50):
        rot = Rotation.random(random_state=rng.integers(1 << 31))
        r = rot.as_matrix()
        q = quat_from_matrix(r)
        np.testing.assert_allclose(quat_to_matrix(q), r, atol=1e-12)
        w = rot.as_rotvec()
        np.testing.assert_allclose(quat_to_matrix(quat_from_rotvec(w)), r, atol=1e-12)


@given(arrays(np.float64, 3, elements=st.floats(-3, 3)), arrays(np.float64, 3, elements=st.floats(-3, 3)))
def test_quaternion_product_composes_rotations(a, b):
    qa, qb = quat_from_rotvec(a), quat_from_rotvec(b)
    np.testing.assert_allclose(quat_to_matrix(quat_mul(qa, qb)), quat_to_matrix(qa) @ quat_to_matrix(qb),
                               atol=1e-12)


def test_million_tangent_updates_keep_unit_norm():
    rng = np.random.default_rng(3)
    increments = [quat_from_rotvec(w) for w in rng.normal(scale=0.2, size=(997, 3))]
    q = np.array([1.0, 0.0, 0.0, 0.0])
    worst = 0.0
    for k in range(1_000_000):
        q = quat_normalize(quat_mul(increments[k % 997], q))
        if k % 1000 == 0:
            worst = max(worst, abs(np.linalg.norm(q) - 1.0))
    worst = max(worst, abs(np.linalg.norm(q) - 1.0))
    assert worst <= 1e-12


def test_retract_is_left_multiplicative():
    e = Extrinsics.from_matrix(Rotation.from_rotvec([0.1, 0.2, 0.3]).as_matrix(), np.zeros(3))
    w = np.array([0.01, -0.02, 0.03])
    np.testing.assert_allclose(e.retract(w).rotation, Rotation.from_rotvec(w).as_matrix() @ e.rotation,
                               atol=1e-14)


@given(arrays(np.float64, 3, elements=st.floats(-1, 1)), arrays(np.float64, 3, elements=st.floats(-50, 50)))
def test_projection_invariant_under_joint_rigid_motion(w, t):
    rng = np.random.default_rng(0)
    pts = rng.normal(scale=30.0, size=(10, 3))
    k = Intrinsics(900.0, 300.0, 200.0)
    cam = Extrinsics.from_matrix(frontal_rotation(), np.array([0.0, 0.0, 600.0]))
    m_r, m_t = Rotation.from_rotvec(w).as_matrix(), t
    moved = pts @ m_r.T + m_t
    # camera composed with the inverse motion
    inv = Extrinsics.from_matrix(cam.rotation @ m_r.T, cam.translation - cam.rotation @ m_r.T @ m_t)
    np.testing.assert_allclose(project(moved, inv, k), project(pts, cam, k), atol=1e-9)


def _scene(rng, n=20, depth=600.0):
    head = make_head(9, 15)
    pts = head.vertices[rng.choice(head.n_vertices, n, replace=False)]
    r = frontal_rotation() @ Rotation.from_euler("yxz", rng.uniform(-30, 30, 3), degrees=True).as_matrix()
    t = np.array([rng.uniform(-40, 40), rng.uniform(-40, 40), depth])
    return pts, Extrinsics.from_matrix(r, t)


def test_epnp_recovers_random_poses(rng):
    k = init_intrinsics(640, 480)
    for _ in range(20):
        pts, truth = _scene(rng)
        uv = project(pts, truth, k)
        est = epnp_pose(pts, uv, k)
        assert rotation_error_deg(est.rotation, truth.rotation) <= 0.1
        assert np.linalg.norm(est.translation - truth.translation) <= 1e-3 * truth.translation[2]
        assert reprojection_rmse(pts, uv, est, k) <= 1e-6


def test_epnp_identity_pose():
    rng = np.random.default_rng(9)
    pts = rng.uniform(-50, 50, (12, 3)) + [0, 0, 500]
    k = Intrinsics(800.0, 320.0, 240.0)
    est = epnp_pose(pts, project(pts, Extrinsics(), k), k)
    np.testing.assert_allclose(est.rotation, np.eye(3), atol=1e-8)
    np.testing.assert_allclose(est.translation, 0.0, atol=1e-6)


def test_epnp_planar_scene(rng):
    pts = np.column_stack([rng.uniform(-50, 50, (15, 2)), np.zeros(15)])
    truth = Extrinsics.from_matrix(Rotation.from_rotvec([0.2, -0.1, 0.05]).as_matrix(), np.array([5.0, 3.0, 400.0]))
    k = Intrinsics(800.0, 320.0, 240.0)
    est = epnp_pose(pts, project(pts, truth, k), k)
    assert reprojection_rmse(pts, project(pts, truth, k), est, k) <= 1e-6


def test_epnp_noise_keeps_reprojection_small():
    rng = np.random.default_rng(11)
    k = init_intrinsics(640, 480)
    worst = 0.0
    for _ in range(100):
        pts, truth = _scene(rng)
        uv = project(pts, truth, k) + rng.normal(scale=1.0, size=(len(pts), 2))
        worst = max(worst, reprojection_rmse(pts, uv, epnp_pose(pts, uv, k), k))
    assert worst <= 2.0


def test_epnp_degenerate_inputs():
    k = Intrinsics(800.0, 320.0, 240.0)
    with pytest.raises(DegenerateConfigurationError):
        epnp_pose(np.zeros((4, 3)), np.zeros((4, 2)), k)
    line = np.column_stack([np.arange(8.0), np.zeros(8), np.zeros(8)])
    with pytest.raises(DegenerateConfigurationError):
        epnp_pose(line, np.zeros((8, 2)), k)


def test_pose_file_round_trip(tmp_path):
    e = Extrinsics.from_matrix(Rotation.from_rotvec([0.3, 0.1, -0.2]).as_matrix(), np.array([1.0, 2.0, 3.0]))
    k = Intrinsics(900.0, 310.0, 250.0, 1.1)
    save_pose(tmp_path / "pose.json", e, k)
    e2, k2 = load_pose(tmp_path / "pose.json")
    assert e2 == e and k2 == k
