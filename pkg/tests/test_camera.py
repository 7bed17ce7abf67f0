import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from motionsplat.camera import (CameraTrajectory, Extrinsics, Intrinsics, look_at, make_trajectory,
                                pixel_ray, plucker_embed, project_point, project_points, read_plucker,
                                read_trajectory, write_plucker, write_trajectory)
from motionsplat.errors import BehindCameraError, ParseError, ValidationError
from motionsplat.se3 import RigidTransform, Twist, se3_exp
from oracles import naive_plucker

K640 = Intrinsics(100.0, 100.0, 320.0, 240.0, 640, 480)


def random_pose(rng):
    return Extrinsics(se3_exp(Twist(rng.normal(scale=0.5, size=3), rng.normal(size=3))))


def test_intrinsics_validation():
    with pytest.raises(ValidationError):
        Intrinsics(0.0, 1.0, 1.0, 1.0, 4, 4)
    with pytest.raises(ValidationError):
        Intrinsics(1.0, 1.0, 4.0, 1.0, 4, 4)


def test_project_on_axis_and_offset():
    pix, z = project_point([0, 0, 5], K640, Extrinsics.identity())
    assert np.allclose(pix, [320, 240]) and z == 5
    pix, z = project_point([1, 0, 5], K640, Extrinsics.identity())
    assert np.allclose(pix, [340, 240]) and z == 5


def test_project_behind_camera():
    with pytest.raises(BehindCameraError):
        project_point([0, 0, 1e-7], K640, Extrinsics.identity())
    with pytest.raises(BehindCameraError):
        project_point([0, 0, -1], K640, Extrinsics.identity())


def test_project_matches_homogeneous_matrix():
    rng = np.random.default_rng(0)
    for _ in range(20):
        E = random_pose(rng)
        x = E.center + 3 * E.R[2] + rng.normal(scale=0.5, size=3)
        P = K640.matrix @ E.pose.matrix[:3]
        h = P @ np.append(x, 1.0)
        pix, z = project_point(x, K640, E)
        assert np.allclose(pix, h[:2] / h[2], atol=1e-9)
        assert np.isclose(z, h[2])


def test_pixel_ray_examples():
    o, d = pixel_ray(320, 240, K640, Extrinsics.identity())
    assert np.allclose(o, 0) and np.allclose(d, [0, 0, 1])
    E = Extrinsics.from_center(np.eye(3), [1, 0, 0])
    o, d = pixel_ray(320, 240, K640, E)
    assert np.allclose(o, [1, 0, 0]) and np.allclose(d, [0, 0, 1])
    K1 = Intrinsics(1.0, 1.0, 0.0, 0.0, 4, 4)
    _, d = pixel_ray(1, 0, K1, Extrinsics.identity())
    assert np.allclose(d, [math.sqrt(2) / 2, 0, math.sqrt(2) / 2])


def test_pixel_ray_out_of_bounds():
    with pytest.raises(ValidationError):
        pixel_ray(640, 0, K640, Extrinsics.identity())


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 639), st.integers(0, 479), st.floats(0.1, 50.0), st.integers(0, 2**31 - 1))
def test_ray_projects_back_to_pixel(u, v, s, seed):
    E = random_pose(np.random.default_rng(seed))
    o, d = pixel_ray(u, v, K640, E)
    pix, _ = project_point(o + s * d, K640, E)
    assert np.max(np.abs(pix - [u, v])) < 0.5e-3


def test_plucker_examples():
    P = plucker_embed(K640, Extrinsics.identity())
    assert np.allclose(P[:, 240, 320], [0, 0, 0, 0, 0, 1])
    P = plucker_embed(K640, Extrinsics.from_center(np.eye(3), [1, 0, 0]))
    assert np.allclose(P[:, 240, 320], [0, -1, 0, 0, 0, 1])


def test_plucker_matches_naive_small():
    E = random_pose(np.random.default_rng(1))
    K = Intrinsics(3.0, 3.5, 1.5, 1.5, 4, 4)
    assert np.max(np.abs(plucker_embed(K, E) - naive_plucker(K, E))) < 1e-12


def test_plucker_invariant_to_point_on_ray():
    E = random_pose(np.random.default_rng(2))
    P = plucker_embed(K640, E)
    d = P[3:, 100, 200]
    o = E.center
    assert np.allclose(np.cross(o + 7.3 * d, d), P[:3, 100, 200], atol=1e-9)


def test_plucker_file_round_trip(tmp_path):
    traj = make_trajectory("orbit", 3, Intrinsics(4.0, 4.0, 2.0, 1.5, 5, 4), radius=2.0)
    files = write_plucker(tmp_path, traj)
    assert len(files) == 3
    assert (tmp_path / "00000.f32").stat().st_size == 6 * 4 * 5 * 4
    back = read_plucker(tmp_path)
    assert back.shape == (3, 6, 4, 5)
    assert np.allclose(back[1], plucker_embed(traj.intrinsics, traj.poses[1]), atol=1e-6)


def test_trajectory_round_trip(tmp_path):
    traj = make_trajectory("orbit", 3, radius=2.0, elevation=0.3, frame_rate=24.0)
    write_trajectory(tmp_path / "camera.json", traj)
    back = read_trajectory(tmp_path / "camera.json")
    assert back.frame_rate == 24.0 and back.intrinsics == traj.intrinsics
    for a, b in zip(traj.poses, back.poses):
        assert np.max(np.abs(a.pose.matrix - b.pose.matrix)) < 1e-12


def test_trajectory_80_frames(tmp_path):
    traj = make_trajectory("orbit", 80, radius=2.0, frame_rate=8.0)
    write_trajectory(tmp_path / "camera.json", traj)
    back = read_trajectory(tmp_path / "camera.json")
    assert len(back) == 80 and back.frame_rate == 8.0


def _camera_doc(frame):
    return {"frame_rate": 30, "intrinsics": {"fx": 10, "fy": 10, "cx": 2, "cy": 2, "width": 4, "height": 4},
            "frames": [frame]}


def test_trajectory_rejects_reflection(tmp_path):
    p = tmp_path / "camera.json"
    p.write_text(json.dumps(_camera_doc({"R": [1, 0, 0, 0, 1, 0, 0, 0, -1], "t": [0, 0, 0]})))
    with pytest.raises(ValidationError, match="SO\\(3\\)"):
        read_trajectory(p)


def test_trajectory_rejects_non_unit_quaternion(tmp_path):
    p = tmp_path / "camera.json"
    p.write_text(json.dumps(_camera_doc({"q": [2, 0, 0, 0], "t": [0, 0, 0]})))
    with pytest.raises(ValidationError):
        read_trajectory(p)


def test_trajectory_parse_errors(tmp_path):
    p = tmp_path / "camera.json"
    p.write_text('{"frame_rate": 30,\n "frames": [}')
    with pytest.raises(ParseError, match="line 2"):
        read_trajectory(p)
    p.write_text(json.dumps(_camera_doc({"q": [1, 0, 0], "t": [0, 0, 0]})))
    with pytest.raises(ParseError, match=r"frames\[0\]\.q"):
        read_trajectory(p)
    p.write_text(json.dumps({"frame_rate": 30, "frames": []}))
    with pytest.raises(ParseError, match="intrinsics"):
        read_trajectory(p)


def test_make_static():
    traj = make_trajectory("static", 5, center=(0, 0, -2), target=(0, 0, 0))
    assert len(traj) == 5
    assert all(np.array_equal(E.pose.matrix, traj.poses[0].pose.matrix) for E in traj.poses)


def test_make_orbit_looks_at_target():
    traj = make_trajectory("orbit", 4, radius=2.0, target=(0, 0, 0))
    for E in traj.poses:
        assert np.isclose(np.linalg.norm(E.center), 2.0)
        pix, _ = project_point([0, 0, 0], traj.intrinsics, E)
        assert np.allclose(pix, [traj.intrinsics.cx, traj.intrinsics.cy])


def test_make_dolly_linear():
    traj = make_trajectory("dolly", 10, start=(0, 0, -2), direction=(0, 0, 1), distance=1.0)
    c = np.array([E.center for E in traj.poses])
    assert np.allclose(np.diff(c, axis=0), [0, 0, 1 / 9])


def test_make_trajectory_invalid():
    with pytest.raises(ValidationError):
        make_trajectory("spiral", 4)
    with pytest.raises(ValidationError):
        make_trajectory("orbit", 4, radius=-1.0)


def test_look_at_is_rotation():
    E = look_at([1, 2, 3], [0, 0, 0])
    assert E.pose.is_valid()
    assert isinstance(CameraTrajectory(K640, [E]), CameraTrajectory)
    pts = np.array([[0, 0, 0], [0.1, 0, 0]])
    pix, z = project_points(pts, K640, E)
    assert np.allclose(pix[0], [320, 240]) and np.all(z > 0)
    assert isinstance(E.pose, RigidTransform)
