import math

import numpy as np
import pytest

from gsdif.geometry import (
    BehindSourceError,
    GeometryError,
    make_circular_geometry,
    pixel_ray,
    project_point,
)


@pytest.fixture
def geom():
    return make_circular_geometry(6, 1000.0, 1500.0, (128, 96), 3.0)


def projection_matrix(geom, k):
    """Independent 3x4 pinhole matrix P = K [R | t] built from the angle alone."""
    th = k * math.pi / geom.n_views
    c, s = math.cos(th), math.sin(th)
    # camera frame: x_cam = u axis, y_cam = v axis, z_cam = principal direction
    R = np.array([[-s, c, 0.0], [0.0, 0.0, 1.0], [-c, -s, 0.0]])
    src = np.array([geom.sid * c, geom.sid * s, 0.0])
    t = -R @ src
    f = geom.sdd / geom.det_spacing
    n_u, n_v = geom.det_shape
    K = np.array([[f, 0, (n_u - 1) / 2], [0, f, (n_v - 1) / 2], [0, 0, 1]])
    return K @ np.hstack([R, t[:, None]])


def test_angles_six_views():
    g = make_circular_geometry(6)
    np.testing.assert_allclose(np.degrees(g.angles), [0, 30, 60, 90, 120, 150], atol=1e-12)


def test_single_view_source_on_plus_x():
    g = make_circular_geometry(1, 1000.0, 1500.0)
    assert g.angles.tolist() == [0.0]
    np.testing.assert_allclose(g.poses[0].source_pos, [1000.0, 0.0, 0.0], atol=1e-12)


@pytest.mark.parametrize("k_views", [1, 2, 5, 6, 8, 10, 37])
def test_pose_invariants(k_views):
    g = make_circular_geometry(k_views)
    assert len(g.poses) == k_views
    d = np.diff(g.angles)
    assert np.all(d > 0)
    np.testing.assert_allclose(d, math.pi / k_views, rtol=0, atol=1e-15)
    for p in g.poses:
        assert abs(np.linalg.norm(p.source_pos) - g.sid) < 1e-9
        assert abs(np.linalg.norm(p.detector_u_axis) - 1) < 1e-12
        assert abs(np.linalg.norm(p.detector_v_axis) - 1) < 1e-12
        assert abs(p.detector_u_axis @ p.detector_v_axis) < 1e-12


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(k_views=0),
        dict(sid=0.0),
        dict(sid=1500.0, sdd=1500.0),
        dict(det_shape=(1, 128)),
        dict(det_spacing=0.0),
    ],
)
def test_invalid_parameters(kwargs):
    with pytest.raises(GeometryError):
        make_circular_geometry(**kwargs)


def test_isocenter_maps_to_detector_center(geom):
    for k in range(geom.n_views):
        u, v = project_point(geom, k, [0.0, 0.0, 0.0])
        assert u == pytest.approx(127 / 2, abs=1e-9)
        assert v == pytest.approx(95 / 2, abs=1e-9)


def test_axis_point_magnification(geom):
    h = 20.0
    for k in range(geom.n_views):
        u, v = project_point(geom, k, [0.0, 0.0, h])
        assert v - 95 / 2 == pytest.approx(h * (geom.sdd / geom.sid) / geom.det_spacing, abs=1e-9)
        assert u == pytest.approx(127 / 2, abs=1e-9)


def test_matches_homogeneous_matrix_oracle(geom):
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        k = int(rng.integers(geom.n_views))
        p = rng.uniform(-150, 150, 3)
        x = projection_matrix(geom, k) @ np.append(p, 1.0)
        uv_oracle = x[:2] / x[2]
        worst = max(worst, np.abs(np.array(project_point(geom, k, p)) - uv_oracle).max())
    assert worst < 1e-6


def test_behind_source_rejected(geom):
    src = geom.poses[0].source_pos
    with pytest.raises(BehindSourceError):
        project_point(geom, 0, src)
    with pytest.raises(BehindSourceError):
        project_point(geom, 0, src * 1.5)


def test_pixel_ray_through_isocenter(geom):
    for k in range(geom.n_views):
        ray = pixel_ray(geom, k, geom.det_center)
        d = ray.p_d - ray.p_s
        t = -(ray.p_s @ d) / (d @ d)
        assert np.linalg.norm(ray.p_s + t * d) < 1e-9


def test_pixel_ray_round_trip_and_length(geom):
    rng = np.random.default_rng(1)
    for _ in range(200):
        k = int(rng.integers(geom.n_views))
        uv = rng.uniform(-20, 150, 2)
        ray = pixel_ray(geom, k, uv)
        assert ray.length >= geom.sdd - 1e-9
        t = rng.uniform(1e-3, 1.0)
        back = project_point(geom, k, ray.at(t))
        assert np.abs(np.array(back) - uv).max() < 1e-6


def test_joint_rotation_invariance():
    # rotating a point by pi/K about z moves it from view k to view k+1
    g = make_circular_geometry(8)
    step = math.pi / g.n_views
    c, s = math.cos(step), math.sin(step)
    rot = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    rng = np.random.default_rng(2)
    for _ in range(50):
        p = rng.uniform(-100, 100, 3)
        k = int(rng.integers(g.n_views - 1))
        a = np.array(project_point(g, k, p))
        b = np.array(project_point(g, k + 1, rot @ p))
        assert np.abs(a - b).max() < 1e-9


def test_geometry_dict_round_trip(geom):
    again = type(geom).from_dict(geom.to_dict())
    assert again.to_dict() == geom.to_dict()
    for a, b in zip(geom.poses, again.poses):
        assert np.array_equal(a.source_pos, b.source_pos)
