import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from binpick.geometry import (
    Arc,
    DirectionNotInPlane,
    GeometryError,
    Intrinsics,
    NoIntersection,
    NonPositiveDepth,
    Plane,
    Pose,
    RayNotInPlane,
    Sphere,
    angle_between,
    backproject,
    compose,
    intersect_ray_arc,
    intersect_sphere_plane,
    invert,
    look_at,
    project,
    rot_z,
    rotate_direction_in_plane,
    rotation_about_axis,
)

from .oracles import rodrigues

K640 = Intrinsics(600.0, 600.0, 320.0, 240.0, 640, 480)

finite = st.floats(-500, 500, allow_nan=False)
vec3 = st.tuples(finite, finite, finite).map(np.array)
unit = st.tuples(st.floats(-1, 1), st.floats(-1, 1), st.floats(-1, 1)).filter(
    lambda v: np.linalg.norm(v) > 0.1).map(lambda v: np.array(v) / np.linalg.norm(v))
angle = st.floats(-np.pi, np.pi)


@st.composite
def poses(draw):
    return Pose(rodrigues(draw(unit), draw(angle)), draw(vec3))


# --- Pose -------------------------------------------------------------------

def test_compose_identity_is_neutral():
    p = Pose(rot_z(0.3), (1.0, 2.0, 3.0))
    assert compose(Pose.identity(), p).almost_equal(p)
    assert compose(p, Pose.identity()).almost_equal(p)


def test_compose_with_inverse_is_identity():
    p = Pose(rodrigues((1, 2, 3), 0.7), (10.0, -4.0, 250.0))
    assert compose(p, invert(p)).almost_equal(Pose.identity(), 1e-9)


def test_compose_rz30_rz60_gives_rz90():
    a = Pose(rot_z(np.deg2rad(30)), (1.0, 0.0, 0.0))
    b = Pose(rot_z(np.deg2rad(60)), (0.0, 2.0, 0.0))
    expected = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    c = compose(a, b)
    np.testing.assert_allclose(c.rotation, expected, atol=1e-12)
    # translation: Rz(30) (0, 2, 0) + (1, 0, 0)
    np.testing.assert_allclose(c.translation, [1.0 - 2 * np.sin(np.deg2rad(30)), 2 * np.cos(np.deg2rad(30)), 0.0],
                               atol=1e-12)


def test_compose_applies_b_then_a():
    a = Pose(rot_z(0.5), (3.0, 0.0, 1.0))
    b = Pose(rodrigues((1, 0, 0), 0.2), (0.0, 5.0, 0.0))
    p = np.array([1.0, 2.0, 3.0])
    np.testing.assert_allclose(compose(a, b).apply(p), a.apply(b.apply(p)), atol=1e-12)


def test_pose_rejects_reflection():
    with pytest.raises(GeometryError):
        Pose(np.diag([1.0, 1.0, -1.0]))


def test_pose_reorthonormalizes_drift():
    r = rot_z(0.4) + 1e-6
    p = Pose(r)
    assert np.linalg.norm(p.rotation.T @ p.rotation - np.eye(3)) < 1e-12


def test_pose_is_immutable():
    p = Pose.identity()
    with pytest.raises(ValueError):
        p.rotation[0, 0] = 2.0


def test_matrix_round_trip():
    p = Pose(rodrigues((0, 1, 1), 1.1), (4.0, 5.0, 6.0))
    assert Pose.from_matrix(p.matrix()).almost_equal(p, 1e-12)


@given(poses(), poses(), poses())
def test_compose_is_associative(a, b, c):
    assert compose(compose(a, b), c).almost_equal(compose(a, compose(b, c)), 1e-9)


@given(st.lists(poses(), min_size=1, max_size=100))
def test_long_chain_stays_orthonormal_and_inverts(chain):
    acc = Pose.identity()
    for p in chain:
        acc = compose(acc, p)
    r = acc.rotation
    assert np.linalg.norm(r.T @ r - np.eye(3)) < 1e-9
    assert np.linalg.det(r) == pytest.approx(1.0, abs=1e-9)
    for p in reversed(chain):
        acc = compose(acc, invert(p))
    np.testing.assert_allclose(acc.rotation, np.eye(3), atol=1e-9)
    # translations grow with the chain; check relative to their scale
    scale = max(1.0, sum(np.linalg.norm(p.translation) for p in chain))
    assert np.linalg.norm(acc.translation) < 1e-9 * scale * 10


@given(unit, angle)
def test_rodrigues_matches_quaternion_oracle(axis, a):
    np.testing.assert_allclose(rotation_about_axis(axis, a), rodrigues(axis, a), atol=1e-12)


# --- projection -------------------------------------------------------------

def test_project_optical_axis():
    px, z = project(K640, (0.0, 0.0, 300.0))
    np.testing.assert_allclose(px, [320.0, 240.0])
    assert z == 300.0


def test_project_off_axis_example():
    px, _ = project(K640, (30.0, 0.0, 300.0))
    np.testing.assert_allclose(px, [380.0, 240.0])


def test_project_behind_camera_raises():
    with pytest.raises(NonPositiveDepth):
        project(K640, (0.0, 0.0, -5.0))
    with pytest.raises(NonPositiveDepth):
        project(K640, (1.0, 1.0, 0.0))


def test_backproject_examples():
    np.testing.assert_allclose(backproject(K640, (320.0, 240.0), 300.0), [0.0, 0.0, 300.0])
    np.testing.assert_allclose(backproject(K640, (380.0, 240.0), 300.0), [30.0, 0.0, 300.0])
    with pytest.raises(NonPositiveDepth):
        backproject(K640, (1.0, 1.0), 0.0)


@given(st.floats(0, 639), st.floats(0, 479), st.floats(1.0, 5000.0))
def test_project_backproject_round_trip(u, v, d):
    px, z = project(K640, backproject(K640, (u, v), d))
    np.testing.assert_allclose(px, [u, v], atol=1e-9)
    assert z == pytest.approx(d, abs=1e-9)


@given(finite, finite, st.floats(1.0, 5000.0))
def test_backproject_project_round_trip(x, y, z):
    p = np.array([x, y, z])
    px, d = project(K640, p)
    np.testing.assert_allclose(backproject(K640, px, d), p, atol=1e-9 * max(1.0, np.abs(p).max()))


def test_intrinsics_validation():
    with pytest.raises(ValueError):
        Intrinsics(0.0, 1.0, 1.0, 1.0, 4, 4)
    with pytest.raises(ValueError):
        Intrinsics(1.0, 1.0, 4.0, 1.0, 4, 4)


def test_look_at_puts_target_on_axis():
    pose = look_at((100.0, 50.0, 300.0), (0.0, 0.0, 0.0), (0.0, 1.0, 0.0))
    cam = invert(pose).apply(np.zeros(3))
    assert cam[0] == pytest.approx(0.0, abs=1e-9) and cam[1] == pytest.approx(0.0, abs=1e-9)
    assert cam[2] == pytest.approx(np.linalg.norm([100.0, 50.0, 300.0]))
    with pytest.raises(GeometryError):
        look_at((0.0, 0.0, 1.0), (0.0, 0.0, 0.0), (0.0, 0.0, 1.0))


# --- planes, spheres, arcs --------------------------------------------------

def test_great_circle():
    arc = intersect_sphere_plane(Sphere((0, 0, 0), 300.0), Plane((0, 0, 0), (0, 0, 1)))
    assert arc.radius == pytest.approx(300.0)
    np.testing.assert_allclose(arc.center, 0.0, atol=1e-12)


def test_small_circle_radius_240():
    arc = intersect_sphere_plane(Sphere((0, 0, 0), 300.0), Plane((0, 0, 180), (0, 0, 1)))
    assert arc.radius == pytest.approx(240.0, abs=1e-12)
    np.testing.assert_allclose(arc.center, [0, 0, 180], atol=1e-12)


def test_tangent_plane_raises():
    with pytest.raises(NoIntersection):
        intersect_sphere_plane(Sphere((0, 0, 0), 300.0), Plane((0, 0, 300), (0, 0, 1)))
    with pytest.raises(NoIntersection):
        intersect_sphere_plane(Sphere((0, 0, 0), 300.0), Plane((0, 0, 400), (0, 0, 1)))


def test_collinear_points_raise():
    with pytest.raises(NoIntersection):
        Plane.from_points((0, 0, 0), (1, 1, 1), (2, 2, 2))


@given(vec3, st.floats(1.0, 1000.0), vec3, unit, st.floats(-0.999, 0.999), st.floats(-np.pi, np.pi))
def test_arc_points_on_sphere_and_plane(center, radius, off, normal, frac, phi):
    plane = Plane(center + frac * radius * normal, normal)
    arc = intersect_sphere_plane(Sphere(center, radius), plane)
    assert abs(np.dot(arc.u, arc.v)) < 1e-12
    assert abs(np.dot(arc.u, arc.plane_normal)) < 1e-12 and abs(np.dot(arc.v, arc.plane_normal)) < 1e-12
    p = arc.point_at(phi)
    scale = max(1.0, radius, np.abs(center).max())
    assert abs(np.linalg.norm(p - arc.center) - arc.radius) < 1e-9 * scale
    assert abs(np.linalg.norm(p - center) - radius) < 1e-9 * scale
    assert abs(plane.signed_distance(p)) < 1e-9 * scale


def test_rotate_identity_and_quarter_turn():
    plane = Plane((0, 0, 0), (0, 0, 1))
    d = np.array([1.0, 0.0, 0.0])
    np.testing.assert_allclose(rotate_direction_in_plane(d, (5, 5, 0), 0.0, plane), d)
    np.testing.assert_allclose(rotate_direction_in_plane(d, (0, 0, 0), np.pi / 2, plane), [0, 1, 0], atol=1e-15)
    five = np.deg2rad(5)
    np.testing.assert_allclose(rotate_direction_in_plane(d, (0, 0, 0), five, plane),
                               [np.cos(five), np.sin(five), 0.0], atol=1e-15)


def test_rotate_rejects_out_of_plane_inputs():
    plane = Plane((0, 0, 0), (0, 0, 1))
    with pytest.raises(DirectionNotInPlane):
        rotate_direction_in_plane((1.0, 0.0, 0.1), (0, 0, 0), 0.1, plane)
    with pytest.raises(DirectionNotInPlane):
        rotate_direction_in_plane((1.0, 0.0, 0.0), (0, 0, 1), 0.1, plane)


@given(unit, unit, st.floats(-np.pi + 1e-3, np.pi - 1e-3))
def test_rotate_preserves_plane_norm_and_angle(normal, seed_dir, a):
    plane = Plane((0, 0, 0), normal)
    d = seed_dir - np.dot(seed_dir, normal) * normal
    if np.linalg.norm(d) < 1e-3:
        return
    d /= np.linalg.norm(d)
    out = rotate_direction_in_plane(d, (0, 0, 0), a, plane)
    assert abs(np.linalg.norm(out) - 1.0) < 1e-12
    assert abs(np.dot(out, normal)) < 1e-9
    assert angle_between(d, out) == pytest.approx(abs(a), abs=1e-9)
    # counter-clockwise about the normal
    assert np.dot(np.cross(d, out), normal) * np.sign(a) >= -1e-12


def _xy_arc(r=100.0):
    return intersect_sphere_plane(Sphere((0, 0, 0), r), Plane((0, 0, 0), (0, 0, 1)))


def test_radial_ray_hits_once():
    arc = _xy_arc()
    hits = intersect_ray_arc(arc.center, arc.u, arc)
    assert len(hits) == 1
    assert np.linalg.norm(hits[0] - arc.center) == pytest.approx(100.0, abs=1e-9)


def test_tangent_ray_hits_once():
    hits = intersect_ray_arc((-200.0, 100.0, 0.0), (1.0, 0.0, 0.0), _xy_arc())
    assert len(hits) == 1
    np.testing.assert_allclose(hits[0], [0.0, 100.0, 0.0], atol=1e-6)


def test_secant_ray_two_hits_nearest_first():
    # o = (-200, 60, 0), d = +x: (t - 200)^2 + 60^2 = 100^2 -> t = 120, 280
    hits = intersect_ray_arc((-200.0, 60.0, 0.0), (1.0, 0.0, 0.0), _xy_arc())
    assert len(hits) == 2
    np.testing.assert_allclose(hits[0], [-80.0, 60.0, 0.0], atol=1e-9)
    np.testing.assert_allclose(hits[1], [80.0, 60.0, 0.0], atol=1e-9)


def test_ray_pointing_away_misses():
    assert intersect_ray_arc((-200.0, 0.0, 0.0), (-1.0, 0.0, 0.0), _xy_arc()) == []
    assert intersect_ray_arc((-200.0, 150.0, 0.0), (1.0, 0.0, 0.0), _xy_arc()) == []


def test_ray_out_of_plane_raises():
    with pytest.raises(RayNotInPlane):
        intersect_ray_arc((0.0, 0.0, 1.0), (1.0, 0.0, 0.0), _xy_arc())
    with pytest.raises(RayNotInPlane):
        intersect_ray_arc((0.0, 0.0, 0.0), (1.0, 0.0, 1.0), _xy_arc())


@given(st.floats(-300, 300), st.floats(-300, 300), angle, st.floats(1.0, 400.0))
def test_ray_hits_are_on_circle_and_ordered(ox, oy, heading, r):
    arc = Arc(np.zeros(3), r, np.array([0.0, 0.0, 1.0]), np.array([1.0, 0, 0]), np.array([0, 1.0, 0]))
    o = np.array([ox, oy, 0.0])
    d = np.array([np.cos(heading), np.sin(heading), 0.0])
    hits = intersect_ray_arc(o, d, arc)
    ts = [np.dot(h - o, d) for h in hits]
    for h in hits:
        assert abs(np.linalg.norm(h) - r) < 1e-9 * max(1.0, r)
    assert all(t >= -1e-6 for t in ts)
    assert ts == sorted(ts)
