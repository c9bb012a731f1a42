"""Rigid poses, pinhole projection and the sphere/plane/arc constructions
used by the sensing-path planner.

Conventions: millimeters and radians; camera +z looks along the optical
axis, +x right, +y down. A ``Pose`` maps points from its local frame into
its parent frame (``p_parent = R @ p_local + t``).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

GEOM_TOL = 1e-9
BOUNDARY_TOL = 1e-6


class GeometryError(ValueError):
    """Base class for geometric precondition failures."""


class NonPositiveDepth(GeometryError):
    pass


class NoIntersection(GeometryError):
    pass


class DirectionNotInPlane(GeometryError):
    pass


class RayNotInPlane(GeometryError):
    pass


def _vec(v) -> np.ndarray:
    a = np.asarray(v, dtype=float).reshape(3)
    return a


def normalize(v) -> np.ndarray:
    v = _vec(v)
    n = np.linalg.norm(v)
    if n == 0.0:
        raise GeometryError("cannot normalize a zero vector")
    return v / n


def orthonormalize(r: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix (polar decomposition via SVD)."""
    u, _, vt = np.linalg.svd(r)
    out = u @ vt
    if np.linalg.det(out) < 0:
        u[:, -1] *= -1
        out = u @ vt
    return out


@dataclass(frozen=True, eq=False)
class Pose:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        if np.linalg.norm(r.T @ r - np.eye(3)) > GEOM_TOL:
            r = orthonormalize(r)
        if np.linalg.det(r) <= 0:
            raise GeometryError("rotation must have determinant +1")
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> Pose:
        return cls()

    @classmethod
    def from_matrix(cls, m) -> Pose:
        m = np.asarray(m, dtype=float)
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points) -> np.ndarray:
        """Map an (..., 3) array of points from the local into the parent frame."""
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation

    def inverse(self) -> Pose:
        return invert(self)

    def __matmul__(self, other: Pose) -> Pose:
        return compose(self, other)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Pose):
            return NotImplemented
        return bool(np.array_equal(self.rotation, other.rotation) and np.array_equal(self.translation, other.translation))

    __hash__ = None

    def almost_equal(self, other: Pose, tol: float = GEOM_TOL) -> bool:
        return bool(
            np.allclose(self.rotation, other.rotation, atol=tol, rtol=0)
            and np.allclose(self.translation, other.translation, atol=tol, rtol=0)
        )


def compose(a: Pose, b: Pose) -> Pose:
    """Pose that applies ``b`` first, then ``a``."""
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def invert(p: Pose) -> Pose:
    rt = p.rotation.T
    return Pose(rt, -rt @ p.translation)


def rotation_about_axis(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix for a rotation of ``angle`` about ``axis``."""
    k = normalize(axis)
    kx = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    return np.eye(3) + np.sin(angle) * kx + (1.0 - np.cos(angle)) * (kx @ kx)


def rot_x(angle: float) -> np.ndarray:
    return rotation_about_axis((1.0, 0.0, 0.0), angle)


def rot_z(angle: float) -> np.ndarray:
    return rotation_about_axis((0.0, 0.0, 1.0), angle)


def angle_between(a, b) -> float:
    """Unsigned angle between two vectors; atan2 form is accurate near 0 and pi."""
    a, b = _vec(a), _vec(b)
    return float(np.arctan2(np.linalg.norm(np.cross(a, b)), np.dot(a, b)))


def rotation_angle(r: np.ndarray) -> float:
    c = np.clip((np.trace(r) - 1.0) / 2.0, -1.0, 1.0)
    return float(np.arccos(c))


def look_at(eye, target, x_hint) -> Pose:
    """Camera pose at ``eye`` whose optical axis passes through ``target``.

    The camera x axis is ``x_hint`` with its component along the optical
    axis removed; the hint must not be parallel to the viewing direction.
    """
    eye, target = _vec(eye), _vec(target)
    z = normalize(target - eye)
    x = _vec(x_hint) - np.dot(x_hint, z) * z
    nx = np.linalg.norm(x)
    if nx < 1e-9:
        raise GeometryError("roll hint is parallel to the optical axis")
    x /= nx
    y = np.cross(z, x)
    return Pose(np.column_stack([x, y, z]), eye)


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @classmethod
    def from_fov(cls, width: int, height: int, hfov: float) -> Intrinsics:
        """Square-pixel intrinsics with principal point at the image center."""
        f = (width / 2.0) / np.tan(hfov / 2.0)
        return cls(f, f, width / 2.0, height / 2.0, width, height)

    def ray_directions(self) -> np.ndarray:
        """(H, W, 3) camera-frame directions with unit z component per pixel."""
        u, v = np.meshgrid(np.arange(self.width, dtype=float), np.arange(self.height, dtype=float))
        return np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], axis=-1)


def project(k: Intrinsics, p_cam) -> tuple[np.ndarray, float]:
    x, y, z = _vec(p_cam)
    if z <= 0:
        raise NonPositiveDepth(f"point at z={z} is not in front of the camera")
    return np.array([k.fx * x / z + k.cx, k.fy * y / z + k.cy]), float(z)


def backproject(k: Intrinsics, pixel, depth: float) -> np.ndarray:
    if depth <= 0:
        raise NonPositiveDepth(f"depth {depth} must be positive")
    u, v = np.asarray(pixel, dtype=float).reshape(2)
    return np.array([(u - k.cx) * depth / k.fx, (v - k.cy) * depth / k.fy, float(depth)])


@dataclass(frozen=True)
class Plane:
    point: np.ndarray
    normal: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "point", _vec(self.point))
        object.__setattr__(self, "normal", normalize(self.normal))

    @classmethod
    def from_points(cls, a, b, c) -> Plane:
        a, b, c = _vec(a), _vec(b), _vec(c)
        n = np.cross(b - a, c - a)
        if np.linalg.norm(n) < 1e-12 * max(1.0, np.linalg.norm(b - a) * np.linalg.norm(c - a)):
            raise NoIntersection("points are collinear and do not define a plane")
        return cls(a, n)

    def signed_distance(self, p) -> float:
        return float(np.dot(_vec(p) - self.point, self.normal))

    def project_point(self, p) -> np.ndarray:
        p = _vec(p)
        return p - self.signed_distance(p) * self.normal


@dataclass(frozen=True)
class Sphere:
    center: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", _vec(self.center))
        if not self.radius > 0:
            raise ValueError("sphere radius must be positive")


@dataclass(frozen=True)
class Arc:
    """Circle of ``radius`` around ``center`` in the plane spanned by ``u``, ``v``."""

    center: np.ndarray
    radius: float
    plane_normal: np.ndarray
    u: np.ndarray
    v: np.ndarray

    def point_at(self, phi: float) -> np.ndarray:
        return self.center + self.radius * (np.cos(phi) * self.u + np.sin(phi) * self.v)

    def angle_of(self, p) -> float:
        d = _vec(p) - self.center
        return float(np.arctan2(np.dot(d, self.v), np.dot(d, self.u)))


def _basis_for_normal(n: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # seed with the axis least aligned with n; v = n x u keeps (u, v, n) right-handed
    seed = np.eye(3)[int(np.argmin(np.abs(n)))]
    u = normalize(seed - np.dot(seed, n) * n)
    return u, np.cross(n, u)


def intersect_sphere_plane(s: Sphere, p: Plane) -> Arc:
    d = p.signed_distance(s.center)
    if abs(d) >= s.radius:
        raise NoIntersection(f"plane is {abs(d):.6g} mm from a sphere of radius {s.radius:.6g} mm")
    center = s.center - d * p.normal
    u, v = _basis_for_normal(p.normal)
    return Arc(center, float(np.sqrt(s.radius**2 - d**2)), p.normal, u, v)


def rotate_direction_in_plane(direction, pivot, angle: float, p: Plane) -> np.ndarray:
    """Rotate ``direction`` by ``angle`` about ``p.normal`` (counter-clockwise).

    ``pivot`` only has to lie in the plane; a direction has no position.
    """
    d = _vec(direction)
    if abs(np.dot(d, p.normal)) > GEOM_TOL * max(1.0, np.linalg.norm(d)):
        raise DirectionNotInPlane("direction has a component along the plane normal")
    if abs(p.signed_distance(pivot)) > BOUNDARY_TOL:
        raise DirectionNotInPlane("pivot does not lie in the plane")
    return normalize(rotation_about_axis(p.normal, angle) @ d)


def intersect_ray_arc(origin, direction, arc: Arc) -> list[np.ndarray]:
    """Points where a ray meets the arc's circle, nearest first."""
    o, d = _vec(origin), normalize(direction)
    if abs(np.dot(o - arc.center, arc.plane_normal)) > BOUNDARY_TOL or abs(np.dot(d, arc.plane_normal)) > BOUNDARY_TOL:
        raise RayNotInPlane("ray does not lie in the arc's plane")
    # |o + t d - c|^2 = r^2 with |d| = 1
    w = o - arc.center
    b = np.dot(w, d)
    c = np.dot(w, w) - arc.radius**2
    disc = b * b - c
    scale = max(1.0, arc.radius**2)
    if disc < -1e-12 * scale:
        return []
    if disc <= 1e-12 * scale:
        ts = [-b]
    else:
        # numerically stable pair of roots
        q = -b - np.copysign(np.sqrt(disc), b)
        ts = sorted((q, c / q))
    out = []
    for t in ts:
        if t < -1e-9 * max(1.0, arc.radius):
            continue
        t = max(t, 0.0)
        pt = o + t * d
        # snap onto the circle so membership holds to rounding
        rad = pt - arc.center
        rad -= np.dot(rad, arc.plane_normal) * arc.plane_normal
        out.append(arc.center + arc.radius * rad / np.linalg.norm(rad))
    return out
