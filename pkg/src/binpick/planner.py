"""Active-vision sensing paths.

The next target center is the confidence-weighted centroid of objects that
stay in the bin. Start and end sensor locations lie on the circle where
the working-distance sphere around that center cuts the plane through the
grasp point, lift-up point and drop point.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import (
    Arc,
    GeometryError,
    NoIntersection,
    Plane,
    Pose,
    Sphere,
    angle_between,
    intersect_ray_arc,
    intersect_sphere_plane,
    look_at,
    normalize,
    rotate_direction_in_plane,
)

MM_PER_S_AT_FULL_SPEED = 1000.0
GOLDEN_ANGLE = np.pi * (3.0 - np.sqrt(5.0))


class EmptyRemaining(ValueError):
    """No recognized objects remain; the caller should switch to search mode."""


class NoArcHit(GeometryError):
    pass


@dataclass(frozen=True)
class RecognizedObject:
    id: int
    position: np.ndarray
    confidence: float

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float).reshape(3))
        if not 0.0 < self.confidence <= 1.0:
            raise ValueError("confidence must be in (0, 1]")


@dataclass(frozen=True)
class PathParams:
    n: int
    t_ms: float
    v: float
    alpha: float
    beta: float
    gamma: float = np.deg2rad(5.0)
    working_distance: float = 300.0

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.t_ms <= 0:
            raise ValueError("t_ms must be positive")
        if not 0.0 < self.v <= 1.0:
            raise ValueError("v must be in (0, 1]")
        if not np.isclose(self.beta, (self.n - 1) * self.alpha, rtol=1e-12, atol=1e-12):
            raise ValueError("beta must equal (n - 1) * alpha")

    @classmethod
    def from_motion(cls, n: int, t_ms: float, v: float, working_distance: float = 300.0,
                    gamma: float = np.deg2rad(5.0)) -> PathParams:
        alpha = arc_step(t_ms, v) / working_distance
        return cls(n, t_ms, v, alpha, (n - 1) * alpha, gamma, working_distance)


def arc_step(t_ms: float, v: float) -> float:
    """Distance in mm travelled during one capture interval."""
    return v * MM_PER_S_AT_FULL_SPEED * t_ms / 1000.0


def coverage_from_params(n: int, t_ms: float, v: float, r_mm: float) -> tuple[float, float]:
    """Interval angle and coverage angle for n views captured t_ms apart at speed v."""
    if n < 2:
        raise ValueError("coverage needs at least two views")
    alpha = arc_step(t_ms, v) / r_mm
    return alpha, (n - 1) * alpha


def target_center(remaining: list[RecognizedObject]) -> np.ndarray:
    if not remaining:
        raise EmptyRemaining("no recognized objects remain")
    w = np.array([o.confidence for o in remaining])
    x = np.array([o.position for o in remaining])
    # normalizing first keeps single objects and equal weights exact
    return (w / w.sum()) @ x


@dataclass(frozen=True)
class SensingPath:
    """Start and end poses on ``arc``, both looking at ``target``.

    ``start_angle`` and ``sweep`` are central angles on the arc (signed
    sweep from start to end); ``beta`` is the angle the two locations
    subtend at the target.
    """

    start_pose: Pose
    end_pose: Pose
    target: np.ndarray
    beta: float
    arc: Arc
    start_angle: float
    sweep: float

    @property
    def start(self) -> np.ndarray:
        return self.start_pose.translation

    @property
    def end(self) -> np.ndarray:
        return self.end_pose.translation

    def pose_at_angle(self, phi: float) -> Pose:
        return look_at(self.arc.point_at(phi), self.target, self.arc.plane_normal)

    def pose_at_fraction(self, s: float) -> Pose:
        """Pose after travelling fraction ``s`` of the path (may extrapolate past the end)."""
        return self.pose_at_angle(self.start_angle + s * self.sweep)

    def arc_length(self) -> float:
        return abs(self.sweep) * self.arc.radius

    def translated(self, new_target) -> SensingPath:
        shift = np.asarray(new_target, dtype=float) - self.target
        arc = Arc(self.arc.center + shift, self.arc.radius, self.arc.plane_normal, self.arc.u, self.arc.v)
        return SensingPath(
            Pose(self.start_pose.rotation, self.start_pose.translation + shift),
            Pose(self.end_pose.rotation, self.end_pose.translation + shift),
            self.target + shift, self.beta, arc, self.start_angle, self.sweep,
        )


def _turn_sign(normal, frm, toward) -> float:
    """+1 when a counter-clockwise turn about ``normal`` moves ``frm`` toward ``toward``."""
    return 1.0 if np.dot(normal, np.cross(frm, toward)) >= 0 else -1.0


def _central_angle_for(beta: float, r: float, rho: float) -> float:
    """Central angle on a circle of radius ``rho`` whose chord subtends ``beta`` at distance ``r``."""
    s = r / rho * np.sin(beta / 2.0)
    if s > 1.0 + 1e-12:
        raise NoArcHit(f"coverage angle {np.rad2deg(beta):.3g} deg does not fit on the arc")
    return 2.0 * np.arcsin(min(s, 1.0))


def plan_sensing_path(T, A, B, C, params: PathParams) -> SensingPath:
    """Locate the start (M) and end (N) sensor positions for the next sensing path.

    M is where the lift-up ray from B, tilted by gamma toward C inside the
    plane ABC, meets the arc; N is beta further along the arc toward C as
    seen from T. When T is off the plane the rotation is done about T's
    projection onto it with the central angle that keeps angle MTN = beta.
    """
    T, A, B, C = (np.asarray(p, dtype=float).reshape(3) for p in (T, A, B, C))
    plane = Plane.from_points(A, B, C)
    arc = intersect_sphere_plane(Sphere(T, params.working_distance), plane)
    n = plane.normal

    lift = normalize(B - A)
    gamma = _turn_sign(n, lift, C - B) * params.gamma
    ray = rotate_direction_in_plane(lift, B, gamma, plane)
    hits = intersect_ray_arc(B, ray, arc)
    if not hits:
        raise NoArcHit("tilted lift-up ray misses the sensing arc")
    M = hits[0]

    c = arc.center
    phi = _central_angle_for(params.beta, params.working_distance, arc.radius)
    sweep = _turn_sign(n, M - c, C - c) * phi
    radial = rotate_direction_in_plane(normalize(M - c), c, sweep, plane)
    hits = intersect_ray_arc(c, radial, arc)
    if not hits:
        raise NoArcHit("rotated ray misses the sensing arc")
    N = hits[0]

    start_pose = look_at(M, T, n)
    end_pose = look_at(N, T, n)
    return SensingPath(start_pose, end_pose, T, float(params.beta), arc, arc.angle_of(M), float(sweep))


def sample_path_poses(path: SensingPath, n: int) -> list[Pose]:
    """n target-facing poses at equal spacing along the arc from start to end."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if n == 1:
        return [path.start_pose]
    poses = [path.start_pose]
    for j in range(1, n - 1):
        poses.append(path.pose_at_fraction(j / (n - 1)))
    poses.append(path.end_pose)
    return poses


def overhead_path(target, params: PathParams, heading=(1.0, 0.0, 0.0)) -> SensingPath:
    """Default path: a vertical arc above ``target`` centered on the straight-down view."""
    target = np.asarray(target, dtype=float).reshape(3)
    up = np.array([0.0, 0.0, 1.0])
    x = normalize(np.asarray(heading, dtype=float) - np.dot(heading, up) * up)
    normal = np.cross(up, x)
    arc = Arc(target, params.working_distance, normal, up, np.cross(normal, up))
    half = params.beta / 2.0
    start = arc.point_at(-half)
    end = arc.point_at(half)
    return SensingPath(look_at(start, target, normal), look_at(end, target, normal),
                       target, float(params.beta), arc, -half, float(params.beta))


def search_center(k: int, bin_length: float, bin_width: float, ring: int = 8, fill: float = 0.6) -> np.ndarray:
    """k-th target center of the search spiral over the bin floor (k = 0 is the center)."""
    rho = np.sqrt((k % ring) / ring)
    theta = k * GOLDEN_ANGLE
    return np.array([fill * bin_length / 2 * rho * np.cos(theta), fill * bin_width / 2 * rho * np.sin(theta), 0.0])


def angle_at_target(path: SensingPath) -> float:
    return angle_between(path.start - path.target, path.end - path.target)


def path_record(path: SensingPath, poses: list[Pose] | None = None) -> dict:
    """Plain-data description of a path for trace output."""
    rec = {
        "M": [float(x) for x in path.start],
        "N": [float(x) for x in path.end],
        "T": [float(x) for x in path.target],
        "beta": float(path.beta),
    }
    if poses is not None:
        rec["poses"] = [
            {"rotation": [float(x) for x in p.rotation.reshape(-1)], "translation": [float(x) for x in p.translation]}
            for p in poses
        ]
    return rec


__all__ = [
    "EmptyRemaining", "NoArcHit", "NoIntersection", "PathParams", "RecognizedObject", "SensingPath",
    "angle_at_target", "coverage_from_params", "overhead_path", "path_record", "plan_sensing_path",
    "sample_path_poses", "search_center", "target_center",
]
