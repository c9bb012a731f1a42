"""Synthetic bin scenes: piled primitives, ray-cast depth, sensor noise and
hand-eye synchronization jitter.

World frame: bin floor is ``z = 0`` centered at the origin, ``+z`` up.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .fusion import DepthImage
from .geometry import Intrinsics, Pose, rot_x, rot_z

logger = logging.getLogger(__name__)

SHAPES = ("sphere", "box", "cylinder")
LABEL_FLOOR = -1
LABEL_WALL = -2
LABEL_NONE = -3
SPECULAR_EXPONENT = 4.0
MAX_REJECTIONS = 10_000


class PlacementFailure(RuntimeError):
    pass


class UnknownObject(KeyError):
    pass


def _check_dims(shape: str, dims: tuple[float, ...]) -> None:
    expected = {"sphere": 1, "box": 3, "cylinder": 2}
    if shape not in expected:
        raise ValueError(f"unknown shape {shape!r}; expected one of {SHAPES}")
    if len(dims) != expected[shape]:
        raise ValueError(f"{shape} needs {expected[shape]} dimensions, got {len(dims)}")
    if any(d <= 0 for d in dims):
        raise ValueError("object dimensions must be positive")


def bounding_radius(shape: str, dims: tuple[float, ...]) -> float:
    if shape == "sphere":
        return float(dims[0])
    if shape == "box":
        return float(np.linalg.norm(dims) / 2.0)
    r, h = dims
    return float(np.hypot(r, h / 2.0))


@dataclass(frozen=True)
class SceneObject:
    """A primitive; box dims are full edge lengths, cylinder dims are (radius, height)."""

    id: int
    shape: str
    dims: tuple[float, ...]
    pose: Pose
    dropout_susceptibility: float = 1.0

    def __post_init__(self):
        _check_dims(self.shape, tuple(self.dims))
        if not 0.0 <= self.dropout_susceptibility <= 1.0:
            raise ValueError("dropout_susceptibility must be in [0, 1]")

    @property
    def position(self) -> np.ndarray:
        return self.pose.translation

    @property
    def radius(self) -> float:
        return bounding_radius(self.shape, self.dims)


@dataclass(frozen=True)
class Bin:
    length: float = 500.0
    width: float = 250.0
    wall_height: float = 100.0
    floor_susceptibility: float = 0.2

    def contains_xy(self, p, margin: float = 0.0) -> bool:
        return abs(p[0]) <= self.length / 2 - margin and abs(p[1]) <= self.width / 2 - margin


@dataclass(frozen=True)
class Scene:
    bin: Bin
    objects: tuple[SceneObject, ...] = ()
    rng_seed: int = 0

    def __post_init__(self):
        ids = [o.id for o in self.objects]
        if len(set(ids)) != len(ids):
            raise ValueError("object ids must be unique")
        object.__setattr__(self, "objects", tuple(self.objects))

    def get(self, obj_id: int) -> SceneObject:
        for o in self.objects:
            if o.id == obj_id:
                return o
        raise UnknownObject(obj_id)

    def __len__(self) -> int:
        return len(self.objects)


@dataclass(frozen=True)
class ObjectTemplate:
    shape: str
    dims: tuple[float, ...]
    count: int
    dropout_susceptibility: float = 0.9

    def __post_init__(self):
        _check_dims(self.shape, tuple(self.dims))
        if self.count < 0:
            raise ValueError("template count must be >= 0")


@dataclass(frozen=True)
class SceneSpec:
    bin: Bin = field(default_factory=Bin)
    templates: tuple[ObjectTemplate, ...] = ()
    # std of the pile around the bin center, as a fraction of the bin size
    pile_spread: float = 0.25


@dataclass(frozen=True)
class NoiseModel:
    sensor_accuracy: float = 1.0
    dropout_base: float = 0.1
    dropout_view_gain: float = 0.75
    outlier_rate: float = 0.01
    outlier_magnitude: float = 20.0
    view_decorrelation: float = 0.8

    def __post_init__(self):
        for name in ("dropout_base", "outlier_rate", "view_decorrelation"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        if self.sensor_accuracy < 0 or self.dropout_view_gain < 0 or self.outlier_magnitude < 0:
            raise ValueError("noise magnitudes must be non-negative")

    @classmethod
    def noiseless(cls) -> NoiseModel:
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class SyncModel:
    latency_jitter: float = 0.002
    speed: float = 0.8

    def __post_init__(self):
        if self.latency_jitter < 0:
            raise ValueError("latency_jitter must be >= 0")
        if not 0.0 < self.speed <= 1.0:
            raise ValueError("speed must be in (0, 1]")


def build_scene(spec: SceneSpec, seed: int) -> Scene:
    """Drop objects one at a time onto the bin floor or onto earlier objects.

    Stacking uses bounding spheres, so objects never interpenetrate; a drop
    that would rest above the bin walls is rejected and retried.
    """
    rng = np.random.default_rng([seed, 0x5CE7E])
    b = spec.bin
    placed: list[SceneObject] = []
    next_id = 0
    for tpl in spec.templates:
        for _ in range(tpl.count):
            radius = bounding_radius(tpl.shape, tpl.dims)
            for _attempt in range(MAX_REJECTIONS):
                yaw = rng.uniform(0, 2 * np.pi)
                lying = tpl.shape == "cylinder" and rng.random() < 0.5
                x = rng.normal(0.0, spec.pile_spread * b.length)
                y = rng.normal(0.0, spec.pile_spread * b.width)
                if not b.contains_xy((x, y), margin=radius):
                    continue
                if tpl.shape == "sphere":
                    half_z = tpl.dims[0]
                elif tpl.shape == "box":
                    half_z = tpl.dims[2] / 2
                else:
                    half_z = tpl.dims[0] if lying else tpl.dims[1] / 2
                z = half_z
                for other in placed:
                    dxy = np.hypot(x - other.position[0], y - other.position[1])
                    reach = radius + other.radius
                    if dxy < reach:
                        z = max(z, other.position[2] + np.sqrt(reach**2 - dxy**2))
                if z > b.wall_height:
                    continue
                rot = rot_z(yaw) @ (rot_x(np.pi / 2) if lying else np.eye(3))
                placed.append(SceneObject(next_id, tpl.shape, tuple(tpl.dims), Pose(rot, (x, y, z)), tpl.dropout_susceptibility))
                next_id += 1
                break
            else:
                raise PlacementFailure(f"could not place object {next_id} after {MAX_REJECTIONS} attempts")
    return Scene(b, tuple(placed), seed)


def remove_object(scene: Scene, obj_id: int) -> Scene:
    scene.get(obj_id)
    return replace(scene, objects=tuple(o for o in scene.objects if o.id != obj_id))


# --- ray casting -----------------------------------------------------------

def _hit_sphere(o, d, r):
    b = d @ o
    a = np.einsum("ij,ij->i", d, d)
    c = o @ o - r * r
    disc = b * b - a * c
    t = np.full(len(d), np.inf)
    ok = disc >= 0
    t[ok] = (-b[ok] - np.sqrt(disc[ok])) / a[ok]
    t[t <= 0] = np.inf
    with np.errstate(invalid="ignore"):
        p = o + t[:, None] * d
    return t, p / r


def _hit_box(o, d, half):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (-half - o) * inv
        t2 = (half - o) * inv
    tlo = np.minimum(t1, t2)
    thi = np.maximum(t1, t2)
    tlo = np.nan_to_num(tlo, nan=-np.inf)
    thi = np.nan_to_num(thi, nan=np.inf)
    tnear = tlo.max(axis=1)
    tfar = thi.min(axis=1)
    hit = (tfar >= tnear) & (tnear > 0)
    t = np.where(hit, tnear, np.inf)
    axis = tlo.argmax(axis=1)
    n = np.zeros_like(d)
    rows = np.arange(len(d))
    n[rows, axis] = -np.sign(d[rows, axis])
    return t, n


def _hit_cylinder(o, d, r, h):
    t = np.full(len(d), np.inf)
    n = np.zeros_like(d)
    a = d[:, 0] ** 2 + d[:, 1] ** 2
    b = o[0] * d[:, 0] + o[1] * d[:, 1]
    c = o[0] ** 2 + o[1] ** 2 - r * r
    disc = b * b - a * c
    ok = (disc >= 0) & (a > 0)
    ts = np.full(len(d), np.inf)
    ts[ok] = (-b[ok] - np.sqrt(disc[ok])) / a[ok]
    zs = o[2] + ts * d[:, 2]
    side = np.isfinite(ts) & (ts > 0) & (np.abs(zs) <= h / 2)
    t[side] = ts[side]
    ps = o + ts[side, None] * d[side]
    n[side] = np.column_stack([ps[:, 0] / r, ps[:, 1] / r, np.zeros(len(ps))])
    with np.errstate(divide="ignore", invalid="ignore"):
        for zc, sign in ((h / 2, 1.0), (-h / 2, -1.0)):
            tc = (zc - o[2]) / d[:, 2]
            pc = o + tc[:, None] * d
            cap = np.isfinite(tc) & (tc > 0) & (pc[:, 0] ** 2 + pc[:, 1] ** 2 <= r * r) & (tc < t)
            t[cap] = tc[cap]
            n[cap] = (0.0, 0.0, sign)
    return t, n


@dataclass(frozen=True)
class Render:
    """Noise-free render: depth plus per-pixel camera-frame normals and labels.

    ``labels`` holds the scene-object index, or LABEL_FLOOR / LABEL_WALL /
    LABEL_NONE. ``silhouette`` counts the pixels each object would cover
    with all other objects removed.
    """

    depth: DepthImage
    normals: np.ndarray
    labels: np.ndarray
    silhouette: np.ndarray
    susceptibility: np.ndarray

    def visible_pixels(self, index: int) -> int:
        return int((self.labels == index).sum())


def _bin_hits(b: Bin, origin, dirs):
    """Nearest hit of the floor plane (unbounded) and the four wall slabs."""
    n_rays = len(dirs)
    t = np.full(n_rays, np.inf)
    normals = np.zeros((n_rays, 3))
    labels = np.full(n_rays, LABEL_NONE)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        tf = -origin[2] / dirs[:, 2]
    floor = np.isfinite(tf) & (tf > 0)
    t[floor] = tf[floor]
    normals[floor] = (0.0, 0.0, 1.0)
    labels[floor] = LABEL_FLOOR
    walls = ((0, b.length / 2, 1, b.width / 2), (1, b.width / 2, 0, b.length / 2))
    for axis, pos, other, extent in walls:
        for s in (1.0, -1.0):
            with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
                tw = (s * pos - origin[axis]) / dirs[:, axis]
                p = origin + tw[:, None] * dirs
            hit = (
                np.isfinite(tw) & (tw > 0) & (tw < t)
                & (p[:, 2] >= 0) & (p[:, 2] <= b.wall_height)
                & (np.abs(p[:, other]) <= extent)
            )
            t[hit] = tw[hit]
            nrm = np.zeros(3)
            nrm[axis] = -s
            normals[hit] = nrm
            labels[hit] = LABEL_WALL
    return t, normals, labels


def bin_surface_depth(scene: Scene, sensor_pose: Pose, k: Intrinsics) -> np.ndarray:
    """Depth of the bin surfaces alone (floor and walls), inf where no hit."""
    dirs = k.ray_directions().reshape(-1, 3) @ sensor_pose.rotation.T
    t, _, _ = _bin_hits(scene.bin, sensor_pose.translation, dirs)
    return t.reshape(k.height, k.width)


def _pixel_window(obj: SceneObject, cam: Pose, k: Intrinsics):
    """Conservative pixel bounds of the object's bounding sphere, or None if culled."""
    c = cam.inverse().apply(obj.position)
    rad = obj.radius
    if c[2] + rad <= 0:
        return None
    if c[2] - rad <= 1e-6 or np.linalg.norm(c) <= rad * 1.0001:
        return 0, k.width, 0, k.height
    # angular half-size of the sphere seen from the camera
    half = np.arcsin(min(1.0, rad / np.linalg.norm(c)))
    ang_x = np.arctan2(c[0], c[2])
    ang_y = np.arctan2(c[1], c[2])
    if abs(ang_x) + half >= np.pi / 2 or abs(ang_y) + half >= np.pi / 2:
        return 0, k.width, 0, k.height
    u0 = int(np.floor(k.fx * np.tan(ang_x - half) + k.cx)) - 1
    u1 = int(np.ceil(k.fx * np.tan(ang_x + half) + k.cx)) + 2
    v0 = int(np.floor(k.fy * np.tan(ang_y - half) + k.cy)) - 1
    v1 = int(np.ceil(k.fy * np.tan(ang_y + half) + k.cy)) + 2
    u0, v0 = max(u0, 0), max(v0, 0)
    u1, v1 = min(u1, k.width), min(v1, k.height)
    if u0 >= u1 or v0 >= v1:
        return None
    return u0, u1, v0, v1


def render(scene: Scene, sensor_pose: Pose, k: Intrinsics) -> Render:
    """Ray-cast the scene; depth is measured along the optical axis."""
    h, w = k.height, k.width
    cam_dirs = k.ray_directions()
    rot = sensor_pose.rotation
    origin = sensor_pose.translation
    world_dirs = cam_dirs.reshape(-1, 3) @ rot.T
    t, normals, labels = _bin_hits(scene.bin, origin, world_dirs)
    t = t.reshape(h, w)
    normals = normals.reshape(h, w, 3)
    labels = labels.reshape(h, w)
    susc = np.where(labels == LABEL_NONE, 0.0, scene.bin.floor_susceptibility)
    silhouette = np.zeros(len(scene.objects), dtype=np.int64)
    world_dirs = world_dirs.reshape(h, w, 3)
    for idx, obj in enumerate(scene.objects):
        win = _pixel_window(obj, sensor_pose, k)
        if win is None:
            continue
        u0, u1, v0, v1 = win
        d = world_dirs[v0:v1, u0:u1].reshape(-1, 3)
        r_obj = obj.pose.rotation
        o_local = r_obj.T @ (origin - obj.position)
        d_local = d @ r_obj
        if obj.shape == "sphere":
            to, n_local = _hit_sphere(o_local, d_local, obj.dims[0])
        elif obj.shape == "box":
            to, n_local = _hit_box(o_local, d_local, np.asarray(obj.dims) / 2.0)
        else:
            to, n_local = _hit_cylinder(o_local, d_local, obj.dims[0], obj.dims[1])
        hit = np.isfinite(to)
        silhouette[idx] = int(hit.sum())
        sub_t = t[v0:v1, u0:u1].reshape(-1)
        nearer = hit & (to < sub_t)
        if not nearer.any():
            continue
        sub_t[nearer] = to[nearer]
        t[v0:v1, u0:u1] = sub_t.reshape(v1 - v0, u1 - u0)
        sub_n = normals[v0:v1, u0:u1].reshape(-1, 3)
        sub_n[nearer] = n_local[nearer] @ r_obj.T
        normals[v0:v1, u0:u1] = sub_n.reshape(v1 - v0, u1 - u0, 3)
        sub_l = labels[v0:v1, u0:u1].reshape(-1)
        sub_l[nearer] = idx
        labels[v0:v1, u0:u1] = sub_l.reshape(v1 - v0, u1 - u0)
        sub_s = susc[v0:v1, u0:u1].reshape(-1)
        sub_s[nearer] = obj.dropout_susceptibility
        susc[v0:v1, u0:u1] = sub_s.reshape(v1 - v0, u1 - u0)
    cam_normals = normals @ rot
    depth = DepthImage.from_array(np.where(np.isfinite(t), t, np.nan))
    return Render(depth, cam_normals, labels, silhouette, susc)


def render_depth(scene: Scene, sensor_pose: Pose, k: Intrinsics) -> DepthImage:
    return render(scene, sensor_pose, k).depth


def _incidence_cos(normals: np.ndarray, k: Intrinsics) -> np.ndarray:
    rays = k.ray_directions()
    rays /= np.linalg.norm(rays, axis=-1, keepdims=True)
    return np.clip(-(normals * rays).sum(axis=-1), 0.0, 1.0)


def apply_noise(
    ideal: DepthImage,
    normals: np.ndarray,
    model: NoiseModel,
    view_id: int,
    seed: int,
    k: Intrinsics | None = None,
    susceptibility: np.ndarray | None = None,
) -> DepthImage:
    """Dropout, Gaussian depth noise and outliers for one view.

    The dropout probability grows with a specular term: near-normal
    incidence glare (``cos^4`` of the incidence angle), blended with a
    per-view random field by ``view_decorrelation``. With decorrelation 1
    the dropout pattern is drawn independently for every ``view_id``.
    """
    h, w = ideal.depth.shape
    if k is None:
        k = Intrinsics(1.0, 1.0, (w - 1) / 2.0, (h - 1) / 2.0, w, h)
    if susceptibility is None:
        susceptibility = np.ones((h, w))
    rng = np.random.default_rng([seed, view_id, 0])
    glare_field = np.random.default_rng([seed, view_id, 1]).random((h, w))
    drop_draw = rng.random((h, w))
    gauss = rng.standard_normal((h, w))
    outlier_draw = rng.random((h, w))
    outlier_sign = np.where(rng.random((h, w)) < 0.5, -1.0, 1.0)

    spec = _incidence_cos(np.asarray(normals, dtype=float), k) ** SPECULAR_EXPONENT
    g = (1.0 - model.view_decorrelation) * spec + model.view_decorrelation * glare_field
    p_drop = np.clip(model.dropout_base + model.dropout_view_gain * susceptibility * g, 0.0, 1.0)
    valid = ideal.valid & ~(drop_draw < p_drop)
    depth = ideal.depth + model.sensor_accuracy * gauss
    outlier = outlier_draw < model.outlier_rate
    depth = np.where(outlier, depth + outlier_sign * model.outlier_magnitude, depth)
    return DepthImage(np.where(valid, depth, 0.0), valid)


def report_kinematics(
    true_pose_at: Callable[[float], Pose],
    capture_time: float,
    sync: SyncModel,
    seed,
    at_stop: bool = False,
) -> Pose:
    """Robot pose as read back for a capture at ``capture_time`` (seconds).

    The read is off by a uniform timing error within the latency jitter;
    captures at a declared stop read back exactly.
    """
    if at_stop or sync.latency_jitter == 0:
        return true_pose_at(capture_time)
    u = np.random.default_rng(seed).uniform(-sync.latency_jitter, sync.latency_jitter)
    return true_pose_at(capture_time + u)
