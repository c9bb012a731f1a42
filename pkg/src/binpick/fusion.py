"""Single-depth-image multi-view fusion.

Every view is reprojected into the reference (target) view, where each
pixel collects depth candidates. A sample closer than ``delta`` to an
existing candidate is averaged into it and adds a vote, otherwise it
starts a new candidate. The output keeps the candidate with the most votes.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .geometry import Intrinsics, Pose, compose, invert, rotation_angle

logger = logging.getLogger(__name__)


class DegenerateCloud(ValueError):
    """Raised when a point cloud cannot constrain a rigid transform."""


@dataclass(frozen=True)
class DepthImage:
    """Dense depth map in millimeters; ``valid`` marks measured pixels.

    Invalid pixels always hold depth 0.
    """

    depth: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        depth = np.array(self.depth, dtype=float)
        valid = np.array(self.valid, dtype=bool)
        if depth.ndim != 2 or depth.shape != valid.shape:
            raise ValueError("depth and validity mask must be 2-D arrays of equal shape")
        valid &= np.isfinite(depth) & (depth > 0)
        depth[~valid] = 0.0
        depth.setflags(write=False)
        valid.setflags(write=False)
        object.__setattr__(self, "depth", depth)
        object.__setattr__(self, "valid", valid)

    @classmethod
    def from_array(cls, depth) -> DepthImage:
        """Build from an array where non-finite or non-positive entries are holes."""
        d = np.asarray(depth, dtype=float)
        return cls(np.where(np.isfinite(d), d, 0.0), np.isfinite(d) & (d > 0))

    @classmethod
    def empty(cls, width: int, height: int) -> DepthImage:
        return cls(np.zeros((height, width)), np.zeros((height, width), dtype=bool))

    @property
    def width(self) -> int:
        return self.depth.shape[1]

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    def invalid_fraction(self) -> float:
        return 1.0 - float(self.valid.mean())

    def equals(self, other: DepthImage) -> bool:
        return bool(np.array_equal(self.valid, other.valid) and np.array_equal(self.depth, other.depth))


@dataclass
class ViewSet:
    views: list[tuple[DepthImage, Pose]]
    intrinsics: Intrinsics
    reference_index: int = 0

    def __post_init__(self):
        if not self.views:
            raise ValueError("a ViewSet needs at least one view")
        shape = (self.intrinsics.height, self.intrinsics.width)
        if any(img.depth.shape != shape for img, _ in self.views):
            raise ValueError(f"all depth images must be {shape[1]}x{shape[0]}")
        if not 0 <= self.reference_index < len(self.views):
            raise ValueError("reference_index out of range")


@dataclass(frozen=True)
class FusionConfig:
    delta: float = 2.0
    icp_enabled: bool = True
    icp_max_iterations: int = 20
    icp_convergence: float = 0.01
    min_votes: int = 1
    icp_subsample: int = 16
    icp_target_subsample: int = 2
    # correspondences farther apart than this are ignored (partial overlap)
    icp_max_distance: float = 10.0
    # caps keep ICP cost independent of image resolution
    icp_max_source_points: int = 1500
    icp_max_target_points: int = 20000

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        if self.icp_max_iterations < 1:
            raise ValueError("icp_max_iterations must be >= 1")
        if self.min_votes < 1:
            raise ValueError("min_votes must be >= 1")
        if self.icp_subsample < 1 or self.icp_target_subsample < 1:
            raise ValueError("ICP subsampling strides must be >= 1")
        if self.icp_max_source_points < 3 or self.icp_max_target_points < 3:
            raise ValueError("ICP point caps must be >= 3")

    @classmethod
    def for_sensor_accuracy(cls, accuracy: float, **kwargs) -> FusionConfig:
        return cls(delta=2.0 * accuracy, **kwargs)


@dataclass(frozen=True)
class Reprojection:
    """Samples of one view landing in the target image, one per target pixel."""

    pixels: np.ndarray  # (m, 2) integer (u, v), row-major order
    depth: np.ndarray  # (m,)
    dropped: int  # samples outside the image or behind the camera

    def __len__(self) -> int:
        return len(self.depth)

    def dense(self, width: int, height: int) -> np.ndarray:
        out = np.full((height, width), np.nan)
        out[self.pixels[:, 1], self.pixels[:, 0]] = self.depth
        return out


@dataclass
class FusionResult:
    image: DepthImage
    votes: np.ndarray  # votes of the chosen candidate, 0 where no candidate
    dropped: list[int]
    skipped_views: list[int] = field(default_factory=list)
    corrections: dict[int, Pose] = field(default_factory=dict)

    def votes_histogram(self) -> dict[int, int]:
        values, counts = np.unique(self.votes, return_counts=True)
        return {int(v): int(c) for v, c in zip(values, counts)}


def image_points(img: DepthImage, k: Intrinsics, stride: int = 1) -> np.ndarray:
    """Camera-frame 3-D points of valid pixels in row-major order, every ``stride``-th."""
    rows, cols = np.nonzero(img.valid)
    if stride > 1:
        rows, cols = rows[::stride], cols[::stride]
    z = img.depth[rows, cols]
    return np.column_stack([(cols - k.cx) * z / k.fx, (rows - k.cy) * z / k.fy, z])


def _capped_stride(img: DepthImage, stride: int, cap: int) -> int:
    n = int(img.valid.sum())
    return max(stride, -(-n // cap))


def _project_dense(points: np.ndarray, k: Intrinsics) -> tuple[np.ndarray, int]:
    """Z-buffered projection of target-frame points; returns (H, W) depth with NaN holes."""
    h, w = k.height, k.width
    out = np.full(h * w, np.inf)
    n_total = len(points)
    if n_total == 0:
        return out.reshape(h, w) * np.nan, 0
    z = points[:, 2]
    front = z > 0
    pts = points[front]
    z = z[front]
    u = np.floor(k.fx * pts[:, 0] / z + k.cx + 0.5)
    v = np.floor(k.fy * pts[:, 1] / z + k.cy + 0.5)
    inside = (u >= 0) & (u < w) & (v >= 0) & (v < h)
    idx = (v[inside] * w + u[inside]).astype(np.intp)
    np.minimum.at(out, idx, z[inside])
    out[np.isinf(out)] = np.nan
    return out.reshape(h, w), n_total - int(inside.sum())


def reproject_into_target(src: DepthImage, src_pose: Pose, tgt_pose: Pose, k: Intrinsics) -> Reprojection:
    """Reproject every valid pixel of ``src`` into the target camera.

    When several samples land on one target pixel the nearest is kept.
    """
    rel = compose(invert(tgt_pose), src_pose)
    dense, dropped = _project_dense(rel.apply(image_points(src, k)), k)
    rows, cols = np.nonzero(np.isfinite(dense))
    return Reprojection(np.column_stack([cols, rows]), dense[rows, cols], dropped)


def _check_cloud(points: np.ndarray, name: str) -> None:
    if len(points) < 3:
        raise DegenerateCloud(f"{name} cloud has {len(points)} points, need at least 3")
    s = np.linalg.svd(points - points.mean(axis=0), compute_uv=False)
    if s[1] <= 1e-9 * max(s[0], 1.0):
        raise DegenerateCloud(f"{name} cloud is collinear")


def _best_fit(src: np.ndarray, dst: np.ndarray) -> Pose:
    """Closed-form least-squares rigid transform mapping ``src`` onto ``dst`` (Kabsch)."""
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    h = (src - cs).T @ (dst - cd)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T)) or 1.0
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return Pose(r, cd - r @ cs)


@dataclass(frozen=True)
class IcpResult:
    pose: Pose
    initial_rms: float
    final_rms: float
    iterations: int


def icp_register(src_points, tgt_points, init: Pose, cfg: FusionConfig, tree: cKDTree | None = None) -> IcpResult:
    """Point-to-point ICP with nearest-neighbour correspondences."""
    src = np.asarray(src_points, dtype=float).reshape(-1, 3)
    tgt = np.asarray(tgt_points, dtype=float).reshape(-1, 3)
    _check_cloud(src, "source")
    _check_cloud(tgt, "target")
    if tree is None:
        tree = cKDTree(tgt)
    extent = float(np.sqrt(((src - src.mean(axis=0)) ** 2).sum(axis=1).mean()))

    def residual(pose: Pose) -> tuple[float, np.ndarray, np.ndarray]:
        moved = pose.apply(src)
        dist, idx = tree.query(moved, distance_upper_bound=cfg.icp_max_distance)
        keep = np.isfinite(dist)
        rms = float(np.sqrt(np.mean(dist[keep] ** 2))) if keep.any() else np.inf
        return rms, keep, idx

    pose = init
    rms, keep, idx = residual(pose)
    initial = best_rms = rms
    best = pose
    it = 0
    for it in range(1, cfg.icp_max_iterations + 1):
        if keep.sum() < 3:
            break
        step = _best_fit(pose.apply(src[keep]), tgt[idx[keep]])
        pose = compose(step, pose)
        rms, keep, idx = residual(pose)
        if rms <= best_rms:
            best, best_rms = pose, rms
        change = np.linalg.norm(step.translation) + rotation_angle(step.rotation) * extent
        if change < cfg.icp_convergence:
            break
    return IcpResult(best, initial, best_rms, it)


def icp_align(src_points, tgt_points, init: Pose, cfg: FusionConfig) -> Pose:
    """Pose mapping ``src_points`` onto ``tgt_points``, refined from ``init``."""
    return icp_register(src_points, tgt_points, init, cfg).pose


def _insert_samples(means, votes, count, sample, delta):
    """Merge one view's samples (flat, NaN = none) into the candidate arrays in place."""
    unmatched = np.isfinite(sample)
    merged = np.zeros(sample.shape, dtype=bool)
    with np.errstate(invalid="ignore"):
        for k in range(means.shape[0]):
            v = votes[k]
            hit = unmatched & (v > 0) & (np.abs(means[k] - sample) < delta)
            means[k] = np.where(hit, (means[k] * v + sample) / (v + 1), means[k])
            votes[k] = v + hit
            merged |= hit
            unmatched &= ~hit
    for k in range(means.shape[0]):
        new = unmatched & (count == k)
        means[k] = np.where(new, sample, means[k])
        votes[k] = np.where(new, 1, votes[k])
    count += unmatched
    # only a pixel with two live candidates can need folding
    pix = np.flatnonzero(merged & ((votes > 0).sum(axis=0) >= 2))
    if pix.size:
        _consolidate(means, votes, delta, pix)


def _consolidate(means, votes, delta, pix):
    """Fold candidates whose running means drifted within ``delta`` of each other.

    The later slot is folded into the earlier one so insertion order is kept.
    """
    m = means[:, pix]
    vt = votes[:, pix]
    changed = True
    while changed:
        changed = False
        for i in range(m.shape[0]):
            for j in range(i + 1, m.shape[0]):
                close = (vt[i] > 0) & (vt[j] > 0) & (np.abs(m[i] - m[j]) < delta)
                if close.any():
                    wi, wj = vt[i, close], vt[j, close]
                    m[i, close] = (m[i, close] * wi + m[j, close] * wj) / (wi + wj)
                    vt[i, close] = wi + wj
                    vt[j, close] = 0
                    changed = True
    means[:, pix] = m
    votes[:, pix] = vt


def fuse_detailed(views: ViewSet, cfg: FusionConfig) -> FusionResult:
    k = views.intrinsics
    h, w = k.height, k.width
    n = len(views.views)
    ref_img, ref_pose = views.views[views.reference_index]
    to_ref = invert(ref_pose)

    tree = None
    ref_cloud = None
    if cfg.icp_enabled and n > 1:
        ref_cloud = image_points(ref_img, k, _capped_stride(ref_img, cfg.icp_target_subsample, cfg.icp_max_target_points))
        if len(ref_cloud) >= 3:
            tree = cKDTree(ref_cloud)

    means = np.zeros((n, h * w))
    votes = np.zeros((n, h * w), dtype=np.int64)
    count = np.zeros(h * w, dtype=np.intp)
    dropped: list[int] = []
    skipped: list[int] = []
    corrections: dict[int, Pose] = {}

    for i, (img, pose) in enumerate(views.views):
        if i == views.reference_index:
            dense = np.where(img.valid, img.depth, np.nan)
            dropped.append(0)
        else:
            rel = compose(to_ref, pose)
            if tree is not None:
                try:
                    src = rel.apply(image_points(img, k, _capped_stride(img, cfg.icp_subsample, cfg.icp_max_source_points)))
                    corr = icp_register(src, ref_cloud, Pose.identity(), cfg, tree=tree).pose
                except DegenerateCloud as exc:
                    logger.warning("view %d skipped: %s", i, exc)
                    skipped.append(i)
                    dropped.append(0)
                    continue
                corrections[i] = corr
                rel = compose(corr, rel)
            dense, nd = _project_dense(rel.apply(image_points(img, k)), k)
            dropped.append(nd)
        _insert_samples(means, votes, count, dense.reshape(-1), cfg.delta)

    best_votes = votes.max(axis=0)
    tied = (votes == best_votes) & (votes > 0)
    depth = np.where(tied, means, np.inf).min(axis=0)
    ok = best_votes >= cfg.min_votes
    depth = np.where(ok, depth, 0.0).reshape(h, w)
    out = DepthImage(depth, ok.reshape(h, w))
    return FusionResult(out, np.where(ok, best_votes, 0).reshape(h, w), dropped, skipped, corrections)


def fuse(views: ViewSet, cfg: FusionConfig) -> DepthImage:
    """Fuse all views into one depth image in the reference view's frame."""
    return fuse_detailed(views, cfg).image


def to_robot_frame(fused: DepthImage, k: Intrinsics, reference_sensor_pose_in_robot: Pose) -> np.ndarray:
    """(m, 3) robot-frame points for the valid pixels of ``fused``, row-major."""
    return reference_sensor_pose_in_robot.apply(image_points(fused, k))
