"""Offline choice of view count, capture interval and speed per object type.

A sensor is swept along random great-circle arcs over a spherical cap
above a pile of one object type, capturing at a fixed base interval.
Longer intervals reuse every m-th capture of the same sweep. Every
(path, v, t, n) combination is fused and run through recognition, and a
three-step rule picks the parameters from the resulting trial table.
"""

from __future__ import annotations

import logging
import warnings
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import rng as rngs
from .cycle_sim import RecognitionConfig, default_intrinsics, recognize
from .fusion import FusionConfig, ViewSet, fuse
from .geometry import Intrinsics, Pose, look_at, normalize, rotation_about_axis
from .planner import MM_PER_S_AT_FULL_SPEED, coverage_from_params
from .scene import Bin, NoiseModel, ObjectTemplate, Scene, SceneSpec, SyncModel, apply_noise, build_scene, render, \
    report_kinematics

logger = logging.getLogger(__name__)

V_GRID = tuple(round(0.1 * i, 1) for i in range(1, 9))
T_GRID = tuple(10 * i for i in range(1, 9))
MAX_VIEWS = 10
# a cap with 1 - cos(theta) = 1/4 covers one eighth of the sphere
CAP_HALF_ANGLE = float(np.arccos(0.75))


class EmptyAfterFilter(RuntimeWarning):
    """Emitted when a selection step leaves no trials and the rule falls back."""


@dataclass(frozen=True)
class Trial:
    path_id: int
    v: float
    t_ms: int
    n: int
    recognized_count: int

    def __post_init__(self):
        if self.recognized_count < 0:
            raise ValueError("recognized_count must be >= 0")
        if not 1 <= self.n <= MAX_VIEWS:
            raise ValueError(f"n must be in [1, {MAX_VIEWS}]")
        if not 0.0 < self.v <= 1.0 or self.t_ms <= 0:
            raise ValueError("v must be in (0, 1] and t_ms positive")

    def row(self) -> dict:
        return {"path_id": self.path_id, "v": self.v, "t_ms": self.t_ms, "n": self.n,
                "recognized_count": self.recognized_count}


@dataclass(frozen=True)
class TunedParams:
    n: int
    v: float
    t_ms: int
    alpha: float
    beta: float

    @classmethod
    def derive(cls, n: int, v: float, t_ms: int, working_distance: float) -> TunedParams:
        if n < 2:
            return cls(n, v, t_ms, 0.0, 0.0)
        alpha, beta = coverage_from_params(n, t_ms, v, working_distance)
        return cls(n, v, t_ms, alpha, beta)

    def as_dict(self) -> dict:
        return {"n": self.n, "v": self.v, "t_ms": self.t_ms, "alpha": self.alpha, "beta": self.beta}


@dataclass(frozen=True)
class SweepEnv:
    """Simulator settings and grids for one tuning sweep."""

    bin: Bin = field(default_factory=Bin)
    camera: Intrinsics = field(default_factory=default_intrinsics)
    noise: NoiseModel = field(default_factory=NoiseModel)
    sync: SyncModel = field(default_factory=SyncModel)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    recognition: RecognitionConfig = field(default_factory=RecognitionConfig)
    working_distance: float = 300.0
    pile_spread: float = 0.15
    n_paths: int = 10
    n_captures: int = 50
    base_t_ms: int = 10
    v_grid: tuple[float, ...] = V_GRID
    t_grid: tuple[int, ...] = T_GRID
    n_grid: tuple[int, ...] = tuple(range(2, MAX_VIEWS + 1))

    def __post_init__(self):
        if self.n_paths < 1 or self.n_captures < 1 or self.base_t_ms <= 0:
            raise ValueError("n_paths, n_captures and base_t_ms must be positive")
        if not self.v_grid or not self.t_grid or not self.n_grid:
            raise ValueError("sweep grids must be non-empty")
        if any(not 0.0 < v <= 1.0 for v in self.v_grid):
            raise ValueError("speeds must be in (0, 1]")
        if any(t <= 0 or t % self.base_t_ms for t in self.t_grid):
            raise ValueError(f"intervals must be positive multiples of {self.base_t_ms} ms")
        if any(not 1 <= n <= MAX_VIEWS for n in self.n_grid):
            raise ValueError(f"view counts must be in [1, {MAX_VIEWS}]")


def capture_indices(t_ms: int, n: int, base_t_ms: int = 10) -> list[int]:
    """Indices into the base-interval capture stream that emulate n views t_ms apart."""
    step = t_ms // base_t_ms
    return [j * step for j in range(n)]


@dataclass(frozen=True)
class SweepArc:
    """Great circle on the working-distance sphere, parametrized by arc length."""

    center: np.ndarray
    radius: float
    start_dir: np.ndarray
    axis: np.ndarray

    def pose_at(self, s_mm: float) -> Pose:
        d = rotation_about_axis(self.axis, s_mm / self.radius) @ self.start_dir
        return look_at(self.center + self.radius * d, self.center, self.axis)


def random_arc(center, radius: float, rng: np.random.Generator) -> SweepArc:
    """Arc starting at a uniform point of the cap above ``center``, heading in a random direction."""
    cos_t = rng.uniform(np.cos(CAP_HALF_ANGLE), 1.0)
    az = rng.uniform(0.0, 2.0 * np.pi)
    sin_t = np.sqrt(1.0 - cos_t**2)
    d = np.array([sin_t * np.cos(az), sin_t * np.sin(az), cos_t])
    heading = rng.normal(size=3)
    heading -= np.dot(heading, d) * d
    axis = normalize(np.cross(d, normalize(heading)))
    return SweepArc(np.asarray(center, dtype=float), float(radius), d, axis)


def pile_scene(env: SweepEnv, object_spec: ObjectTemplate, seed: int) -> Scene:
    return build_scene(SceneSpec(env.bin, (object_spec,), env.pile_spread), rngs.subseed(seed, "scene", 0))


def pile_center(scene: Scene) -> np.ndarray:
    if not scene.objects:
        return np.zeros(3)
    c = np.mean([o.position for o in scene.objects], axis=0)
    return np.array([c[0], c[1], 0.0])


def _combos(env: SweepEnv):
    for t in env.t_grid:
        for n in env.n_grid:
            idx = capture_indices(t, n, env.base_t_ms)
            if idx[-1] < env.n_captures:
                yield t, n, idx


def run_sweep(env: SweepEnv, object_spec: ObjectTemplate, seed: int = 0) -> list[Trial]:
    """Recognition counts for every (path, v, t, n) combination of the sweep grid."""
    scene = pile_scene(env, object_spec, seed)
    center = pile_center(scene)
    k = env.camera
    combos = list(_combos(env))
    needed = sorted({i for _, _, idx in combos for i in idx})
    trials: list[Trial] = []
    for path_id in range(env.n_paths):
        arc = random_arc(center, env.working_distance, rngs.substream(seed, "sweep", path_id))
        ref_pose = arc.pose_at(0.0)
        ref_render = render(scene, ref_pose, k)
        for vi, v in enumerate(env.v_grid):
            mm_per_s = v * MM_PER_S_AT_FULL_SPEED

            def pose_at(time_s: float, _r=mm_per_s) -> Pose:
                return arc.pose_at(max(time_s, 0.0) * _r)

            noise_seed = rngs.subseed(seed, "noise", path_id, vi)
            sync_seed = rngs.subseed(seed, "sync", path_id, vi)
            captures = {}
            for i in needed:
                true_pose = arc.pose_at(i * env.base_t_ms / 1000.0 * mm_per_s)
                rend = ref_render if i == 0 else render(scene, true_pose, k)
                noisy = apply_noise(rend.depth, rend.normals, env.noise, i, noise_seed, k, rend.susceptibility)
                reported = report_kinematics(pose_at, i * env.base_t_ms / 1000.0, env.sync, [sync_seed, i],
                                             at_stop=(i == 0))
                captures[i] = (noisy, reported)
            for t, n, idx in combos:
                fused = fuse(ViewSet([captures[i] for i in idx], k, 0), env.fusion)
                rec = recognize(fused, k, ref_pose, scene, env.recognition.threshold, env.fusion.delta,
                                ref_render, env.recognition.max_occlusion, env.recognition.min_pixels)
                trials.append(Trial(path_id, float(v), int(t), int(n), len(rec)))
        logger.info("sweep path %d/%d done", path_id + 1, env.n_paths)
    return trials


def _sigma_filter(trials: list[Trial], strict: bool) -> list[Trial]:
    counts = np.array([tr.recognized_count for tr in trials], dtype=float)
    mu, sigma = counts.mean(), counts.std()
    dev = np.abs(counts - mu)
    # slack for rounding in mu and sigma
    eps = 1e-9 * max(1.0, sigma)
    keep = dev <= 2.0 * sigma + eps
    if strict:
        keep &= dev >= sigma - eps
    return [tr for tr, k in zip(trials, keep) if k]


def select_parameters(trials: list[Trial], strict_sigma_band: bool = False,
                      working_distance: float = 300.0) -> TunedParams:
    """Pick (n, v, t): sigma-band filter on counts, then the modal n, then the fastest v.

    Ties go to the smaller n, then to the larger t; the result does not
    depend on the order of ``trials``.
    """
    if not trials:
        raise ValueError("no trials to select from")
    survivors = _sigma_filter(trials, strict_sigma_band)
    if not survivors:
        msg = "sigma-band filter removed every trial; using the unfiltered set"
        logger.warning(msg)
        warnings.warn(msg, EmptyAfterFilter, stacklevel=2)
        survivors = list(trials)
    freq = Counter(tr.n for tr in survivors)
    top = max(freq.values())
    n = min(k for k, c in freq.items() if c == top)
    pool = [tr for tr in survivors if tr.n == n]
    best = max(pool, key=lambda tr: (tr.v, tr.t_ms, -tr.n))
    return TunedParams.derive(best.n, best.v, best.t_ms, working_distance)


def trials_table(trials: list[Trial]) -> list[dict]:
    return [tr.row() for tr in trials]
