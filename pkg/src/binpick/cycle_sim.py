"""Discrete-event pick cycles with sensing overlapped with the place action.

A cycle captures views along the current sensing path (the first one at
the pull-up stop), fuses them, recognizes objects, grasps the most
confident one and plans the next sensing path from what remains. Time is
a logical clock advanced by the takt model; nothing runs in real time.
"""

from __future__ import annotations

import enum
import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import rng as rngs
from .fusion import DepthImage, FusionConfig, ViewSet, fuse_detailed, image_points
from .geometry import GeometryError, Intrinsics, Pose, compose, invert
from .planner import (
    PathParams,
    RecognizedObject,
    SensingPath,
    overhead_path,
    plan_sensing_path,
    sample_path_poses,
    search_center,
    target_center,
)
from .scene import (
    NoiseModel,
    Render,
    Scene,
    SceneSpec,
    SyncModel,
    apply_noise,
    build_scene,
    remove_object,
    render,
    report_kinematics,
)
from .timing import TaktAccount, TimingBreakdown, extra_path_time, takt_contribution

logger = logging.getLogger(__name__)


class Strategy(str, enum.Enum):
    ACTIVE_MULTIVIEW = "active_multiview"
    SINGLE_VIEW = "single_view"
    RANDOM_PATH_MULTIVIEW = "random_path_multiview"


@dataclass(frozen=True)
class PathSettings:
    n: int = 4
    t_ms: float = 30.0
    v: float = 0.7
    gamma: float = np.deg2rad(5.0)
    working_distance: float = 300.0
    lift_height: float = 100.0
    drop_point: tuple[float, float, float] = (0.0, 400.0, 250.0)

    def params(self, n: int | None = None) -> PathParams:
        return PathParams.from_motion(self.n if n is None else n, self.t_ms, self.v, self.working_distance, self.gamma)


@dataclass(frozen=True)
class RecognitionConfig:
    threshold: float = 0.6
    max_occlusion: float = 0.5
    min_pixels: int = 20

    def __post_init__(self):
        if not 0.0 < self.threshold <= 1.0 or not 0.0 <= self.max_occlusion <= 1.0:
            raise ValueError("threshold must be in (0, 1] and max_occlusion in [0, 1]")
        if self.min_pixels < 1:
            raise ValueError("min_pixels must be >= 1")


def default_intrinsics() -> Intrinsics:
    return Intrinsics.from_fov(160, 120, np.deg2rad(70.0))


def default_scene_spec() -> SceneSpec:
    from .scene import ObjectTemplate

    return SceneSpec(templates=(
        ObjectTemplate("sphere", (20.0,), 7, 0.9),
        ObjectTemplate("box", (50.0, 30.0, 20.0), 7, 0.8),
        ObjectTemplate("cylinder", (12.0, 50.0), 6, 0.9),
    ))


@dataclass(frozen=True)
class ExperimentConfig:
    scene: SceneSpec = field(default_factory=default_scene_spec)
    noise: NoiseModel = field(default_factory=NoiseModel)
    sync: SyncModel = field(default_factory=SyncModel)
    camera: Intrinsics = field(default_factory=default_intrinsics)
    path: PathSettings = field(default_factory=PathSettings)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    recognition: RecognitionConfig = field(default_factory=RecognitionConfig)
    hand_eye: Pose = field(default_factory=Pose.identity)
    strategy: Strategy = Strategy.ACTIVE_MULTIVIEW
    repetitions: int = 20
    place_duration_ms: float = 2000.0
    pick_place_ms: float = 4000.0
    grasp_failure_prob: float = 0.0
    cycle_cap_factor: int = 3
    # consecutive cycles without any recognition after which picking is abandoned (0 = never)
    max_failed_cycles: int = 3
    seed: int = 0
    # charge measured wall-clock fusion time instead of the budgeted per-view constant
    measure_fusion_time: bool = False


@dataclass
class CycleState:
    scene: Scene
    path: SensingPath
    lift_point: np.ndarray  # B of the path being executed
    grasp_point: np.ndarray  # A of the path being executed
    pending: list[RecognizedObject] = field(default_factory=list)
    clock_ms: float = 0.0
    cycle: int = 0
    search_index: int = 0
    searching: bool = False
    picked: int = 0


@dataclass
class CycleResult:
    cycle: int
    recognized: list[RecognizedObject]
    grasped_id: int | None
    timing: TimingBreakdown
    takt: TaktAccount
    search_triggered: bool
    n_views: int
    path: SensingPath
    fused: DepthImage | None = None
    fallback_used: bool = False
    # (ViewSet, reference render) of the cycle, kept only when requested
    capture: tuple | None = None

    def row(self) -> dict:
        return {
            "cycle": self.cycle,
            "n_views": self.n_views,
            "recognized": len(self.recognized),
            "grasped_id": "" if self.grasped_id is None else self.grasped_id,
            "search_triggered": int(self.search_triggered),
            "fallback_used": int(self.fallback_used),
            "sensing_total_ms": float(self.takt.sensing_total_ms),
            "place_duration_ms": float(self.takt.place_duration_ms),
            "extra_path_ms": round(float(self.takt.extra_path_ms), 6),
            "charged_ms": round(float(self.takt.charged_ms), 6),
            "target_x": round(float(self.path.target[0]), 6),
            "target_y": round(float(self.path.target[1]), 6),
            "target_z": round(float(self.path.target[2]), 6),
        }


@dataclass
class ExperimentMetrics:
    complete_rate: float
    cycles_run: int
    searches_triggered: float
    mean_charged_takt_ms: float
    per_repetition: list[dict] = field(default_factory=list)
    cycles: list[dict] = field(default_factory=list)

    def summary(self) -> dict:
        return {
            "complete_rate": self.complete_rate,
            "cycles_run": self.cycles_run,
            "searches_triggered": self.searches_triggered,
            "mean_charged_takt_ms": self.mean_charged_takt_ms,
            "repetitions": len(self.per_repetition),
            "per_repetition": self.per_repetition,
        }


# --- capture -----------------------------------------------------------------

def path_motion(path: SensingPath, n: int, t_ms: float):
    """True sensor pose as a function of time (s) for a path swept in (n-1) intervals.

    Before the start the sensor rests at the start pose; after the end it
    keeps moving along the arc.
    """
    duration = (n - 1) * t_ms / 1000.0

    def pose_at(time_s: float) -> Pose:
        if time_s <= 0.0 or duration == 0.0:
            return path.start_pose
        return path.pose_at_fraction(time_s / duration)

    return pose_at


@dataclass
class Capture:
    views: ViewSet
    true_poses: list[Pose]
    reference_render: Render


def capture_views(scene: Scene, path: SensingPath, n: int, cfg: ExperimentConfig, noise_seed: int,
                  sync_seed: int) -> Capture:
    k = cfg.camera
    sensor_poses = sample_path_poses(path, n)
    motion = path_motion(path, n, cfg.path.t_ms)
    # the robot reports its flange pose; the sensor sits at flange * hand_eye
    to_flange = invert(cfg.hand_eye)

    def flange_at(time_s: float) -> Pose:
        return compose(motion(time_s), to_flange)

    views = []
    ref_render = None
    for j, true_pose in enumerate(sensor_poses):
        rend = render(scene, true_pose, k)
        if j == 0:
            ref_render = rend
        noisy = apply_noise(rend.depth, rend.normals, cfg.noise, j, noise_seed, k, rend.susceptibility)
        capture_time = j * cfg.path.t_ms / 1000.0
        flange = report_kinematics(flange_at, capture_time, cfg.sync, [sync_seed, j], at_stop=(j == 0))
        views.append((noisy, compose(flange, cfg.hand_eye)))
    return Capture(ViewSet(views, k, 0), sensor_poses, ref_render)


# --- recognition stub ----------------------------------------------------------

def recognize(
    fused: DepthImage,
    k: Intrinsics,
    sensor_pose: Pose,
    scene: Scene,
    threshold: float = 0.6,
    delta: float = 2.0,
    ideal: Render | None = None,
    max_occlusion: float = 0.5,
    min_pixels: int = 20,
) -> list[RecognizedObject]:
    """Coverage-based stand-in for a 6-D pose estimator.

    An object is recognized when it is on top (occluded by at most
    ``max_occlusion``), mostly inside the frame, and at least ``threshold``
    of its ideally visible pixels are valid in ``fused`` within ``delta`` of
    the noise-free depth. Confidence is that coverage; the position is the
    centroid of the matching fused points in the robot frame.
    """
    if ideal is None:
        ideal = render(scene, sensor_pose, k)
    to_cam = invert(sensor_pose)
    out = []
    for idx, obj in enumerate(scene.objects):
        visible = ideal.labels == idx
        n_vis = int(visible.sum())
        if n_vis < min_pixels or ideal.silhouette[idx] == 0:
            continue
        if 1.0 - n_vis / ideal.silhouette[idx] > max_occlusion:
            continue
        c = to_cam.apply(obj.position)
        if c[2] <= obj.radius:
            continue
        u = k.fx * c[0] / c[2] + k.cx
        v = k.fy * c[1] / c[2] + k.cy
        margin = 0.5 * k.fx * obj.radius / c[2]
        if not (margin <= u <= k.width - 1 - margin and margin <= v <= k.height - 1 - margin):
            continue
        good = visible & fused.valid & (np.abs(fused.depth - ideal.depth.depth) < delta)
        coverage = int(good.sum()) / n_vis
        if coverage <= 0 or coverage < threshold:
            continue
        rows, cols = np.nonzero(good)
        z = fused.depth[rows, cols]
        pts = np.column_stack([(cols - k.cx) * z / k.fx, (rows - k.cy) * z / k.fy, z])
        out.append(RecognizedObject(obj.id, sensor_pose.apply(pts).mean(axis=0), coverage))
    return out


def select_grasp(recognized: list[RecognizedObject]) -> RecognizedObject | None:
    if not recognized:
        return None
    return min(recognized, key=lambda o: (-o.confidence, o.id))


# --- cycles --------------------------------------------------------------------

def initial_state(scene: Scene, cfg: ExperimentConfig) -> CycleState:
    params = cfg.path.params()
    path = overhead_path(np.zeros(3), params)
    start = path.start.copy()
    return CycleState(scene, path, lift_point=start, grasp_point=start - np.array([0.0, 0.0, cfg.path.lift_height]))


def _views_for(strategy: Strategy, cfg: ExperimentConfig) -> int:
    return 1 if strategy == Strategy.SINGLE_VIEW else cfg.path.n


def run_cycle(state: CycleState, strategy: Strategy, cfg: ExperimentConfig, rep: int = 0,
              keep_images: bool = False) -> tuple[CycleState, CycleResult]:
    strategy = Strategy(strategy)
    n = _views_for(strategy, cfg)
    params = cfg.path.params(n)
    seed = cfg.seed
    noise_seed = rngs.subseed(seed, "noise", rep, state.cycle)
    sync_seed = rngs.subseed(seed, "sync", rep, state.cycle)
    k = cfg.camera

    # (a) data collection along the current sensing path
    cap = capture_views(state.scene, state.path, n, cfg, noise_seed, sync_seed)
    # (b) fusion in the reference (first) view
    t0 = time.perf_counter()
    fres = fuse_detailed(cap.views, cfg.fusion)
    fusion_wall_ms = (time.perf_counter() - t0) * 1000.0
    ref_pose = cap.views.views[0][1]
    # (c) recognition
    recognized = recognize(
        fres.image, k, ref_pose, state.scene, cfg.recognition.threshold, cfg.fusion.delta,
        ideal=cap.reference_render, max_occlusion=cfg.recognition.max_occlusion,
        min_pixels=cfg.recognition.min_pixels,
    )
    # (d) grasp selection, (e) removal
    target = select_grasp(recognized)
    grasped = None
    scene = state.scene
    if target is not None:
        ok = True
        if cfg.grasp_failure_prob > 0:
            ok = rngs.substream(seed, "grasp", rep, state.cycle).random() >= cfg.grasp_failure_prob
        if ok:
            grasped = target.id
            scene = remove_object(scene, target.id)

    # (g) takt accounting for the path just executed
    if cfg.measure_fusion_time:
        timing = TimingBreakdown(n, cfg.path.t_ms, fusion_ms=fusion_wall_ms / n)
    else:
        timing = TimingBreakdown(n, cfg.path.t_ms)
    path = state.path
    C = np.asarray(cfg.path.drop_point, dtype=float)
    extra = extra_path_time(state.lift_point, path.start, path.end, C, path.arc, cfg.path.v,
                            arc_len=path.arc_length() if n > 1 else 0.0)
    takt = takt_contribution(timing, cfg.place_duration_ms, extra)

    # (f) next target center and sensing path
    remaining = [o for o in recognized if o.id != grasped]
    search_index = state.search_index
    searching = False
    if strategy == Strategy.RANDOM_PATH_MULTIVIEW:
        r = rngs.substream(seed, "strategy", rep, state.cycle)
        b = scene.bin
        T = np.array([r.uniform(-b.length / 2, b.length / 2), r.uniform(-b.width / 2, b.width / 2), 0.0])
    elif remaining:
        T = target_center(remaining)
    else:
        T = search_center(search_index, scene.bin.length, scene.bin.width)
        search_index += 1
        searching = True
    if grasped is not None:
        A = np.asarray(state.scene.get(grasped).position, dtype=float)
    else:
        A = np.asarray(state.grasp_point, dtype=float)
    B = A + np.array([0.0, 0.0, cfg.path.lift_height])
    fallback = False
    try:
        next_path = plan_sensing_path(T, A, B, C, params)
    except GeometryError as exc:
        logger.debug("cycle %d: path planning fell back (%s)", state.cycle, exc)
        next_path = state.path.translated(T)
        if abs(next_path.beta - params.beta) > 1e-12:
            next_path = overhead_path(T, params)
        fallback = True
        B = next_path.start.copy()

    result = CycleResult(
        cycle=state.cycle,
        recognized=recognized,
        grasped_id=grasped,
        timing=timing,
        takt=takt,
        search_triggered=state.searching,
        n_views=n,
        path=state.path,
        fused=fres.image if keep_images else None,
        fallback_used=fallback,
        capture=(cap.views, cap.reference_render) if keep_images else None,
    )
    new_state = CycleState(
        scene=scene,
        path=next_path,
        lift_point=B,
        grasp_point=A,
        pending=remaining,
        clock_ms=state.clock_ms + cfg.pick_place_ms + takt.charged_ms,
        cycle=state.cycle + 1,
        search_index=search_index,
        searching=searching,
        picked=state.picked + (grasped is not None),
    )
    return new_state, result


def run_episode(cfg: ExperimentConfig, rep: int, strategy: Strategy | None = None,
                keep_images: bool = False) -> tuple[dict, list[CycleResult]]:
    """Pick one freshly built bin until empty or until the cycle cap."""
    strategy = Strategy(strategy or cfg.strategy)
    scene = build_scene(cfg.scene, rngs.subseed(cfg.seed, "scene", rep))
    initial = len(scene)
    state = initial_state(scene, cfg)
    results: list[CycleResult] = []
    cap = cfg.cycle_cap_factor * initial
    failed_run = 0
    abandoned = False
    while len(state.scene) > 0 and state.cycle < cap:
        state, res = run_cycle(state, strategy, cfg, rep, keep_images)
        results.append(res)
        failed_run = 0 if res.recognized else failed_run + 1
        if cfg.max_failed_cycles and failed_run >= cfg.max_failed_cycles:
            abandoned = True
            break
    if initial == 0:
        # an empty bin still gets one look so search behaviour is observable
        state, res = run_cycle(state, strategy, cfg, rep, keep_images)
        results.append(res)
    picked = state.picked
    summary = {
        "repetition": rep,
        "objects": initial,
        "picked": picked,
        "complete_rate": picked / initial if initial else 1.0,
        "cycles": len(results),
        "searches": sum(r.search_triggered for r in results),
        "mean_charged_ms": float(np.mean([r.takt.charged_ms for r in results])) if results else 0.0,
        "clock_ms": state.clock_ms,
        "abandoned": abandoned,
    }
    return summary, results


def run_experiment(cfg: ExperimentConfig, repetitions: int | None = None,
                   strategy: Strategy | None = None, on_cycle=None) -> ExperimentMetrics:
    """Run independent episodes; ``on_cycle(rep, result)`` sees every cycle with its fused image."""
    reps = cfg.repetitions if repetitions is None else repetitions
    per_rep = []
    rows = []
    charged = []
    for rep in range(reps):
        summary, results = run_episode(cfg, rep, strategy, keep_images=on_cycle is not None)
        per_rep.append(summary)
        for r in results:
            if on_cycle is not None:
                on_cycle(rep, r)
            rows.append({"repetition": rep, **r.row()})
            charged.append(r.takt.charged_ms)
    return ExperimentMetrics(
        complete_rate=float(np.mean([s["complete_rate"] for s in per_rep])) if per_rep else 1.0,
        cycles_run=sum(s["cycles"] for s in per_rep),
        searches_triggered=float(np.mean([s["searches"] for s in per_rep])) if per_rep else 0.0,
        mean_charged_takt_ms=float(np.mean(charged)) if charged else 0.0,
        per_repetition=per_rep,
        cycles=rows,
    )


def with_strategy(cfg: ExperimentConfig, strategy: Strategy) -> ExperimentConfig:
    return replace(cfg, strategy=Strategy(strategy))


def fused_error(fused: DepthImage, truth: DepthImage) -> float:
    """RMS depth error over pixels valid in both images."""
    both = fused.valid & truth.valid
    if not both.any():
        return float("nan")
    return float(np.sqrt(np.mean((fused.depth[both] - truth.depth[both]) ** 2)))


__all__ = [
    "Capture", "CycleResult", "CycleState", "ExperimentConfig", "ExperimentMetrics", "PathSettings",
    "RecognitionConfig", "Strategy", "capture_views", "fused_error", "image_points", "initial_state",
    "recognize", "run_cycle", "run_episode", "run_experiment", "select_grasp",
]
