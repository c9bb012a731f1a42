"""YAML run configuration.

Every file carries ``schema: 1``. Unknown keys are errors, reported with
the line they appear on. Angles are given in degrees and latencies in
milliseconds here; everything past this module uses radians and seconds.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from .cycle_sim import ExperimentConfig, PathSettings, RecognitionConfig, Strategy
from .fusion import FusionConfig
from .geometry import Intrinsics
from .scene import Bin, NoiseModel, ObjectTemplate, SceneSpec, SyncModel
from .tuner import SweepEnv

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TuningSettings:
    object: ObjectTemplate = field(default_factory=lambda: ObjectTemplate("cylinder", (12.0, 50.0), 15, 0.9))
    env: SweepEnv = field(default_factory=SweepEnv)
    strict_sigma_band: bool = False


@dataclass(frozen=True)
class RunConfig:
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)
    tuning: TuningSettings = field(default_factory=TuningSettings)
    source: str = "<defaults>"


def _line_index(node, path=(), out=None) -> dict[tuple, int]:
    """1-based line of every key path in a composed YAML tree."""
    if out is None:
        out = {}
    out[path] = node.start_mark.line + 1
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            key = k.value
            out[path + (key,)] = k.start_mark.line + 1
            _line_index(v, path + (key,), out)
            out[path + (key,)] = k.start_mark.line + 1
    elif isinstance(node, yaml.SequenceNode):
        for i, v in enumerate(node.value):
            _line_index(v, path + (i,), out)
    return out


class _Reader:
    def __init__(self, source: str, lines: dict[tuple, int]):
        self.source = source
        self.lines = lines

    def fail(self, path: tuple, msg: str):
        line = None
        p = path
        while line is None and p is not None:
            line = self.lines.get(p)
            p = p[:-1] if p else None
        where = f"{self.source}:{line}" if line else self.source
        dotted = ".".join(str(x) for x in path) or "<root>"
        raise ConfigError(f"{where}: {dotted}: {msg}")

    def section(self, data, path: tuple, allowed) -> dict:
        if data is None:
            return {}
        if not isinstance(data, dict):
            self.fail(path, "expected a mapping")
        for key in data:
            if key not in allowed:
                self.fail(path + (key,), f"unknown key (allowed: {', '.join(sorted(allowed))})")
        return data

    def number(self, value, path, integer=False):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            self.fail(path, f"expected a number, got {value!r}")
        if integer:
            if isinstance(value, float) and not value.is_integer():
                self.fail(path, f"expected an integer, got {value!r}")
            return int(value)
        return float(value)

    def numbers(self, value, path, length=None, integer=False):
        if not isinstance(value, list):
            self.fail(path, "expected a list")
        if length is not None and len(value) != length:
            self.fail(path, f"expected {length} values, got {len(value)}")
        return tuple(self.number(x, path + (i,), integer) for i, x in enumerate(value))

    def build(self, cls, kwargs: dict, path: tuple):
        try:
            return cls(**kwargs)
        except (ValueError, TypeError) as exc:
            self.fail(path, str(exc))


def _flat(r: _Reader, data, path, cls, base, integer_fields=(), bool_fields=()):
    """Section whose keys are exactly the dataclass fields of ``cls``."""
    names = {f.name for f in dataclasses.fields(cls)}
    sec = r.section(data, path, names)
    kwargs = {}
    for key, value in sec.items():
        if key in bool_fields:
            if not isinstance(value, bool):
                r.fail(path + (key,), "expected true or false")
            kwargs[key] = value
        else:
            kwargs[key] = r.number(value, path + (key,), key in integer_fields)
    try:
        return replace(base, **kwargs)
    except (ValueError, TypeError) as exc:
        r.fail(path, str(exc))


def _template(r: _Reader, data, path) -> ObjectTemplate:
    sec = r.section(data, path, {"shape", "dims", "count", "susceptibility"})
    for key in ("shape", "dims", "count"):
        if key not in sec:
            r.fail(path, f"missing key '{key}'")
    if not isinstance(sec["shape"], str):
        r.fail(path + ("shape",), "expected a string")
    dims = r.numbers(sec["dims"], path + ("dims",))
    count = r.number(sec["count"], path + ("count",), integer=True)
    sus = r.number(sec.get("susceptibility", 0.9), path + ("susceptibility",))
    return r.build(ObjectTemplate, dict(shape=sec["shape"], dims=dims, count=count, dropout_susceptibility=sus), path)


def _scene(r: _Reader, data, path, base: SceneSpec) -> SceneSpec:
    sec = r.section(data, path, {"bin", "pile_spread", "objects"})
    b = base.bin
    if "bin" in sec:
        b = _flat(r, sec["bin"], path + ("bin",), Bin, b)
    spread = r.number(sec["pile_spread"], path + ("pile_spread",)) if "pile_spread" in sec else base.pile_spread
    templates = base.templates
    if "objects" in sec:
        if not isinstance(sec["objects"], list) or not sec["objects"]:
            r.fail(path + ("objects",), "expected a non-empty list")
        templates = tuple(_template(r, o, path + ("objects", i)) for i, o in enumerate(sec["objects"]))
    return SceneSpec(b, templates, spread)


def _camera(r: _Reader, data, path, base: Intrinsics) -> Intrinsics:
    sec = r.section(data, path, {"width", "height", "hfov_deg"})
    if not sec:
        return base
    w = r.number(sec.get("width", base.width), path + ("width",), integer=True)
    h = r.number(sec.get("height", base.height), path + ("height",), integer=True)
    hfov = r.number(sec.get("hfov_deg", 70.0), path + ("hfov_deg",))
    if w < 1 or h < 1 or not 0 < hfov < 180:
        r.fail(path, "need width, height >= 1 and 0 < hfov_deg < 180")
    return Intrinsics.from_fov(w, h, np.deg2rad(hfov))


def _sync(r: _Reader, data, path, base: SyncModel) -> SyncModel:
    sec = r.section(data, path, {"latency_jitter_ms", "speed"})
    kw = {}
    if "latency_jitter_ms" in sec:
        kw["latency_jitter"] = r.number(sec["latency_jitter_ms"], path + ("latency_jitter_ms",)) / 1000.0
    if "speed" in sec:
        kw["speed"] = r.number(sec["speed"], path + ("speed",))
    return r.build(SyncModel, {**dataclasses.asdict(base), **kw}, path)


def _path(r: _Reader, data, path, base: PathSettings) -> PathSettings:
    keys = {"n", "t_ms", "v", "gamma_deg", "working_distance", "lift_height", "drop_point"}
    sec = r.section(data, path, keys)
    kw = {}
    for key in ("n", "t_ms", "v", "working_distance", "lift_height"):
        if key in sec:
            kw[key] = r.number(sec[key], path + (key,), integer=(key == "n"))
    if "gamma_deg" in sec:
        kw["gamma"] = float(np.deg2rad(r.number(sec["gamma_deg"], path + ("gamma_deg",))))
    if "drop_point" in sec:
        kw["drop_point"] = r.numbers(sec["drop_point"], path + ("drop_point",), 3)
    out = replace(base, **kw)
    try:
        out.params()
    except ValueError as exc:
        r.fail(path, str(exc))
    return out


def _experiment(r: _Reader, data, path, base: ExperimentConfig) -> dict:
    ints = {"cycle_cap_factor", "max_failed_cycles"}
    keys = {"strategy", "place_duration_ms", "pick_place_ms", "grasp_failure_prob", "measure_fusion_time"} | ints
    sec = r.section(data, path, keys)
    kw = {}
    for key, value in sec.items():
        if key == "strategy":
            try:
                kw[key] = Strategy(value)
            except ValueError:
                r.fail(path + (key,), f"unknown strategy {value!r}")
        elif key == "measure_fusion_time":
            if not isinstance(value, bool):
                r.fail(path + (key,), "expected true or false")
            kw[key] = value
        else:
            kw[key] = r.number(value, path + (key,), key in ints)
    if kw.get("grasp_failure_prob", 0.0) < 0 or kw.get("grasp_failure_prob", 0.0) > 1:
        r.fail(path + ("grasp_failure_prob",), "must be in [0, 1]")
    if kw.get("cycle_cap_factor", 1) < 1 or kw.get("max_failed_cycles", 0) < 0:
        r.fail(path, "cycle_cap_factor must be >= 1 and max_failed_cycles >= 0")
    if min(kw.get("place_duration_ms", 0.0), kw.get("pick_place_ms", 0.0)) < 0:
        r.fail(path, "durations must be non-negative")
    return kw


def _tuning(r: _Reader, data, path, base: TuningSettings, exp: ExperimentConfig) -> TuningSettings:
    keys = {"object", "n_paths", "n_captures", "base_t_ms", "v_grid", "t_grid", "n_grid", "pile_spread",
            "strict_sigma_band"}
    sec = r.section(data, path, keys)
    obj = _template(r, sec["object"], path + ("object",)) if "object" in sec else base.object
    strict = sec.get("strict_sigma_band", base.strict_sigma_band)
    if not isinstance(strict, bool):
        r.fail(path + ("strict_sigma_band",), "expected true or false")
    kw = dict(bin=exp.scene.bin, camera=exp.camera, noise=exp.noise, sync=exp.sync, fusion=exp.fusion,
              recognition=exp.recognition, working_distance=exp.path.working_distance)
    for key in ("n_paths", "n_captures", "base_t_ms"):
        if key in sec:
            kw[key] = r.number(sec[key], path + (key,), integer=True)
    if "pile_spread" in sec:
        kw["pile_spread"] = r.number(sec["pile_spread"], path + ("pile_spread",))
    if "v_grid" in sec:
        kw["v_grid"] = r.numbers(sec["v_grid"], path + ("v_grid",))
    for key in ("t_grid", "n_grid"):
        if key in sec:
            kw[key] = r.numbers(sec[key], path + (key,), integer=True)
    env = r.build(SweepEnv, {**{f.name: getattr(base.env, f.name) for f in dataclasses.fields(SweepEnv)}, **kw},
                  path)
    return TuningSettings(obj, env, strict)


SECTIONS = {"schema", "seed", "repetitions", "scene", "noise", "sync", "camera", "path", "fusion",
            "recognition", "experiment", "tuning"}


def parse_config(text: str, source: str = "<string>") -> RunConfig:
    try:
        root = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = f":{mark.line + 1}" if mark is not None else ""
        raise ConfigError(f"{source}{line}: invalid YAML: {getattr(exc, 'problem', exc)}") from None
    r = _Reader(source, _line_index(root) if root is not None else {})
    data = r.section(data, (), SECTIONS)
    if data.get("schema") != SCHEMA_VERSION:
        r.fail(("schema",), f"expected schema: {SCHEMA_VERSION}, got {data.get('schema')!r}")

    base = ExperimentConfig()
    kw: dict = {}
    if "seed" in data:
        seed = r.number(data["seed"], ("seed",), integer=True)
        if seed < 0:
            r.fail(("seed",), "seed must be non-negative")
        kw["seed"] = seed
    if "repetitions" in data:
        reps = r.number(data["repetitions"], ("repetitions",), integer=True)
        if reps < 1:
            r.fail(("repetitions",), "repetitions must be >= 1")
        kw["repetitions"] = reps
    if "scene" in data:
        kw["scene"] = _scene(r, data["scene"], ("scene",), base.scene)
    if "noise" in data:
        kw["noise"] = _flat(r, data["noise"], ("noise",), NoiseModel, base.noise)
    if "sync" in data:
        kw["sync"] = _sync(r, data["sync"], ("sync",), base.sync)
    if "camera" in data:
        kw["camera"] = _camera(r, data["camera"], ("camera",), base.camera)
    if "path" in data:
        kw["path"] = _path(r, data["path"], ("path",), base.path)
    if "fusion" in data:
        ints = {"icp_max_iterations", "min_votes", "icp_subsample", "icp_target_subsample",
                "icp_max_source_points", "icp_max_target_points"}
        kw["fusion"] = _flat(r, data["fusion"], ("fusion",), FusionConfig, base.fusion, ints, {"icp_enabled"})
    if "recognition" in data:
        kw["recognition"] = _flat(r, data["recognition"], ("recognition",), RecognitionConfig, base.recognition,
                                  {"min_pixels"})
    if "experiment" in data:
        kw.update(_experiment(r, data["experiment"], ("experiment",), base))
    exp = replace(base, **kw)
    tuning = _tuning(r, data.get("tuning"), ("tuning",), TuningSettings(), exp)
    return RunConfig(exp, tuning, source)


def load_config(path) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"{p}: cannot read config: {exc.strerror}") from None
    return parse_config(text, str(p))
