"""Sensing-time model and takt-time accounting.

Per-view and per-cycle costs are stored in milliseconds as separate
constants, and the affine total ``343 n + t (n - 1) + 220`` is summed
from them rather than hard-coded.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .geometry import Arc
from .planner import MM_PER_S_AT_FULL_SPEED

EXPOSURE_MS = 3
TRANSFER_MS = 90
KINEMATICS_MS = 20
GEN3D_MS = 150
FUSION_MS = 80
ESTIMATION_MS = 200
PATH_PLANNING_MS = 20


def _exact(x):
    q = Fraction(x)
    return int(q) if q.denominator == 1 else q


@dataclass(frozen=True)
class TimingBreakdown:
    n_views: int
    interval_t_ms: float
    exposure_ms: float = EXPOSURE_MS
    transfer_ms: float = TRANSFER_MS
    kinematics_ms: float = KINEMATICS_MS
    gen3d_ms: float = GEN3D_MS
    fusion_ms: float = FUSION_MS
    estimation_ms: float = ESTIMATION_MS
    path_planning_ms: float = PATH_PLANNING_MS

    def __post_init__(self):
        if self.n_views < 1:
            raise ValueError("n_views must be >= 1")
        values = (self.interval_t_ms, self.exposure_ms, self.transfer_ms, self.kinematics_ms,
                  self.gen3d_ms, self.fusion_ms, self.estimation_ms, self.path_planning_ms)
        if any(v < 0 for v in values):
            raise ValueError("timing components must be non-negative")

    @property
    def per_view_ms(self):
        return _exact(sum(Fraction(x) for x in (self.exposure_ms, self.transfer_ms, self.kinematics_ms,
                                                 self.gen3d_ms, self.fusion_ms)))

    @property
    def per_cycle_ms(self):
        return _exact(Fraction(self.estimation_ms) + Fraction(self.path_planning_ms))

    @property
    def capture_ms(self):
        """Exposure, transfer and the waits between captures."""
        n = self.n_views
        return _exact((Fraction(self.exposure_ms) + Fraction(self.transfer_ms)) * n
                      + Fraction(self.interval_t_ms) * (n - 1))

    @property
    def total_ms(self):
        n = self.n_views
        return _exact(Fraction(self.per_view_ms) * n + Fraction(self.interval_t_ms) * (n - 1)
                      + Fraction(self.per_cycle_ms))

    def as_dict(self) -> dict:
        return {
            "n_views": self.n_views,
            "interval_t_ms": float(self.interval_t_ms),
            "exposure_ms": float(self.exposure_ms) * self.n_views,
            "transfer_ms": float(self.transfer_ms) * self.n_views,
            "kinematics_ms": float(self.kinematics_ms) * self.n_views,
            "gen3d_ms": float(self.gen3d_ms) * self.n_views,
            "fusion_ms": float(self.fusion_ms) * self.n_views,
            "estimation_ms": float(self.estimation_ms),
            "path_planning_ms": float(self.path_planning_ms),
            "sensing_total_ms": float(self.total_ms),
        }


def sensing_time(n: int, t_ms):
    """Total sensing time in ms for n views captured t_ms apart (exact arithmetic)."""
    if n < 1 or t_ms < 0:
        raise ValueError("need n >= 1 and t >= 0")
    return TimingBreakdown(n, t_ms).total_ms


@dataclass(frozen=True)
class TaktAccount:
    place_duration_ms: float
    sensing_total_ms: float
    extra_path_ms: float
    charged_ms: float


def takt_contribution(breakdown: TimingBreakdown, place_duration_ms: float, extra_path_ms: float) -> TaktAccount:
    """Sensing time left over after overlapping with the place action, plus the detour."""
    if place_duration_ms < 0 or extra_path_ms < 0:
        raise ValueError("durations must be non-negative")
    total = float(breakdown.total_ms)
    return _account(total, place_duration_ms, extra_path_ms)


def _account(sensing_total_ms: float, place_duration_ms: float, extra_path_ms: float) -> TaktAccount:
    charged = max(0.0, sensing_total_ms - place_duration_ms) + extra_path_ms
    return TaktAccount(float(place_duration_ms), float(sensing_total_ms), float(extra_path_ms), charged)


def charge(sensing_total_ms: float, place_duration_ms: float, extra_path_ms: float) -> TaktAccount:
    """Same as :func:`takt_contribution` for an already-summed sensing time."""
    if min(sensing_total_ms, place_duration_ms, extra_path_ms) < 0:
        raise ValueError("durations must be non-negative")
    return _account(sensing_total_ms, place_duration_ms, extra_path_ms)


def arc_length_between(arc: Arc, m, n) -> float:
    """Length of the shorter arc from m to n."""
    d = (arc.angle_of(n) - arc.angle_of(m) + np.pi) % (2 * np.pi) - np.pi
    return abs(d) * arc.radius


def speed_mm_per_ms(v: float) -> float:
    return v * MM_PER_S_AT_FULL_SPEED / 1000.0


def extra_path_time(B, M, N, C, arc: Arc, v: float, arc_len: float | None = None) -> float:
    """Extra travel time (ms) of the detour B-M-N-C over the direct move B-C."""
    if v <= 0:
        raise ValueError("speed must be positive")
    B, M, N, C = (np.asarray(p, dtype=float).reshape(3) for p in (B, M, N, C))
    if arc_len is None:
        arc_len = arc_length_between(arc, M, N)
    detour = np.linalg.norm(M - B) + arc_len + np.linalg.norm(C - N) - np.linalg.norm(C - B)
    return max(0.0, float(detour)) / speed_mm_per_ms(v)
