"""Planar geometry and the domain types shared by every other module.

Ego-frame convention: +x points forward, +y points left, so a positive
steer command turns the vehicle left everywhere in the stack.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

TWO_PI = 2.0 * math.pi


def normalize_angle(theta: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    return math.pi - (math.pi - theta) % TWO_PI


@dataclass
class Pose2D:
    x: float
    y: float
    yaw: float  # radians, normalized into (-pi, pi] on construction

    def __post_init__(self):
        self.yaw = normalize_angle(self.yaw)

    def copy(self) -> "Pose2D":
        return Pose2D(self.x, self.y, self.yaw)


@dataclass
class ControlAction:
    """Steer/throttle/brake triple, clamped to legal ranges on construction."""

    steer: float = 0.0      # [-1, 1], positive = left
    throttle: float = 0.0   # [0, 1]
    brake: float = 0.0      # [0, 1]

    def __post_init__(self):
        self.steer = clamp(self.steer, -1.0, 1.0)
        self.throttle = clamp(self.throttle, 0.0, 1.0)
        self.brake = clamp(self.brake, 0.0, 1.0)

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.steer, self.throttle, self.brake)


class CommandKind(Enum):
    STRAIGHT = 0
    TURN_LEFT = 1
    TURN_RIGHT = 2
    LANE_FOLLOW = 3
    CHANGE_LANE_LEFT = 4
    CHANGE_LANE_RIGHT = 5


@dataclass
class NavCommand:
    """High-level navigation hint: a discrete command plus an ego-frame target."""

    kind: CommandKind
    target_point: tuple[float, float]  # ego frame, meters

    def __post_init__(self):
        tx, ty = self.target_point
        if not (math.isfinite(tx) and math.isfinite(ty)):
            raise ValueError("NavCommand target_point must be finite")


@dataclass
class Measurement:
    """Scalar inputs fed to the measurement encoder."""

    speed: float                       # m/s, >= 0
    command_onehot: tuple[int, ...]    # 6 entries, exactly one set
    target_point: tuple[float, float]  # ego frame, meters

    def __post_init__(self):
        if self.speed < 0:
            raise ValueError("speed must be >= 0")
        if len(self.command_onehot) != len(CommandKind) or sum(self.command_onehot) != 1:
            raise ValueError("command_onehot must be a one-hot 6-vector")

    @staticmethod
    def from_command(speed: float, command: NavCommand) -> "Measurement":
        onehot = [0] * len(CommandKind)
        onehot[command.kind.value] = 1
        return Measurement(speed, tuple(onehot), command.target_point)


@dataclass
class WaypointPlan:
    """K future ego-frame waypoints plus the time spacing between them."""

    points: tuple[tuple[float, float], ...]
    step_period: float  # seconds between consecutive waypoints

    def __post_init__(self):
        for px, py in self.points:
            if not (math.isfinite(px) and math.isfinite(py)):
                raise ValueError("waypoints must be finite")

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class OrientedBox:
    center: Pose2D
    half_length: float  # along heading
    half_width: float

    def __post_init__(self):
        if self.half_length <= 0 or self.half_width <= 0:
            raise ValueError("box extents must be positive")

    def corners(self) -> list[tuple[float, float]]:
        c, s = math.cos(self.center.yaw), math.sin(self.center.yaw)
        hl, hw = self.half_length, self.half_width
        out = []
        for dx, dy in ((hl, hw), (hl, -hw), (-hl, -hw), (-hl, hw)):
            out.append((self.center.x + c * dx - s * dy,
                        self.center.y + s * dx + c * dy))
        return out


def clamp(v: float, lo: float, hi: float) -> float:
    return lo if v < lo else hi if v > hi else v


def world_to_ego(p: tuple[float, float], ego: Pose2D) -> tuple[float, float]:
    """Map a world point into the ego frame (+x forward, +y left)."""
    dx = p[0] - ego.x
    dy = p[1] - ego.y
    c, s = math.cos(ego.yaw), math.sin(ego.yaw)
    return (c * dx + s * dy, -s * dx + c * dy)


def ego_to_world(p: tuple[float, float], ego: Pose2D) -> tuple[float, float]:
    """Inverse of :func:`world_to_ego`."""
    c, s = math.cos(ego.yaw), math.sin(ego.yaw)
    return (ego.x + c * p[0] - s * p[1], ego.y + s * p[0] + c * p[1])


def _project_interval(corners, axis):
    lo = hi = corners[0][0] * axis[0] + corners[0][1] * axis[1]
    for px, py in corners[1:]:
        d = px * axis[0] + py * axis[1]
        lo = min(lo, d)
        hi = max(hi, d)
    return lo, hi


def boxes_intersect(a: OrientedBox, b: OrientedBox) -> bool:
    """Separating-axis overlap test on both boxes' axes."""
    ca, cb = a.corners(), b.corners()
    for box in (a, b):
        c, s = math.cos(box.center.yaw), math.sin(box.center.yaw)
        for axis in ((c, s), (-s, c)):
            alo, ahi = _project_interval(ca, axis)
            blo, bhi = _project_interval(cb, axis)
            if ahi < blo or bhi < alo:
                return False
    return True


def segment_intersects_box(p1: tuple[float, float], p2: tuple[float, float],
                           box: OrientedBox) -> bool:
    """True iff the segment p1-p2 touches the oriented box.

    Works by expressing the segment in the box frame and slab-clipping it
    against the box extents.
    """
    c, s = math.cos(box.center.yaw), math.sin(box.center.yaw)

    def to_box(p):
        dx, dy = p[0] - box.center.x, p[1] - box.center.y
        return (c * dx + s * dy, -s * dx + c * dy)

    (x1, y1), (x2, y2) = to_box(p1), to_box(p2)
    t0, t1 = 0.0, 1.0
    for start, delta, ext in ((x1, x2 - x1, box.half_length),
                              (y1, y2 - y1, box.half_width)):
        if abs(delta) < 1e-12:
            if abs(start) > ext:
                return False
            continue
        ta = (-ext - start) / delta
        tb = (ext - start) / delta
        if ta > tb:
            ta, tb = tb, ta
        t0 = max(t0, ta)
        t1 = min(t1, tb)
        if t0 > t1:
            return False
    return True


def point_in_convex_polygon(p: tuple[float, float], poly) -> bool:
    """Point-in-polygon for a convex CCW polygon given as an (N, 2) sequence."""
    n = len(poly)
    for i in range(n):
        ax, ay = poly[i]
        bx, by = poly[(i + 1) % n]
        if (bx - ax) * (p[1] - ay) - (by - ay) * (p[0] - ax) < 0.0:
            return False
    return True
