"""Route construction: polylines, drivable corridors, walls, commands.

A route is described by a compact segment spec (straights and arcs); the
builder derives the polyline, per-vertex curvature, navigation command
zones, convex corridor polygons, and the solid wall segments used for
layout-collision detection. Walls sit on the outer edge of bends (plus a
short approach margin); straight edges are open shoulder, so a sloppy
driver can either clip a wall in a turn or drift off-road on a straight.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from ..core import CommandKind, normalize_angle

_ARC_PIECE_DEG = 12.0
_STRAIGHT_SUBDIV = 15.0     # vertex spacing on long straights (nav anchors)
_TURN_COMMAND_MIN_DEG = 30.0
_WALL_MARGIN = 4.0          # solid wall extends this far before/after a bend
_MITER_CLAMP = 1.5


@dataclass
class RouteSpec:
    """Buildable description: segments are ("straight", length) or
    ("arc", radius, signed_angle_deg), positive angle = left."""

    name: str
    segments: list[tuple]
    lane_half_width: float = 3.5


@dataclass
class LightDef:
    stop_line: np.ndarray        # (2, 2) endpoints, world frame
    stop_s: float                # arc length of the stop line on the route
    trigger_distance: float
    dwell_red: float


@dataclass
class RouteMap:
    spec: RouteSpec
    pts: np.ndarray                       # (N, 2) polyline vertices
    vertex_curvature: np.ndarray          # (N,) signed 1/R
    commands: list[tuple[float, float, CommandKind]]
    polys: list[np.ndarray]               # convex CCW drivable polygons
    walls: np.ndarray                     # (M, 2, 2) solid segments
    lights: list[LightDef] = field(default_factory=list)
    junctions: list[dict] = field(default_factory=list)

    seg_vec: np.ndarray = field(init=False)
    seg_len: np.ndarray = field(init=False)
    seg_dir: np.ndarray = field(init=False)
    cum_s: np.ndarray = field(init=False)
    total_len: float = field(init=False)
    vertex_s: np.ndarray = field(init=False)
    _poly_bbox: np.ndarray = field(init=False)

    def __post_init__(self):
        vec = np.diff(self.pts, axis=0)
        ln = np.hypot(vec[:, 0], vec[:, 1])
        if np.any(ln < 1e-9):
            raise ValueError("degenerate route segment")
        self.seg_vec = vec
        self.seg_len = ln
        self.seg_dir = vec / ln[:, None]
        self.cum_s = np.concatenate([[0.0], np.cumsum(ln)])
        self.total_len = float(self.cum_s[-1])
        self.vertex_s = self.cum_s
        if self.polys:
            self._poly_bbox = np.array(
                [[p[:, 0].min(), p[:, 1].min(), p[:, 0].max(), p[:, 1].max()]
                 for p in self.polys])
        else:
            self._poly_bbox = np.zeros((0, 4))
        if len(self.walls):
            self._wall_mid = self.walls.mean(axis=1)
            diff = self.walls[:, 1] - self.walls[:, 0]
            self._wall_halfspan = 0.5 * np.hypot(diff[:, 0], diff[:, 1])
        else:
            self._wall_mid = np.zeros((0, 2))
            self._wall_halfspan = np.zeros(0)

    # --- geometry queries -------------------------------------------------

    def point_at(self, s: float) -> tuple[float, float]:
        s = min(max(s, 0.0), self.total_len)
        i = min(int(np.searchsorted(self.cum_s, s, side="right")) - 1,
                len(self.seg_len) - 1)
        i = max(i, 0)
        t = (s - self.cum_s[i]) / self.seg_len[i]
        p = self.pts[i] + t * self.seg_vec[i]
        return (float(p[0]), float(p[1]))

    def heading_at(self, s: float) -> float:
        s = min(max(s, 0.0), self.total_len)
        i = min(int(np.searchsorted(self.cum_s, s, side="right")) - 1,
                len(self.seg_len) - 1)
        i = max(i, 0)
        d = self.seg_dir[i]
        return math.atan2(d[1], d[0])

    def project(self, x: float, y: float, hint: int | None = None,
                window: int = 20) -> tuple[float, float, int]:
        """Project a point onto the polyline.

        Returns (arc length, signed lateral offset [+ = left of route],
        segment index). A hint narrows the search to nearby segments.
        """
        n = len(self.seg_len)
        if hint is None:
            lo, hi = 0, n
        else:
            lo, hi = max(0, hint - 4), min(n, hint + window)
        p = np.array([x, y])
        rel = p - self.pts[lo:hi]
        t = np.einsum("ij,ij->i", rel, self.seg_vec[lo:hi]) / (self.seg_len[lo:hi] ** 2)
        t = np.clip(t, 0.0, 1.0)
        proj = self.pts[lo:hi] + t[:, None] * self.seg_vec[lo:hi]
        d2 = np.einsum("ij,ij->i", p - proj, p - proj)
        k = int(np.argmin(d2))
        i = lo + k
        s = float(self.cum_s[i] + t[k] * self.seg_len[i])
        dvec = p - proj[k]
        lat = float(self.seg_dir[i, 0] * dvec[1] - self.seg_dir[i, 1] * dvec[0])
        return s, lat, i

    def max_curvature(self, s0: float, s1: float) -> float:
        i0 = int(np.searchsorted(self.vertex_s, s0, side="left"))
        i1 = int(np.searchsorted(self.vertex_s, s1, side="right"))
        if i0 >= i1:
            i0 = max(0, min(i0, len(self.vertex_curvature) - 1))
            return float(abs(self.vertex_curvature[i0]))
        return float(np.max(np.abs(self.vertex_curvature[i0:i1])))

    def curvature_at(self, s: float) -> float:
        i = int(np.searchsorted(self.vertex_s, s, side="right")) - 1
        i = max(0, min(i, len(self.vertex_curvature) - 1))
        return float(self.vertex_curvature[i])

    def command_at(self, s: float) -> CommandKind:
        for s0, s1, kind in self.commands:
            if s0 <= s < s1:
                return kind
        return CommandKind.LANE_FOLLOW

    def next_anchor(self, s: float, min_ahead: float = 4.0) -> tuple[float, float]:
        """Next navigation vertex at least min_ahead down the route."""
        target_s = s + min_ahead
        idx = int(np.searchsorted(self.vertex_s, target_s, side="left"))
        if idx >= len(self.vertex_s):
            return self.point_at(self.total_len)
        return (float(self.pts[idx, 0]), float(self.pts[idx, 1]))

    def walls_near(self, x: float, y: float, reach: float) -> np.ndarray:
        if not len(self.walls):
            return self.walls
        d = np.hypot(self._wall_mid[:, 0] - x, self._wall_mid[:, 1] - y)
        mask = d <= self._wall_halfspan + reach
        if not mask.any():
            return self.walls[:0]
        return self.walls[mask]

    def polys_near(self, x: float, y: float, margin: float = 0.5):
        if not self.polys:
            return []
        bb = self._poly_bbox
        mask = ((x >= bb[:, 0] - margin) & (y >= bb[:, 1] - margin)
                & (x <= bb[:, 2] + margin) & (y <= bb[:, 3] + margin))
        return [self.polys[i] for i in np.nonzero(mask)[0]]


# --- builder ---------------------------------------------------------------

def _emit_polyline(spec: RouteSpec):
    pts = [(0.0, 0.0)]
    heading = 0.0
    curv = [0.0]
    arc_zones = []  # (s0, s1, signed total angle rad)
    s = 0.0
    for seg in spec.segments:
        if seg[0] == "straight":
            length = float(seg[1])
            nsub = max(1, int(math.ceil(length / _STRAIGHT_SUBDIV)))
            step = length / nsub
            for _ in range(nsub):
                x, y = pts[-1]
                pts.append((x + step * math.cos(heading),
                            y + step * math.sin(heading)))
                curv.append(0.0)
                s += step
        elif seg[0] == "arc":
            radius = float(seg[1])
            total = math.radians(float(seg[2]))
            npiece = max(1, int(math.ceil(abs(seg[2]) / _ARC_PIECE_DEG)))
            dth = total / npiece
            chord = 2.0 * radius * math.sin(abs(dth) / 2.0)
            s0 = s
            for _ in range(npiece):
                mid = heading + dth / 2.0
                x, y = pts[-1]
                pts.append((x + chord * math.cos(mid), y + chord * math.sin(mid)))
                heading = normalize_angle(heading + dth)
                curv.append(math.copysign(1.0 / radius, total))
                s += chord
            arc_zones.append((s0, s, total))
        else:
            raise ValueError(f"unknown segment kind {seg[0]!r}")
    return np.array(pts), np.array(curv), arc_zones


def _corridor(pts: np.ndarray, half_width: float):
    """Offset boundary points (left, right) with clamped miter joins."""
    vec = np.diff(pts, axis=0)
    dirs = vec / np.hypot(vec[:, 0], vec[:, 1])[:, None]
    normals = np.stack([-dirs[:, 1], dirs[:, 0]], axis=1)  # left normals
    vn = np.empty_like(pts)
    vn[0] = normals[0]
    vn[-1] = normals[-1]
    for i in range(1, len(pts) - 1):
        m = normals[i - 1] + normals[i]
        norm = math.hypot(m[0], m[1])
        if norm < 1e-9:
            vn[i] = normals[i]
            continue
        m = m / norm
        scale = min(_MITER_CLAMP, 1.0 / max(1e-6, m @ normals[i]))
        vn[i] = m * scale
    left = pts + half_width * vn
    right = pts - half_width * vn
    return left, right


def build_route_map(spec: RouteSpec) -> RouteMap:
    pts, curv, arc_zones = _emit_polyline(spec)
    left, right = _corridor(pts, spec.lane_half_width)

    polys = []
    for i in range(len(pts) - 1):
        quad = np.array([right[i], right[i + 1], left[i + 1], left[i]])
        polys.append(_make_ccw_convex(quad))

    cum = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(pts, axis=0).T))])

    commands = []
    for s0, s1, total in arc_zones:
        if abs(math.degrees(total)) >= _TURN_COMMAND_MIN_DEG:
            kind = CommandKind.TURN_LEFT if total > 0 else CommandKind.TURN_RIGHT
            commands.append((max(0.0, s0 - 6.0), s1, kind))

    walls = []
    for s0, s1, total in arc_zones:
        lo, hi = s0 - _WALL_MARGIN, s1 + _WALL_MARGIN
        boundary = right if total > 0 else left  # outer edge of the bend
        for i in range(len(pts) - 1):
            if cum[i + 1] < lo or cum[i] > hi:
                continue
            walls.append((boundary[i].copy(), boundary[i + 1].copy()))
    walls_arr = (np.array(walls) if walls else np.zeros((0, 2, 2)))

    return RouteMap(spec=spec, pts=pts, vertex_curvature=curv,
                    commands=commands, polys=polys, walls=walls_arr)


def _make_ccw_convex(quad: np.ndarray) -> np.ndarray:
    area2 = 0.0
    n = len(quad)
    for i in range(n):
        x1, y1 = quad[i]
        x2, y2 = quad[(i + 1) % n]
        area2 += x1 * y2 - x2 * y1
    return quad if area2 > 0 else quad[::-1].copy()


def splice_arc(spec: RouteSpec, anchor_frac: float, radius: float,
               angle_deg: float, name_suffix: str = "+bend"):
    """Insert an arc into a straight near anchor_frac of the route length.

    Returns (new spec, arc start arc-length). Used by the big-turn and
    junction scenarios; the tail segments rotate with the bend because
    segment specs are heading-relative.
    """
    pts, _, _ = _emit_polyline(spec)
    total = float(np.sum(np.hypot(*np.diff(pts, axis=0).T)))
    target = anchor_frac * total
    need = max(10.0, radius + 6.0)

    s = 0.0
    best = None
    for idx, seg in enumerate(spec.segments):
        if seg[0] == "straight":
            length = float(seg[1])
            lo, hi = s + 6.0, s + length - need
            if lo <= hi:
                cut = min(max(target, lo), hi)
                score = abs(cut - target)
                if best is None or score < best[0]:
                    best = (score, idx, cut - s, length)
            s += length
        else:
            radius_, ang = float(seg[1]), float(seg[2])
            npiece = max(1, int(math.ceil(abs(ang) / _ARC_PIECE_DEG)))
            s += npiece * 2.0 * radius_ * math.sin(math.radians(abs(ang)) / npiece / 2.0)
    if best is None:
        raise ValueError(f"route {spec.name!r} has no straight long enough to splice")

    _, idx, offset, length = best
    segments = list(spec.segments)
    tail = length - offset
    segments[idx:idx + 1] = [("straight", offset),
                             ("arc", radius, angle_deg),
                             ("straight", tail)]
    new_spec = RouteSpec(spec.name + name_suffix, segments, spec.lane_half_width)
    # arc start arc-length in the new spec
    pts2, _, zones2 = _emit_polyline(new_spec)
    cum2 = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(pts2, axis=0).T))])
    target_s = None
    prev_end = 0.0
    for s0, s1, _ in zones2:
        if s0 >= offset - 1e-6 and (target_s is None or abs(s0 - offset) <
                                    abs(target_s - offset)):
            target_s = s0
        prev_end = s1
    del cum2, prev_end
    return new_spec, (target_s if target_s is not None else offset)


# --- stock routes ----------------------------------------------------------

STOCK_ROUTES: dict[str, RouteSpec] = {
    "straight_run": RouteSpec("straight_run", [("straight", 150.0)]),
    "gentle_s": RouteSpec("gentle_s", [("straight", 40.0), ("arc", 25.0, 25.0),
                                       ("straight", 35.0), ("arc", 25.0, -25.0),
                                       ("straight", 40.0)]),
    "right_angle": RouteSpec("right_angle", [("straight", 45.0),
                                             ("arc", 8.0, -90.0),
                                             ("straight", 45.0)]),
    "left_angle": RouteSpec("left_angle", [("straight", 45.0),
                                           ("arc", 8.0, 90.0),
                                           ("straight", 45.0)]),
    "double_turn": RouteSpec("double_turn", [("straight", 35.0),
                                             ("arc", 8.0, -90.0),
                                             ("straight", 30.0),
                                             ("arc", 8.0, 90.0),
                                             ("straight", 35.0)]),
    "hairpin": RouteSpec("hairpin", [("straight", 40.0), ("arc", 7.0, 135.0),
                                     ("straight", 40.0)]),
    "zigzag": RouteSpec("zigzag", [("straight", 30.0), ("arc", 10.0, 45.0),
                                   ("straight", 25.0), ("arc", 10.0, -45.0),
                                   ("straight", 25.0), ("arc", 10.0, 45.0),
                                   ("straight", 30.0)]),
    "long_mixed": RouteSpec("long_mixed", [("straight", 50.0),
                                           ("arc", 9.0, -90.0),
                                           ("straight", 40.0),
                                           ("arc", 12.0, 60.0),
                                           ("straight", 45.0)]),
}


def stock_route_names() -> list[str]:
    return list(STOCK_ROUTES)


def get_route_spec(name: str) -> RouteSpec:
    try:
        return STOCK_ROUTES[name]
    except KeyError:
        raise KeyError(f"unknown stock route {name!r}; "
                       f"choose from {sorted(STOCK_ROUTES)}") from None


# --- file io ---------------------------------------------------------------

ROUTE_SCHEMA = 1


def route_map_to_json(rm: RouteMap, scenarios: list | None = None) -> str:
    doc = {
        "schema_version": ROUTE_SCHEMA,
        "name": rm.spec.name,
        "lane_half_width": rm.spec.lane_half_width,
        "segments": [list(s) for s in rm.spec.segments],
        "polyline": rm.pts.tolist(),
        "commands": [[s0, s1, k.name] for s0, s1, k in rm.commands],
        "drivable": [p.tolist() for p in rm.polys],
        "walls": rm.walls.tolist(),
        "lights": [{"stop_line": ld.stop_line.tolist(), "stop_s": ld.stop_s,
                    "trigger_distance": ld.trigger_distance,
                    "dwell_red": ld.dwell_red} for ld in rm.lights],
        "scenarios": scenarios or [],
    }
    return json.dumps(doc, sort_keys=True)


def route_spec_from_json(text: str) -> RouteSpec:
    doc = json.loads(text)
    if doc.get("schema_version") != ROUTE_SCHEMA:
        raise ValueError("unsupported route schema")
    segments = [tuple(s) for s in doc["segments"]]
    return RouteSpec(doc["name"], segments, float(doc["lane_half_width"]))
