"""Scenario specs, scripted agents, and spawning.

Route-splicing scenarios (big turn, junctions) rebuild the route from its
segment spec, so they must be applied before any agents exist; agent
scenarios then place scripted traffic relative to route arc length.
Triggers key off euclidean distance from the ego to the scenario anchor
(or the gap to the lead vehicle), never wall time, so replays with the
same seed are exact.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from ..core import CommandKind, Pose2D, boxes_intersect, normalize_angle
from .routes import LightDef, RouteMap, RouteSpec, build_route_map, splice_arc
from .world import (Agent, AgentKind, Light, SimConfig, VehicleParams,
                    WorldState, make_world)


class SpawnConflict(RuntimeError):
    """Inserted scenario geometry overlaps an existing agent."""


class ScenarioKind(Enum):
    LEAD_VEHICLE_STOP = "lead_vehicle_stop"
    CROSSING_CYCLIST = "crossing_cyclist"
    UNPROTECTED_LEFT_TURN = "unprotected_left_turn"
    RED_LIGHT_INTERSECTION = "red_light_intersection"
    BIG_TURN = "big_turn"
    SUDDEN_OBSTACLE = "sudden_obstacle"


SPLICE_KINDS = frozenset({ScenarioKind.BIG_TURN,
                          ScenarioKind.UNPROTECTED_LEFT_TURN,
                          ScenarioKind.RED_LIGHT_INTERSECTION})


@dataclass
class ScenarioSpec:
    kind: ScenarioKind
    trigger_distance: float = 18.0
    anchor_frac: float = 0.5       # where along the route the scenario sits
    parameters: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.trigger_distance <= 0:
            raise ValueError("trigger_distance must be positive")

    def to_dict(self) -> dict:
        return {"kind": self.kind.value,
                "trigger_distance": self.trigger_distance,
                "anchor_frac": self.anchor_frac,
                "parameters": dict(self.parameters)}


# --- scripts -----------------------------------------------------------------

@dataclass
class LeadVehicleScript:
    """In-lane leader: cruises, brakes to a stop when the ego closes in,
    dwells, then resumes."""

    s: float
    cruise: float
    decel: float
    trigger_gap: float
    dwell: float
    phase: str = "cruise"
    timer: float = 0.0

    def copy(self):
        return replace(self)

    def advance(self, agent: Agent, world: WorldState, dt: float) -> None:
        gap = self.s - world.ego.progress_s
        if self.phase == "cruise" and gap <= self.trigger_gap:
            self.phase = "braking"
        if self.phase == "braking":
            agent.speed = max(0.0, agent.speed - self.decel * dt)
            if agent.speed == 0.0:
                self.phase = "stopped"
        elif self.phase == "stopped":
            self.timer += dt
            if self.timer >= self.dwell:
                self.phase = "resume"
        elif self.phase in ("cruise", "resume"):
            agent.speed = min(self.cruise, agent.speed + 2.0 * dt)
        self.s += agent.speed * dt
        total = world.route.total_len
        if self.s <= total:
            px, py = world.route.point_at(self.s)
            agent.pose = Pose2D(px, py, world.route.heading_at(self.s))
        else:
            # continue past the route end so the ego can finish behind it
            over = self.s - total
            ex, ey = world.route.point_at(total)
            heading = world.route.heading_at(total)
            agent.pose = Pose2D(ex + over * math.cos(heading),
                                ey + over * math.sin(heading), heading)
            if over > 15.0:
                agent.active = False


@dataclass
class CrossingScript:
    """Waits at its start point, then crosses along a straight path when the
    ego gets within the trigger distance of the anchor."""

    anchor: tuple[float, float]
    trigger_distance: float
    speed: float
    travel: float
    heading: float
    appear_on_trigger: bool = False
    moving: bool = False
    progress: float = 0.0
    start: tuple[float, float] = (0.0, 0.0)

    def copy(self):
        return replace(self)

    def advance(self, agent: Agent, world: WorldState, dt: float) -> None:
        if not self.moving:
            ex, ey = world.ego.pose.x, world.ego.pose.y
            if math.hypot(ex - self.anchor[0], ey - self.anchor[1]) \
                    <= self.trigger_distance:
                self.moving = True
                agent.active = True
            else:
                return
        if self.progress >= self.travel:
            agent.speed = 0.0
            return
        agent.speed = self.speed
        self.progress += self.speed * dt
        agent.pose = Pose2D(self.start[0] + self.progress * math.cos(self.heading),
                            self.start[1] + self.progress * math.sin(self.heading),
                            self.heading)


@dataclass
class StaticObstacleScript:
    """Stalled obstacle that pops into existence when the ego is close and
    clears again after a dwell (the stalled car recovers and leaves)."""

    anchor: tuple[float, float]
    trigger_distance: float
    dwell: float = 8.0
    appeared: bool = False
    timer: float = 0.0

    def copy(self):
        return replace(self)

    def advance(self, agent: Agent, world: WorldState, dt: float) -> None:
        if not self.appeared:
            ex, ey = world.ego.pose.x, world.ego.pose.y
            if math.hypot(ex - self.anchor[0], ey - self.anchor[1]) \
                    <= self.trigger_distance:
                self.appeared = True
                agent.active = True
            return
        if agent.active:
            self.timer += dt
            if self.timer >= self.dwell:
                agent.active = False


# --- spawning ------------------------------------------------------------------

def _jitter(rng: np.random.Generator, base: float, frac: float) -> float:
    return base * (1.0 + frac * (2.0 * rng.random() - 1.0))


def _check_conflict(world: WorldState, agent: Agent) -> None:
    box = agent.box()
    for other in world.agents:
        if boxes_intersect(box, other.box()):
            raise SpawnConflict(
                f"{agent.kind.value} spawn overlaps existing agent")
    if boxes_intersect(box, world.ego_box()):
        raise SpawnConflict(f"{agent.kind.value} spawn overlaps the ego")


def _add_junction(route: RouteMap, junction_s: float, half_span: float = 18.0,
                  half_width: float = 3.5) -> RouteMap:
    """Insert a perpendicular cross corridor at junction_s and open the main
    walls across the junction box."""
    cx, cy = route.point_at(junction_s)
    heading = route.heading_at(max(0.0, junction_s - 2.0))
    cross = heading + math.pi / 2.0
    ux, uy = math.cos(cross), math.sin(cross)
    nx, ny = -uy, ux
    corners = np.array([
        [cx - half_span * ux - half_width * nx, cy - half_span * uy - half_width * ny],
        [cx + half_span * ux - half_width * nx, cy + half_span * uy - half_width * ny],
        [cx + half_span * ux + half_width * nx, cy + half_span * uy + half_width * ny],
        [cx - half_span * ux + half_width * nx, cy - half_span * uy + half_width * ny],
    ])
    polys = list(route.polys) + [_ccw(corners)]

    # drop main-route walls whose midpoint lies inside the junction opening
    keep = []
    for seg in route.walls:
        mid = seg.mean(axis=0)
        along = abs((mid[0] - cx) * ux + (mid[1] - cy) * uy)
        across = abs((mid[0] - cx) * nx + (mid[1] - cy) * ny)
        if along <= half_span and across <= half_width + 0.5:
            continue
        keep.append(seg)
    walls = np.array(keep) if keep else np.zeros((0, 2, 2))

    rm = RouteMap(spec=route.spec, pts=route.pts,
                  vertex_curvature=route.vertex_curvature,
                  commands=list(route.commands), polys=polys, walls=walls,
                  lights=list(route.lights),
                  junctions=route.junctions + [{
                      "center": (cx, cy), "cross_heading": cross, "s": junction_s,
                      "half_span": half_span, "half_width": half_width}])
    return rm


def _ccw(poly: np.ndarray) -> np.ndarray:
    area2 = 0.0
    for i in range(len(poly)):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % len(poly)]
        area2 += x1 * y2 - x2 * y1
    return poly if area2 > 0 else poly[::-1].copy()


def _stop_line(route: RouteMap, s: float, half_width: float) -> np.ndarray:
    px, py = route.point_at(s)
    heading = route.heading_at(s)
    nx, ny = -math.sin(heading), math.cos(heading)
    return np.array([[px - half_width * nx, py - half_width * ny],
                     [px + half_width * nx, py + half_width * ny]])


def spawn_scenario(world: WorldState, spec: ScenarioSpec,
                   rng: np.random.Generator) -> WorldState:
    """Insert one scenario into the world; returns a new WorldState."""
    if spec.kind in SPLICE_KINDS and world.agents:
        raise ValueError("route-splicing scenarios must spawn before agents")

    p = spec.parameters
    kind = spec.kind

    if kind is ScenarioKind.BIG_TURN:
        angle = p.get("angle_deg", _jitter(rng, 100.0, 0.1))
        angle = math.copysign(max(90.0, abs(angle)), angle)
        if p.get("direction", rng.choice(["left", "right"])) == "right":
            angle = -abs(angle)
        radius = p.get("radius", _jitter(rng, 8.0, 0.12))
        new_spec, _ = splice_arc(world.route.spec, spec.anchor_frac, radius,
                                 angle, "+bigturn")
        route = build_route_map(new_spec)
        w = make_world(route, world.rng_seed, world.config, world.params)
        w.scenario_names = world.scenario_names + [kind.value]
        return w

    if kind is ScenarioKind.RED_LIGHT_INTERSECTION:
        route = world.route
        junction_s = spec.anchor_frac * route.total_len
        route = _add_junction(route, junction_s)
        stop_s = max(2.0, junction_s - 6.0)
        dwell = p.get("dwell_red", _jitter(rng, 6.0, 0.2))
        light = LightDef(stop_line=_stop_line(route, stop_s,
                                              route.spec.lane_half_width),
                         stop_s=stop_s,
                         trigger_distance=spec.trigger_distance,
                         dwell_red=dwell)
        route.lights.append(light)
        route.commands.append((max(0.0, stop_s - 4.0), junction_s + 6.0,
                               CommandKind.STRAIGHT))
        w = make_world(route, world.rng_seed, world.config, world.params)
        w.scenario_names = world.scenario_names + [kind.value]
        return w

    if kind is ScenarioKind.UNPROTECTED_LEFT_TURN:
        radius = p.get("radius", 7.0)
        new_spec, arc_s = splice_arc(world.route.spec, spec.anchor_frac,
                                     radius, 90.0, "+leftturn")
        route = build_route_map(new_spec)
        # junction box sits at the corner where the tangents cross
        junction_s = arc_s + radius * math.pi / 4.0  # mid-arc
        route = _add_junction(route, junction_s, half_span=20.0,
                              half_width=4.0)
        w = make_world(route, world.rng_seed, world.config, world.params)
        w.scenario_names = world.scenario_names + [kind.value]
        jx = route.junctions[-1]
        cx, cy = jx["center"]
        cross = jx["cross_heading"]
        speed = p.get("oncoming_speed", _jitter(rng, 5.0, 0.15))
        spawn_d = p.get("spawn_distance", _jitter(rng, 26.0, 0.1))
        # oncoming rides the cross road toward the junction, offset to its lane
        ux, uy = math.cos(cross), math.sin(cross)
        nx, ny = -uy, ux
        lane_off = 1.8
        start = (cx + spawn_d * ux + lane_off * nx,
                 cy + spawn_d * uy + lane_off * ny)
        heading = normalize_angle(cross + math.pi)
        script = CrossingScript(anchor=(cx, cy),
                                trigger_distance=spec.trigger_distance,
                                speed=speed, travel=spawn_d * 2.0,
                                heading=heading, appear_on_trigger=True,
                                start=start)
        agent = Agent(pose=Pose2D(start[0], start[1], heading), speed=0.0,
                      half_length=2.2, half_width=0.95,
                      kind=AgentKind.VEHICLE, script=script, active=False)
        _check_conflict(w, agent)
        w.agents.append(agent)
        return w

    w = world.clone()
    route = w.route
    anchor_s = spec.anchor_frac * route.total_len

    if kind is ScenarioKind.LEAD_VEHICLE_STOP:
        start_s = p.get("start_s", 20.0)
        cruise = p.get("cruise", _jitter(rng, 4.0, 0.12))
        px, py = route.point_at(start_s)
        script = LeadVehicleScript(s=start_s, cruise=cruise,
                                   decel=p.get("decel", 5.0),
                                   trigger_gap=p.get("trigger_gap",
                                                     _jitter(rng, 14.0, 0.1)),
                                   dwell=p.get("dwell", _jitter(rng, 5.0, 0.2)))
        agent = Agent(pose=Pose2D(px, py, route.heading_at(start_s)),
                      speed=cruise * 0.5, half_length=2.2, half_width=0.95,
                      kind=AgentKind.VEHICLE, script=script)
    elif kind is ScenarioKind.CROSSING_CYCLIST:
        ax, ay = route.point_at(anchor_s)
        heading = route.heading_at(anchor_s)
        offset = p.get("side_offset", 7.0)
        nx, ny = -math.sin(heading), math.cos(heading)
        start = (ax + offset * nx, ay + offset * ny)
        cross_heading = normalize_angle(heading - math.pi / 2.0)
        script = CrossingScript(anchor=(ax, ay),
                                trigger_distance=spec.trigger_distance,
                                speed=p.get("speed", _jitter(rng, 2.5, 0.2)),
                                travel=p.get("travel", 2.0 * offset),
                                heading=cross_heading, start=start)
        agent = Agent(pose=Pose2D(start[0], start[1], cross_heading),
                      speed=0.0, half_length=0.9, half_width=0.35,
                      kind=AgentKind.CYCLIST, script=script)
    elif kind is ScenarioKind.SUDDEN_OBSTACLE:
        ax, ay = route.point_at(anchor_s)
        heading = route.heading_at(anchor_s)
        yaw = normalize_angle(heading + p.get("yaw_offset",
                                              0.5 * (rng.random() - 0.5)))
        script = StaticObstacleScript(anchor=(ax, ay),
                                      trigger_distance=spec.trigger_distance)
        agent = Agent(pose=Pose2D(ax, ay, yaw), speed=0.0,
                      half_length=2.2, half_width=0.95,
                      kind=AgentKind.VEHICLE, script=script, active=False)
    else:
        raise ValueError(f"unhandled scenario kind {kind}")

    _check_conflict(w, agent)
    w.agents.append(agent)
    w.scenario_names = w.scenario_names + [kind.value]
    return w


def build_scenario_world(route_spec: RouteSpec, scenarios: list[ScenarioSpec],
                         seed: int, config: SimConfig | None = None,
                         params: VehicleParams | None = None) -> WorldState:
    """Build a world and apply scenarios (splices first) deterministically."""
    rng = np.random.Generator(np.random.PCG64(seed))
    world = make_world(build_route_map(route_spec), seed, config, params)
    ordered = sorted(scenarios,
                     key=lambda sp: (0 if sp.kind in SPLICE_KINDS else 1))
    for sp in ordered:
        world = spawn_scenario(world, sp, rng)
    return world


def default_scenario(kind: ScenarioKind) -> ScenarioSpec:
    defaults = {
        ScenarioKind.LEAD_VEHICLE_STOP: ScenarioSpec(kind, trigger_distance=14.0,
                                                     anchor_frac=0.35),
        ScenarioKind.CROSSING_CYCLIST: ScenarioSpec(kind, trigger_distance=18.0,
                                                    anchor_frac=0.45),
        ScenarioKind.UNPROTECTED_LEFT_TURN: ScenarioSpec(kind,
                                                         trigger_distance=22.0,
                                                         anchor_frac=0.5),
        ScenarioKind.RED_LIGHT_INTERSECTION: ScenarioSpec(kind,
                                                          trigger_distance=25.0,
                                                          anchor_frac=0.5),
        ScenarioKind.BIG_TURN: ScenarioSpec(kind, trigger_distance=10.0,
                                            anchor_frac=0.55),
        ScenarioKind.SUDDEN_OBSTACLE: ScenarioSpec(kind, trigger_distance=16.0,
                                                   anchor_frac=0.6),
    }
    return defaults[kind]
