"""Deterministic 2D closed-loop world: ego dynamics, agents, lights,
infraction detection.

Physics runs at 20 Hz; the policy acts at 2 Hz with the action held for 10
physics ticks. Everything is a pure function of (initial state, action
sequence), so identical seeds replay bit-identically.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from ..core import (ControlAction, OrientedBox, Pose2D, clamp, normalize_angle,
                    point_in_convex_polygon)
from .routes import LightDef, RouteMap


class EpisodeTerminated(RuntimeError):
    """Raised when ticking a world whose episode already ended."""


@dataclass
class VehicleParams:
    wheelbase_front: float = 1.3   # m, CoG to front axle
    wheelbase_rear: float = 1.3    # m, CoG to rear axle
    max_steer_angle: float = 0.6   # rad
    throttle_gain: float = 4.0     # m/s^2 per unit throttle
    brake_gain: float = 8.0        # m/s^2 per unit brake
    drag_coeff: float = 0.15       # 1/s
    max_speed: float = 12.0        # m/s
    half_length: float = 2.2
    half_width: float = 0.95


@dataclass
class SimConfig:
    dt: float = 0.05
    physics_per_policy: int = 10       # 20 Hz physics, 2 Hz policy
    blocked_timeout: float = 30.0      # s below blocked_speed before Blocked
    blocked_speed: float = 0.1
    refractory: float = 2.0            # s between same-pair repeat events
    route_complete_margin: float = 1.0

    @property
    def policy_dt(self) -> float:
        return self.dt * self.physics_per_policy

    @property
    def policy_rate_hz(self) -> float:
        return 1.0 / self.policy_dt


class AgentKind(Enum):
    VEHICLE = "vehicle"
    PEDESTRIAN = "pedestrian"
    CYCLIST = "cyclist"


class LightState(Enum):
    RED = "red"
    YELLOW = "yellow"
    GREEN = "green"


class InfractionKind(Enum):
    COLLISION_VEHICLE = "collision_vehicle"
    COLLISION_PEDESTRIAN = "collision_pedestrian"
    COLLISION_LAYOUT = "collision_layout"
    RED_LIGHT = "red_light"
    OFF_ROAD = "off_road"
    BLOCKED = "blocked"


TERMINAL_KINDS = frozenset({
    InfractionKind.COLLISION_VEHICLE,
    InfractionKind.COLLISION_PEDESTRIAN,
    InfractionKind.COLLISION_LAYOUT,
    InfractionKind.BLOCKED,
})

# cyclists count as vehicle collisions, walkers as pedestrian collisions
_COLLISION_BY_KIND = {
    AgentKind.VEHICLE: InfractionKind.COLLISION_VEHICLE,
    AgentKind.CYCLIST: InfractionKind.COLLISION_VEHICLE,
    AgentKind.PEDESTRIAN: InfractionKind.COLLISION_PEDESTRIAN,
}


@dataclass
class InfractionEvent:
    kind: InfractionKind
    tick: int
    ego_turning: bool

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "tick": self.tick,
                "ego_turning": self.ego_turning}


@dataclass
class Agent:
    pose: Pose2D
    speed: float
    half_length: float
    half_width: float
    kind: AgentKind
    script: object        # scenario script driving this agent
    active: bool = True   # inactive agents are invisible and non-colliding

    def box(self) -> OrientedBox:
        return OrientedBox(self.pose.copy(), self.half_length, self.half_width)

    def copy(self) -> "Agent":
        return Agent(self.pose.copy(), self.speed, self.half_length,
                     self.half_width, self.kind, self.script.copy(), self.active)


@dataclass
class Light:
    definition: LightDef
    state: LightState = LightState.GREEN
    triggered: bool = False
    timer: float = 0.0

    def copy(self) -> "Light":
        return Light(self.definition, self.state, self.triggered, self.timer)


@dataclass
class EgoState:
    pose: Pose2D
    speed: float = 0.0
    progress_s: float = 0.0
    seg_hint: int = 0
    prev_x: float = 0.0
    prev_y: float = 0.0
    blocked_time: float = 0.0
    distance: float = 0.0  # odometer, meters

    def copy(self) -> "EgoState":
        return EgoState(self.pose.copy(), self.speed, self.progress_s,
                        self.seg_hint, self.prev_x, self.prev_y,
                        self.blocked_time, self.distance)


@dataclass
class WorldState:
    route: RouteMap               # immutable, shared across clones
    params: VehicleParams         # immutable, shared
    config: SimConfig             # immutable, shared
    ego: EgoState
    agents: list[Agent] = field(default_factory=list)
    lights: list[Light] = field(default_factory=list)
    tick: int = 0
    rng_seed: int = 0
    ego_turning: bool = False     # stamped onto events; set by the driver
    terminated: str | None = None
    recent_events: dict = field(default_factory=dict)
    off_road_prev: bool = False
    scenario_names: list[str] = field(default_factory=list)

    def clone(self) -> "WorldState":
        return WorldState(
            route=self.route, params=self.params, config=self.config,
            ego=self.ego.copy(),
            agents=[a.copy() for a in self.agents],
            lights=[l.copy() for l in self.lights],
            tick=self.tick, rng_seed=self.rng_seed,
            ego_turning=self.ego_turning, terminated=self.terminated,
            recent_events=dict(self.recent_events),
            off_road_prev=self.off_road_prev,
            scenario_names=list(self.scenario_names),
        )

    def ego_box(self) -> OrientedBox:
        return OrientedBox(self.ego.pose.copy(), self.params.half_length,
                           self.params.half_width)

    def time_s(self) -> float:
        return self.tick * self.config.dt


def make_world(route: RouteMap, seed: int = 0,
               config: SimConfig | None = None,
               params: VehicleParams | None = None) -> WorldState:
    config = config or SimConfig()
    params = params or VehicleParams()
    start = route.point_at(0.0)
    pose = Pose2D(start[0], start[1], route.heading_at(0.0))
    ego = EgoState(pose=pose, prev_x=start[0], prev_y=start[1])
    lights = [Light(ld) for ld in route.lights]
    return WorldState(route=route, params=params, config=config, ego=ego,
                      lights=lights, rng_seed=seed)


# --- dynamics ----------------------------------------------------------------

def step_dynamics(pose: Pose2D, speed: float, action: ControlAction,
                  params: VehicleParams, dt: float) -> tuple[Pose2D, float]:
    """Kinematic bicycle step (explicit Euler).

    slip = atan(lr/(lf+lr) tan(delta)); the pose advances along theta+slip
    and yaw rate is v/lr * sin(slip).
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    delta = action.steer * params.max_steer_angle
    lr = params.wheelbase_rear
    slip = math.atan(lr / (params.wheelbase_front + lr) * math.tan(delta))
    x = pose.x + speed * math.cos(pose.yaw + slip) * dt
    y = pose.y + speed * math.sin(pose.yaw + slip) * dt
    yaw = normalize_angle(pose.yaw + (speed / lr) * math.sin(slip) * dt)
    accel = (params.throttle_gain * action.throttle
             - params.brake_gain * action.brake
             - params.drag_coeff * speed)
    v = clamp(speed + accel * dt, 0.0, params.max_speed)
    return Pose2D(x, y, yaw), v


# --- infractions --------------------------------------------------------------

def _segments_hit_box(segs: np.ndarray, box: OrientedBox) -> np.ndarray:
    """Vectorized slab test: which of the (M,2,2) segments touch the box."""
    if len(segs) == 0:
        return np.zeros(0, dtype=bool)
    c, s = math.cos(box.center.yaw), math.sin(box.center.yaw)
    rel = segs - np.array([box.center.x, box.center.y])
    # rotate into the box frame
    bx = c * rel[..., 0] + s * rel[..., 1]
    by = -s * rel[..., 0] + c * rel[..., 1]
    p1 = np.stack([bx[:, 0], by[:, 0]], axis=1)
    d = np.stack([bx[:, 1] - bx[:, 0], by[:, 1] - by[:, 0]], axis=1)
    t0 = np.zeros(len(segs))
    t1 = np.ones(len(segs))
    ok = np.ones(len(segs), dtype=bool)
    for axis, ext in ((0, box.half_length), (1, box.half_width)):
        start, delta = p1[:, axis], d[:, axis]
        parallel = np.abs(delta) < 1e-12
        ok &= ~(parallel & (np.abs(start) > ext))
        with np.errstate(divide="ignore", invalid="ignore"):
            ta = (-ext - start) / delta
            tb = (ext - start) / delta
        lo = np.minimum(ta, tb)
        hi = np.maximum(ta, tb)
        use = ~parallel
        t0 = np.where(use, np.maximum(t0, lo), t0)
        t1 = np.where(use, np.minimum(t1, hi), t1)
    return ok & (t0 <= t1)


def _segments_cross(p1, p2, q1, q2) -> bool:
    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    d1, d2 = orient(q1, q2, p1), orient(q1, q2, p2)
    d3, d4 = orient(p1, p2, q1), orient(p1, p2, q2)
    return ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0))


def detect_infractions(world: WorldState) -> list[InfractionEvent]:
    """Raw per-tick detections (no refractory filtering).

    Red-light crossing compares the previous and current ego center against
    each red stop line; Blocked uses the accumulated low-speed timer.
    """
    events: list[InfractionEvent] = []
    ego_box = world.ego_box()
    ex, ey = world.ego.pose.x, world.ego.pose.y

    reach = world.params.half_length + 0.5
    for agent in world.agents:
        if not agent.active:
            continue
        dx, dy = agent.pose.x - ex, agent.pose.y - ey
        if dx * dx + dy * dy > (reach + agent.half_length + 0.5) ** 2:
            continue
        from ..core import boxes_intersect
        if boxes_intersect(ego_box, agent.box()):
            events.append(InfractionEvent(_COLLISION_BY_KIND[agent.kind],
                                          world.tick, world.ego_turning))

    reach_walls = world.params.half_length + world.params.half_width
    near_walls = world.route.walls_near(ex, ey, reach_walls)
    if len(near_walls) and np.any(_segments_hit_box(near_walls, ego_box)):
        events.append(InfractionEvent(InfractionKind.COLLISION_LAYOUT,
                                      world.tick, world.ego_turning))

    inside = any(point_in_convex_polygon((ex, ey), poly)
                 for poly in world.route.polys_near(ex, ey))
    if not inside:
        events.append(InfractionEvent(InfractionKind.OFF_ROAD, world.tick,
                                      world.ego_turning))

    prev = (world.ego.prev_x, world.ego.prev_y)
    cur = (ex, ey)
    for light in world.lights:
        if light.state is not LightState.RED:
            continue
        sl = light.definition.stop_line
        if _segments_cross(prev, cur, tuple(sl[0]), tuple(sl[1])):
            events.append(InfractionEvent(InfractionKind.RED_LIGHT, world.tick,
                                          world.ego_turning))

    if world.ego.blocked_time >= world.config.blocked_timeout:
        events.append(InfractionEvent(InfractionKind.BLOCKED, world.tick,
                                      world.ego_turning))
    return events


def _event_key(ev: InfractionEvent, world: WorldState) -> tuple:
    # nearest active agent disambiguates the colliding pair
    if ev.kind in (InfractionKind.COLLISION_VEHICLE,
                   InfractionKind.COLLISION_PEDESTRIAN):
        ex, ey = world.ego.pose.x, world.ego.pose.y
        best, best_d = -1, float("inf")
        for i, a in enumerate(world.agents):
            if not a.active:
                continue
            d = (a.pose.x - ex) ** 2 + (a.pose.y - ey) ** 2
            if d < best_d:
                best, best_d = i, d
        return (ev.kind.value, best)
    return (ev.kind.value,)


def world_tick(world: WorldState,
               ego_action: ControlAction) -> tuple[WorldState, list[InfractionEvent]]:
    """Advance one physics tick; returns the new world and filtered events."""
    if world.terminated is not None:
        raise EpisodeTerminated(world.terminated)

    w = world.clone()
    cfg = w.config
    ego = w.ego
    ego.prev_x, ego.prev_y = ego.pose.x, ego.pose.y
    old_speed = ego.speed
    ego.pose, ego.speed = step_dynamics(ego.pose, ego.speed, ego_action,
                                        w.params, cfg.dt)
    ego.distance += old_speed * cfg.dt

    s, _, hint = w.route.project(ego.pose.x, ego.pose.y, ego.seg_hint)
    ego.seg_hint = hint
    ego.progress_s = max(ego.progress_s, s)

    if ego.speed < cfg.blocked_speed:
        ego.blocked_time += cfg.dt
    else:
        ego.blocked_time = 0.0

    for agent in w.agents:
        agent.script.advance(agent, w, cfg.dt)

    for light in w.lights:
        _advance_light(light, w, cfg.dt)

    w.tick += 1

    raw = detect_infractions(w)
    refractory_ticks = int(round(cfg.refractory / cfg.dt))
    events = []
    for ev in raw:
        if ev.kind is InfractionKind.OFF_ROAD:
            if w.off_road_prev:
                continue  # report the rising edge only
        key = _event_key(ev, w)
        last = w.recent_events.get(key)
        if last is not None and w.tick - last < refractory_ticks:
            continue
        w.recent_events[key] = w.tick
        events.append(ev)
        if ev.kind in TERMINAL_KINDS and w.terminated is None:
            w.terminated = ev.kind.value
    w.off_road_prev = any(ev.kind is InfractionKind.OFF_ROAD for ev in raw)
    return w, events


def _advance_light(light: Light, world: WorldState, dt: float) -> None:
    ld = light.definition
    if not light.triggered:
        ex, ey = world.ego.pose.x, world.ego.pose.y
        mid = ld.stop_line.mean(axis=0)
        if math.hypot(ex - mid[0], ey - mid[1]) <= ld.trigger_distance:
            light.triggered = True
            light.state = LightState.RED
            light.timer = 0.0
        return
    if light.state is LightState.RED:
        light.timer += dt
        if light.timer >= ld.dwell_red:
            light.state = LightState.GREEN


def run_policy_step(world: WorldState, action: ControlAction
                    ) -> tuple[WorldState, list[InfractionEvent]]:
    """Hold one policy action for a full policy period of physics ticks."""
    events: list[InfractionEvent] = []
    for _ in range(world.config.physics_per_policy):
        world, evs = world_tick(world, action)
        events.extend(evs)
        if world.terminated is not None:
            break
    return world, events


def route_progress(world: WorldState) -> float:
    """Fraction of route completed, by furthest projection; non-decreasing."""
    if world.route.total_len <= 0:
        raise ValueError("route is empty")
    return min(1.0, world.ego.progress_s / world.route.total_len)


def route_complete(world: WorldState) -> bool:
    return (world.route.total_len - world.ego.progress_s
            <= world.config.route_complete_margin)


def world_digest(world: WorldState) -> str:
    """Deterministic serialization of the dynamic state (for replay tests)."""
    doc = {
        "tick": world.tick,
        "ego": [repr(world.ego.pose.x), repr(world.ego.pose.y),
                repr(world.ego.pose.yaw), repr(world.ego.speed),
                repr(world.ego.progress_s), repr(world.ego.blocked_time)],
        "agents": [[repr(a.pose.x), repr(a.pose.y), repr(a.pose.yaw),
                    repr(a.speed), a.active] for a in world.agents],
        "lights": [[l.state.value, repr(l.timer), l.triggered]
                   for l in world.lights],
        "terminated": world.terminated,
    }
    return json.dumps(doc, sort_keys=True)
