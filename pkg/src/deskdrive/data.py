"""Episode collection with the expert, K-step labels, dataset persistence.

Observations are ego-centric bird's-eye rasters built analytically in the
ego frame (no resampling), with the grid biased forward because the policy
mostly needs to see ahead. Datasets are JSON Lines: a manifest header line
followed by one sample per line, rasters flattened.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .control import SituationDetector
from .core import (CommandKind, ControlAction, Measurement, Pose2D,
                   world_to_ego)
from .expert import FEATURE_DIM, expert_act, validate_feature
from .sim.routes import RouteSpec
from .sim.scenarios import ScenarioSpec, build_scenario_world
from .sim.world import (LightState, SimConfig, VehicleParams, WorldState,
                        route_complete, run_policy_step)

DATASET_SCHEMA = 1


class SchemaMismatch(ValueError):
    pass


class RouteUnreachable(RuntimeError):
    """The expert blocked while collecting; the route cannot be labeled."""


@dataclass(frozen=True)
class RasterSpec:
    grid: int = 64
    channels: int = 5
    x_min: float = -8.0
    x_max: float = 24.0
    y_min: float = -16.0
    y_max: float = 16.0

    @property
    def cell(self) -> float:
        return (self.x_max - self.x_min) / self.grid

    def to_dict(self) -> dict:
        return {"grid": self.grid, "channels": self.channels,
                "x_min": self.x_min, "x_max": self.x_max,
                "y_min": self.y_min, "y_max": self.y_max}

    @staticmethod
    def from_dict(d: dict) -> "RasterSpec":
        return RasterSpec(int(d["grid"]), int(d["channels"]), d["x_min"],
                          d["x_max"], d["y_min"], d["y_max"])


_GRID_CACHE: dict[RasterSpec, tuple[np.ndarray, np.ndarray]] = {}


def _grid(spec: RasterSpec) -> tuple[np.ndarray, np.ndarray]:
    got = _GRID_CACHE.get(spec)
    if got is None:
        xs = spec.x_min + (np.arange(spec.grid) + 0.5) * spec.cell
        ys = spec.y_min + (np.arange(spec.grid) + 0.5) * spec.cell
        gx, gy = np.meshgrid(xs, ys, indexing="ij")
        got = (gx, gy)
        _GRID_CACHE[spec] = got
    return got


def _to_ego_array(pts: np.ndarray, ego: Pose2D) -> np.ndarray:
    c, s = math.cos(ego.yaw), math.sin(ego.yaw)
    dx = pts[..., 0] - ego.x
    dy = pts[..., 1] - ego.y
    return np.stack([c * dx + s * dy, -s * dx + c * dy], axis=-1)


def _fill_convex(gx, gy, poly_ego: np.ndarray) -> np.ndarray:
    """Half-plane AND over the edges of a convex CCW polygon in ego frame."""
    inside = np.ones(gx.shape, dtype=bool)
    n = len(poly_ego)
    for i in range(n):
        ax, ay = poly_ego[i]
        bx, by = poly_ego[(i + 1) % n]
        inside &= (bx - ax) * (gy - ay) - (by - ay) * (gx - ax) >= 0.0
        if not inside.any():
            break
    return inside


def _fill_box(gx, gy, center_ego, yaw_ego, half_l, half_w) -> np.ndarray:
    c, s = math.cos(yaw_ego), math.sin(yaw_ego)
    dx = gx - center_ego[0]
    dy = gy - center_ego[1]
    lon = c * dx + s * dy
    lat = -s * dx + c * dy
    return (np.abs(lon) <= half_l) & (np.abs(lat) <= half_w)


def _fill_segment(gx, gy, a, b, thickness: float) -> np.ndarray:
    ax, ay = a
    bx, by = b
    vx, vy = bx - ax, by - ay
    ln2 = vx * vx + vy * vy
    if ln2 < 1e-12:
        return (gx - ax) ** 2 + (gy - ay) ** 2 <= thickness ** 2
    t = np.clip(((gx - ax) * vx + (gy - ay) * vy) / ln2, 0.0, 1.0)
    px = ax + t * vx
    py = ay + t * vy
    return (gx - px) ** 2 + (gy - py) ** 2 <= thickness ** 2


def rasterize_observation(world: WorldState,
                          spec: RasterSpec = RasterSpec()) -> np.ndarray:
    """Ego-centric raster, channels:

    0 drivable mask, 1 route-ahead mask, 2 dynamic-agent occupancy,
    3 dynamic-agent closing speed (normalized), 4 red stop-line mask.
    The ego itself is never drawn; it sits at a fixed anchor cell.
    """
    gx, gy = _grid(spec)
    ego = world.ego.pose
    out = np.zeros((spec.channels, spec.grid, spec.grid))

    radius = math.hypot(max(abs(spec.x_min), spec.x_max),
                        max(abs(spec.y_min), spec.y_max)) + 2.0
    drivable = np.zeros(gx.shape, dtype=bool)
    for poly in world.route.polys_near(ego.x, ego.y, margin=radius):
        drivable |= _fill_convex(gx, gy, _to_ego_array(poly, ego))
    out[0] = drivable

    route = world.route
    s0 = world.ego.progress_s
    route_mask = np.zeros(gx.shape, dtype=bool)
    pts = [route.point_at(s0)]
    idx = int(np.searchsorted(route.vertex_s, s0, side="right"))
    while idx < len(route.pts) and route.vertex_s[idx] <= s0 + 40.0:
        pts.append((float(route.pts[idx, 0]), float(route.pts[idx, 1])))
        idx += 1
    pts_ego = _to_ego_array(np.array(pts), ego)
    for i in range(len(pts_ego) - 1):
        route_mask |= _fill_segment(gx, gy, pts_ego[i], pts_ego[i + 1], 1.0)
    out[1] = route_mask

    ev = np.array([world.ego.speed * math.cos(ego.yaw),
                   world.ego.speed * math.sin(ego.yaw)])
    for agent in world.agents:
        if not agent.active:
            continue
        center = world_to_ego((agent.pose.x, agent.pose.y), ego)
        if not (spec.x_min - 4 < center[0] < spec.x_max + 4
                and spec.y_min - 4 < center[1] < spec.y_max + 4):
            continue
        mask = _fill_box(gx, gy, center, agent.pose.yaw - ego.yaw,
                         agent.half_length, agent.half_width)
        out[2][mask] = 1.0
        rel = np.array([agent.pose.x - ego.x, agent.pose.y - ego.y])
        dist = np.hypot(*rel)
        if dist > 1e-6:
            av = np.array([agent.speed * math.cos(agent.pose.yaw),
                           agent.speed * math.sin(agent.pose.yaw)])
            closing = -float((rel / dist) @ (av - ev))
            out[3][mask] = min(max(closing, 0.0) / 10.0, 1.0)

    for light in world.lights:
        if light.state is not LightState.RED:
            continue
        sl = _to_ego_array(light.definition.stop_line, ego)
        out[4][_fill_segment(gx, gy, sl[0], sl[1], 0.3)] = 1.0

    return out


# --- measurement ---------------------------------------------------------------

def build_measurement(world: WorldState) -> Measurement:
    route = world.route
    s = world.ego.progress_s
    kind = route.command_at(s)
    target_world = route.next_anchor(s, min_ahead=4.0)
    target = world_to_ego(target_world, world.ego.pose)
    onehot = [0] * len(CommandKind)
    onehot[kind.value] = 1
    return Measurement(world.ego.speed, tuple(onehot), target)


def measurement_vector(m: Measurement) -> np.ndarray:
    """Model input: speed/10, one-hot command, target point / 20."""
    return np.concatenate([[m.speed / 10.0], np.asarray(m.command_onehot, float),
                           np.asarray(m.target_point) / 20.0])


# --- samples ---------------------------------------------------------------------

@dataclass
class Sample:
    observation: np.ndarray               # (C, G, G) in [0, 1]
    measurement: Measurement
    expert_action_seq: list[ControlAction]   # K+1 actions
    expert_feature_seq: np.ndarray           # (K+1, FEATURE_DIM)
    waypoints_gt: np.ndarray                 # (K, 2) ego frame
    speed_gt: float
    value_gt: float
    meta: dict = field(default_factory=dict)


def validate_sample(sample: Sample, k: int, spec: RasterSpec) -> None:
    obs = sample.observation
    if obs.shape != (spec.channels, spec.grid, spec.grid):
        raise ValueError(f"observation shape {obs.shape}")
    if not np.all(np.isfinite(obs)) or obs.min() < 0.0 or obs.max() > 1.0:
        raise ValueError("observation values must lie in [0, 1]")
    if len(sample.expert_action_seq) != k + 1:
        raise ValueError("expert_action_seq must have K+1 entries")
    if sample.expert_feature_seq.shape != (k + 1, FEATURE_DIM):
        raise ValueError("expert_feature_seq must be (K+1, d_f)")
    if sample.waypoints_gt.shape != (k, 2):
        raise ValueError("waypoints_gt must be (K, 2)")
    for row in sample.expert_feature_seq:
        validate_feature(np.asarray(row))
    if not (np.all(np.isfinite(sample.waypoints_gt))
            and math.isfinite(sample.speed_gt)
            and math.isfinite(sample.value_gt)):
        raise ValueError("sample labels must be finite")


@dataclass
class DatasetManifest:
    k: int = 4
    control_rate_hz: float = 2.0
    raster: RasterSpec = field(default_factory=RasterSpec)
    routes: list[str] = field(default_factory=list)
    samples_per_route: dict = field(default_factory=dict)
    schema_version: int = DATASET_SCHEMA

    def to_dict(self) -> dict:
        return {"schema_version": self.schema_version, "k": self.k,
                "control_rate_hz": self.control_rate_hz,
                "raster": self.raster.to_dict(), "routes": self.routes,
                "samples_per_route": self.samples_per_route}

    @staticmethod
    def from_dict(d: dict) -> "DatasetManifest":
        return DatasetManifest(k=int(d["k"]),
                               control_rate_hz=float(d["control_rate_hz"]),
                               raster=RasterSpec.from_dict(d["raster"]),
                               routes=list(d["routes"]),
                               samples_per_route=dict(d["samples_per_route"]),
                               schema_version=int(d["schema_version"]))


# --- collection -------------------------------------------------------------------

def collect_episode(route_spec: RouteSpec, scenarios: list[ScenarioSpec],
                    seed: int, k: int = 4,
                    raster: RasterSpec = RasterSpec(),
                    sim_config: SimConfig | None = None,
                    params: VehicleParams | None = None,
                    max_policy_ticks: int = 300) -> list[Sample]:
    """Drive the expert closed-loop and build fully labeled samples.

    Future labels come from the subsequent K recorded ticks. A route
    completed cleanly keeps ticking K extra label-only steps; an episode
    ended by an expert infraction drops its last K samples instead.
    """
    world = build_scenario_world(route_spec, scenarios, seed, sim_config,
                                 params)
    detector = SituationDetector(policy_rate_hz=world.config.policy_rate_hz)

    records = []
    infraction_end = False
    ticks = 0
    while ticks < max_policy_ticks:
        if world.terminated is not None:
            infraction_end = True
            break
        if route_complete(world):
            break
        out = expert_act(world, k_steps=k)
        records.append({
            "obs": rasterize_observation(world, raster),
            "meas": build_measurement(world),
            "pose": world.ego.pose.copy(),
            "speed": world.ego.speed,
            "out": out,
            "turning": detector.turning,
            "tick": world.tick,
        })
        world.ego_turning = detector.turning
        world, _ = run_policy_step(world, out.action)
        detector.push(out.action.steer)
        ticks += 1

    if world.terminated == "blocked":
        raise RouteUnreachable(f"expert blocked on {route_spec.name}")
    if ticks >= max_policy_ticks and not route_complete(world):
        raise RouteUnreachable(f"expert timed out on {route_spec.name}")

    if infraction_end:
        records = records[:-k] if len(records) > k else []
    else:
        # label-only tail so trailing samples keep full K-step futures
        for _ in range(k):
            if world.terminated is not None:
                break
            out = expert_act(world, k_steps=k)
            records.append({"pose": world.ego.pose.copy(),
                            "speed": world.ego.speed, "out": out,
                            "label_only": True})
            world, _ = run_policy_step(world, out.action)

    samples = []
    n = len(records)
    for t, rec in enumerate(records):
        if rec.get("label_only") or t + k >= n:
            break
        future = records[t + 1:t + 1 + k]
        if len(future) < k:
            break
        base = rec["pose"]
        wps = np.array([world_to_ego((fr["pose"].x, fr["pose"].y), base)
                        for fr in future])
        actions = [rec["out"].action] + [fr["out"].action for fr in future]
        feats = np.stack([rec["out"].feature]
                         + [fr["out"].feature for fr in future])
        sample = Sample(observation=rec["obs"], measurement=rec["meas"],
                        expert_action_seq=actions, expert_feature_seq=feats,
                        waypoints_gt=wps, speed_gt=rec["speed"],
                        value_gt=rec["out"].value,
                        meta={"route": route_spec.name, "tick": rec["tick"],
                              "seed": seed, "turning": rec["turning"]})
        validate_sample(sample, k, raster)
        samples.append(sample)
    return samples


# --- persistence -------------------------------------------------------------------

def _sample_to_dict(s: Sample) -> dict:
    return {
        "obs": [float(v) for v in s.observation.reshape(-1)],
        "meas": {"speed": s.measurement.speed,
                 "command_onehot": list(s.measurement.command_onehot),
                 "target_point": list(s.measurement.target_point)},
        "actions": [list(a.as_tuple()) for a in s.expert_action_seq],
        "features": s.expert_feature_seq.tolist(),
        "waypoints": s.waypoints_gt.tolist(),
        "speed_gt": s.speed_gt,
        "value_gt": s.value_gt,
        "meta": s.meta,
    }


def _sample_from_dict(d: dict, spec: RasterSpec) -> Sample:
    obs = np.array(d["obs"]).reshape(spec.channels, spec.grid, spec.grid)
    m = d["meas"]
    meas = Measurement(m["speed"], tuple(m["command_onehot"]),
                       tuple(m["target_point"]))
    actions = [ControlAction(*a) for a in d["actions"]]
    return Sample(observation=obs, measurement=meas,
                  expert_action_seq=actions,
                  expert_feature_seq=np.array(d["features"]),
                  waypoints_gt=np.array(d["waypoints"]),
                  speed_gt=float(d["speed_gt"]), value_gt=float(d["value_gt"]),
                  meta=dict(d["meta"]))


def write_dataset(samples: list[Sample], path, manifest: DatasetManifest) -> None:
    manifest = DatasetManifest(k=manifest.k,
                               control_rate_hz=manifest.control_rate_hz,
                               raster=manifest.raster,
                               routes=sorted({s.meta.get("route", "?")
                                              for s in samples}),
                               samples_per_route={})
    for s in samples:
        r = s.meta.get("route", "?")
        manifest.samples_per_route[r] = manifest.samples_per_route.get(r, 0) + 1
        validate_sample(s, manifest.k, manifest.raster)
    with open(path, "w") as fh:
        fh.write(json.dumps(manifest.to_dict(), sort_keys=True) + "\n")
        for s in samples:
            fh.write(json.dumps(_sample_to_dict(s), sort_keys=True) + "\n")


def read_dataset(path, expected: DatasetManifest | None = None
                 ) -> tuple[list[Sample], DatasetManifest]:
    with open(path) as fh:
        header = fh.readline()
        if not header:
            raise SchemaMismatch("empty dataset file")
        doc = json.loads(header)
        if doc.get("schema_version") != DATASET_SCHEMA:
            raise SchemaMismatch("unsupported dataset schema")
        manifest = DatasetManifest.from_dict(doc)
        if expected is not None:
            if (expected.k != manifest.k
                    or expected.raster != manifest.raster
                    or expected.control_rate_hz != manifest.control_rate_hz):
                raise SchemaMismatch(
                    f"dataset manifest (K={manifest.k}) does not match "
                    f"reader config (K={expected.k})")
        samples = []
        for line in fh:
            if line.strip():
                s = _sample_from_dict(json.loads(line), manifest.raster)
                validate_sample(s, manifest.k, manifest.raster)
                samples.append(s)
    return samples, manifest


def split_by_route(samples: list[Sample], eval_routes: set[str]
                   ) -> tuple[list[Sample], list[Sample]]:
    """Train/eval split by route id; episodes never straddle the split."""
    train = [s for s in samples if s.meta.get("route") not in eval_routes]
    eval_ = [s for s in samples if s.meta.get("route") in eval_routes]
    return train, eval_
