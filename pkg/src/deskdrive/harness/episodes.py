"""Closed-loop episode execution for policy, expert, and ensemble agents."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..control import (BrakeRule, FusionConfig, FusionMode, Situation,
                       SituationDetector, default_lateral_pid,
                       default_longitudinal_pid, fuse, fusion_weights,
                       trajectory_to_control)
from ..core import ControlAction, WaypointPlan
from ..data import RasterSpec, build_measurement, measurement_vector, rasterize_observation
from ..expert import expert_action
from ..model import ModelConfig, beta_to_action, forward
from ..sim.routes import RouteSpec
from ..sim.scenarios import ScenarioSpec, build_scenario_world
from ..sim.world import (InfractionEvent, SimConfig, VehicleParams,
                         route_complete, route_progress, run_policy_step)
from ..control import ensemble_combine


@dataclass
class EpisodeResult:
    route: str
    scenario: str
    seed: int
    route_completion: float
    events: list[InfractionEvent]
    ticks: int
    termination: str
    distance_km: float

    def to_dict(self) -> dict:
        return {"route": self.route, "scenario": self.scenario,
                "seed": self.seed,
                "route_completion": self.route_completion,
                "events": [e.to_dict() for e in self.events],
                "ticks": self.ticks, "termination": self.termination,
                "distance_km": self.distance_km}


class ExpertAgent:
    """Privileged rules; used for self-tests and baselines."""

    name = "expert"

    def __init__(self, policy_rate_hz: float = 2.0):
        self.detector = SituationDetector(policy_rate_hz=policy_rate_hz)

    def reset(self, world) -> None:
        self.detector = SituationDetector(
            policy_rate_hz=world.config.policy_rate_hz)

    def act(self, world, obs, meas) -> tuple[ControlAction, dict]:
        action = expert_action(world)
        info = {"situation": self.detector.classify().value}
        self.detector.push(action.steer)
        return action, info

    @property
    def turning(self) -> bool:
        return self.detector.turning


class PolicyAgent:
    """One trained model driving, with optional situation-based fusion.

    Without a FusionConfig the control branch's step-0 action is executed
    when present, else the PID-followed trajectory plan.
    """

    def __init__(self, store, cfg: ModelConfig,
                 fusion: FusionConfig | None = None,
                 action_mode: str = "mean"):
        self.store = store
        self.cfg = cfg
        self.fusion = fusion
        self.action_mode = action_mode
        self.detector = SituationDetector()
        self.lon_pid = default_longitudinal_pid()
        self.lat_pid = default_lateral_pid()

    def reset(self, world) -> None:
        self.detector = SituationDetector(
            policy_rate_hz=world.config.policy_rate_hz)
        self.lon_pid = default_longitudinal_pid()
        self.lat_pid = default_lateral_pid()

    def branch_actions(self, world, obs, meas):
        mvec = measurement_vector(meas)
        target = np.asarray(meas.target_point)
        out = forward(self.store, obs[None], mvec[None], target[None],
                      self.cfg)
        info = {}
        a_traj = a_ctl = None
        if self.cfg.has_traj:
            pts = tuple((float(w.data[0, 0]), float(w.data[0, 1]))
                        for w in out.waypoints)
            plan = WaypointPlan(pts, step_period=world.config.policy_dt)
            a_traj = trajectory_to_control(plan, world.ego.speed,
                                           self.lon_pid, self.lat_pid)
            info["waypoints"] = [list(p) for p in pts]
        if self.cfg.has_ctl:
            a_ctl = beta_to_action(out.beta_params_seq[0].data[0],
                                   self.action_mode)
            att = out.attention_maps[0].data[0]
            info["attn_argmax"] = int(np.argmax(att))
        return a_traj, a_ctl, info

    def act(self, world, obs, meas) -> tuple[ControlAction, dict]:
        situation = self.detector.classify()
        a_traj, a_ctl, info = self.branch_actions(world, obs, meas)
        info["situation"] = situation.value
        if self.fusion is not None and a_traj is not None and a_ctl is not None:
            action = fuse(a_traj, a_ctl, situation, self.fusion)
            w_traj, w_ctl = fusion_weights(situation, self.fusion)
            info["fused_from"] = {"w_traj": w_traj, "w_ctl": w_ctl}
        elif a_ctl is not None:
            action = a_ctl
            info["fused_from"] = {"w_traj": 0.0, "w_ctl": 1.0}
        else:
            action = a_traj
            info["fused_from"] = {"w_traj": 1.0, "w_ctl": 0.0}
        self.detector.push(action.steer)
        return action, info

    @property
    def turning(self) -> bool:
        return self.detector.turning


class CrossModelFusionAgent:
    """Situation-fused pair of single-branch models (the plain ensemble)."""

    def __init__(self, ctl_store, ctl_cfg: ModelConfig, traj_store,
                 traj_cfg: ModelConfig, fusion: FusionConfig):
        self.ctl = PolicyAgent(ctl_store, ctl_cfg)
        self.traj = PolicyAgent(traj_store, traj_cfg)
        self.fusion = fusion
        self.detector = SituationDetector()

    def reset(self, world) -> None:
        self.ctl.reset(world)
        self.traj.reset(world)
        self.detector = SituationDetector(
            policy_rate_hz=world.config.policy_rate_hz)

    def act(self, world, obs, meas) -> tuple[ControlAction, dict]:
        situation = self.detector.classify()
        _, a_ctl, info_c = self.ctl.branch_actions(world, obs, meas)
        a_traj, _, info_t = self.traj.branch_actions(world, obs, meas)
        action = fuse(a_traj, a_ctl, situation, self.fusion)
        w_traj, w_ctl = fusion_weights(situation, self.fusion)
        info = {"situation": situation.value,
                "fused_from": {"w_traj": w_traj, "w_ctl": w_ctl}}
        info.update({k: v for k, v in (info_t | info_c).items()
                     if k in ("waypoints", "attn_argmax")})
        self.detector.push(action.steer)
        return action, info

    @property
    def turning(self) -> bool:
        return self.detector.turning


class EnsembleAgent:
    """Cross-model ensemble of full agents: mean steer/throttle, max brake."""

    def __init__(self, members: list[PolicyAgent]):
        if len(members) < 2:
            raise ValueError("ensemble needs at least 2 members")
        self.members = members

    def reset(self, world) -> None:
        for m in self.members:
            m.reset(world)

    def act(self, world, obs, meas) -> tuple[ControlAction, dict]:
        actions = []
        info = {}
        for m in self.members:
            a, i = m.act(world, obs, meas)
            actions.append(a)
            info.setdefault("waypoints", i.get("waypoints"))
            info.setdefault("attn_argmax", i.get("attn_argmax"))
        action = ensemble_combine(actions)
        info["situation"] = self.members[0].detector.classify().value
        info["fused_from"] = {"ensemble": len(actions)}
        return action, info

    @property
    def turning(self) -> bool:
        return self.members[0].turning


def run_episode(agent, route_spec: RouteSpec, scenarios: list[ScenarioSpec],
                seed: int, raster: RasterSpec = RasterSpec(),
                sim_config: SimConfig | None = None,
                params: VehicleParams | None = None,
                collect_trace: bool = False):
    """Drive one episode; returns (EpisodeResult, trace rows).

    Trace rows are JSON-ready dicts, one per policy tick; the first row is
    a header with the map geometry so plots can be rendered standalone.
    """
    world = build_scenario_world(route_spec, scenarios, seed, sim_config,
                                 params)
    agent.reset(world)
    scenario_name = "+".join(s.kind.value for s in scenarios) or "none"

    trace: list[dict] = []
    if collect_trace:
        trace.append({
            "header": True, "route": route_spec.name,
            "scenario": scenario_name, "seed": seed,
            "polyline": world.route.pts.tolist(),
            "drivable": [p.tolist() for p in world.route.polys],
            "walls": world.route.walls.tolist(),
        })

    max_ticks = int(world.route.total_len / 1.5
                    * world.config.policy_rate_hz) + 120
    events: list[InfractionEvent] = []
    ticks = 0
    termination = "timeout"
    while ticks < max_ticks:
        if world.terminated is not None:
            termination = world.terminated
            break
        if route_complete(world):
            termination = "complete"
            break
        obs = rasterize_observation(world, raster)
        meas = build_measurement(world)
        action, info = agent.act(world, obs, meas)
        world.ego_turning = agent.turning
        world, evs = run_policy_step(world, action)
        events.extend(evs)
        ticks += 1
        if collect_trace:
            row = {"tick": world.tick,
                   "pose": [world.ego.pose.x, world.ego.pose.y,
                            world.ego.pose.yaw],
                   "speed": world.ego.speed,
                   "action": list(action.as_tuple()),
                   "fused_from": info.get("fused_from"),
                   "progress": route_progress(world),
                   "events": [e.to_dict() for e in evs]}
            if "waypoints" in info:
                row["waypoints"] = info["waypoints"]
            if "attn_argmax" in info:
                row["attn_argmax"] = info["attn_argmax"]
            trace.append(row)
    else:
        termination = "timeout"

    if world.terminated is not None:
        termination = world.terminated
    elif route_complete(world):
        termination = "complete"

    result = EpisodeResult(route=route_spec.name, scenario=scenario_name,
                           seed=seed,
                           route_completion=route_progress(world),
                           events=events, ticks=ticks,
                           termination=termination,
                           distance_km=world.ego.distance / 1000.0)
    return result, trace
