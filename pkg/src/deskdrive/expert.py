"""Privileged rule-based expert: drives, labels data, and supplies the
feature/value supervision targets.

The expert is a pure function of the world state: pure-pursuit steering on
the route, a target speed that is the minimum of cruise / curvature /
hazard / red-light / route-end limits, and proportional + feedforward
longitudinal control. Future waypoints and the value estimate come from
rolling a cloned world forward under the same rules, so labels are exactly
what the expert would actually do.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import ControlAction, Pose2D, clamp, world_to_ego
from .sim.world import WorldState, run_policy_step

FEATURE_DIM = 16

CRUISE_SPEED = 6.0        # m/s
LOOKAHEAD_GAIN = 1.5      # s of lookahead per m/s
LOOKAHEAD_MIN = 3.0
LOOKAHEAD_MAX = 12.0
LAT_ACCEL_MAX = 2.2       # m/s^2 comfort limit in bends
COMFORT_DECEL = 3.0       # m/s^2 planned braking
TTC_MIN = 2.5             # s, following rule
GAP_MIN = 2.0             # m bumper margin
HAZARD_LATERAL = 2.6      # m, corridor half-width considered occupied
RED_STOP_MARGIN = 2.0     # m before the stop line
SPEED_KP = 0.6
VALUE_GAMMA = 0.9
VALUE_HORIZON = 20        # policy steps
TURNING_STEER = 0.1


@dataclass
class ExpertOutput:
    action: ControlAction
    feature: np.ndarray          # (FEATURE_DIM,)
    value: float
    future_waypoints: np.ndarray  # (K, 2) ego frame


def validate_feature(vec: np.ndarray) -> None:
    if vec.shape != (FEATURE_DIM,):
        raise ValueError(f"feature must have dim {FEATURE_DIM}")
    if not np.all(np.isfinite(vec)):
        raise ValueError("feature entries must be finite")


def _agent_speed_along(agent, heading: float) -> float:
    return agent.speed * math.cos(agent.pose.yaw - heading)


def _hazard_limits(world: WorldState, s_ego: float):
    """Target-speed limit from traffic plus (distance, closing) diagnostics."""
    route = world.route
    ego_hl = world.params.half_length
    heading_ego = route.heading_at(s_ego)
    v_limit = float("inf")
    haz_dist = float("inf")
    haz_closing = 0.0

    for agent in world.agents:
        if not agent.active:
            continue
        s_a, lat_a, _ = route.project(agent.pose.x, agent.pose.y, None)
        in_corridor = abs(lat_a) <= HAZARD_LATERAL
        ahead = s_a > s_ego
        if in_corridor and ahead and s_a - s_ego < 45.0:
            gap = s_a - s_ego - ego_hl - agent.half_length - GAP_MIN
            along = max(0.0, _agent_speed_along(agent, route.heading_at(s_a)))
            lim = max(0.0, along + gap / TTC_MIN)
            lim = min(lim, math.sqrt(2.0 * COMFORT_DECEL * max(0.0, gap)))
            if lim < v_limit:
                v_limit = lim
                haz_dist = max(0.0, gap)
                haz_closing = max(0.0, world.ego.speed - along)
            continue
        if agent.speed > 0.1 and not in_corridor:
            # constant-velocity crossing prediction
            vx = agent.speed * math.cos(agent.pose.yaw)
            vy = agent.speed * math.sin(agent.pose.yaw)
            for tau in np.arange(0.25, 4.01, 0.25):
                px = agent.pose.x + vx * tau
                py = agent.pose.y + vy * tau
                s_p, lat_p, _ = route.project(px, py, None)
                if abs(lat_p) <= HAZARD_LATERAL and s_ego < s_p < s_ego + 40.0:
                    d = s_p - s_ego - 6.0
                    lim = math.sqrt(2.0 * COMFORT_DECEL * max(0.0, d))
                    if lim < v_limit:
                        v_limit = lim
                        haz_dist = max(0.0, d)
                        haz_closing = world.ego.speed
                    break
    return v_limit, haz_dist, haz_closing


def _red_light_limit(world: WorldState, s_ego: float):
    from .sim.world import LightState

    v_limit = float("inf")
    red_flag = 0.0
    stop_dist = float("inf")
    for light in world.lights:
        if light.state is not LightState.RED:
            continue
        d = light.definition.stop_s - s_ego
        if d < -1.0 or d > 45.0:
            continue
        margin = d - RED_STOP_MARGIN
        lim = 0.0 if margin <= 0.3 else math.sqrt(2.0 * COMFORT_DECEL * margin)
        if lim < v_limit:
            v_limit = lim
            stop_dist = max(0.0, d)
            red_flag = 1.0 if d <= 30.0 else red_flag
    return v_limit, red_flag, stop_dist


def _target_speed(world: WorldState, s_ego: float):
    route = world.route
    v_curve = float("inf")
    kappa = route.max_curvature(s_ego, s_ego + 14.0)
    if kappa > 1e-6:
        v_curve = math.sqrt(LAT_ACCEL_MAX / kappa)
    v_haz, haz_dist, haz_closing = _hazard_limits(world, s_ego)
    v_red, red_flag, stop_dist = _red_light_limit(world, s_ego)
    d_end = route.total_len - s_ego
    v_end = math.sqrt(2.0 * COMFORT_DECEL * max(0.0, d_end - 0.3))
    v_t = min(CRUISE_SPEED, v_curve, v_haz, v_red, v_end)
    diag = {"haz_dist": haz_dist, "haz_closing": haz_closing,
            "red_flag": red_flag, "stop_dist": stop_dist}
    return v_t, diag


def _rule_action(world: WorldState) -> tuple[ControlAction, float, dict]:
    route = world.route
    ego = world.ego
    s_ego, _, _ = route.project(ego.pose.x, ego.pose.y, ego.seg_hint)

    lookahead = clamp(LOOKAHEAD_GAIN * ego.speed, LOOKAHEAD_MIN, LOOKAHEAD_MAX)
    tx, ty = world_to_ego(route.point_at(s_ego + lookahead), ego.pose)
    alpha = math.atan2(ty, tx)
    wheelbase = world.params.wheelbase_front + world.params.wheelbase_rear
    delta = math.atan2(2.0 * wheelbase * math.sin(alpha), lookahead)
    steer = clamp(delta / world.params.max_steer_angle, -1.0, 1.0)

    v_t, diag = _target_speed(world, s_ego)
    err = v_t - ego.speed
    feedforward = world.params.drag_coeff * v_t / world.params.throttle_gain
    u = SPEED_KP * err + feedforward
    if u >= 0.0:
        action = ControlAction(steer=steer, throttle=min(u, 1.0), brake=0.0)
    else:
        action = ControlAction(steer=steer, throttle=0.0, brake=min(-u, 1.0))
    diag["target_speed"] = v_t
    diag["s_ego"] = s_ego
    return action, v_t, diag


def expert_action(world: WorldState) -> ControlAction:
    return _rule_action(world)[0]


def _reward(world: WorldState, had_infraction: bool) -> float:
    v_t, _ = _target_speed(world, world.ego.progress_s)
    pen = 0.1 * abs(world.ego.speed - v_t) / world.params.max_speed
    return 1.0 - (5.0 if had_infraction else 0.0) - pen


def expected_return(world: WorldState, horizon: int = VALUE_HORIZON,
                    gamma: float = VALUE_GAMMA) -> float:
    """Discounted reward of rolling the expert forward `horizon` policy steps.

    A terminal world yields its penalty reward as a constant stream; a
    rollout that terminates mid-horizon repeats the terminal step's reward.
    """
    if world.terminated is not None:
        r = _reward(world, True)
        return r * (1.0 - gamma ** horizon) / (1.0 - gamma)
    w = world.clone()
    total = 0.0
    disc = 1.0
    last_r = 0.0
    for t in range(horizon):
        if w.terminated is None:
            action = expert_action(w)
            w, events = run_policy_step(w, action)
            last_r = _reward(w, bool(events))
        total += disc * last_r
        disc *= gamma
    return total


def _future_waypoints(world: WorldState, k: int) -> np.ndarray:
    base = world.ego.pose
    w = world.clone()
    out = np.zeros((k, 2))
    for i in range(k):
        if w.terminated is None:
            action = expert_action(w)
            w, _ = run_policy_step(w, action)
        out[i] = world_to_ego((w.ego.pose.x, w.ego.pose.y), base)
    return out


def _feature(world: WorldState, action: ControlAction, diag: dict,
             waypoints: np.ndarray) -> np.ndarray:
    vec = np.zeros(FEATURE_DIM)
    vec[0] = world.ego.speed / 10.0
    vec[1:9] = (waypoints[:4] / 20.0).reshape(-1)
    vec[9] = min(diag["haz_dist"], 30.0) / 30.0
    vec[10] = min(diag["haz_closing"], 10.0) / 10.0
    vec[11] = diag["red_flag"]
    vec[12] = min(diag["stop_dist"], 30.0) / 30.0
    vec[13] = 1.0 if abs(action.steer) > TURNING_STEER else 0.0
    vec[14] = clamp(world.route.curvature_at(diag["s_ego"]), -0.5, 0.5)
    # vec[15] reserved
    return vec


def expert_act(world: WorldState, k_steps: int = 4) -> ExpertOutput:
    """Full privileged output: action, feature, value, K future waypoints."""
    action, _, diag = _rule_action(world)
    waypoints = _future_waypoints(world, k_steps)
    feature = _feature(world, action, diag, waypoints)
    validate_feature(feature)
    value = expected_return(world)
    return ExpertOutput(action=action, feature=feature, value=value,
                        future_waypoints=waypoints)
