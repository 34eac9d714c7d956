"""Between model outputs and executed actions: PID trajectory following,
turning-situation detection, situation-based fusion, and model ensembling.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from enum import Enum

from .core import ControlAction, WaypointPlan, clamp


class DegeneratePlan(ValueError):
    """All waypoints coincide; the caller gets a full-brake action instead
    of a crash, so this type exists mainly for introspection."""


@dataclass
class PIDState:
    kp: float
    ki: float
    kd: float
    integral: float = 0.0
    prev_error: float | None = None
    out_min: float = -1.0
    out_max: float = 1.0
    integral_clamp: float = 2.0

    def reset(self) -> None:
        self.integral = 0.0
        self.prev_error = None

    def step(self, error: float, dt: float) -> float:
        self.integral = clamp(self.integral + error * dt,
                              -self.integral_clamp, self.integral_clamp)
        deriv = 0.0 if self.prev_error is None else (error - self.prev_error) / dt
        self.prev_error = error
        out = self.kp * error + self.ki * self.integral + self.kd * deriv
        return clamp(out, self.out_min, self.out_max)


def default_longitudinal_pid() -> PIDState:
    return PIDState(kp=0.5, ki=0.05, kd=0.1)


def default_lateral_pid() -> PIDState:
    return PIDState(kp=1.2, ki=0.05, kd=0.2)


def trajectory_to_control(plan: WaypointPlan, current_speed: float,
                          lon_pid: PIDState, lat_pid: PIDState) -> ControlAction:
    """Convert a waypoint plan into an action with two PID controllers.

    Desired speed is the mean magnitude of the first two waypoint vectors
    times the control rate; the aim direction is the midpoint of the first
    two waypoints. Coincident waypoints yield a full-brake stop action.
    """
    if len(plan) < 2:
        raise ValueError("trajectory_to_control needs at least 2 waypoints")
    pts = plan.points
    if all(abs(px) < 1e-6 and abs(py) < 1e-6 for px, py in pts):
        return ControlAction(steer=0.0, throttle=0.0, brake=1.0)

    v1 = pts[0]
    v2 = (pts[1][0] - pts[0][0], pts[1][1] - pts[0][1])
    rate = 1.0 / plan.step_period
    desired_speed = 0.5 * (math.hypot(*v1) + math.hypot(*v2)) * rate

    lon_out = lon_pid.step(desired_speed - current_speed, plan.step_period)
    throttle = max(0.0, lon_out)
    brake = max(0.0, -lon_out)

    aim = (0.5 * (pts[0][0] + pts[1][0]), 0.5 * (pts[0][1] + pts[1][1]))
    heading_err = math.atan2(aim[1], aim[0])
    steer = lat_pid.step(heading_err, plan.step_period)
    return ControlAction(steer=steer, throttle=throttle, brake=brake)


class Situation(Enum):
    TRAJECTORY_SPECIALIZED = "trajectory"
    CONTROL_SPECIALIZED = "control"


@dataclass
class SituationDetector:
    """Ring buffer of recent executed |steer| values spanning one second."""

    policy_rate_hz: float = 2.0
    threshold: float = 0.1
    window_s: float = 1.0
    buffer: deque = field(init=False)

    def __post_init__(self):
        n = max(1, math.ceil(self.policy_rate_hz * self.window_s))
        self.buffer = deque([0.0] * n, maxlen=n)

    def push(self, executed_steer: float) -> None:
        self.buffer.append(abs(executed_steer))

    def classify(self) -> Situation:
        need = math.ceil(len(self.buffer) / 2)
        over = sum(1 for v in self.buffer if v > self.threshold)
        return (Situation.CONTROL_SPECIALIZED if over >= need
                else Situation.TRAJECTORY_SPECIALIZED)

    @property
    def turning(self) -> bool:
        return self.classify() is Situation.CONTROL_SPECIALIZED


def detect_situation(detector: SituationDetector,
                     latest_executed_steer: float) -> Situation:
    """Push the latest executed steer, then classify the window."""
    detector.push(latest_executed_steer)
    return detector.classify()


class FusionMode(Enum):
    SYMMETRIC = "sym"
    ASYMMETRIC = "asym"


class BrakeRule(Enum):
    AVERAGE = "average"
    MAX = "max"


@dataclass
class FusionConfig:
    alpha: float = 0.3
    mode: FusionMode = FusionMode.SYMMETRIC
    brake_rule: BrakeRule = BrakeRule.AVERAGE

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must be in [0, 1]")


def fuse(a_traj: ControlAction, a_ctl: ControlAction, situation: Situation,
         cfg: FusionConfig) -> ControlAction:
    """Situation-based blend of the two branch actions.

    The non-specialized source gets weight alpha. Asymmetric mode uses
    alpha=0.5 when trajectory-specialized and alpha=0 when
    control-specialized; the Max brake rule takes the larger brake.
    """
    if cfg.mode is FusionMode.ASYMMETRIC:
        alpha = 0.5 if situation is Situation.TRAJECTORY_SPECIALIZED else 0.0
    else:
        alpha = cfg.alpha

    if situation is Situation.TRAJECTORY_SPECIALIZED:
        w_ctl, w_traj = alpha, 1.0 - alpha
    else:
        w_ctl, w_traj = 1.0 - alpha, alpha

    steer = w_ctl * a_ctl.steer + w_traj * a_traj.steer
    throttle = w_ctl * a_ctl.throttle + w_traj * a_traj.throttle
    if cfg.brake_rule is BrakeRule.MAX:
        brake = max(a_traj.brake, a_ctl.brake)
    else:
        brake = w_ctl * a_ctl.brake + w_traj * a_traj.brake
    return ControlAction(steer=steer, throttle=throttle, brake=brake)


def fusion_weights(situation: Situation, cfg: FusionConfig) -> tuple[float, float]:
    """(w_traj, w_ctl) actually applied; recorded as trace provenance."""
    if cfg.mode is FusionMode.ASYMMETRIC:
        alpha = 0.5 if situation is Situation.TRAJECTORY_SPECIALIZED else 0.0
    else:
        alpha = cfg.alpha
    if situation is Situation.TRAJECTORY_SPECIALIZED:
        return 1.0 - alpha, alpha
    return alpha, 1.0 - alpha


def ensemble_combine(actions: list[ControlAction]) -> ControlAction:
    """Cross-model combination: mean steer/throttle, max brake."""
    if len(actions) < 2:
        raise ValueError("ensemble_combine needs at least 2 actions")
    n = float(len(actions))
    return ControlAction(
        steer=sum(a.steer for a in actions) / n,
        throttle=sum(a.throttle for a in actions) / n,
        brake=max(a.brake for a in actions),
    )
