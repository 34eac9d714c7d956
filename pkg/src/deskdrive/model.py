"""The dual-branch policy network and its ablation variants.

A shared conv encoder turns the raster into a spatial feature map F; a
measurement MLP encodes speed/command/target. The trajectory branch
decodes waypoints auto-regressively with a GRU; the control branch rolls a
temporal GRU K steps into the future, re-aggregating F each step through
an attention map conditioned on both branches' hidden states, and a policy
head shared across steps emits Beta parameters per action channel.

Variants: tcp (full), tcp_sb (separate encoders per branch), mtl (both
branches, single-step control, no interactions), control_only,
trajectory_only, no_temporal (K+1 actions straight from the step-0
feature), no_attention (temporal rollout over average-pooled F).
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .core import ControlAction
from .data import RasterSpec
from .nn import ParamStore, Var
from .nn.special import DomainError

VARIANTS = ("tcp", "tcp_sb", "mtl", "control_only", "trajectory_only",
            "no_temporal", "no_attention")


class ConfigMismatch(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    k: int = 4
    raster: RasterSpec = field(default_factory=RasterSpec)
    conv_channels: tuple[int, int, int] = (32, 64, 64)
    d_m: int = 128
    d_h: int = 256
    d_f: int = 16
    meas_in: int = 9
    variant: str = "tcp"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigMismatch(f"unknown variant {self.variant!r}")
        # k = 0 is allowed so no_temporal degenerates exactly into mtl
        if self.k < 0:
            raise ConfigMismatch("k must be >= 0")
        if self.raster.grid % 8 != 0:
            raise ConfigMismatch("raster grid must be divisible by 8")

    @property
    def fmap_hw(self) -> int:
        return self.raster.grid // 8

    @property
    def fmap_c(self) -> int:
        return self.conv_channels[-1]

    @property
    def has_traj(self) -> bool:
        return self.variant != "control_only"

    @property
    def has_ctl(self) -> bool:
        return self.variant != "trajectory_only"

    @property
    def uses_attention(self) -> bool:
        return self.variant in ("tcp", "tcp_sb")

    @property
    def uses_temporal(self) -> bool:
        return self.variant in ("tcp", "tcp_sb", "no_attention")

    @property
    def multi_head(self) -> bool:
        return self.variant == "no_temporal"

    @property
    def ctl_steps(self) -> int:
        """Number of control steps beyond step 0."""
        if not self.has_ctl:
            return 0
        return self.k if (self.uses_temporal or self.multi_head) else 0

    def to_dict(self) -> dict:
        return {"k": self.k, "raster": self.raster.to_dict(),
                "conv_channels": list(self.conv_channels), "d_m": self.d_m,
                "d_h": self.d_h, "d_f": self.d_f, "meas_in": self.meas_in,
                "variant": self.variant}

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        return ModelConfig(k=int(d["k"]),
                           raster=RasterSpec.from_dict(d["raster"]),
                           conv_channels=tuple(d["conv_channels"]),
                           d_m=int(d["d_m"]), d_h=int(d["d_h"]),
                           d_f=int(d["d_f"]), meas_in=int(d["meas_in"]),
                           variant=d["variant"])

    def config_hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()[:16]


@dataclass
class ForwardOutput:
    waypoints: list          # K Vars of (B, 2), cumulative ego-frame points
    beta_params_seq: list    # Vars of (B, 4): (a_s, b_s, a_a, b_a) per step
    j_traj_0: Var | None
    j_ctl_seq: list          # Vars of (B, d_h)
    h_traj_seq: list         # Vars of (B, d_h), indices 0..K
    h_ctl_seq: list          # Vars of (B, d_h), indices 0..ctl_steps
    attention_maps: list     # Vars of (B, H*W), one per control step
    speed_pred: Var
    value_pred: Var


# --- parameter construction ---------------------------------------------------

def _add_encoder(store: ParamStore, cfg: ModelConfig, prefix: str,
                 seed: int) -> None:
    c_in = cfg.raster.channels
    c1, c2, c3 = cfg.conv_channels
    for name, (co, ci) in ((f"{prefix}.conv1", (c1, c_in)),
                           (f"{prefix}.conv2", (c2, c1)),
                           (f"{prefix}.conv3", (c3, c2))):
        store.add_uniform(f"{name}.w", (co, ci, 3, 3), fan_in=ci * 9, seed=seed)
        store.add_zeros(f"{name}.b", (co,))


def _add_mlp(store: ParamStore, prefix: str, dims: tuple[int, int, int],
             seed: int) -> None:
    n_in, n_hidden, n_out = dims
    store.add_uniform(f"{prefix}.l1.w", (n_hidden, n_in), fan_in=n_in, seed=seed)
    store.add_zeros(f"{prefix}.l1.b", (n_hidden,))
    store.add_uniform(f"{prefix}.l2.w", (n_out, n_hidden), fan_in=n_hidden,
                      seed=seed)
    store.add_zeros(f"{prefix}.l2.b", (n_out,))


def _add_gru(store: ParamStore, prefix: str, n_in: int, d: int, seed: int) -> None:
    for gate in ("wz", "wr", "wh"):
        store.add_uniform(f"{prefix}.{gate}", (d, n_in + d), fan_in=n_in + d,
                          seed=seed)
    for gate in ("bz", "br", "bh"):
        store.add_zeros(f"{prefix}.{gate}", (d,))


def build_params(cfg: ModelConfig, seed: int) -> ParamStore:
    store = ParamStore()
    c = cfg.fmap_c
    hw = cfg.fmap_hw * cfg.fmap_hw
    d_m, d_h, d_f = cfg.d_m, cfg.d_h, cfg.d_f

    _add_encoder(store, cfg, "enc", seed)
    _add_mlp(store, "meas", (cfg.meas_in, d_m, d_m), seed)
    if cfg.variant == "tcp_sb":
        _add_encoder(store, cfg, "enc_traj", seed)
        _add_mlp(store, "meas_traj", (cfg.meas_in, d_m, d_m), seed)

    if cfg.has_traj:
        store.add_uniform("traj.h0.w", (d_h, c + d_m), fan_in=c + d_m, seed=seed)
        store.add_zeros("traj.h0.b", (d_h,))
        _add_gru(store, "traj.gru", 4, d_h, seed)
        store.add_uniform("traj.delta.w", (2, d_h), fan_in=d_h, seed=seed)
        store.add_zeros("traj.delta.b", (2,))
        store.add_uniform("traj.proj.w", (d_f, c + d_m), fan_in=c + d_m,
                          seed=seed)
        store.add_zeros("traj.proj.b", (d_f,))

    if cfg.has_ctl:
        _add_mlp(store, "ctl.feat0", (c + d_m, d_h, d_h), seed)
        head_out = 4 * (cfg.k + 1) if cfg.multi_head else 4
        _add_mlp(store, "ctl.head", (d_h, d_h, head_out), seed)
        store.add_uniform("ctl.proj.w", (d_f, d_h), fan_in=d_h, seed=seed)
        store.add_zeros("ctl.proj.b", (d_f,))
        if cfg.uses_attention:
            _add_mlp(store, "ctl.att0", (d_m, d_h, hw), seed)
            _add_mlp(store, "ctl.attn", (2 * d_h, d_h, hw), seed)
        if cfg.uses_temporal:
            _add_mlp(store, "ctl.featt", (c + d_h, d_h, d_h), seed)
            _add_gru(store, "ctl.gru", d_h + 2, d_h, seed)

    _add_mlp(store, "aux.speed", (c, d_h, 1), seed)
    _add_mlp(store, "aux.value", (c + d_m, d_h, 1), seed)
    return store


def count_params(cfg: ModelConfig) -> int:
    return build_params(cfg, 0).size()


# --- forward pieces -------------------------------------------------------------

def _mlp(store: ParamStore, prefix: str, x: Var) -> Var:
    h = nn.relu(nn.linear(x, store.var(f"{prefix}.l1.w"),
                          store.var(f"{prefix}.l1.b")))
    return nn.linear(h, store.var(f"{prefix}.l2.w"), store.var(f"{prefix}.l2.b"))


def encode_observation(store: ParamStore, obs: Var, cfg: ModelConfig,
                       prefix: str = "enc") -> Var:
    """Raster -> C x H x W feature map (three stride-2 convs, relu between)."""
    h = nn.conv2d(obs, store.var(f"{prefix}.conv1.w"),
                  store.var(f"{prefix}.conv1.b"), stride=2, pad=1)
    h = nn.relu(h)
    h = nn.conv2d(h, store.var(f"{prefix}.conv2.w"),
                  store.var(f"{prefix}.conv2.b"), stride=2, pad=1)
    h = nn.relu(h)
    return nn.conv2d(h, store.var(f"{prefix}.conv3.w"),
                     store.var(f"{prefix}.conv3.b"), stride=2, pad=1)


def encode_measurement(store: ParamStore, meas: Var, cfg: ModelConfig,
                       prefix: str = "meas") -> Var:
    return _mlp(store, prefix, meas)


def plan_trajectory(store: ParamStore, fmap: Var, j_m: Var, target: Var,
                    cfg: ModelConfig):
    """Auto-regressive waypoint decoding; returns (wps, h_traj_seq, j_traj_0)."""
    avg = nn.avgpool_hw(fmap)
    j_traj_0 = nn.concat_last([avg, j_m])
    h = nn.linear(j_traj_0, store.var("traj.h0.w"), store.var("traj.h0.b"))
    h_seq = [h]
    wps = []
    bsz = j_m.data.shape[0]
    wp = nn.const(np.zeros((bsz, 2)))
    gru = tuple(store.var(f"traj.gru.{g}")
                for g in ("wz", "bz", "wr", "br", "wh", "bh"))
    for _ in range(cfg.k):
        x = nn.concat_last([wp, target])
        h = nn.gru_cell(x, h, *gru)
        delta = nn.linear(h, store.var("traj.delta.w"), store.var("traj.delta.b"))
        wp = nn.add(wp, delta)
        h_seq.append(h)
        wps.append(wp)
    return wps, h_seq, j_traj_0


def _policy_head(store: ParamStore, j: Var) -> Var:
    raw = _mlp(store, "ctl.head", j)
    return nn.add_const(nn.softplus(raw), 1.0)


def _beta_mean_action(beta_params: Var) -> Var:
    """(B, 4) Beta params -> (B, 2) mapped mean actions in [-1, 1]."""
    a_s, b_s = nn.col(beta_params, 0), nn.col(beta_params, 1)
    a_a, b_a = nn.col(beta_params, 2), nn.col(beta_params, 3)
    mean_s = nn.div(a_s, nn.add(a_s, b_s))
    mean_a = nn.div(a_a, nn.add(a_a, b_a))
    return nn.stack_cols([nn.add_const(nn.scale(mean_s, 2.0), -1.0),
                          nn.add_const(nn.scale(mean_a, 2.0), -1.0)])


def control_rollout(store: ParamStore, fmap: Var, j_m: Var, h_traj_seq: list,
                    cfg: ModelConfig):
    """Multi-step control branch.

    Step 0 aggregates F through a measurement-only attention map (full
    variants) or the average pool (ablations); later steps advance a
    temporal GRU on (previous feature, previous mean action) and attend to
    F with both branches' hidden states. The policy head is shared across
    all steps.
    """
    bsz = j_m.data.shape[0]
    hw = cfg.fmap_hw * cfg.fmap_hw
    avg = nn.avgpool_hw(fmap)
    uniform = nn.const(np.full((bsz, hw), 1.0 / hw))

    attention_maps = []
    if cfg.uses_attention:
        att0 = nn.softmax_last(_mlp(store, "ctl.att0", j_m))
        agg0 = nn.attn_aggregate(att0, fmap)
    else:
        att0 = uniform
        agg0 = avg
    attention_maps.append(att0)
    j0 = _mlp(store, "ctl.feat0", nn.concat_last([agg0, j_m]))
    j_seq = [j0]
    h_seq = [nn.const(np.zeros((bsz, cfg.d_h)))]

    if cfg.multi_head:
        raw = nn.add_const(nn.softplus(_mlp(store, "ctl.head", j0)), 1.0)
        beta_seq = [nn.slice_cols(raw, 4 * t, 4 * t + 4)
                    for t in range(cfg.k + 1)]
        attention_maps.extend([uniform] * cfg.k)
        return beta_seq, j_seq, h_seq, attention_maps

    beta_seq = [_policy_head(store, j0)]
    if not cfg.uses_temporal:
        return beta_seq, j_seq, h_seq, attention_maps

    gru = tuple(store.var(f"ctl.gru.{g}")
                for g in ("wz", "bz", "wr", "br", "wh", "bh"))
    h = h_seq[0]
    for t in range(1, cfg.k + 1):
        x = nn.concat_last([j_seq[-1], _beta_mean_action(beta_seq[-1])])
        h = nn.gru_cell(x, h, *gru)
        if cfg.uses_attention:
            att = nn.softmax_last(_mlp(store, "ctl.attn",
                                       nn.concat_last([h_traj_seq[t], h])))
            agg = nn.attn_aggregate(att, fmap)
        else:
            att = uniform
            agg = avg
        j_t = _mlp(store, "ctl.featt", nn.concat_last([agg, h]))
        beta_seq.append(_policy_head(store, j_t))
        j_seq.append(j_t)
        h_seq.append(h)
        attention_maps.append(att)
    return beta_seq, j_seq, h_seq, attention_maps


def forward(store: ParamStore, obs, meas, target, cfg: ModelConfig
            ) -> ForwardOutput:
    """Full variant-aware forward pass over a batch."""
    obs = obs if isinstance(obs, Var) else nn.const(obs)
    meas = meas if isinstance(meas, Var) else nn.const(meas)
    target = target if isinstance(target, Var) else nn.const(target)
    if obs.data.ndim != 4 or obs.data.shape[1] != cfg.raster.channels:
        raise ConfigMismatch(f"observation shape {obs.data.shape} does not "
                             f"match raster spec")
    if meas.data.shape[1] != cfg.meas_in:
        raise ConfigMismatch("measurement width mismatch")

    fmap = encode_observation(store, obs, cfg, "enc")
    j_m = encode_measurement(store, meas, cfg, "meas")
    if cfg.variant == "tcp_sb":
        fmap_traj = encode_observation(store, obs, cfg, "enc_traj")
        j_m_traj = encode_measurement(store, meas, cfg, "meas_traj")
    else:
        fmap_traj, j_m_traj = fmap, j_m

    bsz = meas.data.shape[0]
    if cfg.has_traj:
        wps, h_traj_seq, j_traj_0 = plan_trajectory(store, fmap_traj, j_m_traj,
                                                    target, cfg)
    else:
        wps, j_traj_0 = [], None
        h_traj_seq = [nn.const(np.zeros((bsz, cfg.d_h)))
                      for _ in range(cfg.k + 1)]

    if cfg.has_ctl:
        beta_seq, j_seq, h_ctl_seq, atts = control_rollout(store, fmap, j_m,
                                                           h_traj_seq, cfg)
    else:
        beta_seq, j_seq, atts = [], [], []
        h_ctl_seq = []

    avg = nn.avgpool_hw(fmap)
    speed = nn.col(_mlp(store, "aux.speed", avg), 0)
    value = nn.col(_mlp(store, "aux.value", nn.concat_last([avg, j_m])), 0)

    return ForwardOutput(waypoints=wps, beta_params_seq=beta_seq,
                         j_traj_0=j_traj_0, j_ctl_seq=j_seq,
                         h_traj_seq=h_traj_seq if cfg.has_traj else [],
                         h_ctl_seq=h_ctl_seq, attention_maps=atts,
                         speed_pred=speed, value_pred=value)


# --- action extraction ------------------------------------------------------------

def action_from_beta(alpha: float, beta: float, mode: str = "mean") -> float:
    """Point estimate of a Beta in (0, 1)."""
    if alpha <= 0 or beta <= 0:
        raise DomainError("beta parameters must be positive")
    if mode == "mean":
        return alpha / (alpha + beta)
    if mode == "mode":
        if alpha <= 1.0 or beta <= 1.0:
            raise DomainError("beta mode needs alpha, beta > 1")
        return (alpha - 1.0) / (alpha + beta - 2.0)
    raise ValueError(f"unknown mode {mode!r}")


def beta_to_action(params4: np.ndarray, mode: str = "mean") -> ControlAction:
    """(a_s, b_s, a_a, b_a) -> ControlAction.

    The steering channel maps (0,1) -> (-1,1); the acceleration channel
    maps the same way and splits into throttle (positive) or brake
    (negative).
    """
    a_s, b_s, a_a, b_a = (float(v) for v in params4)
    steer = 2.0 * action_from_beta(a_s, b_s, mode) - 1.0
    accel = 2.0 * action_from_beta(a_a, b_a, mode) - 1.0
    if accel >= 0.0:
        return ControlAction(steer=steer, throttle=accel, brake=0.0)
    return ControlAction(steer=steer, throttle=0.0, brake=-accel)


def expert_action_to_means(action: ControlAction) -> tuple[float, float]:
    """Inverse channel mapping: action -> (steer mean, accel mean) in (0,1)."""
    m_s = 0.5 * (action.steer + 1.0)
    accel = action.throttle - action.brake
    m_a = 0.5 * (accel + 1.0)
    return m_s, m_a


def validate_forward(out: ForwardOutput, cfg: ModelConfig) -> None:
    """Check the structural invariants of a forward pass."""
    for att in out.attention_maps:
        s = att.data.sum(axis=-1)
        if np.any(np.abs(s - 1.0) > 1e-9):
            raise AssertionError("attention map does not sum to 1")
        if att.data.shape[-1] != cfg.fmap_hw * cfg.fmap_hw:
            raise AssertionError("attention map shape mismatch")
    for bp in out.beta_params_seq:
        if np.any(bp.data <= 1.0):
            raise AssertionError("beta parameters must exceed 1")
    if cfg.has_traj and len(out.waypoints) != cfg.k:
        raise AssertionError("waypoint count mismatch")
    if cfg.has_ctl and len(out.beta_params_seq) != cfg.ctl_steps + 1:
        raise AssertionError("control step count mismatch")
