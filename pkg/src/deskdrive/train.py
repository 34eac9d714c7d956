"""Loss assembly and the optimization loop.

The loss couples four pieces: L1 waypoint regression plus an expert
feature term for the trajectory branch; Beta-distribution KL terms (step 0
plus the averaged future steps) plus per-step feature terms for the
control branch; and L1 speed / L2 value auxiliary heads. A deterministic
expert action with mode m becomes the target Beta(m*(nu-2)+1,
(1-m)*(nu-2)+1), nu controlling label sharpness.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .data import Sample, measurement_vector
from .model import (ForwardOutput, ModelConfig, expert_action_to_means,
                    forward)
from .nn import ParamStore, Tape, Var


class NonFiniteLoss(RuntimeError):
    pass


@dataclass
class LossWeights:
    traj: float = 1.0          # lambda_traj
    ctl: float = 1.0           # lambda_ctl
    aux: float = 1.0           # lambda_aux
    feat: float = 0.05         # lambda_F
    speed: float = 0.05        # lambda_speed (inside aux)
    value: float = 0.001       # lambda_value (inside aux)
    concentration: float = 10.0  # nu for expert target Betas

    def __post_init__(self):
        for name in ("traj", "ctl", "aux", "feat", "speed", "value"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0")


REPORT_FIELDS = ("traj_l1", "traj_feat", "ctl_kl_0", "ctl_kl_future_mean",
                 "ctl_feat_0", "ctl_feat_future_mean", "speed", "value",
                 "total")


@dataclass
class LossReport:
    traj_l1: float = 0.0
    traj_feat: float = 0.0
    ctl_kl_0: float = 0.0
    ctl_kl_future_mean: float = 0.0
    ctl_feat_0: float = 0.0
    ctl_feat_future_mean: float = 0.0
    speed: float = 0.0
    value: float = 0.0
    total: float = 0.0

    def recombine(self, w: LossWeights) -> float:
        """Recompute the total from the parts (the decomposition identity)."""
        traj = self.traj_l1 + w.feat * self.traj_feat
        ctl = (self.ctl_kl_0 + self.ctl_kl_future_mean
               + w.feat * self.ctl_feat_0 + self.ctl_feat_future_mean)
        aux = w.speed * self.speed + w.value * self.value
        return w.traj * traj + w.ctl * ctl + w.aux * aux

    def as_dict(self) -> dict:
        return {f: getattr(self, f) for f in REPORT_FIELDS}


# --- batch preparation ------------------------------------------------------------

@dataclass
class Batch:
    obs: np.ndarray          # (B, C, G, G)
    meas: np.ndarray         # (B, 9)
    target: np.ndarray       # (B, 2)
    waypoints: np.ndarray    # (B, K, 2)
    beta_targets: np.ndarray  # (B, K+1, 4): (a_s, b_s, a_a, b_a)
    features: np.ndarray     # (B, K+1, d_f)
    speed: np.ndarray        # (B,)
    value: np.ndarray        # (B,)
    ids: list = field(default_factory=list)


def target_beta_params(action, nu: float) -> tuple[float, float, float, float]:
    """Mode-matched target Beta for a deterministic expert action."""
    m_s, m_a = expert_action_to_means(action)
    return (m_s * (nu - 2.0) + 1.0, (1.0 - m_s) * (nu - 2.0) + 1.0,
            m_a * (nu - 2.0) + 1.0, (1.0 - m_a) * (nu - 2.0) + 1.0)


def make_batch(samples: list[Sample], weights: LossWeights) -> Batch:
    k = len(samples[0].waypoints_gt)
    obs = np.stack([s.observation for s in samples]).astype(np.float64)
    meas = np.stack([measurement_vector(s.measurement) for s in samples])
    target = np.array([s.measurement.target_point for s in samples],
                      dtype=np.float64)
    wps = np.stack([s.waypoints_gt for s in samples]).astype(np.float64)
    beta_t = np.zeros((len(samples), k + 1, 4))
    for i, s in enumerate(samples):
        for t, action in enumerate(s.expert_action_seq):
            beta_t[i, t] = target_beta_params(action, weights.concentration)
    feats = np.stack([s.expert_feature_seq for s in samples]).astype(np.float64)
    speed = np.array([s.speed_gt for s in samples])
    value = np.array([s.value_gt for s in samples])
    ids = [s.meta.get("tick", i) for i, s in enumerate(samples)]
    return Batch(obs, meas, target, wps, beta_t, feats, speed, value, ids)


# --- loss terms -------------------------------------------------------------------

def _feature_l2(store: ParamStore, prefix: str, j: Var, target: np.ndarray) -> Var:
    proj = nn.linear(j, store.var(f"{prefix}.w"), store.var(f"{prefix}.b"))
    return nn.mean_all(nn.sum_axis_last(nn.square(nn.sub(proj, nn.const(target)))))


def traj_loss(store: ParamStore, out: ForwardOutput, batch: Batch,
              weights: LossWeights) -> tuple[Var, dict]:
    """Sum_t |wp_t - gt_t|_1 plus lambda_F * L2 feature term (batch means)."""
    if not out.waypoints:
        zero = nn.const(np.zeros(()))
        return zero, {"traj_l1": 0.0, "traj_feat": 0.0}
    terms = []
    for t, wp in enumerate(out.waypoints):
        diff = nn.sub(wp, nn.const(batch.waypoints[:, t]))
        terms.append(nn.sum_axis_last(nn.abs_(diff)))
    per_sample = terms[0]
    for term in terms[1:]:
        per_sample = nn.add(per_sample, term)
    l1 = nn.mean_all(per_sample)
    feat = _feature_l2(store, "traj.proj", out.j_traj_0, batch.features[:, 0])
    total = nn.add(l1, nn.scale(feat, weights.feat))
    return total, {"traj_l1": float(l1.data), "traj_feat": float(feat.data)}


def _step_kl(beta_params: Var, targets: np.ndarray) -> Var:
    a_s, b_s = nn.col(beta_params, 0), nn.col(beta_params, 1)
    a_a, b_a = nn.col(beta_params, 2), nn.col(beta_params, 3)
    kl = nn.add(nn.beta_kl_loss(a_s, b_s, targets[:, 0], targets[:, 1]),
                nn.beta_kl_loss(a_a, b_a, targets[:, 2], targets[:, 3]))
    return nn.mean_all(kl)


def ctl_loss(store: ParamStore, out: ForwardOutput, batch: Batch,
             weights: LossWeights) -> tuple[Var, dict]:
    """KL_0 + mean_t KL_t + lambda_F * feat_0 + mean_t feat_t.

    Only the step-0 feature term carries lambda_F; the future feature mean
    enters unweighted, mirroring the loss definition exactly.
    """
    if not out.beta_params_seq:
        zero = nn.const(np.zeros(()))
        return zero, {"ctl_kl_0": 0.0, "ctl_kl_future_mean": 0.0,
                      "ctl_feat_0": 0.0, "ctl_feat_future_mean": 0.0}

    kl0 = _step_kl(out.beta_params_seq[0], batch.beta_targets[:, 0])
    total = kl0
    parts = {"ctl_kl_0": float(kl0.data)}

    n_future = len(out.beta_params_seq) - 1
    if n_future > 0:
        acc = None
        for t in range(1, n_future + 1):
            term = _step_kl(out.beta_params_seq[t], batch.beta_targets[:, t])
            acc = term if acc is None else nn.add(acc, term)
        future = nn.scale(acc, 1.0 / n_future)
        total = nn.add(total, future)
        parts["ctl_kl_future_mean"] = float(future.data)
    else:
        parts["ctl_kl_future_mean"] = 0.0

    feat0 = _feature_l2(store, "ctl.proj", out.j_ctl_seq[0],
                        batch.features[:, 0])
    total = nn.add(total, nn.scale(feat0, weights.feat))
    parts["ctl_feat_0"] = float(feat0.data)

    n_feat_future = len(out.j_ctl_seq) - 1
    if n_feat_future > 0:
        acc = None
        for t in range(1, n_feat_future + 1):
            term = _feature_l2(store, "ctl.proj", out.j_ctl_seq[t],
                               batch.features[:, t])
            acc = term if acc is None else nn.add(acc, term)
        featf = nn.scale(acc, 1.0 / n_feat_future)
        total = nn.add(total, featf)
        parts["ctl_feat_future_mean"] = float(featf.data)
    else:
        parts["ctl_feat_future_mean"] = 0.0
    return total, parts


def aux_loss(out: ForwardOutput, batch: Batch,
             weights: LossWeights) -> tuple[Var, dict]:
    """lambda_speed * L1(speed) + lambda_value * L2(value)."""
    sp = nn.mean_all(nn.abs_(nn.sub(out.speed_pred, nn.const(batch.speed))))
    val = nn.mean_all(nn.square(nn.sub(out.value_pred, nn.const(batch.value))))
    total = nn.add(nn.scale(sp, weights.speed), nn.scale(val, weights.value))
    return total, {"speed": float(sp.data), "value": float(val.data)}


def total_loss(store: ParamStore, out: ForwardOutput, batch: Batch,
               weights: LossWeights) -> tuple[Var, LossReport]:
    lt, pt = traj_loss(store, out, batch, weights)
    lc, pc = ctl_loss(store, out, batch, weights)
    la, pa = aux_loss(out, batch, weights)
    total = nn.add(nn.add(nn.scale(lt, weights.traj), nn.scale(lc, weights.ctl)),
                   nn.scale(la, weights.aux))
    report = LossReport(**pt, **pc, **pa, total=float(total.data))
    return total, report


# --- optimizer --------------------------------------------------------------------

@dataclass
class OptimSettings:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-7
    batch_size: int = 32
    epochs: int = 30
    lr_drop_frac: float = 0.5  # halve the lr at this fraction of epochs


class Adam:
    def __init__(self, store: ParamStore, settings: OptimSettings):
        self.store = store
        self.s = settings
        self.t = 0
        self._m = {n: np.zeros_like(store.value(n)) for n in store.names()}
        self._v = {n: np.zeros_like(store.value(n)) for n in store.names()}

    def step(self, lr: float | None = None) -> None:
        s = self.s
        lr = s.lr if lr is None else lr
        self.t += 1
        bc1 = 1.0 - s.beta1 ** self.t
        bc2 = 1.0 - s.beta2 ** self.t
        for name in self.store.names():
            theta = self.store.value(name)
            g = self.store.grad(name) + s.weight_decay * theta
            m = self._m[name]
            v = self._v[name]
            m *= s.beta1
            m += (1.0 - s.beta1) * g
            v *= s.beta2
            v += (1.0 - s.beta2) * g * g
            theta -= lr * (m / bc1) / (np.sqrt(v / bc2) + s.eps)


@dataclass
class TrainResult:
    store: ParamStore
    epoch_rows: list[dict]
    step_totals: list[float]


def fit(samples: list[Sample], cfg: ModelConfig, weights: LossWeights,
        settings: OptimSettings, seed: int, store: ParamStore | None = None,
        max_steps: int | None = None,
        checkpoint_hook=None) -> TrainResult:
    """Train a variant on a sample list; fully deterministic per seed.

    The learning rate halves at lr_drop_frac of the planned epochs.
    Raises NonFiniteLoss (with the offending sample ids) if a batch
    produces a non-finite total.
    """
    from .model import build_params

    if not samples:
        raise ValueError("fit needs a non-empty dataset")
    store = store or build_params(cfg, seed)
    opt = Adam(store, settings)
    rng = np.random.Generator(np.random.PCG64(seed ^ 0x5EED))

    n = len(samples)
    bs = min(settings.batch_size, n)
    epochs = settings.epochs
    if max_steps is not None:
        steps_per_epoch = max(1, math.ceil(n / bs))
        epochs = max(1, math.ceil(max_steps / steps_per_epoch))

    epoch_rows: list[dict] = []
    step_totals: list[float] = []
    steps = 0
    for epoch in range(epochs):
        lr = settings.lr * (0.5 if epoch >= epochs * settings.lr_drop_frac
                            else 1.0)
        perm = rng.permutation(n)
        sums = {f: 0.0 for f in REPORT_FIELDS}
        count = 0
        for lo in range(0, n, bs):
            idx = perm[lo:lo + bs]
            batch = make_batch([samples[i] for i in idx], weights)
            store.zero_grads()
            with Tape() as tape:
                out = forward(store, batch.obs, batch.meas, batch.target, cfg)
                loss, report = total_loss(store, out, batch, weights)
                if not math.isfinite(report.total):
                    raise NonFiniteLoss(
                        f"non-finite loss at step {steps}; samples {batch.ids}")
                tape.backward(loss)
            opt.step(lr)
            for f in REPORT_FIELDS:
                sums[f] += getattr(report, f)
            step_totals.append(report.total)
            count += 1
            steps += 1
            if max_steps is not None and steps >= max_steps:
                break
        row = {"epoch": epoch, "lr": lr}
        row.update({f: sums[f] / max(count, 1) for f in REPORT_FIELDS})
        epoch_rows.append(row)
        if checkpoint_hook is not None:
            checkpoint_hook(epoch, store)
        if max_steps is not None and steps >= max_steps:
            break
    return TrainResult(store=store, epoch_rows=epoch_rows,
                       step_totals=step_totals)


def curve_to_csv(rows: list[dict]) -> str:
    cols = ["epoch", "lr", *REPORT_FIELDS]
    lines = [",".join(cols)]
    for row in rows:
        lines.append(",".join(repr(row[c]) if isinstance(row[c], float)
                              else str(row[c]) for c in cols))
    return "\n".join(lines) + "\n"
