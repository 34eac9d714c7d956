"""Suite evaluation and the comparative studies.

A suite is the full grid of 8 stock routes x 6 scenario kinds; episode
seeds derive deterministically from (base seed, route, scenario). Studies
train the required variant checkpoints per seed (cached on disk), evaluate
each over the suite, and emit SuiteReport JSON plus a CSV table; the alpha
sweep also emits a box-plot SVG. Everything is reproducible byte-for-byte
from the seeds.
"""
from __future__ import annotations

import hashlib
import json
import multiprocessing as mp
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..control import BrakeRule, FusionConfig, FusionMode
from ..core import ControlAction, Measurement
from ..data import RasterSpec, Sample, collect_episode
from ..model import ModelConfig, build_params, count_params
from ..nn import checkpoint_bytes, checkpoint_from_bytes
from ..sim.routes import get_route_spec, stock_route_names
from ..sim.scenarios import ScenarioKind, default_scenario
from ..train import LossWeights, OptimSettings, curve_to_csv, fit
from .episodes import (CrossModelFusionAgent, EnsembleAgent, EpisodeResult,
                       ExpertAgent, PolicyAgent, run_episode)
from .metrics import SuiteReport, compute_metrics

SCENARIO_ORDER = tuple(ScenarioKind)


def fusion_to_dict(f: FusionConfig | None) -> dict | None:
    if f is None:
        return None
    return {"alpha": f.alpha, "mode": f.mode.value,
            "brake_rule": f.brake_rule.value}


def fusion_from_dict(d: dict | None) -> FusionConfig | None:
    if d is None:
        return None
    return FusionConfig(alpha=float(d["alpha"]), mode=FusionMode(d["mode"]),
                        brake_rule=BrakeRule(d["brake_rule"]))


def episode_seed(base_seed: int, route: str, scenario: str) -> int:
    digest = hashlib.blake2b(f"{base_seed}/{route}/{scenario}".encode(),
                             digest_size=4).digest()
    return int.from_bytes(digest, "little")


def suite_pairs(routes: list[str] | None = None,
                scenarios: tuple[ScenarioKind, ...] = SCENARIO_ORDER):
    routes = routes or stock_route_names()
    return [(r, k) for r in routes for k in scenarios]


@dataclass
class StudySettings:
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    routes: list[str] = field(default_factory=stock_route_names)
    scenarios: tuple = SCENARIO_ORDER
    collect_per_route: int = 2     # scenario rotations collected per route
    train: OptimSettings = field(default_factory=lambda: OptimSettings(epochs=10))
    weights: LossWeights = field(default_factory=LossWeights)
    model: ModelConfig = field(default_factory=ModelConfig)
    alpha: float = 0.3
    workers: int = 0

    def plan_hash(self) -> str:
        payload = json.dumps({
            "routes": self.routes, "cpr": self.collect_per_route,
            "train": [self.train.lr, self.train.epochs, self.train.batch_size,
                      self.train.weight_decay, self.train.lr_drop_frac],
            "weights": [self.weights.traj, self.weights.ctl, self.weights.aux,
                        self.weights.feat, self.weights.speed,
                        self.weights.value, self.weights.concentration],
            "model": self.model.to_dict(),
        }, sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()[:12]


# --- dataset cache -----------------------------------------------------------------

def _pack_samples(samples: list[Sample]) -> dict:
    k = len(samples[0].waypoints_gt)
    return {
        "obs": np.stack([s.observation for s in samples]),
        "meas_speed": np.array([s.measurement.speed for s in samples]),
        "meas_onehot": np.array([s.measurement.command_onehot for s in samples]),
        "meas_target": np.array([s.measurement.target_point for s in samples]),
        "actions": np.array([[a.as_tuple() for a in s.expert_action_seq]
                             for s in samples]),
        "features": np.stack([s.expert_feature_seq for s in samples]),
        "wps": np.stack([s.waypoints_gt for s in samples]),
        "speed": np.array([s.speed_gt for s in samples]),
        "value": np.array([s.value_gt for s in samples]),
        "meta": np.frombuffer(json.dumps([s.meta for s in samples])
                              .encode(), dtype=np.uint8).copy(),
    }


def _unpack_samples(data) -> list[Sample]:
    metas = json.loads(bytes(data["meta"]).decode())
    out = []
    for i, meta in enumerate(metas):
        meas = Measurement(float(data["meas_speed"][i]),
                           tuple(int(v) for v in data["meas_onehot"][i]),
                           tuple(float(v) for v in data["meas_target"][i]))
        actions = [ControlAction(*row) for row in data["actions"][i]]
        out.append(Sample(observation=data["obs"][i], measurement=meas,
                          expert_action_seq=actions,
                          expert_feature_seq=data["features"][i],
                          waypoints_gt=data["wps"][i],
                          speed_gt=float(data["speed"][i]),
                          value_gt=float(data["value"][i]), meta=meta))
    return out


def collect_for_seed(seed: int, settings: StudySettings,
                     cache_dir: Path | None = None) -> list[Sample]:
    """Collect the training set for one seed: each route is driven with
    collect_per_route rotating scenario kinds."""
    if cache_dir is not None:
        path = cache_dir / f"dataset_{seed}_{settings.plan_hash()}.npz"
        if path.exists():
            with np.load(path, allow_pickle=False) as data:
                return _unpack_samples(data)
    samples: list[Sample] = []
    n_scen = len(settings.scenarios)
    for i, route in enumerate(settings.routes):
        for j in range(settings.collect_per_route):
            kind = settings.scenarios[(i + j * 3) % n_scen]
            ep_seed = episode_seed(seed, route, f"collect{j}_{kind.value}")
            samples.extend(collect_episode(
                get_route_spec(route), [default_scenario(kind)], ep_seed,
                k=settings.model.k, raster=settings.model.raster))
    if cache_dir is not None:
        cache_dir.mkdir(parents=True, exist_ok=True)
        np.savez_compressed(path, **_pack_samples(samples))
    return samples


def train_variant(samples: list[Sample], variant: str, seed: int,
                  settings: StudySettings,
                  cache_dir: Path | None = None) -> bytes:
    """Train (or load cached) checkpoint bytes for one variant and seed."""
    cfg = ModelConfig(**{**settings.model.to_dict(), "variant": variant},
                      ) if False else _variant_config(settings.model, variant)
    key = f"ckpt_{variant}_{seed}_{settings.plan_hash()}"
    if cache_dir is not None:
        path = cache_dir / f"{key}.npz"
        if path.exists():
            return path.read_bytes()
    result = fit(samples, cfg, settings.weights, settings.train, seed=seed)
    manifest = {"config": cfg.to_dict(), "config_hash": cfg.config_hash(),
                "variant": variant, "seed": seed}
    blob = checkpoint_bytes(result.store, manifest)
    if cache_dir is not None:
        cache_dir.mkdir(parents=True, exist_ok=True)
        path.write_bytes(blob)
        (cache_dir / f"curve_{variant}_{seed}.csv").write_text(
            curve_to_csv(result.epoch_rows))
    return blob


def _variant_config(base: ModelConfig, variant: str) -> ModelConfig:
    d = base.to_dict()
    d["variant"] = variant
    return ModelConfig.from_dict(d)


# --- agents from serializable specs -------------------------------------------------

def build_agent(spec: dict):
    kind = spec["kind"]
    if kind == "expert":
        return ExpertAgent()
    if kind == "policy":
        store, manifest = checkpoint_from_bytes(spec["ckpt"])
        cfg = ModelConfig.from_dict(manifest["config"])
        return PolicyAgent(store, cfg, fusion_from_dict(spec.get("fusion")),
                           spec.get("action_mode", "mean"))
    if kind == "cross_fusion":
        cs, cm = checkpoint_from_bytes(spec["ctl_ckpt"])
        ts, tm = checkpoint_from_bytes(spec["traj_ckpt"])
        return CrossModelFusionAgent(cs, ModelConfig.from_dict(cm["config"]),
                                     ts, ModelConfig.from_dict(tm["config"]),
                                     fusion_from_dict(spec["fusion"]))
    if kind == "ensemble":
        members = [build_agent(m) for m in spec["members"]]
        return EnsembleAgent(members)
    raise ValueError(f"unknown agent spec kind {kind!r}")


_WORKER_STATE: dict = {}


def _init_worker(agent_spec: dict, raster_dict: dict):
    os.environ.setdefault("OMP_NUM_THREADS", "1")
    os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
    _WORKER_STATE["spec"] = agent_spec
    _WORKER_STATE["raster"] = RasterSpec.from_dict(raster_dict)


def _run_one(task) -> dict:
    route, scen_value, seed = task
    agent = build_agent(_WORKER_STATE["spec"])
    scen = [default_scenario(ScenarioKind(scen_value))] \
        if scen_value != "none" else []
    result, _ = run_episode(agent, get_route_spec(route), scen, seed,
                            raster=_WORKER_STATE["raster"])
    return result.to_dict()


def _result_from_dict(d: dict) -> EpisodeResult:
    from ..sim.world import InfractionEvent, InfractionKind

    events = [InfractionEvent(InfractionKind(e["kind"]), e["tick"],
                              e["ego_turning"]) for e in d["events"]]
    return EpisodeResult(route=d["route"], scenario=d["scenario"],
                         seed=d["seed"],
                         route_completion=d["route_completion"],
                         events=events, ticks=d["ticks"],
                         termination=d["termination"],
                         distance_km=d["distance_km"])


def evaluate_suite(agent_spec: dict, seeds: list[int],
                   settings: StudySettings) -> SuiteReport:
    """Run the full suite for every seed; serial and parallel agree."""
    pairs = suite_pairs(settings.routes, settings.scenarios)
    tasks = [(route, kind.value, episode_seed(seed, route, kind.value))
             for seed in seeds for route, kind in pairs]
    raster_dict = settings.model.raster.to_dict()
    if settings.workers and settings.workers > 1:
        ctx = mp.get_context("fork")
        with ctx.Pool(settings.workers, initializer=_init_worker,
                      initargs=(agent_spec, raster_dict)) as pool:
            rows = pool.map(_run_one, tasks)
    else:
        _init_worker(agent_spec, raster_dict)
        rows = [_run_one(t) for t in tasks]
    return compute_metrics([_result_from_dict(r) for r in rows])


# --- studies ---------------------------------------------------------------------

STUDIES = ("CtlVsTraj", "Components", "MtlVsEnsemble", "AlphaSweep")


class MissingCheckpoint(RuntimeError):
    pass


def _sym_fusion(alpha: float) -> dict:
    return fusion_to_dict(FusionConfig(alpha=alpha, mode=FusionMode.SYMMETRIC,
                                       brake_rule=BrakeRule.AVERAGE))


def _prepare_checkpoints(variants: list[str], settings: StudySettings,
                         out_dir: Path) -> dict:
    """Train every (variant, seed) checkpoint needed by a study."""
    cache = out_dir / "cache"
    ckpts: dict[tuple[str, int], bytes] = {}
    for seed in settings.seeds:
        samples = collect_for_seed(seed, settings, cache)
        for variant in variants:
            ckpts[(variant, seed)] = train_variant(samples, variant, seed,
                                                   settings, cache)
    return ckpts


def _eval_rows(rows: list[tuple[str, dict]], settings: StudySettings,
               out_dir: Path) -> dict[str, SuiteReport]:
    reports = {}
    for label, spec in rows:
        report = evaluate_suite(spec, settings.seeds, settings)
        reports[label] = report
        safe = label.replace("+", "plus_").replace(" ", "_").lower()
        (out_dir / f"report_{safe}.json").write_text(report.to_json())
    return reports


def _spec_for(ckpts: dict, variant: str, seed: int,
              fusion: dict | None) -> dict:
    try:
        blob = ckpts[(variant, seed)]
    except KeyError:
        raise MissingCheckpoint(f"no checkpoint for {variant} seed {seed}")
    return {"kind": "policy", "ckpt": blob, "fusion": fusion}


def _per_seed_eval(label_specs, settings: StudySettings) -> SuiteReport:
    """Evaluate seed-specific agent specs and merge into one report."""
    results = []
    for seed, spec in label_specs:
        pairs = suite_pairs(settings.routes, settings.scenarios)
        tasks = [(r, k.value, episode_seed(seed, r, k.value))
                 for r, k in pairs]
        raster_dict = settings.model.raster.to_dict()
        if settings.workers and settings.workers > 1:
            ctx = mp.get_context("fork")
            with ctx.Pool(settings.workers, initializer=_init_worker,
                          initargs=(spec, raster_dict)) as pool:
                rows = pool.map(_run_one, tasks)
        else:
            _init_worker(spec, raster_dict)
            rows = [_run_one(t) for t in tasks]
        results.extend(_result_from_dict(r) for r in rows)
    return compute_metrics(results)


def components_study(settings: StudySettings, out_dir: Path) -> dict:
    """Five-row capability ladder, trained and evaluated per seed."""
    out_dir.mkdir(parents=True, exist_ok=True)
    variants = ["control_only", "mtl", "no_attention", "tcp"]
    ckpts = _prepare_checkpoints(variants, settings, out_dir)
    rows = [("control", "control_only", None),
            ("+traj-task", "mtl", None),
            ("+temporal", "no_attention", None),
            ("+traj-attn", "tcp", None),
            ("+fusion", "tcp", _sym_fusion(settings.alpha))]
    reports = {}
    for label, variant, fusion in rows:
        reports[label] = _per_seed_eval(
            [(seed, _spec_for(ckpts, variant, seed, fusion))
             for seed in settings.seeds], settings)
        safe = label.replace("+", "plus_")
        (out_dir / f"report_{safe}.json").write_text(reports[label].to_json())
    table = ["label,ds_mean,ds_std,route_completion,infraction_score"]
    for label, _, _ in rows:
        rep = reports[label]
        table.append(f"{label},{rep.ds_mean!r},{rep.ds_std!r},"
                     f"{rep.route_completion!r},{rep.infraction_score!r}")
    (out_dir / "components.csv").write_text("\n".join(table) + "\n")
    return reports


def ctl_vs_traj_study(settings: StudySettings, out_dir: Path) -> dict:
    out_dir.mkdir(parents=True, exist_ok=True)
    variants = ["control_only", "trajectory_only"]
    ckpts = _prepare_checkpoints(variants, settings, out_dir)
    reports = {}
    for label, variant in (("Control-Only", "control_only"),
                           ("Trajectory-Only", "trajectory_only")):
        reports[label] = _per_seed_eval(
            [(seed, _spec_for(ckpts, variant, seed, None))
             for seed in settings.seeds], settings)
        (out_dir / f"report_{variant}.json").write_text(
            reports[label].to_json())
    kinds = ("collision_vehicle", "collision_layout", "off_road", "blocked")
    header = ["label", "ds_mean", "ds_std"]
    for k in kinds:
        header += [f"{k}_per_km", f"{k}_turn_ratio"]
    table = [",".join(header)]
    for label, rep in reports.items():
        row = [label, repr(rep.ds_mean), repr(rep.ds_std)]
        for k in kinds:
            row += [repr(rep.per_km[k]), repr(rep.turn_ratio[k])]
        table.append(",".join(row))
    (out_dir / "ctl_vs_traj.csv").write_text("\n".join(table) + "\n")
    return reports


def mtl_vs_ensemble_study(settings: StudySettings, out_dir: Path) -> dict:
    out_dir.mkdir(parents=True, exist_ok=True)
    variants = ["control_only", "trajectory_only", "mtl", "tcp", "tcp_sb"]
    ckpts = _prepare_checkpoints(variants, settings, out_dir)
    fusion = _sym_fusion(settings.alpha)

    def ens_spec(seed):
        return {"kind": "cross_fusion",
                "ctl_ckpt": ckpts[("control_only", seed)],
                "traj_ckpt": ckpts[("trajectory_only", seed)],
                "fusion": fusion}

    def tcp_ens_spec(seed):
        return {"kind": "ensemble", "members": [
            {"kind": "policy", "ckpt": ckpts[("tcp", seed)], "fusion": fusion},
            {"kind": "policy", "ckpt": ckpts[("tcp_sb", seed)],
             "fusion": fusion}]}

    rows = [
        ("Ensemble", ens_spec, count_params(_variant_config(settings.model,
                                                            "control_only"))
         + count_params(_variant_config(settings.model, "trajectory_only"))),
        ("MTL", lambda s: _spec_for(ckpts, "mtl", s, fusion),
         count_params(_variant_config(settings.model, "mtl"))),
        ("TCP-SB", lambda s: _spec_for(ckpts, "tcp_sb", s, fusion),
         count_params(_variant_config(settings.model, "tcp_sb"))),
        ("TCP", lambda s: _spec_for(ckpts, "tcp", s, fusion),
         count_params(_variant_config(settings.model, "tcp"))),
        ("TCP-Ens", tcp_ens_spec,
         count_params(_variant_config(settings.model, "tcp"))
         + count_params(_variant_config(settings.model, "tcp_sb"))),
    ]
    reports = {}
    table = ["label,ds_mean,ds_std,params"]
    for label, spec_fn, n_params in rows:
        reports[label] = _per_seed_eval(
            [(seed, spec_fn(seed)) for seed in settings.seeds], settings)
        (out_dir / f"report_{label.lower().replace('-', '_')}.json"
         ).write_text(reports[label].to_json())
        rep = reports[label]
        table.append(f"{label},{rep.ds_mean!r},{rep.ds_std!r},{n_params}")
    (out_dir / "mtl_vs_ensemble.csv").write_text("\n".join(table) + "\n")
    return reports


ALPHA_SWEEP = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.7, 1.0)


def alpha_sweep_study(settings: StudySettings, out_dir: Path,
                      alphas: tuple = ALPHA_SWEEP) -> dict:
    """Driving score vs fusion weight, 3 trials (seeds) per alpha."""
    out_dir.mkdir(parents=True, exist_ok=True)
    seeds = settings.seeds[:3] if len(settings.seeds) >= 3 else settings.seeds
    sub = StudySettings(**{**settings.__dict__, "seeds": list(seeds)})
    ckpts = _prepare_checkpoints(["tcp"], sub, out_dir)
    scores: dict[float, list[float]] = {}
    for alpha in alphas:
        per_seed = []
        for seed in seeds:
            spec = _spec_for(ckpts, "tcp", seed, _sym_fusion(alpha))
            rep = _per_seed_eval([(seed, spec)], sub)
            per_seed.append(rep.driving_score)
        scores[alpha] = per_seed
    table = ["alpha," + ",".join(f"seed_{s}" for s in seeds)]
    for alpha in alphas:
        table.append(repr(alpha) + "," + ",".join(repr(v)
                                                  for v in scores[alpha]))
    (out_dir / "alpha_sweep.csv").write_text("\n".join(table) + "\n")
    from .plots import box_plot_svg
    (out_dir / "alpha_sweep.svg").write_text(
        box_plot_svg(scores, title="driving score vs fusion weight"))
    return scores


def run_study(name: str, settings: StudySettings, out_dir) -> dict:
    out = Path(out_dir)
    if name == "CtlVsTraj":
        return ctl_vs_traj_study(settings, out)
    if name == "Components":
        return components_study(settings, out)
    if name == "MtlVsEnsemble":
        return mtl_vs_ensemble_study(settings, out)
    if name == "AlphaSweep":
        return alpha_sweep_study(settings, out)
    raise ValueError(f"unknown study {name!r}; choose from {STUDIES}")
