"""Driving-score metrics: DS = RC x IS with multiplicative penalties."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from ..sim.world import InfractionKind
from .episodes import EpisodeResult

# multiplicative penalty per event; blocked only truncates route completion
DEFAULT_PENALTIES = {
    InfractionKind.COLLISION_PEDESTRIAN: 0.50,
    InfractionKind.COLLISION_VEHICLE: 0.60,
    InfractionKind.COLLISION_LAYOUT: 0.65,
    InfractionKind.RED_LIGHT: 0.70,
    InfractionKind.OFF_ROAD: 0.95,
}

METRIC_KINDS = tuple(k for k in InfractionKind)


@dataclass
class EpisodeScore:
    result: EpisodeResult
    infraction_score: float
    driving_score: float


@dataclass
class SuiteReport:
    episodes: list[EpisodeScore]
    driving_score: float
    route_completion: float
    infraction_score: float
    per_km: dict
    turn_ratio: dict
    seed_means: dict          # seed -> mean driving score
    ds_mean: float
    ds_std: float

    def to_dict(self) -> dict:
        return {
            "driving_score": self.driving_score,
            "route_completion": self.route_completion,
            "infraction_score": self.infraction_score,
            "ds_mean_over_seeds": self.ds_mean,
            "ds_std_over_seeds": self.ds_std,
            "per_km": self.per_km,
            "turn_ratio": self.turn_ratio,
            "seed_means": {str(k): v for k, v in sorted(self.seed_means.items())},
            "episodes": [
                {**es.result.to_dict(),
                 "infraction_score": es.infraction_score,
                 "driving_score": es.driving_score}
                for es in self.episodes],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)


def episode_score(result: EpisodeResult,
                  penalties: dict = DEFAULT_PENALTIES) -> EpisodeScore:
    infraction = 1.0
    for ev in result.events:
        infraction *= penalties.get(ev.kind, 1.0)
    return EpisodeScore(result=result, infraction_score=infraction,
                        driving_score=result.route_completion * infraction)


def compute_metrics(results: list[EpisodeResult],
                    penalties: dict = DEFAULT_PENALTIES) -> SuiteReport:
    """Aggregate a batch of episodes into the standard report.

    Episodes are sorted by (route, scenario, seed) before aggregation so
    parallel evaluation cannot change the result.
    """
    if not results:
        raise ValueError("compute_metrics needs at least one result")
    ordered = sorted(results, key=lambda r: (r.route, r.scenario, r.seed))
    scores = [episode_score(r, penalties) for r in ordered]

    km = sum(r.distance_km for r in ordered)
    counts = {k: 0 for k in METRIC_KINDS}
    turning = {k: 0 for k in METRIC_KINDS}
    for r in ordered:
        for ev in r.events:
            counts[ev.kind] += 1
            if ev.ego_turning:
                turning[ev.kind] += 1
    per_km = {k.value: (counts[k] / km if km > 0 else 0.0)
              for k in METRIC_KINDS}
    turn_ratio = {k.value: (turning[k] / counts[k] if counts[k] else 0.0)
                  for k in METRIC_KINDS}

    by_seed: dict[int, list[float]] = {}
    for es in scores:
        by_seed.setdefault(es.result.seed, []).append(es.driving_score)
    seed_means = {s: float(np.mean(v)) for s, v in by_seed.items()}
    means = [seed_means[s] for s in sorted(seed_means)]
    ds_mean = float(np.mean(means))
    ds_std = float(np.std(means))

    return SuiteReport(
        episodes=scores,
        driving_score=float(np.mean([es.driving_score for es in scores])),
        route_completion=float(np.mean([es.result.route_completion
                                        for es in scores])),
        infraction_score=float(np.mean([es.infraction_score
                                        for es in scores])),
        per_km=per_km, turn_ratio=turn_ratio, seed_means=seed_means,
        ds_mean=ds_mean, ds_std=ds_std)
