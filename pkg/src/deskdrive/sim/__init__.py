"""Deterministic 2D closed-loop driving world."""

from .routes import (  # noqa: F401
    ROUTE_SCHEMA,
    LightDef,
    RouteMap,
    RouteSpec,
    build_route_map,
    get_route_spec,
    route_map_to_json,
    route_spec_from_json,
    splice_arc,
    stock_route_names,
)
from .scenarios import (  # noqa: F401
    ScenarioKind,
    ScenarioSpec,
    SpawnConflict,
    build_scenario_world,
    default_scenario,
    spawn_scenario,
)
from .world import (  # noqa: F401
    Agent,
    AgentKind,
    EgoState,
    EpisodeTerminated,
    InfractionEvent,
    InfractionKind,
    Light,
    LightState,
    SimConfig,
    TERMINAL_KINDS,
    VehicleParams,
    WorldState,
    detect_infractions,
    make_world,
    route_complete,
    route_progress,
    run_policy_step,
    step_dynamics,
    world_digest,
    world_tick,
)
