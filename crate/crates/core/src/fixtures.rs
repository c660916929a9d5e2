//! Small hand-built layouts and agent placement for tests and examples.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::agent::{Action, AgentConfig, AgentState, PolicyTag};
use crate::airspace::{Airspace, Route, Scenario, SpawnEntry, Waypoint, WaypointKind};
use crate::geo::{haversine_distance, initial_bearing, step_position, GeoPosition};

pub const CENTER: (f64, f64) = (33.13, -96.86);

fn wp(id: &str, east_m: f64, north_m: f64, kind: WaypointKind) -> Waypoint {
    Waypoint {
        id: id.into(),
        position: GeoPosition::new(CENTER.0, CENTER.1, 0.0).offset(east_m, north_m),
        kind,
    }
}

fn scenario(waypoints: Vec<Waypoint>, routes: Vec<(&str, Vec<&str>)>) -> Scenario {
    Scenario {
        seed: 0,
        classes: vec![AgentConfig::class_x(), AgentConfig::class_y()],
        waypoints,
        routes: routes
            .into_iter()
            .map(|(id, wps)| Route {
                id: id.into(),
                waypoints: wps.into_iter().map(String::from).collect(),
            })
            .collect(),
        spawn_plan: Vec::new(),
        rule_params: None,
    }
}

/// One route `R_1`: `WP0` → `WP1` (`leg_m` north) → `WP2` (`leg_m` further
/// north, terminal).
pub fn straight(leg_m: f64) -> Scenario {
    scenario(
        vec![
            wp("WP0", 0.0, 0.0, WaypointKind::Ordinary),
            wp("WP1", 0.0, leg_m, WaypointKind::Ordinary),
            wp("WP2", 0.0, 2.0 * leg_m, WaypointKind::Terminal),
        ],
        vec![("R_1", vec!["WP0", "WP1", "WP2"])],
    )
}

/// Two feeders meeting at merge `M` and sharing the leg to terminal `E`.
/// `R_1` enters from `S1`, 3 km south-west of `M`; `R_2` from `S2`, 3 km
/// south-east. `E` is 3 km north of `M`.
pub fn merge_pair() -> Scenario {
    let h = 3000.0 / core::f64::consts::SQRT_2;
    scenario(
        vec![
            wp("S1", -h, -h, WaypointKind::Ordinary),
            wp("S2", h, -h, WaypointKind::Ordinary),
            wp("M", 0.0, 0.0, WaypointKind::Merge),
            wp("E", 0.0, 3000.0, WaypointKind::Terminal),
        ],
        vec![("R_1", vec!["S1", "M", "E"]), ("R_2", vec!["S2", "M", "E"])],
    )
}

/// Two routes crossing at `X`: `R_1` south to north, `R_2` west to east,
/// each 3 km either side of `X`.
pub fn crossing() -> Scenario {
    scenario(
        vec![
            wp("N0", 0.0, -3000.0, WaypointKind::Ordinary),
            wp("N1", 0.0, 3000.0, WaypointKind::Terminal),
            wp("W0", -3000.0, 0.0, WaypointKind::Ordinary),
            wp("W1", 3000.0, 0.0, WaypointKind::Terminal),
            wp("X", 0.0, 0.0, WaypointKind::Intersection),
        ],
        vec![("R_1", vec!["N0", "X", "N1"]), ("R_2", vec!["W0", "X", "W1"])],
    )
}

/// A spawn entry for the fixture layouts.
pub fn spawn(agent_id: &str, class_name: &str, route_id: &str, t_s: f64, desired_mps: f64) -> SpawnEntry {
    SpawnEntry {
        agent_id: agent_id.into(),
        class_name: class_name.into(),
        route_id: route_id.into(),
        spawn_time_s: t_s,
        desired_speed_mps: desired_mps,
        altitude_m: 350.0,
    }
}

/// An agent of `config` on leg `leg` of `route_id`, `along_m` past the leg's
/// start, flying `speed_mps` with desired speed equal to it.
pub fn place(
    airspace: &Airspace,
    id: &str,
    config: AgentConfig,
    route_id: &str,
    leg: usize,
    along_m: f64,
    speed_mps: f64,
) -> AgentState {
    let route = airspace.route(route_id).expect("fixture route");
    let a = route.waypoint_position(leg).expect("leg start").with_alt(350.0);
    let b = route.waypoint_position(leg + 1).expect("leg end").with_alt(350.0);
    let heading = initial_bearing(a, b).unwrap_or(0.0);
    let position = step_position(a, heading, along_m.min(haversine_distance(a, b)), 1.0);
    AgentState {
        id: id.into(),
        config,
        position,
        speed_mps,
        heading_deg: initial_bearing(position, b).unwrap_or(heading),
        route_id: route_id.into(),
        leg_index: leg,
        desired_speed_mps: speed_mps,
        last_action: Action::Hold,
        spawned_at_s: 0.0,
        completed: false,
        completed_at_s: None,
        had_nmac: false,
        policy_tag: PolicyTag::RuleBased,
    }
}
