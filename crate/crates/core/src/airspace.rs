//! Waypoints, routes, scenarios and the randomized scenario generator.
//!
//! Generated layouts always contain exactly two merge waypoints and one
//! intersection waypoint. Feeder routes fan out upstream of each merge and
//! share every waypoint from the merge onward; the two trunks cross at the
//! intersection and share nothing else.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use libm::{cos, sin, sqrt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{AgentConfig, AgentState};
use crate::geo::{haversine_distance, GeoPosition};
use crate::rules::RuleParams;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum WaypointKind {
    Merge,
    Intersection,
    Ordinary,
    Terminal,
}

impl WaypointKind {
    pub fn as_str(self) -> &'static str {
        match self {
            WaypointKind::Merge => "Merge",
            WaypointKind::Intersection => "Intersection",
            WaypointKind::Ordinary => "Ordinary",
            WaypointKind::Terminal => "Terminal",
        }
    }
}

impl fmt::Display for WaypointKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub id: String,
    pub position: GeoPosition,
    pub kind: WaypointKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Route {
    pub id: String,
    /// Waypoint ids from entry to exit.
    pub waypoints: Vec<String>,
}

impl Route {
    pub fn entry(&self) -> Option<&str> {
        self.waypoints.first().map(String::as_str)
    }

    pub fn exit(&self) -> Option<&str> {
        self.waypoints.last().map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpawnEntry {
    pub agent_id: String,
    pub class_name: String,
    pub route_id: String,
    pub spawn_time_s: f64,
    pub desired_speed_mps: f64,
    pub altitude_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub seed: u64,
    /// Vehicle class table referenced by `spawn_plan[..].class_name`.
    pub classes: Vec<AgentConfig>,
    pub waypoints: Vec<Waypoint>,
    pub routes: Vec<Route>,
    pub spawn_plan: Vec<SpawnEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rule_params: Option<RuleParams>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScenarioError {
    #[error("invalid parameter `{param}`: {reason}")]
    Param { param: &'static str, reason: String },
    #[error("could not place non-overlapping routes after {0} attempts")]
    Layout(u32),
    #[error("duplicate waypoint id {0}")]
    DuplicateWaypoint(String),
    #[error("duplicate route id {0}")]
    DuplicateRoute(String),
    #[error("duplicate agent id {0}")]
    DuplicateAgent(String),
    #[error("route {route} references unknown waypoint {waypoint}")]
    UnknownWaypoint { route: String, waypoint: String },
    #[error("route {0} needs at least two waypoints")]
    ShortRoute(String),
    #[error("route {route}: consecutive waypoints {a} and {b} coincide")]
    DegenerateLeg { route: String, a: String, b: String },
    #[error("spawn {agent} references unknown {what} {name}")]
    UnknownSpawnRef {
        agent: String,
        what: &'static str,
        name: String,
    },
    #[error("spawn {agent}: desired speed {speed} outside [{v_min}, {v_max}]")]
    DesiredSpeed {
        agent: String,
        speed: f64,
        v_min: f64,
        v_max: f64,
    },
    #[error("scenario has {merges} merge and {intersections} intersection waypoints shared among routes; need 2 and 1")]
    Bottlenecks { merges: usize, intersections: usize },
    #[error(transparent)]
    Config(#[from] crate::agent::ConfigError),
}

fn param_err(param: &'static str, reason: impl Into<String>) -> ScenarioError {
    ScenarioError::Param {
        param,
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MergeLayout {
    /// Two trunks, each fed by its own merge, crossing at the intersection.
    SeparatePairs,
    /// Both merges sit on the same trunk; a single crossing route meets it at
    /// the intersection.
    Chained,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AgentCount {
    PerRoute(u32),
    Total { min: u32, max: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioParams {
    pub route_count: (u32, u32),
    pub agents: AgentCount,
    /// `(class name, weight)`; names must exist in `classes`.
    pub class_mix: Vec<(String, f64)>,
    /// Draw one class per route instead of one per agent.
    pub class_per_route: bool,
    pub classes: Vec<AgentConfig>,
    pub spawn_window_s: (f64, f64),
    pub min_headway_s: f64,
    pub leg_length_m: (f64, f64),
    pub legs_per_route: (u32, u32),
    pub center: (f64, f64),
    /// Half-width of the square every waypoint must fall in, meters.
    pub box_half_width_m: f64,
    pub merge_layout: MergeLayout,
    pub crossing_angle_deg: (f64, f64),
    /// Desired speed is drawn from `[lo, hi] * v_max`.
    pub desired_speed_fraction: (f64, f64),
    pub altitude_m: (f64, f64),
    /// Minimum distance between route segments that share no waypoint.
    pub min_route_clearance_m: f64,
    /// Enforce 4-6 routes and 20-30 agents (or 5 per route).
    pub standard_ranges: bool,
}

impl Default for ScenarioParams {
    fn default() -> Self {
        Self {
            route_count: (4, 6),
            agents: AgentCount::Total { min: 20, max: 30 },
            class_mix: alloc::vec![("X".into(), 0.5), ("Y".into(), 0.5)],
            class_per_route: false,
            classes: alloc::vec![AgentConfig::class_x(), AgentConfig::class_y()],
            spawn_window_s: (0.0, 120.0),
            min_headway_s: 10.0,
            leg_length_m: (2000.0, 6000.0),
            legs_per_route: (3, 6),
            center: (33.13, -96.86),
            box_half_width_m: 30_000.0,
            merge_layout: MergeLayout::SeparatePairs,
            crossing_angle_deg: (50.0, 80.0),
            desired_speed_fraction: (0.6, 0.95),
            altitude_m: (330.0, 400.0),
            min_route_clearance_m: 800.0,
            standard_ranges: true,
        }
    }
}

impl ScenarioParams {
    /// Closed-loop evaluation layout: a fixed route count with five agents
    /// on every route.
    pub fn evaluation(routes: u32) -> Self {
        Self {
            route_count: (routes, routes),
            agents: AgentCount::PerRoute(5),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let (rmin, rmax) = self.route_count;
        if rmin > rmax {
            return Err(param_err("routes", "min exceeds max"));
        }
        if rmin < 4 {
            return Err(param_err(
                "routes",
                format!("{rmin} routes cannot host two merges and an intersection; need at least 4"),
            ));
        }
        if rmax > 6 {
            return Err(param_err("routes", format!("{rmax} routes exceeds the supported maximum of 6")));
        }
        match self.agents {
            AgentCount::PerRoute(n) => {
                if n == 0 {
                    return Err(param_err("agents-per-route", "must be positive"));
                }
                if self.standard_ranges && n != 5 {
                    return Err(param_err(
                        "agents-per-route",
                        "evaluation scenarios host 5 agents per route",
                    ));
                }
            }
            AgentCount::Total { min, max } => {
                if min > max || min == 0 {
                    return Err(param_err("agents", "need 0 < min <= max"));
                }
                if self.standard_ranges && (min < 20 || max > 30) {
                    return Err(param_err("agents", "dataset scenarios carry 20-30 agents"));
                }
                if min < rmax {
                    return Err(param_err("agents", "need at least one agent per route"));
                }
            }
        }
        if self.classes.is_empty() {
            return Err(param_err("classes", "empty class table"));
        }
        for c in &self.classes {
            c.validate()?;
        }
        if self.class_mix.is_empty() {
            return Err(param_err("class-mix", "empty"));
        }
        for (name, w) in &self.class_mix {
            if !self.classes.iter().any(|c| &c.class_name == name) {
                return Err(param_err("class-mix", format!("unknown class {name}")));
            }
            if !(w.is_finite() && *w >= 0.0) {
                return Err(param_err("class-mix", "weights must be finite and nonnegative"));
            }
        }
        if self.class_mix.iter().map(|(_, w)| *w).sum::<f64>() <= 0.0 {
            return Err(param_err("class-mix", "weights sum to zero"));
        }
        let (w0, w1) = self.spawn_window_s;
        if !(w0.is_finite() && w1.is_finite() && w0 >= 0.0 && w0 <= w1) {
            return Err(param_err("spawn-window", "need 0 <= start <= end"));
        }
        if !(self.min_headway_s >= 0.0) {
            return Err(param_err("min-headway", "must be nonnegative"));
        }
        let (l0, l1) = self.leg_length_m;
        if !(l0 > 0.0 && l0 <= l1) {
            return Err(param_err("leg-length", "need 0 < min <= max"));
        }
        let (g0, g1) = self.legs_per_route;
        if g0 > g1 || g1 < 3 {
            return Err(param_err("legs-per-route", "need min <= max and max >= 3"));
        }
        let (c0, c1) = self.crossing_angle_deg;
        if !(c0 >= 20.0 && c0 <= c1 && c1 <= 90.0) {
            return Err(param_err("crossing-angle", "need 20 <= min <= max <= 90 degrees"));
        }
        let (f0, f1) = self.desired_speed_fraction;
        if !(f0 > 0.0 && f0 <= f1 && f1 <= 1.0) {
            return Err(param_err("desired-speed-fraction", "need 0 < lo <= hi <= 1"));
        }
        let (a0, a1) = self.altitude_m;
        if !(a0 >= 0.0 && a0 <= a1) {
            return Err(param_err("altitude", "need 0 <= lo <= hi"));
        }
        if !(self.box_half_width_m > 0.0) {
            return Err(param_err("box", "must be positive"));
        }
        Ok(())
    }
}

type Vec2 = (f64, f64);

fn rotate(v: Vec2, deg: f64) -> Vec2 {
    let r = deg.to_radians();
    let (s, c) = (sin(r), cos(r));
    (v.0 * c - v.1 * s, v.0 * s + v.1 * c)
}

fn add(a: Vec2, b: Vec2) -> Vec2 {
    (a.0 + b.0, a.1 + b.1)
}

fn scale(a: Vec2, k: f64) -> Vec2 {
    (a.0 * k, a.1 * k)
}

fn segment_distance(a: Vec2, b: Vec2, c: Vec2, d: Vec2) -> f64 {
    fn point_seg(p: Vec2, a: Vec2, b: Vec2) -> f64 {
        let ab = (b.0 - a.0, b.1 - a.1);
        let ap = (p.0 - a.0, p.1 - a.1);
        let len2 = ab.0 * ab.0 + ab.1 * ab.1;
        let t = if len2 > 0.0 {
            ((ap.0 * ab.0 + ap.1 * ab.1) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let q = (a.0 + t * ab.0 - p.0, a.1 + t * ab.1 - p.1);
        sqrt(q.0 * q.0 + q.1 * q.1)
    }
    fn cross(o: Vec2, a: Vec2, b: Vec2) -> f64 {
        (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
    }
    let d1 = cross(c, d, a);
    let d2 = cross(c, d, b);
    let d3 = cross(a, b, c);
    let d4 = cross(a, b, d);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return 0.0;
    }
    point_seg(a, c, d)
        .min(point_seg(b, c, d))
        .min(point_seg(c, a, b))
        .min(point_seg(d, a, b))
}

struct LayoutBuilder {
    points: Vec<(Vec2, WaypointKind)>,
    routes: Vec<Vec<usize>>,
}

impl LayoutBuilder {
    fn point(&mut self, p: Vec2, kind: WaypointKind) -> usize {
        self.points.push((p, kind));
        self.points.len() - 1
    }
}

/// Feeder fan angles, degrees away from the trunk line.
const SEPARATE_FANS: [f64; 3] = [0.0, 30.0, 55.0];
const CHAINED_UPSTREAM_FANS: [f64; 3] = [0.0, 28.0, 50.0];
const CHAINED_DOWNSTREAM_FANS: [f64; 2] = [72.0, 88.0];
const FAN_JITTER_DEG: f64 = 4.0;
const MAX_BEND_DEG: f64 = 8.0;
const LAYOUT_ATTEMPTS: u32 = 200;

fn draw_layout(
    params: &ScenarioParams,
    n_routes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<LayoutBuilder, ScenarioError> {
    let (l0, l1) = params.leg_length_m;
    let leg = |rng: &mut ChaCha8Rng| if l1 > l0 { rng.random_range(l0..=l1) } else { l0 };
    let (g0, g1) = (params.legs_per_route.0 as usize, params.legs_per_route.1 as usize);

    let theta0: f64 = rng.random_range(0.0..360.0);
    let (c0, c1) = params.crossing_angle_deg;
    let phi: f64 = if c1 > c0 { rng.random_range(c0..=c1) } else { c0 };
    let dir_a = rotate((1.0, 0.0), theta0);
    let dir_b = rotate(dir_a, phi);

    let mut b = LayoutBuilder {
        points: Vec::new(),
        routes: Vec::new(),
    };

    // Feeder: walk upstream from `start` and return the waypoint chain in
    // flight order (entry first, `start` excluded).
    let feeder = |b: &mut LayoutBuilder,
                      rng: &mut ChaCha8Rng,
                      start: Vec2,
                      upstream: Vec2,
                      fan_deg: f64,
                      side: f64,
                      tail_legs: usize|
     -> Result<Vec<usize>, ScenarioError> {
        let lo = g0.saturating_sub(tail_legs).max(1);
        let hi = g1.saturating_sub(tail_legs);
        if hi < lo {
            return Err(param_err(
                "legs-per-route",
                format!("cannot fit a feeder in front of {tail_legs} trunk legs"),
            ));
        }
        let k = rng.random_range(lo..=hi);
        let jitter: f64 = if fan_deg > 0.0 {
            rng.random_range(-FAN_JITTER_DEG..=FAN_JITTER_DEG)
        } else {
            0.0
        };
        let mut dir = rotate(upstream, side * (fan_deg + jitter));
        let mut p = start;
        let mut chain = Vec::with_capacity(k);
        for i in 0..k {
            if i > 0 {
                let bend: f64 = rng.random_range(0.0..=MAX_BEND_DEG);
                dir = rotate(dir, side * bend);
            }
            p = add(p, scale(dir, leg(rng)));
            let kind = if i + 1 == k {
                WaypointKind::Terminal
            } else {
                WaypointKind::Ordinary
            };
            chain.push(b.point(p, kind));
        }
        chain.reverse();
        Ok(chain)
    };

    let neg = |v: Vec2| (-v.0, -v.1);
    let inter = b.point((0.0, 0.0), WaypointKind::Intersection);
    match params.merge_layout {
        MergeLayout::SeparatePairs => {
            let n_a = n_routes.div_ceil(2);
            let n_b = n_routes - n_a;
            let m1 = b.point(scale(dir_a, -leg(rng)), WaypointKind::Merge);
            let m2 = b.point(scale(dir_b, -leg(rng)), WaypointKind::Merge);
            let exit_a = b.point(scale(dir_a, leg(rng)), WaypointKind::Terminal);
            let exit_b = b.point(scale(dir_b, leg(rng)), WaypointKind::Terminal);
            for (merge, exit, upstream, side, count) in [
                (m1, exit_a, neg(dir_a), -1.0, n_a),
                (m2, exit_b, neg(dir_b), 1.0, n_b),
            ] {
                for &fan in SEPARATE_FANS.iter().take(count) {
                    let start = b.points[merge].0;
                    let mut r = feeder(&mut b, rng, start, upstream, fan, side, 2)?;
                    r.extend([merge, inter, exit]);
                    b.routes.push(r);
                }
            }
        }
        MergeLayout::Chained => {
            let rest = n_routes - 1;
            let n_up = rest.div_ceil(2).max(2);
            let n_down = rest - n_up;
            let d2 = leg(rng);
            let m2 = b.point(scale(dir_a, -d2), WaypointKind::Merge);
            let m1 = b.point(scale(dir_a, -(d2 + leg(rng))), WaypointKind::Merge);
            let exit_a = b.point(scale(dir_a, leg(rng)), WaypointKind::Terminal);
            let exit_b = b.point(scale(dir_b, leg(rng)), WaypointKind::Terminal);
            for &fan in CHAINED_UPSTREAM_FANS.iter().take(n_up) {
                let start = b.points[m1].0;
                let mut r = feeder(&mut b, rng, start, neg(dir_a), fan, -1.0, 3)?;
                r.extend([m1, m2, inter, exit_a]);
                b.routes.push(r);
            }
            for &fan in CHAINED_DOWNSTREAM_FANS.iter().take(n_down) {
                let start = b.points[m2].0;
                let mut r = feeder(&mut b, rng, start, neg(dir_a), fan, -1.0, 2)?;
                r.extend([m2, inter, exit_a]);
                b.routes.push(r);
            }
            let mut r = feeder(&mut b, rng, (0.0, 0.0), neg(dir_b), 0.0, 1.0, 1)?;
            r.extend([inter, exit_b]);
            b.routes.push(r);
        }
    }
    Ok(b)
}

fn layout_is_clear(b: &LayoutBuilder, params: &ScenarioParams) -> bool {
    let h = params.box_half_width_m;
    if b.points.iter().any(|(p, _)| p.0.abs() > h || p.1.abs() > h) {
        return false;
    }
    let mut segs: Vec<(usize, usize)> = Vec::new();
    for r in &b.routes {
        for w in r.windows(2) {
            let s = (w[0], w[1]);
            if !segs.contains(&s) {
                segs.push(s);
            }
        }
    }
    for (i, &(a, bb)) in segs.iter().enumerate() {
        for &(c, d) in &segs[i + 1..] {
            if a == c || a == d || bb == c || bb == d {
                continue;
            }
            let dist = segment_distance(b.points[a].0, b.points[bb].0, b.points[c].0, b.points[d].0);
            if dist < params.min_route_clearance_m {
                return false;
            }
        }
    }
    true
}

fn route_letter(i: usize) -> char {
    (b'A' + (i % 26) as u8) as char
}

/// Deterministic scenario generation: the output is a pure function of
/// `(params, seed)`.
pub fn generate_scenario(params: &ScenarioParams, seed: u64) -> Result<Scenario, ScenarioError> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed::combine(&[0x5CE7_A410, seed]));
    let (rmin, rmax) = params.route_count;
    let n_routes = rng.random_range(rmin..=rmax) as usize;

    let mut layout = None;
    for _ in 0..LAYOUT_ATTEMPTS {
        let b = draw_layout(params, n_routes, &mut rng)?;
        if layout_is_clear(&b, params) {
            layout = Some(b);
            break;
        }
    }
    let layout = layout.ok_or(ScenarioError::Layout(LAYOUT_ATTEMPTS))?;

    let center = GeoPosition::new(params.center.0, params.center.1, 0.0);
    let waypoints: Vec<Waypoint> = layout
        .points
        .iter()
        .enumerate()
        .map(|(i, (p, kind))| Waypoint {
            id: format!("WP{}", i + 1),
            position: center.offset(p.0, p.1),
            kind: *kind,
        })
        .collect();
    let routes: Vec<Route> = layout
        .routes
        .iter()
        .enumerate()
        .map(|(i, r)| Route {
            id: format!("R_{}", i + 1),
            waypoints: r.iter().map(|&w| waypoints[w].id.clone()).collect(),
        })
        .collect();

    let spawn_plan = draw_spawn_plan(params, &routes, &mut rng)?;
    let scenario = Scenario {
        seed,
        classes: params.classes.clone(),
        waypoints,
        routes,
        spawn_plan,
        rule_params: None,
    };
    scenario.validate()?;
    Ok(scenario)
}

fn pick_class<'a>(params: &'a ScenarioParams, total_weight: f64, rng: &mut ChaCha8Rng) -> &'a String {
    let mut pick = rng.random_range(0.0..total_weight);
    for (name, w) in &params.class_mix {
        if pick < *w {
            return name;
        }
        pick -= w;
    }
    &params.class_mix[params.class_mix.len() - 1].0
}

fn draw_spawn_plan(
    params: &ScenarioParams,
    routes: &[Route],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<SpawnEntry>, ScenarioError> {
    let (w0, w1) = params.spawn_window_s;
    let headway = params.min_headway_s;
    let max_per_route = if headway > 0.0 {
        ((w1 - w0) / headway) as u32 + 1
    } else {
        u32::MAX
    };
    let counts: Vec<u32> = match params.agents {
        AgentCount::PerRoute(n) => alloc::vec![n; routes.len()],
        AgentCount::Total { min, max } => {
            let total = rng.random_range(min..=max);
            let mut counts = alloc::vec![1u32; routes.len()];
            let mut left = total.saturating_sub(routes.len() as u32);
            let capacity: u32 = counts.iter().map(|c| max_per_route.saturating_sub(*c)).sum();
            if left > capacity {
                return Err(param_err("agents", "too many agents for the spawn window and headway"));
            }
            while left > 0 {
                let r = rng.random_range(0..routes.len());
                if counts[r] < max_per_route {
                    counts[r] += 1;
                    left -= 1;
                }
            }
            counts
        }
    };
    if counts.iter().any(|&c| c > max_per_route) {
        return Err(param_err(
            "min-headway",
            "spawn window too short for the requested agents at this headway",
        ));
    }

    let total_weight: f64 = params.class_mix.iter().map(|(_, w)| *w).sum();
    let mut plan = Vec::new();
    for (ri, (route, &n)) in routes.iter().zip(&counts).enumerate() {
        let slack = (w1 - w0) - headway * f64::from(n.saturating_sub(1));
        let mut offsets: Vec<f64> = (0..n)
            .map(|_| if slack > 0.0 { rng.random_range(0.0..=slack) } else { 0.0 })
            .collect();
        offsets.sort_by(f64::total_cmp);
        let route_class = pick_class(params, total_weight, rng);
        for (j, off) in offsets.into_iter().enumerate() {
            let class = if params.class_per_route {
                route_class
            } else {
                pick_class(params, total_weight, rng)
            };
            let config = params
                .classes
                .iter()
                .find(|c| &c.class_name == class)
                .expect("class_mix validated against classes");
            let (f0, f1) = params.desired_speed_fraction;
            let frac = if f1 > f0 { rng.random_range(f0..=f1) } else { f0 };
            let desired = (frac * config.v_max_mps).clamp(config.v_min_mps, config.v_max_mps);
            let (a0, a1) = params.altitude_m;
            let altitude = if a1 > a0 { rng.random_range(a0..=a1) } else { a0 };
            plan.push(SpawnEntry {
                agent_id: format!("{}{:02}", route_letter(ri), j + 1),
                class_name: class.clone(),
                route_id: route.id.clone(),
                spawn_time_s: w0 + off + headway * j as f64,
                desired_speed_mps: desired,
                altitude_m: altitude,
            });
        }
    }
    plan.sort_by(|a, b| {
        a.spawn_time_s
            .total_cmp(&b.spawn_time_s)
            .then_with(|| a.agent_id.cmp(&b.agent_id))
    });
    Ok(plan)
}

impl Scenario {
    pub fn waypoint(&self, id: &str) -> Option<&Waypoint> {
        self.waypoints.iter().find(|w| w.id == id)
    }

    pub fn route(&self, id: &str) -> Option<&Route> {
        self.routes.iter().find(|r| r.id == id)
    }

    pub fn class(&self, name: &str) -> Option<&AgentConfig> {
        self.classes.iter().find(|c| c.class_name == name)
    }

    /// Merge and intersection waypoints used by at least two routes.
    pub fn shared_waypoints(&self) -> Vec<&Waypoint> {
        self.waypoints
            .iter()
            .filter(|w| matches!(w.kind, WaypointKind::Merge | WaypointKind::Intersection))
            .filter(|w| self.routes.iter().filter(|r| r.waypoints.contains(&w.id)).count() >= 2)
            .collect()
    }

    /// Structural checks: ids, references, degenerate legs, speeds and the
    /// two-merge/one-intersection bottleneck structure.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        for c in &self.classes {
            c.validate()?;
        }
        let mut seen = BTreeMap::new();
        for w in &self.waypoints {
            if seen.insert(w.id.as_str(), ()).is_some() {
                return Err(ScenarioError::DuplicateWaypoint(w.id.clone()));
            }
        }
        let mut seen_routes = BTreeMap::new();
        for r in &self.routes {
            if seen_routes.insert(r.id.as_str(), ()).is_some() {
                return Err(ScenarioError::DuplicateRoute(r.id.clone()));
            }
            if r.waypoints.len() < 2 {
                return Err(ScenarioError::ShortRoute(r.id.clone()));
            }
            for w in &r.waypoints {
                if !seen.contains_key(w.as_str()) {
                    return Err(ScenarioError::UnknownWaypoint {
                        route: r.id.clone(),
                        waypoint: w.clone(),
                    });
                }
            }
            for pair in r.waypoints.windows(2) {
                let a = self.waypoint(&pair[0]).expect("checked");
                let b = self.waypoint(&pair[1]).expect("checked");
                if haversine_distance(a.position, b.position) <= 0.0 {
                    return Err(ScenarioError::DegenerateLeg {
                        route: r.id.clone(),
                        a: a.id.clone(),
                        b: b.id.clone(),
                    });
                }
            }
        }
        let mut agents = BTreeMap::new();
        for s in &self.spawn_plan {
            if agents.insert(s.agent_id.as_str(), ()).is_some() {
                return Err(ScenarioError::DuplicateAgent(s.agent_id.clone()));
            }
            let class = self.class(&s.class_name).ok_or_else(|| ScenarioError::UnknownSpawnRef {
                agent: s.agent_id.clone(),
                what: "class",
                name: s.class_name.clone(),
            })?;
            if self.route(&s.route_id).is_none() {
                return Err(ScenarioError::UnknownSpawnRef {
                    agent: s.agent_id.clone(),
                    what: "route",
                    name: s.route_id.clone(),
                });
            }
            if !(s.desired_speed_mps >= class.v_min_mps && s.desired_speed_mps <= class.v_max_mps) {
                return Err(ScenarioError::DesiredSpeed {
                    agent: s.agent_id.clone(),
                    speed: s.desired_speed_mps,
                    v_min: class.v_min_mps,
                    v_max: class.v_max_mps,
                });
            }
        }
        let shared = self.shared_waypoints();
        let merges = shared.iter().filter(|w| w.kind == WaypointKind::Merge).count();
        let intersections = shared
            .iter()
            .filter(|w| w.kind == WaypointKind::Intersection)
            .count();
        if merges != 2 || intersections != 1 {
            return Err(ScenarioError::Bottlenecks {
                merges,
                intersections,
            });
        }
        Ok(())
    }
}

/// A route with positions and leg lengths resolved.
#[derive(Debug, Clone)]
pub struct ResolvedRoute {
    pub id: String,
    pub waypoint_ids: Vec<String>,
    pub kinds: Vec<WaypointKind>,
    pub positions: Vec<GeoPosition>,
    /// `to_exit[i]`: path length from waypoint `i` to the exit.
    pub to_exit: Vec<f64>,
}

impl ResolvedRoute {
    pub fn len(&self) -> usize {
        self.waypoint_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.waypoint_ids.is_empty()
    }

    pub fn waypoint_position(&self, i: usize) -> Option<GeoPosition> {
        self.positions.get(i).copied()
    }

    pub fn arclength(&self) -> f64 {
        self.to_exit.first().copied().unwrap_or(0.0)
    }

    /// Path length from waypoint `from` to waypoint `to` (`from <= to`).
    pub fn path_between(&self, from: usize, to: usize) -> f64 {
        self.to_exit[from] - self.to_exit[to]
    }

    pub fn index_of(&self, waypoint_id: &str) -> Option<usize> {
        self.waypoint_ids.iter().position(|w| w == waypoint_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum RouteError {
    #[error("route completed")]
    Completed,
    #[error("unknown route")]
    UnknownRoute,
}

/// Scenario plus precomputed route geometry.
#[derive(Debug, Clone)]
pub struct Airspace {
    pub scenario: Scenario,
    routes: Vec<ResolvedRoute>,
    route_index: BTreeMap<String, usize>,
}

impl Airspace {
    pub fn new(scenario: Scenario) -> Result<Self, ScenarioError> {
        scenario.validate()?;
        Ok(Self::new_unchecked(scenario))
    }

    /// Resolve geometry without the bottleneck-structure check. Route and
    /// waypoint references must still be valid.
    pub fn new_unchecked(scenario: Scenario) -> Self {
        let mut routes = Vec::with_capacity(scenario.routes.len());
        let mut route_index = BTreeMap::new();
        for (i, r) in scenario.routes.iter().enumerate() {
            let wps: Vec<&Waypoint> = r
                .waypoints
                .iter()
                .map(|id| scenario.waypoint(id).expect("route references known waypoints"))
                .collect();
            let positions: Vec<GeoPosition> = wps.iter().map(|w| w.position).collect();
            let mut to_exit = alloc::vec![0.0; positions.len()];
            for k in (0..positions.len().saturating_sub(1)).rev() {
                to_exit[k] = to_exit[k + 1] + haversine_distance(positions[k], positions[k + 1]);
            }
            routes.push(ResolvedRoute {
                id: r.id.clone(),
                waypoint_ids: r.waypoints.clone(),
                kinds: wps.iter().map(|w| w.kind).collect(),
                positions,
                to_exit,
            });
            route_index.insert(r.id.clone(), i);
        }
        Self {
            scenario,
            routes,
            route_index,
        }
    }

    pub fn route(&self, id: &str) -> Option<&ResolvedRoute> {
        self.route_index.get(id).map(|&i| &self.routes[i])
    }

    pub fn routes(&self) -> &[ResolvedRoute] {
        &self.routes
    }

    pub fn class(&self, name: &str) -> Option<&AgentConfig> {
        self.scenario.class(name)
    }

    pub fn waypoint_kind(&self, id: &str) -> Option<WaypointKind> {
        self.scenario.waypoint(id).map(|w| w.kind)
    }
}

/// Great-circle distance from the agent to the next waypoint on its route.
pub fn distance_to_next_waypoint(state: &AgentState, airspace: &Airspace) -> Result<f64, RouteError> {
    let route = airspace.route(&state.route_id).ok_or(RouteError::UnknownRoute)?;
    if state.completed {
        return Err(RouteError::Completed);
    }
    let next = route
        .waypoint_position(state.leg_index + 1)
        .ok_or(RouteError::Completed)?;
    Ok(haversine_distance(state.position, next))
}

/// Id of the next waypoint, if the route is not yet completed.
pub fn next_waypoint_id<'a>(state: &AgentState, airspace: &'a Airspace) -> Option<&'a str> {
    if state.completed {
        return None;
    }
    airspace
        .route(&state.route_id)?
        .waypoint_ids
        .get(state.leg_index + 1)
        .map(String::as_str)
}

/// Merge partners: route ids that share `route`'s merge waypoint.
pub fn merge_partners(scenario: &Scenario, route: &Route) -> Vec<String> {
    let merges: Vec<&String> = route
        .waypoints
        .iter()
        .filter(|w| scenario.waypoint(w).map(|w| w.kind) == Some(WaypointKind::Merge))
        .collect();
    scenario
        .routes
        .iter()
        .filter(|r| r.id != route.id && merges.iter().any(|m| r.waypoints.contains(m)))
        .map(|r| r.id.to_string())
        .collect()
}
