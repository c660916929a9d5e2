//! Intruder detection, front/behind classification, time-to-collision and
//! NMAC bookkeeping.
//!
//! Two agents interact through their *conflict waypoint*: the first waypoint
//! on the ownship's remaining route that is also on the intruder's remaining
//! route. The agent with less path left to that waypoint is in front. For
//! agents sharing a leg this is the along-track order; for agents converging
//! on a merge or the intersection it is the order of arrival distance.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::agent::{Action, AgentState};
use crate::airspace::Airspace;
use crate::geo::haversine_distance;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SensingParams {
    /// How many front intruders an observation carries.
    pub front_k: usize,
    /// Report the closest behind intruder as well.
    pub include_rear: bool,
    /// Converging agents on different legs only get a finite TTC when their
    /// arrival times at the conflict waypoint differ by at most this much.
    pub ttc_arrival_window_s: f64,
}

impl Default for SensingParams {
    fn default() -> Self {
        Self {
            front_k: 2,
            include_rear: false,
            ttc_arrival_window_s: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConflictPoint {
    pub waypoint_id: String,
    /// Remaining path from the ownship to the waypoint.
    pub own_path_m: f64,
    /// Remaining path from the intruder to the waypoint.
    pub intruder_path_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntruderView {
    pub intruder_id: String,
    pub distance_m: f64,
    /// Both agents fly the same leg (same previous and next waypoint).
    pub same_route: bool,
    pub is_front: bool,
    pub is_behind: bool,
    pub intruder_speed_mps: f64,
    pub intruder_dist_to_wp_m: f64,
    pub intruder_last_action: Action,
    pub ttc_s: f64,
    pub conflict: Option<ConflictPoint>,
}

struct RouteProgress<'a> {
    route: &'a crate::airspace::ResolvedRoute,
    next: usize,
    dist_to_next: f64,
}

fn progress<'a>(s: &AgentState, airspace: &'a Airspace) -> Option<RouteProgress<'a>> {
    if s.completed {
        return None;
    }
    let route = airspace.route(&s.route_id)?;
    let next = s.leg_index + 1;
    let pos = route.waypoint_position(next)?;
    Some(RouteProgress {
        route,
        next,
        dist_to_next: haversine_distance(s.position, pos),
    })
}

fn conflict_point(own: &RouteProgress<'_>, other: &RouteProgress<'_>) -> Option<ConflictPoint> {
    for j in own.next..own.route.len() {
        let id = &own.route.waypoint_ids[j];
        if let Some(k) = other.route.index_of(id) {
            if k >= other.next {
                return Some(ConflictPoint {
                    waypoint_id: id.clone(),
                    own_path_m: own.dist_to_next + own.route.path_between(own.next, j),
                    intruder_path_m: other.dist_to_next + other.route.path_between(other.next, k),
                });
            }
        }
    }
    None
}

fn same_leg(own: &RouteProgress<'_>, other: &RouteProgress<'_>) -> bool {
    own.route.waypoint_ids[own.next] == other.route.waypoint_ids[other.next]
        && own.route.waypoint_ids[own.next - 1] == other.route.waypoint_ids[other.next - 1]
}

/// Active agents (other than `own`) within the ownship's sensing range,
/// nearest first.
pub fn detect_intruders(
    own: &AgentState,
    all: &[AgentState],
    airspace: &Airspace,
    params: &SensingParams,
) -> Vec<IntruderView> {
    let Some(own_prog) = progress(own, airspace) else {
        return Vec::new();
    };
    let range = own.config.sensing_range_m;
    let mut views: Vec<IntruderView> = all
        .iter()
        .filter(|o| o.id != own.id && o.is_active())
        .filter_map(|o| {
            let distance_m = haversine_distance(own.position, o.position);
            if distance_m > range {
                return None;
            }
            let prog = progress(o, airspace)?;
            let conflict = conflict_point(&own_prog, &prog);
            let is_front = conflict.as_ref().is_some_and(|c| {
                c.intruder_path_m < c.own_path_m
                    || (c.intruder_path_m == c.own_path_m && o.id < own.id)
            });
            let mut view = IntruderView {
                intruder_id: o.id.clone(),
                distance_m,
                same_route: same_leg(&own_prog, &prog),
                is_front,
                is_behind: conflict.is_some() && !is_front,
                intruder_speed_mps: o.speed_mps,
                intruder_dist_to_wp_m: prog.dist_to_next,
                intruder_last_action: o.last_action,
                ttc_s: f64::INFINITY,
                conflict,
            };
            view.ttc_s = time_to_collision(own.speed_mps, &view, params.ttc_arrival_window_s);
            Some(view)
        })
        .collect();
    views.sort_by(|a, b| {
        a.distance_m
            .total_cmp(&b.distance_m)
            .then_with(|| a.intruder_id.cmp(&b.intruder_id))
    });
    views
}

/// The `k` nearest front intruders. `views` must be sorted by distance.
pub fn closest_front_intruders(views: &[IntruderView], k: usize) -> Vec<IntruderView> {
    views.iter().filter(|v| v.is_front).take(k).cloned().collect()
}

/// The nearest intruder behind the ownship, if any.
pub fn closest_rear_intruder(views: &[IntruderView]) -> Option<IntruderView> {
    views.iter().find(|v| v.is_behind).cloned()
}

/// Seconds until the gap to `view` closes at the current speeds, or
/// `+inf` when it is not closing.
///
/// Same leg: along-track gap over the speed difference. Converging legs: the
/// pair only counts as closing when their arrival times at the conflict
/// waypoint overlap within `window_s`; the closing speed is then the sum of
/// the two speeds.
pub fn time_to_collision(own_speed_mps: f64, view: &IntruderView, window_s: f64) -> f64 {
    let Some(c) = &view.conflict else {
        return f64::INFINITY;
    };
    if view.same_route {
        let closing = if view.is_front {
            own_speed_mps - view.intruder_speed_mps
        } else {
            view.intruder_speed_mps - own_speed_mps
        };
        return if closing > 0.0 {
            view.distance_m / closing
        } else {
            f64::INFINITY
        };
    }
    let arrival = |path: f64, v: f64| if v > 0.0 { path / v } else { f64::INFINITY };
    let t_own = arrival(c.own_path_m, own_speed_mps);
    let t_int = arrival(c.intruder_path_m, view.intruder_speed_mps);
    if t_own.is_finite() && t_int.is_finite() && (t_own - t_int).abs() <= window_s {
        view.distance_m / (own_speed_mps + view.intruder_speed_mps)
    } else {
        f64::INFINITY
    }
}

/// Active pairs `(a, b)` with `a < b` whose horizontal separation is below
/// `threshold_m`.
pub fn nmac_pairs(states: &[AgentState], threshold_m: f64) -> Vec<(String, String)> {
    let active: Vec<&AgentState> = states.iter().filter(|s| s.is_active()).collect();
    let mut out = Vec::new();
    for (i, a) in active.iter().enumerate() {
        for b in &active[i + 1..] {
            if haversine_distance(a.position, b.position) < threshold_m {
                if a.id < b.id {
                    out.push((a.id.clone(), b.id.clone()));
                } else {
                    out.push((b.id.clone(), a.id.clone()));
                }
            }
        }
    }
    out.sort();
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NmacCounting {
    /// One event per continuous violation interval.
    PerInterval,
    /// One event per violating tick.
    PerTick,
}

/// Turns per-tick violating pairs into NMAC events.
#[derive(Debug, Clone)]
pub struct NmacTracker {
    threshold_m: f64,
    counting: NmacCounting,
    open: BTreeSet<(String, String)>,
}

impl NmacTracker {
    pub fn new(threshold_m: f64, counting: NmacCounting) -> Self {
        Self {
            threshold_m,
            counting,
            open: BTreeSet::new(),
        }
    }

    /// Feed the current snapshot; returns the pairs that count as new events.
    pub fn update(&mut self, states: &[AgentState]) -> Vec<(String, String)> {
        let now: BTreeSet<(String, String)> = nmac_pairs(states, self.threshold_m).into_iter().collect();
        let events = match self.counting {
            NmacCounting::PerTick => now.iter().cloned().collect(),
            NmacCounting::PerInterval => now.difference(&self.open).cloned().collect(),
        };
        self.open = now;
        events
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::AgentConfig;
    use crate::fixtures::{crossing, merge_pair, place, straight};
    use alloc::vec;

    fn views_for(own: &str, all: &[AgentState], air: &Airspace) -> Vec<IntruderView> {
        let me = all.iter().find(|a| a.id == own).unwrap();
        detect_intruders(me, all, air, &SensingParams::default())
    }

    #[test]
    fn same_leg_order_and_ttc() {
        let air = Airspace::new_unchecked(straight(3000.0));
        let x = AgentConfig::class_x();
        let lead = place(&air, "A01", x.clone(), "R_1", 0, 1400.0, 20.0);
        let follow = place(&air, "A02", x, "R_1", 0, 1000.0, 30.0);
        let all = vec![lead, follow];

        let v = views_for("A02", &all, &air);
        assert_eq!(v.len(), 1);
        assert!(v[0].is_front && v[0].same_route && !v[0].is_behind);
        assert!((v[0].distance_m - 400.0).abs() < 1e-3);
        assert!((v[0].ttc_s - v[0].distance_m / 10.0).abs() < 1e-9);

        let v = views_for("A01", &all, &air);
        assert!(v[0].is_behind && !v[0].is_front);
        // the follower closes from behind at 10 m/s
        assert!((v[0].ttc_s - v[0].distance_m / 10.0).abs() < 1e-9);
    }

    #[test]
    fn opening_gap_has_infinite_ttc() {
        let air = Airspace::new_unchecked(straight(3000.0));
        let x = AgentConfig::class_x();
        let all = vec![
            place(&air, "A01", x.clone(), "R_1", 0, 1400.0, 30.0),
            place(&air, "A02", x, "R_1", 0, 1000.0, 30.0),
        ];
        assert_eq!(views_for("A02", &all, &air)[0].ttc_s, f64::INFINITY);
    }

    #[test]
    fn converging_feeders_use_the_merge() {
        let air = Airspace::new_unchecked(merge_pair());
        let x = AgentConfig::class_x();
        // R_1 agent 500 m from M, R_2 agent 600 m from M
        let a = place(&air, "A01", x.clone(), "R_1", 0, 2500.0, 30.0);
        let b = place(&air, "B01", x, "R_2", 0, 2400.0, 30.0);
        let all = vec![a, b];

        let vb = views_for("B01", &all, &air);
        assert_eq!(vb.len(), 1);
        let c = vb[0].conflict.as_ref().unwrap();
        assert_eq!(c.waypoint_id, "M");
        assert!((c.own_path_m - 600.0).abs() < 1e-3);
        assert!((c.intruder_path_m - 500.0).abs() < 1e-3);
        assert!((vb[0].distance_m - libm::hypot(500.0, 600.0)).abs() < 0.5);
        assert!(vb[0].is_front && !vb[0].same_route);
        // arrivals 20 s and 16.7 s: inside the window
        assert!((vb[0].ttc_s - vb[0].distance_m / 60.0).abs() < 1e-9);

        let va = views_for("A01", &all, &air);
        assert!(va[0].is_behind && !va[0].is_front);
    }

    #[test]
    fn converging_outside_window_never_closes() {
        let air = Airspace::new_unchecked(merge_pair());
        let x = AgentConfig::class_x();
        let all = vec![
            place(&air, "A01", x.clone(), "R_1", 0, 2600.0, 30.0),
            place(&air, "B01", x, "R_2", 0, 2200.0, 30.0),
        ];
        // 400 m from M against 800 m: 13.3 s apart
        let v = views_for("B01", &all, &air);
        assert!(v[0].is_front);
        assert_eq!(v[0].ttc_s, f64::INFINITY);
    }

    #[test]
    fn equal_paths_break_ties_by_id() {
        let air = Airspace::new_unchecked(crossing());
        let x = AgentConfig::class_x();
        let all = vec![
            place(&air, "A01", x.clone(), "R_1", 0, 2600.0, 30.0),
            place(&air, "B01", x, "R_2", 0, 2600.0, 30.0),
        ];
        assert!(views_for("B01", &all, &air)[0].is_front);
        assert!(!views_for("A01", &all, &air)[0].is_front);
        assert!(views_for("A01", &all, &air)[0].is_behind);
    }

    #[test]
    fn past_the_crossing_there_is_no_conflict() {
        let air = Airspace::new_unchecked(crossing());
        let x = AgentConfig::class_x();
        let all = vec![
            place(&air, "A01", x.clone(), "R_1", 1, 200.0, 30.0),
            place(&air, "B01", x, "R_2", 0, 2700.0, 30.0),
        ];
        let v = views_for("B01", &all, &air);
        assert_eq!(v.len(), 1);
        assert!(!v[0].is_front && !v[0].is_behind && v[0].conflict.is_none());
        assert_eq!(v[0].ttc_s, f64::INFINITY);
    }

    #[test]
    fn range_filter_sorting_and_truncation() {
        let air = Airspace::new_unchecked(straight(3000.0));
        let y = AgentConfig::class_y(); // 750 m sensing
        let all = vec![
            place(&air, "A05", y.clone(), "R_1", 0, 100.0, 20.0),
            place(&air, "A04", y.clone(), "R_1", 0, 400.0, 20.0),
            place(&air, "A03", y.clone(), "R_1", 0, 300.0, 20.0),
            place(&air, "A02", y.clone(), "R_1", 0, 200.0, 20.0),
            place(&air, "A01", y, "R_1", 0, 900.0, 20.0),
        ];
        let v = views_for("A05", &all, &air);
        let ids: Vec<&str> = v.iter().map(|x| x.intruder_id.as_str()).collect();
        assert_eq!(ids, vec!["A02", "A03", "A04"]);
        let front = closest_front_intruders(&v, 2);
        assert_eq!(front.len(), 2);
        assert_eq!(front[0].intruder_id, "A02");
        assert!(closest_rear_intruder(&v).is_none());
        assert!(closest_front_intruders(&[], 2).is_empty());
    }

    #[test]
    fn nmac_interval_and_tick_counting() {
        let air = Airspace::new_unchecked(straight(3000.0));
        let x = AgentConfig::class_x();
        let far = vec![
            place(&air, "A01", x.clone(), "R_1", 0, 1000.0, 20.0),
            place(&air, "A02", x.clone(), "R_1", 0, 500.0, 20.0),
        ];
        let near = vec![
            place(&air, "A01", x.clone(), "R_1", 0, 1000.0, 20.0),
            place(&air, "A02", x.clone(), "R_1", 0, 900.0, 20.0),
        ];
        let edge = vec![
            place(&air, "A01", x.clone(), "R_1", 0, 1000.0, 20.0),
            place(&air, "A02", x, "R_1", 0, 850.0, 20.0),
        ];
        assert_eq!(nmac_pairs(&near, 150.0), vec![("A01".into(), "A02".into())]);
        assert!(nmac_pairs(&far, 150.0).is_empty());
        let d = haversine_distance(edge[0].position, edge[1].position);
        assert_eq!(nmac_pairs(&edge, d).len(), 0, "threshold is strict");

        let mut per_interval = NmacTracker::new(150.0, NmacCounting::PerInterval);
        let mut per_tick = NmacTracker::new(150.0, NmacCounting::PerTick);
        let seq = [&far, &near, &near, &far, &near];
        let a: usize = seq.iter().map(|s| per_interval.update(s).len()).sum();
        let b: usize = seq.iter().map(|s| per_tick.update(s).len()).sum();
        assert_eq!((a, b), (2, 3));
    }
}
