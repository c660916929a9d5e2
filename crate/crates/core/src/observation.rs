//! Raw per-agent observation records and their plain-text listing layout.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{Action, AgentState};
use crate::airspace::{next_waypoint_id, Airspace, WaypointKind};
use crate::geo::haversine_distance;
use crate::sensing::{closest_front_intruders, closest_rear_intruder, detect_intruders, IntruderView, SensingParams};

/// State of one vehicle as logged in an observation record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleSnapshot {
    pub id: String,
    #[serde(rename = "type")]
    pub vehicle_type: String,
    pub lat: f64,
    pub lon: f64,
    pub next_wpt_id: String,
    pub next_wpt_type: WaypointKind,
    pub dist_to_nxt_wpt_m: f64,
    pub speed_mps: f64,
    pub min_spd_mps: f64,
    pub max_spd_mps: f64,
    pub speed_change_per_second_mps2: f64,
    pub heading_deg: f64,
    pub altitude_m: f64,
    pub route_id: String,
    pub last_action: Action,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntruderReport {
    pub vehicle: VehicleSnapshot,
    pub distance_m: f64,
    #[serde(with = "ttc_serde")]
    pub ttc_s: f64,
    pub same_route: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawObservation {
    pub ownship: VehicleSnapshot,
    pub desired_spd_mps: f64,
    pub did_ownship_have_nmac: bool,
    /// Closest front intruders, nearest first.
    pub intruders: Vec<IntruderReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rear_intruder: Option<IntruderReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Action>,
}

/// TTC is `+inf` when the gap is not closing; JSON has no infinity, so it
/// travels as the string `"inf"`.
pub mod ttc_serde {
    use serde::de::{self, Visitor};
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    struct TtcVisitor;

    impl<'de> Visitor<'de> for TtcVisitor {
        type Value = f64;

        fn expecting(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
            f.write_str("a number or \"inf\"")
        }

        fn visit_f64<E: de::Error>(self, v: f64) -> Result<f64, E> {
            Ok(v)
        }

        fn visit_i64<E: de::Error>(self, v: i64) -> Result<f64, E> {
            Ok(v as f64)
        }

        fn visit_u64<E: de::Error>(self, v: u64) -> Result<f64, E> {
            Ok(v as f64)
        }

        fn visit_str<E: de::Error>(self, v: &str) -> Result<f64, E> {
            match v {
                "inf" | "Infinity" => Ok(f64::INFINITY),
                _ => Err(E::invalid_value(de::Unexpected::Str(v), &self)),
            }
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        d.deserialize_any(TtcVisitor)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ObservationError {
    #[error("agent {0} is not active")]
    Inactive(String),
    #[error("unknown agent {0}")]
    UnknownAgent(String),
    #[error("malformed observation: {0}")]
    Malformed(&'static str),
}

impl RawObservation {
    pub fn num_intruders_ahead(&self) -> usize {
        self.intruders.len()
    }

    /// Field-level sanity checks applied before a policy acts on a record.
    pub fn validate(&self) -> Result<(), ObservationError> {
        fn vehicle_ok(v: &VehicleSnapshot) -> Result<(), ObservationError> {
            let nums = [
                v.lat,
                v.lon,
                v.dist_to_nxt_wpt_m,
                v.speed_mps,
                v.min_spd_mps,
                v.max_spd_mps,
                v.speed_change_per_second_mps2,
                v.heading_deg,
                v.altitude_m,
            ];
            if nums.iter().any(|x| !x.is_finite()) {
                return Err(ObservationError::Malformed("non-finite vehicle field"));
            }
            if v.dist_to_nxt_wpt_m < 0.0 || v.speed_mps < 0.0 {
                return Err(ObservationError::Malformed("negative distance or speed"));
            }
            if v.min_spd_mps > v.max_spd_mps {
                return Err(ObservationError::Malformed("min speed above max speed"));
            }
            Ok(())
        }
        vehicle_ok(&self.ownship)?;
        if !self.desired_spd_mps.is_finite() {
            return Err(ObservationError::Malformed("non-finite desired speed"));
        }
        for r in self.intruders.iter().chain(self.rear_intruder.iter()) {
            vehicle_ok(&r.vehicle)?;
            if !(r.distance_m >= 0.0 && r.distance_m.is_finite()) {
                return Err(ObservationError::Malformed("bad intruder distance"));
            }
            if r.ttc_s.is_nan() || r.ttc_s <= 0.0 {
                return Err(ObservationError::Malformed("ttc must be positive or inf"));
            }
        }
        Ok(())
    }

    /// The published plain-text record layout: lat/lon rounded to 6 places,
    /// every other number to 2, booleans as `True`/`False`.
    pub fn to_listing(&self) -> String {
        let mut out = String::new();
        let o = &self.ownship;
        out.push_str("Ownship info:\n");
        write_vehicle(&mut out, o);
        let _ = writeln!(out, "  num_intruders_ahead: {}", self.intruders.len());
        let _ = writeln!(out, "  desired_spd(m/s): {}", py_num(self.desired_spd_mps, 2));
        let ttc_line = |out: &mut String, i: usize, r: &IntruderReport| {
            let _ = writeln!(out, "  time_to_collision_with_intruder{}(s): {}", i, py_num(r.ttc_s, 2));
            let _ = writeln!(out, "  intruder{}_on_same_route: {}", i, py_bool(r.same_route));
        };
        if let Some(first) = self.intruders.first() {
            ttc_line(&mut out, 1, first);
        }
        let _ = writeln!(out, "  did_ownship_have_NMAC: {}", py_bool(self.did_ownship_have_nmac));
        for (i, r) in self.intruders.iter().enumerate().skip(1) {
            ttc_line(&mut out, i + 1, r);
        }
        for (i, r) in self.intruders.iter().enumerate() {
            let _ = writeln!(out, "  distance_to_intruder{}(m): {}", i + 1, py_num(r.distance_m, 2));
        }
        if let Some(r) = &self.rear_intruder {
            let _ = writeln!(out, "  distance_to_rear_intruder(m): {}", py_num(r.distance_m, 2));
            let _ = writeln!(out, "  rear_intruder_on_same_route: {}", py_bool(r.same_route));
        }
        const ORDINALS: [&str; 4] = ["First", "Second", "Third", "Fourth"];
        for (i, r) in self.intruders.iter().enumerate() {
            let ord = ORDINALS.get(i).copied().unwrap_or("Next");
            let _ = writeln!(out, "\n{ord} closest front intruder info:");
            write_vehicle(&mut out, &r.vehicle);
        }
        if let Some(r) = &self.rear_intruder {
            out.push_str("\nClosest rear intruder info:\n");
            write_vehicle(&mut out, &r.vehicle);
        }
        if let Some(a) = self.label {
            let _ = writeln!(out, "\nOwnship action: {a}.");
        }
        out
    }
}

fn write_vehicle(out: &mut String, v: &VehicleSnapshot) {
    let _ = writeln!(out, "  id: {}", v.id);
    let _ = writeln!(out, "  type: {}", v.vehicle_type);
    let _ = writeln!(out, "  lat: {}, lon: {}", py_num(v.lat, 6), py_num(v.lon, 6));
    let _ = writeln!(out, "  next_wpt_id: {}", v.next_wpt_id);
    let _ = writeln!(out, "  next_wpt_type: {}", v.next_wpt_type);
    let _ = writeln!(out, "  dist_to_nxt_wpt(m): {}", py_num(v.dist_to_nxt_wpt_m, 2));
    let _ = writeln!(out, "  speed(m/s): {}", py_num(v.speed_mps, 2));
    let _ = writeln!(
        out,
        "  min_spd(m/s): {}, max_spd(m/s): {}",
        py_num(v.min_spd_mps, 2),
        py_num(v.max_spd_mps, 2)
    );
    let _ = writeln!(
        out,
        "  speed_change_per_second(m/s2): {}",
        py_num(v.speed_change_per_second_mps2, 2)
    );
    let _ = writeln!(out, "  heading(deg): {}", py_num(v.heading_deg, 2));
    let _ = writeln!(out, "  altitude(m): {}", py_num(v.altitude_m, 2));
    let _ = writeln!(out, "  route_id: {}", v.route_id);
    let _ = writeln!(out, "  last_action: {}", v.last_action.as_lower());
}

fn py_bool(b: bool) -> &'static str {
    if b {
        "True"
    } else {
        "False"
    }
}

/// Shortest decimal text of `x` rounded to `places`, always with a fractional
/// part (`0.0`, `1.7`, `33.14653`), and `inf` for infinity.
pub fn py_num(x: f64, places: i32) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let k = libm::pow(10.0, f64::from(places));
    let r = libm::round(x * k) / k;
    let mut s = alloc::format!("{r}");
    if !s.contains('.') {
        s.push_str(".0");
    }
    s
}

fn snapshot(s: &AgentState, airspace: &Airspace) -> Result<VehicleSnapshot, ObservationError> {
    let route = airspace
        .route(&s.route_id)
        .ok_or(ObservationError::Malformed("unknown route"))?;
    let next = s.leg_index + 1;
    let next_id = next_waypoint_id(s, airspace).ok_or_else(|| ObservationError::Inactive(s.id.clone()))?;
    let pos = route
        .waypoint_position(next)
        .ok_or_else(|| ObservationError::Inactive(s.id.clone()))?;
    Ok(VehicleSnapshot {
        id: s.id.clone(),
        vehicle_type: s.config.display_type.clone(),
        lat: s.position.lat_deg,
        lon: s.position.lon_deg,
        next_wpt_id: next_id.into(),
        next_wpt_type: route.kinds[next],
        dist_to_nxt_wpt_m: haversine_distance(s.position, pos),
        speed_mps: s.speed_mps,
        min_spd_mps: s.config.v_min_mps,
        max_spd_mps: s.config.v_max_mps,
        speed_change_per_second_mps2: s.config.accel_mps2,
        heading_deg: s.heading_deg,
        altitude_m: s.position.alt_m,
        route_id: s.route_id.clone(),
        last_action: s.last_action,
    })
}

fn report(
    view: &IntruderView,
    agents: &[AgentState],
    airspace: &Airspace,
) -> Result<IntruderReport, ObservationError> {
    let other = agents
        .iter()
        .find(|a| a.id == view.intruder_id)
        .ok_or_else(|| ObservationError::UnknownAgent(view.intruder_id.clone()))?;
    Ok(IntruderReport {
        vehicle: snapshot(other, airspace)?,
        distance_m: view.distance_m,
        ttc_s: view.ttc_s,
        same_route: view.same_route,
    })
}

/// Observation for `agent_id` from the current snapshot of all agents.
pub fn build_observation(
    agents: &[AgentState],
    agent_id: &str,
    airspace: &Airspace,
    sensing: &SensingParams,
) -> Result<RawObservation, ObservationError> {
    let own = agents
        .iter()
        .find(|a| a.id == agent_id)
        .ok_or_else(|| ObservationError::UnknownAgent(agent_id.into()))?;
    if !own.is_active() {
        return Err(ObservationError::Inactive(agent_id.into()));
    }
    let ownship = snapshot(own, airspace)?;
    let views = detect_intruders(own, agents, airspace, sensing);
    let intruders = closest_front_intruders(&views, sensing.front_k)
        .iter()
        .map(|v| report(v, agents, airspace))
        .collect::<Result<Vec<_>, _>>()?;
    let rear_intruder = if sensing.include_rear {
        closest_rear_intruder(&views)
            .map(|v| report(&v, agents, airspace))
            .transpose()?
    } else {
        None
    };
    Ok(RawObservation {
        ownship,
        desired_spd_mps: own.desired_speed_mps,
        did_ownship_have_nmac: own.had_nmac,
        intruders,
        rear_intruder,
        label: None,
    })
}
