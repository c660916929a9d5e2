//! Observation-to-language rendering: qualitative bins, prompt templates,
//! the fixed response template and response parsing.
//!
//! The user text only ever contains bin labels and categorical fields (ids,
//! waypoint kinds, last actions, route relations), never raw numbers, so two
//! observations that land in the same bins render identically.

use alloc::collections::BTreeSet;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::Action;
use crate::observation::{IntruderReport, RawObservation};
use crate::rules::RuleParams;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PromptError {
    #[error("bins `{0}`: thresholds must be finite, non-negative and strictly increasing")]
    Thresholds(&'static str),
    #[error("bins `{0}`: need exactly one more label than thresholds")]
    Labels(&'static str),
    #[error("template `{field}`: unknown placeholder `{{{name}}}`")]
    Placeholder { field: &'static str, name: String },
    #[error("template `{0}`: unbalanced braces")]
    Braces(&'static str),
    #[error("no action found in response")]
    NoAction,
    #[error("response names more than one action")]
    Ambiguous,
}

/// Thresholds `t_0 < t_1 < ...` with labels `l_0 ... l_n`: `x < t_0` maps to
/// `l_0`, `t_{i-1} <= x < t_i` to `l_i`, and anything past the last threshold
/// (infinity included) to `l_n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bins {
    pub thresholds: Vec<f64>,
    pub labels: Vec<String>,
}

impl Bins {
    pub fn new(thresholds: &[f64], labels: &[&str]) -> Self {
        Self {
            thresholds: thresholds.to_vec(),
            labels: labels.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn index(&self, x: f64) -> usize {
        self.thresholds
            .iter()
            .position(|&t| x < t)
            .unwrap_or(self.thresholds.len())
    }

    pub fn label(&self, x: f64) -> &str {
        &self.labels[self.index(x)]
    }

    fn validate(&self, name: &'static str) -> Result<(), PromptError> {
        let ok = self.thresholds.iter().all(|t| t.is_finite() && *t >= 0.0)
            && self.thresholds.windows(2).all(|w| w[0] < w[1]);
        if !ok {
            return Err(PromptError::Thresholds(name));
        }
        if self.labels.len() != self.thresholds.len() + 1 {
            return Err(PromptError::Labels(name));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinningTable {
    /// Distance to another aircraft.
    pub distance_m: Bins,
    pub ttc_s: Bins,
    /// Magnitude of a speed difference; the direction word is added on top.
    pub speed_delta_mps: Bins,
    pub waypoint_m: Bins,
}

impl BinningTable {
    /// Defaults keyed to the rule thresholds, so bin edges line up with the
    /// rule branches.
    pub fn for_rules(p: &RuleParams) -> Self {
        Self {
            distance_m: Bins::new(
                &[p.d_collision_m, p.d_safe_m, 2.0 * p.d_safe_m],
                &["critical", "close", "safe", "very safe"],
            ),
            ttc_s: Bins::new(&[30.0, 60.0, 120.0], &["very short", "short", "long", "very long"]),
            speed_delta_mps: Bins::new(&[1.0, 5.0], &["similar", "moderately", "much"]),
            waypoint_m: Bins::new(
                &[p.d_safe_m, 2.0 * p.d_safe_m, 4.0 * p.d_safe_m],
                &["very close", "close", "moderate", "far"],
            ),
        }
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        self.distance_m.validate("distance_m")?;
        self.ttc_s.validate("ttc_s")?;
        self.speed_delta_mps.validate("speed_delta_mps")?;
        self.waypoint_m.validate("waypoint_m")
    }

    /// `"similar"` inside the first bin, otherwise e.g. `"moderately higher"`.
    fn relative(&self, delta: f64, up: &str, down: &str) -> String {
        let i = self.speed_delta_mps.index(delta.abs());
        let mag = &self.speed_delta_mps.labels[i];
        if i == 0 {
            mag.clone()
        } else {
            let dir = if delta > 0.0 { up } else { down };
            alloc::format!("{mag} {dir}")
        }
    }
}

impl Default for BinningTable {
    fn default() -> Self {
        Self::for_rules(&RuleParams::default())
    }
}

/// Text templates with `{name}` placeholders; `{{` and `}}` are literal braces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptTemplate {
    pub system: String,
    pub ownship: String,
    pub traffic: String,
    pub no_traffic: String,
    pub intruder: String,
    pub rear: String,
    pub closing: String,
    pub target: String,
}

const SYSTEM: &str = "You are a tactical deconfliction assistant for small unmanned aircraft flying \
fixed routes through shared low-altitude airspace. Routes merge and cross at waypoints where \
conflicts concentrate. Your first priority is to keep safe separation and avoid near mid-air \
collisions; your second is to keep traffic moving efficiently. For the ownship described by the \
user, choose exactly one action: Accelerate, Hold, or Decelerate. Reply with one sentence in the \
form: The recommended action is: <action>.";

const OWNSHIP: &str = "The ownship {id} ({type}) is flying route {route_id}. Its next waypoint \
{next_wpt_id} ({next_wpt_type} point) is at a {wp_distance} distance. Its speed is {speed_vs_desired} \
compared to its desired speed{limit}. Its last action was {last_action}. {nmac}";

const TRAFFIC: &str = "There {count} ahead of the ownship.";

const NO_TRAFFIC: &str = "No intruders are detected ahead of the ownship.";

const INTRUDER: &str = "Intruder {n} ({id}, {type}) is ahead on {route_relation}, heading to \
{next_wpt_id} ({next_wpt_type}). Its distance to the ownship is {distance}. The time to collision is {ttc}. It is moving at a {speed_relation} speed compared to \
the ownship, and its last action was {last_action}.";

const REAR: &str = "An intruder behind the ownship ({id}) is on {route_relation}. Its distance to \
the ownship is {distance}, and it is moving at a {speed_relation} speed compared to the ownship.";

const CLOSING: &str = "Which action should the ownship take? Reply in the form: The recommended \
action is: <action>.";

const TARGET: &str = "The recommended action is: {action}.";

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            system: SYSTEM.into(),
            ownship: OWNSHIP.into(),
            traffic: TRAFFIC.into(),
            no_traffic: NO_TRAFFIC.into(),
            intruder: INTRUDER.into(),
            rear: REAR.into(),
            closing: CLOSING.into(),
            target: TARGET.into(),
        }
    }
}

const VEHICLE_KEYS: &[&str] = &[
    "id",
    "type",
    "route_id",
    "next_wpt_id",
    "next_wpt_type",
    "last_action",
];

impl PromptTemplate {
    /// Check every placeholder against the names its field supplies.
    pub fn validate(&self) -> Result<(), PromptError> {
        let own: Vec<&str> = VEHICLE_KEYS
            .iter()
            .copied()
            .chain(["wp_distance", "speed_vs_desired", "limit", "nmac"])
            .collect();
        let intr: Vec<&str> = VEHICLE_KEYS
            .iter()
            .copied()
            .chain(["n", "route_relation", "distance", "ttc", "speed_relation"])
            .collect();
        let fields: [(&'static str, &str, &[&str]); 8] = [
            ("system", &self.system, &[]),
            ("ownship", &self.ownship, &own),
            ("traffic", &self.traffic, &["count"]),
            ("no_traffic", &self.no_traffic, &[]),
            ("intruder", &self.intruder, &intr),
            ("rear", &self.rear, &intr),
            ("closing", &self.closing, &[]),
            ("target", &self.target, &["action"]),
        ];
        for (field, text, allowed) in fields {
            for name in placeholders(field, text)? {
                if !allowed.contains(&name.as_str()) {
                    return Err(PromptError::Placeholder { field, name });
                }
            }
        }
        Ok(())
    }
}

fn placeholders(field: &'static str, text: &str) -> Result<Vec<String>, PromptError> {
    let mut out = Vec::new();
    let mut chars = text.chars().peekable();
    while let Some(c) = chars.next() {
        match c {
            '{' if chars.peek() == Some(&'{') => {
                chars.next();
            }
            '}' if chars.peek() == Some(&'}') => {
                chars.next();
            }
            '{' => {
                let mut name = String::new();
                loop {
                    match chars.next() {
                        Some('}') => break,
                        Some(ch) if ch != '{' => name.push(ch),
                        _ => return Err(PromptError::Braces(field)),
                    }
                }
                out.push(name);
            }
            '}' => return Err(PromptError::Braces(field)),
            _ => {}
        }
    }
    Ok(out)
}

/// Substitute `{name}` placeholders. Unknown names are left in place;
/// [`PromptTemplate::validate`] is where they get rejected.
pub fn fill(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + 64);
    let mut rest = template;
    while let Some(i) = rest.find(['{', '}']) {
        out.push_str(&rest[..i]);
        let tail = &rest[i..];
        if tail.starts_with("{{") || tail.starts_with("}}") {
            out.push_str(&tail[..1]);
            rest = &tail[2..];
            continue;
        }
        if tail.starts_with('{') {
            if let Some(end) = tail.find('}') {
                let name = &tail[1..end];
                match vars.iter().find(|(k, _)| *k == name) {
                    Some((_, v)) => out.push_str(v),
                    None => out.push_str(&tail[..=end]),
                }
                rest = &tail[end + 1..];
                continue;
            }
        }
        out.push_str(&tail[..1]);
        rest = &tail[1..];
    }
    out.push_str(rest);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
}

/// Train/validation assignment from a hash of scenario seed and agent id.
pub fn split_for(scenario_seed: u64, agent_id: &str, validation_percent: u8) -> Split {
    let h = seed::combine(&[scenario_seed, seed::hash_str(agent_id)]);
    if h % 100 < u64::from(validation_percent) {
        Split::Validation
    } else {
        Split::Train
    }
}

/// Where a prompt pair came from, with enough to replay its label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSource {
    pub scenario_seed: u64,
    pub episode: u64,
    pub t_s: f64,
    pub agent_id: String,
    pub decision_seed: u64,
    pub split: Split,
    pub observation: RawObservation,
}

/// One supervised example: field order here is the record field order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptPair {
    pub system: String,
    pub user: String,
    pub target: String,
    pub label: Action,
    pub source: PromptSource,
}

/// System and user text for an observation.
pub fn render_prompt(obs: &RawObservation, bins: &BinningTable, tpl: &PromptTemplate) -> (String, String) {
    let o = &obs.ownship;
    let wp_distance = bins.waypoint_m.label(o.dist_to_nxt_wpt_m);
    let speed_vs_desired = bins.relative(o.speed_mps - obs.desired_spd_mps, "higher", "lower");
    let limit = if o.speed_mps >= o.max_spd_mps {
        ", and it is already at its maximum speed"
    } else if o.speed_mps <= o.min_spd_mps {
        ", and it is already at its minimum speed"
    } else {
        ""
    };
    let nmac = if obs.did_ownship_have_nmac {
        "It has already had a near mid-air collision."
    } else {
        "It has not had a near mid-air collision."
    };
    let next_type = o.next_wpt_type.as_str();
    let mut parts: Vec<String> = vec![fill(
        &tpl.ownship,
        &[
            ("id", &o.id),
            ("type", &o.vehicle_type),
            ("route_id", &o.route_id),
            ("next_wpt_id", &o.next_wpt_id),
            ("next_wpt_type", next_type),
            ("wp_distance", wp_distance),
            ("speed_vs_desired", &speed_vs_desired),
            ("limit", limit),
            ("last_action", o.last_action.as_lower()),
            ("nmac", nmac),
        ],
    )];
    if obs.intruders.is_empty() {
        parts.push(fill(&tpl.no_traffic, &[]));
    } else {
        let count = match obs.intruders.len() {
            1 => "is one intruder",
            2 => "are two intruders",
            3 => "are three intruders",
            _ => "are several intruders",
        };
        parts.push(fill(&tpl.traffic, &[("count", count)]));
    }
    for (i, r) in obs.intruders.iter().enumerate() {
        let n = alloc::format!("{}", i + 1);
        parts.push(intruder_text(&tpl.intruder, obs, r, bins, &n));
    }
    if let Some(r) = &obs.rear_intruder {
        parts.push(intruder_text(&tpl.rear, obs, r, bins, "rear"));
    }
    parts.push(fill(&tpl.closing, &[]));
    (fill(&tpl.system, &[]), parts.join("\n"))
}

fn intruder_text(tpl: &str, obs: &RawObservation, r: &IntruderReport, bins: &BinningTable, n: &str) -> String {
    let v = &r.vehicle;
    let distance = bins.distance_m.label(r.distance_m);
    let ttc = bins.ttc_s.label(r.ttc_s);
    let speed_relation = bins.relative(v.speed_mps - obs.ownship.speed_mps, "higher", "lower");
    let route_relation = if r.same_route {
        "the same route"
    } else {
        "a different route"
    };
    fill(
        tpl,
        &[
            ("n", n),
            ("id", &v.id),
            ("type", &v.vehicle_type),
            ("route_id", &v.route_id),
            ("next_wpt_id", &v.next_wpt_id),
            ("next_wpt_type", v.next_wpt_type.as_str()),
            ("last_action", v.last_action.as_lower()),
            ("route_relation", route_relation),
            ("distance", distance),
            ("ttc", ttc),
            ("speed_relation", &speed_relation),
        ],
    )
}

/// The canonical response for `action`.
pub fn target_text(tpl: &PromptTemplate, action: Action) -> String {
    fill(&tpl.target, &[("action", action.as_str())])
}

/// The single action named in `text`, matched case-insensitively as a whole
/// word. No action, or two different ones, is an error.
pub fn parse_action(text: &str) -> Result<Action, PromptError> {
    let mut found = BTreeSet::new();
    for word in text.split(|c: char| !c.is_ascii_alphabetic()) {
        if word.is_empty() {
            continue;
        }
        for a in Action::ALL {
            if word.eq_ignore_ascii_case(a.as_str()) {
                found.insert(a);
            }
        }
    }
    let mut it = found.into_iter();
    match (it.next(), it.next()) {
        (Some(a), None) => Ok(a),
        (None, _) => Err(PromptError::NoAction),
        _ => Err(PromptError::Ambiguous),
    }
}
