//! Hand-written supervisory rule policy.
//!
//! Two regimes keyed on the ownship's distance to its next waypoint `d_wp`:
//!
//! | code   | regime            | condition                                   | action     |
//! |--------|-------------------|---------------------------------------------|------------|
//! | FAR-1  | `d_wp > d_safe`   | nothing within `d_safe`, below desired speed | Accelerate |
//! | FAR-2  | `d_wp > d_safe`   | nothing within `d_safe`, at/above desired    | Hold       |
//! | FAR-3  | `d_wp > d_safe`   | front intruder within `d_safe`               | Decelerate |
//! | FAR-4  | `d_wp > d_safe`   | rear intruder within `d_safe`                | Accelerate |
//! | NEAR-1 | `d_wp <= d_safe`  | same-route front intruder within `d_safe`    | Decelerate |
//! | NEAR-2 | `d_wp <= d_safe`  | other-route front intruder within `d_safe`   | Decelerate |
//! | NEAR-3 | `d_wp <= d_safe`  | other-route intruder inside `d_collision`, ownship faster | Accelerate |
//! | NEAR-4 | `d_wp <= d_safe`  | same, ownship slower                         | Decelerate |
//! | NEAR-5 | `d_wp <= d_safe`  | same, equal speeds: coin flip, partner gets the opposite | either |
//! | NEAR-6 | `d_wp <= d_safe`  | no front intruder within `d_safe`            | Accelerate |
//!
//! "Within" means straight-line horizontal distance below the threshold. The
//! chosen action then passes through the speed-limit override.

use alloc::format;
use alloc::string::String;
use core::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{enforce_speed_limits, Action};
use crate::observation::{IntruderReport, ObservationError, RawObservation};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RuleParams {
    pub d_safe_m: f64,
    pub d_collision_m: f64,
    /// Base seed for tie-break coin flips; mixed with episode, tick and agent
    /// id by the engine.
    pub rng_seed: u64,
    /// Speeds closer than this count as equal.
    pub speed_tie_tol_mps: f64,
}

impl Default for RuleParams {
    fn default() -> Self {
        Self {
            d_safe_m: 500.0,
            d_collision_m: 300.0,
            rng_seed: 0,
            speed_tie_tol_mps: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RuleError {
    #[error("rule parameters: {0}")]
    Params(&'static str),
    #[error(transparent)]
    Observation(#[from] ObservationError),
}

impl RuleParams {
    /// `0 < d_collision < d_safe <= min_sensing_m`.
    pub fn validate(&self, min_sensing_m: f64) -> Result<(), RuleError> {
        if !(self.d_collision_m.is_finite() && self.d_safe_m.is_finite()) {
            return Err(RuleError::Params("thresholds must be finite"));
        }
        if self.d_collision_m <= 0.0 {
            return Err(RuleError::Params("d_collision must be positive"));
        }
        if self.d_collision_m >= self.d_safe_m {
            return Err(RuleError::Params("d_collision must be below d_safe"));
        }
        if self.d_safe_m > min_sensing_m {
            return Err(RuleError::Params("d_safe exceeds the smallest sensing range"));
        }
        if !(self.speed_tie_tol_mps >= 0.0) {
            return Err(RuleError::Params("speed tolerance must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RuleBranch {
    #[serde(rename = "FAR-1")]
    FarClearBelowDesired,
    #[serde(rename = "FAR-2")]
    FarClearAtDesired,
    #[serde(rename = "FAR-3")]
    FarIntruderAhead,
    #[serde(rename = "FAR-4")]
    FarIntruderBehind,
    #[serde(rename = "NEAR-1")]
    NearSameRouteAhead,
    #[serde(rename = "NEAR-2")]
    NearOtherRouteAhead,
    #[serde(rename = "NEAR-3")]
    NearCollisionFaster,
    #[serde(rename = "NEAR-4")]
    NearCollisionSlower,
    #[serde(rename = "NEAR-5")]
    NearCollisionTie,
    #[serde(rename = "NEAR-6")]
    NearClear,
}

impl RuleBranch {
    pub const ALL: [RuleBranch; 10] = [
        RuleBranch::FarClearBelowDesired,
        RuleBranch::FarClearAtDesired,
        RuleBranch::FarIntruderAhead,
        RuleBranch::FarIntruderBehind,
        RuleBranch::NearSameRouteAhead,
        RuleBranch::NearOtherRouteAhead,
        RuleBranch::NearCollisionFaster,
        RuleBranch::NearCollisionSlower,
        RuleBranch::NearCollisionTie,
        RuleBranch::NearClear,
    ];

    pub fn code(self) -> &'static str {
        match self {
            RuleBranch::FarClearBelowDesired => "FAR-1",
            RuleBranch::FarClearAtDesired => "FAR-2",
            RuleBranch::FarIntruderAhead => "FAR-3",
            RuleBranch::FarIntruderBehind => "FAR-4",
            RuleBranch::NearSameRouteAhead => "NEAR-1",
            RuleBranch::NearOtherRouteAhead => "NEAR-2",
            RuleBranch::NearCollisionFaster => "NEAR-3",
            RuleBranch::NearCollisionSlower => "NEAR-4",
            RuleBranch::NearCollisionTie => "NEAR-5",
            RuleBranch::NearClear => "NEAR-6",
        }
    }

    pub fn from_code(code: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|b| b.code() == code)
    }

    fn summary(self) -> &'static str {
        match self {
            RuleBranch::FarClearBelowDesired => "no intruder in range; below desired speed",
            RuleBranch::FarClearAtDesired => "no intruder in range; at or above desired speed",
            RuleBranch::FarIntruderAhead => "intruder ahead within safety distance",
            RuleBranch::FarIntruderBehind => "intruder behind within safety distance",
            RuleBranch::NearSameRouteAhead => "near waypoint; same-route intruder ahead",
            RuleBranch::NearOtherRouteAhead => "near waypoint; other-route intruder ahead",
            RuleBranch::NearCollisionFaster => "collision distance; ownship faster",
            RuleBranch::NearCollisionSlower => "collision distance; ownship slower",
            RuleBranch::NearCollisionTie => "collision distance; equal speeds",
            RuleBranch::NearClear => "near waypoint; no intruder ahead",
        }
    }
}

impl fmt::Display for RuleBranch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

/// The quantities a decision was made from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleInputs {
    pub d_wp_m: f64,
    pub speed_mps: f64,
    pub desired_speed_mps: f64,
    /// Intruder that drove the branch.
    pub intruder_id: Option<String>,
    pub distance_m: Option<f64>,
    pub intruder_speed_mps: Option<f64>,
    pub decision_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleDecision {
    /// Final action after the speed-limit override.
    pub action: Action,
    pub fired_rule: RuleBranch,
    /// Set when the speed-limit override replaced this branch action.
    pub overridden: Option<Action>,
    /// Tie-break only: the intruder and the action it is assigned.
    pub partner_action: Option<(String, Action)>,
    pub inputs: RuleInputs,
}

impl RuleDecision {
    /// Action chosen by the branch, before the speed-limit override.
    pub fn branch_action(&self) -> Action {
        self.overridden.unwrap_or(self.action)
    }
}

struct Candidate<'a> {
    branch: RuleBranch,
    action: Action,
    intruder: &'a IntruderReport,
}

/// Pick an action for `obs`. `decision_seed` drives only the equal-speed
/// coin flip, so a decision replays exactly from its seed.
pub fn decide(obs: &RawObservation, params: &RuleParams, decision_seed: u64) -> Result<RuleDecision, RuleError> {
    obs.validate()?;
    let own = &obs.ownship;
    let d_wp = own.dist_to_nxt_wpt_m;
    let speed = own.speed_mps;
    let desired = obs.desired_spd_mps;
    let tol = params.speed_tie_tol_mps;

    let within = |r: &IntruderReport| r.distance_m < params.d_safe_m;

    let mut chosen: Option<Candidate<'_>> = None;
    let mut partner: Option<(String, Action)> = None;

    if d_wp > params.d_safe_m {
        if let Some(r) = obs.intruders.iter().find(|r| within(r)) {
            chosen = Some(Candidate {
                branch: RuleBranch::FarIntruderAhead,
                action: Action::Decelerate,
                intruder: r
            });
        } else if let Some(r) = obs.rear_intruder.as_ref().filter(|r| within(r)) {
            chosen = Some(Candidate {
                branch: RuleBranch::FarIntruderBehind,
                action: Action::Accelerate,
                intruder: r
            });
        }
    } else {
        let mut rng: Option<ChaCha8Rng> = None;
        let near = |r: &'_ IntruderReport, rng: &mut Option<ChaCha8Rng>| -> (RuleBranch, Action) {
            if !r.same_route && r.distance_m < params.d_collision_m {
                let dv = speed - r.vehicle.speed_mps;
                if dv > tol {
                    (RuleBranch::NearCollisionFaster, Action::Accelerate)
                } else if dv < -tol {
                    (RuleBranch::NearCollisionSlower, Action::Decelerate)
                } else {
                    let rng = rng.get_or_insert_with(|| ChaCha8Rng::seed_from_u64(decision_seed));
                    let a = if rng.random_bool(0.5) {
                        Action::Accelerate
                    } else {
                        Action::Decelerate
                    };
                    (RuleBranch::NearCollisionTie, a)
                }
            } else if r.same_route {
                (RuleBranch::NearSameRouteAhead, Action::Decelerate)
            } else {
                (RuleBranch::NearOtherRouteAhead, Action::Decelerate)
            }
        };
        let mut candidates = obs.intruders.iter().filter(|r| within(r));
        if let Some(first) = candidates.next() {
            let (branch, action) = near(first, &mut rng);
            let mut pick = Candidate {
                branch,
                action,
                intruder: first
            };
            if action != Action::Decelerate {
                for r in candidates {
                    let (b, a) = near(r, &mut rng);
                    if a == Action::Decelerate {
                        pick = Candidate {
                            branch: b,
                            action: a,
                            intruder: r
                        };
                        break;
                    }
                }
            }
            if pick.branch == RuleBranch::NearCollisionTie {
                partner = Some((pick.intruder.vehicle.id.clone(), pick.action.opposite()));
            }
            chosen = Some(pick);
        }
    }

    let (branch, proposed, intruder) = match &chosen {
        Some(c) => (c.branch, c.action, Some(c.intruder)),
        None if d_wp > params.d_safe_m => {
            if speed < desired - tol {
                (RuleBranch::FarClearBelowDesired, Action::Accelerate, None)
            } else {
                (RuleBranch::FarClearAtDesired, Action::Hold, None)
            }
        }
        None => (RuleBranch::NearClear, Action::Accelerate, None),
    };

    let action = enforce_speed_limits(speed, own.min_spd_mps, own.max_spd_mps, proposed);
    Ok(RuleDecision {
        action,
        fired_rule: branch,
        overridden: (action != proposed).then_some(proposed),
        partner_action: partner,
        inputs: RuleInputs {
            d_wp_m: d_wp,
            speed_mps: speed,
            desired_speed_mps: desired,
            intruder_id: intruder.map(|r| r.vehicle.id.clone()),
            distance_m: intruder.map(|r| r.distance_m),
            intruder_speed_mps: intruder.map(|r| r.vehicle.speed_mps),
            decision_seed,
        },
    })
}

/// One-line account of a decision.
pub fn explain(d: &RuleDecision) -> String {
    let mut s = format!("{}: {}", d.fired_rule.code(), d.fired_rule.summary());
    let i = &d.inputs;
    if let (Some(id), Some(dist)) = (&i.intruder_id, i.distance_m) {
        s.push_str(&format!(" ({id} at {dist:.1} m)"));
    }
    if let Some((partner, pa)) = &d.partner_action {
        s.push_str(&format!(
            "; seed {} picked {} for ownship, {} for {}",
            i.decision_seed,
            d.branch_action(),
            pa,
            partner
        ));
    }
    match d.overridden {
        Some(orig) => s.push_str(&format!(" → {orig}, overridden to {} at speed limit", d.action)),
        None => s.push_str(&format!(" → {}", d.action)),
    }
    s
}
