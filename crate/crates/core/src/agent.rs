//! Vehicle classes, per-agent state and the three-valued tactical action.

use alloc::string::String;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::airspace::Airspace;
use crate::geo::{haversine_distance, initial_bearing, step_position, update_speed, GeoPosition};

/// Kinematic and sensing envelope of one vehicle class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub class_name: String,
    /// Free-text vehicle model, echoed as `type` in observation records.
    pub display_type: String,
    pub v_min_mps: f64,
    pub v_max_mps: f64,
    /// Magnitude `a` of the symmetric acceleration set `{-a, 0, +a}`.
    pub accel_mps2: f64,
    pub sensing_range_m: f64,
}

impl AgentConfig {
    /// Class X (strong): `[0, 44.88]` m/s, `±1.71` m/s², 1000 m sensing.
    pub fn class_x() -> Self {
        Self {
            class_name: "X".into(),
            display_type: "Google Wing Hummingbird".into(),
            v_min_mps: 0.0,
            v_max_mps: 44.88,
            accel_mps2: 1.71,
            sensing_range_m: 1000.0,
        }
    }

    /// Class Y (weak): `[0, 30.12]` m/s, `±1.02` m/s², 750 m sensing.
    pub fn class_y() -> Self {
        Self {
            class_name: "Y".into(),
            display_type: "Amazon Prime Air - MK30 Model".into(),
            v_min_mps: 0.0,
            v_max_mps: 30.12,
            accel_mps2: 1.02,
            sensing_range_m: 750.0,
        }
    }

    /// Limits logged for the MK30 vehicle in the published raw-observation
    /// example (`max 41.16`, `1.7` m/s²). Sensing range is not logged there.
    pub fn mk30_logged() -> Self {
        Self {
            class_name: "MK30".into(),
            display_type: "Amazon Prime Air - MK30 Model".into(),
            v_min_mps: 0.0,
            v_max_mps: 41.16,
            accel_mps2: 1.7,
            sensing_range_m: 1000.0,
        }
    }

    /// Limits logged for the X-Wing vehicle in the published example.
    pub fn xwing_logged() -> Self {
        Self {
            class_name: "XWING".into(),
            display_type: "Google X-Wing".into(),
            v_min_mps: 0.0,
            v_max_mps: 30.87,
            accel_mps2: 1.03,
            sensing_range_m: 750.0,
        }
    }

    /// Built-in presets by class name.
    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "X" => Some(Self::class_x()),
            "Y" => Some(Self::class_y()),
            "MK30" => Some(Self::mk30_logged()),
            "XWING" => Some(Self::xwing_logged()),
            _ => None,
        }
    }

    pub fn accel_set(&self) -> [f64; 3] {
        [-self.accel_mps2, 0.0, self.accel_mps2]
    }

    pub fn accel_for(&self, action: Action) -> f64 {
        match action {
            Action::Accelerate => self.accel_mps2,
            Action::Hold => 0.0,
            Action::Decelerate => -self.accel_mps2,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let finite = [
            self.v_min_mps,
            self.v_max_mps,
            self.accel_mps2,
            self.sensing_range_m,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(ConfigError::NonFinite(self.class_name.clone()));
        }
        if self.v_min_mps < 0.0 || self.v_min_mps >= self.v_max_mps {
            return Err(ConfigError::SpeedRange(self.class_name.clone()));
        }
        if self.accel_mps2 <= 0.0 {
            return Err(ConfigError::Accel(self.class_name.clone()));
        }
        if self.sensing_range_m <= 0.0 {
            return Err(ConfigError::Sensing(self.class_name.clone()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ConfigError {
    #[error("class {0}: non-finite limit")]
    NonFinite(String),
    #[error("class {0}: need 0 <= v_min < v_max")]
    SpeedRange(String),
    #[error("class {0}: acceleration magnitude must be positive")]
    Accel(String),
    #[error("class {0}: sensing range must be positive")]
    Sensing(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Action {
    Accelerate,
    Hold,
    Decelerate,
}

impl Action {
    pub const ALL: [Action; 3] = [Action::Accelerate, Action::Hold, Action::Decelerate];

    pub fn as_str(self) -> &'static str {
        match self {
            Action::Accelerate => "Accelerate",
            Action::Hold => "Hold",
            Action::Decelerate => "Decelerate",
        }
    }

    pub fn as_lower(self) -> &'static str {
        match self {
            Action::Accelerate => "accelerate",
            Action::Hold => "hold",
            Action::Decelerate => "decelerate",
        }
    }

    /// Accelerate and Decelerate swap; Hold maps to itself.
    pub fn opposite(self) -> Self {
        match self {
            Action::Accelerate => Action::Decelerate,
            Action::Hold => Action::Hold,
            Action::Decelerate => Action::Accelerate,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Action::Accelerate => 0,
            Action::Hold => 1,
            Action::Decelerate => 2,
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Who is flying an agent, for NMAC pair classes and success rates.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyTag {
    RuleBased,
    External(String),
}

impl PolicyTag {
    pub fn is_external(&self) -> bool {
        matches!(self, PolicyTag::External(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub id: String,
    pub config: AgentConfig,
    pub position: GeoPosition,
    pub speed_mps: f64,
    pub heading_deg: f64,
    pub route_id: String,
    /// Index of the current leg: the agent flies from waypoint `leg_index`
    /// toward waypoint `leg_index + 1` of its route.
    pub leg_index: usize,
    pub desired_speed_mps: f64,
    pub last_action: Action,
    pub spawned_at_s: f64,
    pub completed: bool,
    pub completed_at_s: Option<f64>,
    pub had_nmac: bool,
    pub policy_tag: PolicyTag,
}

impl AgentState {
    pub fn is_active(&self) -> bool {
        !self.completed
    }
}

/// Replace `proposed` with Hold when the agent already sits on the speed
/// bound the action pushes against.
pub fn enforce_speed_constraint(state: &AgentState, proposed: Action) -> Action {
    enforce_speed_limits(
        state.speed_mps,
        state.config.v_min_mps,
        state.config.v_max_mps,
        proposed,
    )
}

pub fn enforce_speed_limits(speed_mps: f64, v_min: f64, v_max: f64, proposed: Action) -> Action {
    match proposed {
        Action::Accelerate if speed_mps >= v_max => Action::Hold,
        Action::Decelerate if speed_mps <= v_min => Action::Hold,
        a => a,
    }
}

/// Integrate one tick: update speed from the action, then fly the new speed
/// along the route, rolling over waypoints. An agent that reaches its
/// terminal waypoint is marked completed at `t_end_s`.
pub fn apply_action(
    state: &AgentState,
    action: Action,
    dt_s: f64,
    airspace: &Airspace,
    t_end_s: f64,
) -> AgentState {
    let mut next = state.clone();
    next.last_action = action;
    next.speed_mps = update_speed(
        state.speed_mps,
        state.config.accel_for(action),
        dt_s,
        state.config.v_min_mps,
        state.config.v_max_mps,
    );
    if state.completed {
        return next;
    }
    let Some(route) = airspace.route(&state.route_id) else {
        return next;
    };
    let mut budget = next.speed_mps * dt_s;
    loop {
        let Some(target) = route.waypoint_position(next.leg_index + 1) else {
            next.completed = true;
            next.completed_at_s = Some(t_end_s);
            break;
        };
        let target = target.with_alt(next.position.alt_m);
        let remaining = haversine_distance(next.position, target);
        if budget >= remaining {
            budget -= remaining;
            next.position = target;
            next.leg_index += 1;
            if next.leg_index + 1 >= route.len() {
                next.completed = true;
                next.completed_at_s = Some(t_end_s);
                break;
            }
            if budget <= 0.0 {
                break;
            }
        } else {
            if let Ok(h) = initial_bearing(next.position, target) {
                next.heading_deg = h;
            }
            next.position = step_position(next.position, next.heading_deg, budget, 1.0);
            break;
        }
    }
    if !next.completed {
        if let Some(target) = route.waypoint_position(next.leg_index + 1) {
            if let Ok(h) = initial_bearing(next.position, target) {
                next.heading_deg = h;
            }
        }
    }
    next
}
