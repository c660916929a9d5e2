//! Multi-agent sUAS tactical deconfliction: route geometry, kinematics,
//! intruder sensing, the rule-based supervisory policy, simulation-to-language
//! rendering and the reward/loss arithmetic used to align language-model
//! policies against it.
//!
//! The crate is `no_std` (with `alloc`). Everything here is a pure function
//! of its inputs and explicit seeds; file formats, transports and the command
//! line live in the `deconflict` crate.

#![no_std]

extern crate alloc;

pub mod agent;
pub mod airspace;
pub mod alignment;
pub mod engine;
pub mod fixtures;
pub mod geo;
pub mod observation;
pub mod policy;
pub mod prompt;
pub mod protocol;
pub mod rules;
pub mod seed;
pub mod sensing;

pub use agent::{Action, AgentConfig, AgentState, PolicyTag};
pub use airspace::{Airspace, Route, Scenario, ScenarioParams, Waypoint, WaypointKind};
pub use engine::{EngineParams, EpisodeMetrics, EpisodeOutcome, WorldState};
pub use geo::GeoPosition;
pub use observation::RawObservation;
pub use policy::{Policy, PolicyAssignment};
pub use prompt::{BinningTable, PromptPair, PromptTemplate};
pub use rules::{RuleBranch, RuleDecision, RuleParams};
