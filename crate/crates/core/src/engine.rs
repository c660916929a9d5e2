//! Time-stepped closed-loop episodes.
//!
//! One tick:
//! 1. spawn due agents whose entry waypoint is clear;
//! 2. build every active agent's observation from the same snapshot;
//! 3. query policies, one batch per policy;
//! 4. apply tie-break partner assignments in ascending ownship id;
//! 5. apply the speed-limit override;
//! 6. integrate all agents simultaneously and advance the clock;
//! 7. record NMAC events and completions.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{apply_action, enforce_speed_constraint, Action, AgentState, PolicyTag};
use crate::airspace::{Airspace, SpawnEntry};
use crate::geo::{haversine_distance, initial_bearing};
use crate::observation::{build_observation, ObservationError, RawObservation};
use crate::policy::{Policy, PolicyAssignment, PolicyRequest, Reply};
use crate::prompt::{parse_action, render_prompt, BinningTable, PromptTemplate};
use crate::rules::{RuleBranch, RuleParams};
use crate::seed;
use crate::sensing::{NmacCounting, NmacTracker, SensingParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineParams {
    pub dt_s: f64,
    pub nmac_threshold_m: f64,
    pub max_time_s: f64,
    pub nmac_counting: NmacCounting,
    /// Take both agents out of the episode when they have an NMAC.
    pub remove_on_nmac: bool,
    /// A due agent waits while any active agent is this close to its entry.
    pub spawn_clearance_m: f64,
    /// Each spawn is delayed by a draw from `[0, spawn_jitter_s)` keyed on
    /// the episode seed and agent id.
    pub spawn_jitter_s: f64,
    /// Longest response text accepted from a text policy, in characters.
    pub max_response_chars: usize,
    pub sensing: SensingParams,
    pub rule: RuleParams,
    pub bins: BinningTable,
    pub template: PromptTemplate,
    /// Keep the per-agent per-tick log.
    pub record_log: bool,
}

impl Default for EngineParams {
    fn default() -> Self {
        let rule = RuleParams::default();
        Self {
            dt_s: 1.0,
            nmac_threshold_m: 150.0,
            max_time_s: 5400.0,
            nmac_counting: NmacCounting::PerInterval,
            remove_on_nmac: false,
            spawn_clearance_m: 600.0,
            spawn_jitter_s: 5.0,
            max_response_chars: 256,
            sensing: SensingParams::default(),
            rule,
            bins: BinningTable::for_rules(&rule),
            template: PromptTemplate::default(),
            record_log: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EngineError {
    #[error("engine parameters: {0}")]
    Params(&'static str),
    #[error("assignment references policy {index} but only {count} are attached")]
    MissingPolicy { index: usize, count: usize },
    #[error("policy {policy} returned {got} replies for {expected} requests")]
    ReplyCount {
        policy: String,
        expected: usize,
        got: usize,
    },
    #[error("spawn {0} references an unknown class or route")]
    Spawn(String),
    #[error(transparent)]
    Observation(#[from] ObservationError),
}

impl EngineParams {
    pub fn validate(&self) -> Result<(), EngineError> {
        if !(self.dt_s > 0.0 && self.dt_s.is_finite()) {
            return Err(EngineError::Params("dt must be positive"));
        }
        if !(self.nmac_threshold_m > 0.0) {
            return Err(EngineError::Params("NMAC threshold must be positive"));
        }
        if !(self.max_time_s > 0.0 && self.max_time_s.is_finite()) {
            return Err(EngineError::Params("max time must be positive"));
        }
        if !(self.spawn_clearance_m >= 0.0) {
            return Err(EngineError::Params("spawn clearance must be non-negative"));
        }
        if !(self.spawn_jitter_s >= 0.0 && self.spawn_jitter_s.is_finite()) {
            return Err(EngineError::Params("spawn jitter must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PairClass {
    #[serde(rename = "L-L")]
    ExternalExternal,
    #[serde(rename = "L-R")]
    ExternalRule,
    #[serde(rename = "R-R")]
    RuleRule,
}

impl PairClass {
    pub fn of(a: &PolicyTag, b: &PolicyTag) -> Self {
        match (a.is_external(), b.is_external()) {
            (true, true) => PairClass::ExternalExternal,
            (false, false) => PairClass::RuleRule,
            _ => PairClass::ExternalRule,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NmacEvent {
    pub t_s: f64,
    pub a: String,
    pub b: String,
    pub pair_class: PairClass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRecord {
    pub agent_id: String,
    pub spawned_at_s: f64,
    pub completed_at_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub t_s: f64,
    pub tick: u64,
    pub agents: BTreeMap<String, AgentState>,
    /// Spawn entries not yet in the air, in spawn order.
    pub pending: Vec<SpawnEntry>,
    pub nmac_log: Vec<NmacEvent>,
    pub completed_log: Vec<CompletionRecord>,
    /// Agents taken out after an NMAC, with the time.
    pub removed: Vec<(String, f64)>,
}

impl WorldState {
    pub fn new(airspace: &Airspace) -> Self {
        Self::with_jitter(airspace, 0, 0.0)
    }

    /// Initial world with every spawn time delayed by its episode jitter.
    pub fn with_jitter(airspace: &Airspace, episode_seed: u64, jitter_s: f64) -> Self {
        let mut pending = airspace.scenario.spawn_plan.clone();
        if jitter_s > 0.0 {
            for e in &mut pending {
                e.spawn_time_s += jitter_s * seed::unit(seed::combine(&[episode_seed, seed::hash_str(&e.agent_id)]));
            }
        }
        pending.sort_by(|a, b| {
            a.spawn_time_s
                .total_cmp(&b.spawn_time_s)
                .then_with(|| a.agent_id.cmp(&b.agent_id))
        });
        Self {
            t_s: 0.0,
            tick: 0,
            agents: BTreeMap::new(),
            pending,
            nmac_log: Vec::new(),
            completed_log: Vec::new(),
            removed: Vec::new(),
        }
    }

    pub fn active_count(&self) -> usize {
        self.agents.values().filter(|a| a.is_active()).count()
    }

    pub fn is_finished(&self) -> bool {
        self.pending.is_empty() && self.active_count() == 0
    }
}

/// One agent at one tick. Holds nothing that depends on how a policy was
/// reached, so logs from the same decisions compare byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickRecord {
    pub tick: u64,
    pub t_s: f64,
    pub agent_id: String,
    pub observation: RawObservation,
    /// The policy's own answer (Hold when it failed).
    pub decided: Action,
    /// Set when a tie-break partner assignment replaced `decided`.
    pub assigned_by: Option<String>,
    /// What was flown, after assignment and the speed-limit override.
    pub applied: Action,
    pub decision_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentOutcome {
    pub agent_id: String,
    pub policy: PolicyTag,
    pub class_name: String,
    pub route_id: String,
    pub spawned_at_s: f64,
    pub completed_at_s: Option<f64>,
    pub flight_time_s: Option<f64>,
    pub nmac_count: u32,
    pub success: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub nmac_all: u32,
    pub nmac_ll: u32,
    pub nmac_lr: u32,
    pub nmac_rr: u32,
    /// Success rate over external agents, or over all agents when none are
    /// external.
    pub success_rate: f64,
    /// Mean flight time of the successful agents counted in `success_rate`.
    pub mean_flight_time_s: Option<f64>,
    pub population: u32,
    pub successful: u32,
    pub completed: u32,
    pub timed_out: u32,
    pub policy_failures: u32,
    pub parse_failures: u32,
    pub agents: Vec<AgentOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub episode_seed: u64,
    pub world: WorldState,
    pub log: Vec<TickRecord>,
    pub metrics: EpisodeMetrics,
    /// Rule branch codes (and `SPD` for speed-limit overrides) reported by
    /// the rule policy.
    pub branch_counts: BTreeMap<String, u64>,
}

fn spawn_agent(e: &SpawnEntry, airspace: &Airspace, policy: PolicyTag, t_s: f64) -> Result<AgentState, EngineError> {
    let config = airspace
        .class(&e.class_name)
        .ok_or_else(|| EngineError::Spawn(e.agent_id.clone()))?
        .clone();
    let route = airspace
        .route(&e.route_id)
        .ok_or_else(|| EngineError::Spawn(e.agent_id.clone()))?;
    let (Some(p0), Some(p1)) = (route.waypoint_position(0), route.waypoint_position(1)) else {
        return Err(EngineError::Spawn(e.agent_id.clone()));
    };
    let position = p0.with_alt(e.altitude_m);
    let speed = e.desired_speed_mps.clamp(config.v_min_mps, config.v_max_mps);
    Ok(AgentState {
        id: e.agent_id.clone(),
        position,
        speed_mps: speed,
        heading_deg: initial_bearing(position, p1).unwrap_or(0.0),
        route_id: e.route_id.clone(),
        leg_index: 0,
        desired_speed_mps: speed,
        last_action: Action::Hold,
        spawned_at_s: t_s,
        completed: false,
        completed_at_s: None,
        had_nmac: false,
        policy_tag: policy,
        config,
    })
}

struct Decision {
    action: Action,
    partner: Option<(String, Action)>,
}

/// Run one episode to completion or timeout.
pub fn run_episode(
    airspace: &Airspace,
    policies: &mut [&mut dyn Policy],
    assignment: &PolicyAssignment,
    params: &EngineParams,
    episode_seed: u64,
) -> Result<EpisodeOutcome, EngineError> {
    params.validate()?;
    if assignment.max_index() >= policies.len() {
        return Err(EngineError::MissingPolicy {
            index: assignment.max_index(),
            count: policies.len(),
        });
    }
    for p in policies.iter_mut() {
        p.begin_episode(episode_seed);
    }
    let result = episode_loop(airspace, policies, assignment, params, episode_seed);
    for p in policies.iter_mut() {
        p.end_episode();
    }
    result
}

fn episode_loop(
    airspace: &Airspace,
    policies: &mut [&mut dyn Policy],
    assignment: &PolicyAssignment,
    params: &EngineParams,
    episode_seed: u64,
) -> Result<EpisodeOutcome, EngineError> {
    let mut world = WorldState::with_jitter(airspace, episode_seed, params.spawn_jitter_s);
    let mut log = Vec::new();
    let mut branch_counts: BTreeMap<String, u64> = BTreeMap::new();
    let mut tracker = NmacTracker::new(params.nmac_threshold_m, params.nmac_counting);
    let mut nmac_per_agent: BTreeMap<String, u32> = BTreeMap::new();
    let (mut policy_failures, mut parse_failures) = (0u32, 0u32);
    let eps = 1e-9;

    loop {
        // 1. spawns
        let t = world.t_s;
        let mut still_pending = Vec::new();
        for e in core::mem::take(&mut world.pending) {
            if e.spawn_time_s > t + eps {
                still_pending.push(e);
                continue;
            }
            let entry = airspace
                .route(&e.route_id)
                .and_then(|r| r.waypoint_position(0))
                .ok_or_else(|| EngineError::Spawn(e.agent_id.clone()))?;
            let blocked = world
                .agents
                .values()
                .any(|a| a.is_active() && haversine_distance(a.position, entry) < params.spawn_clearance_m);
            if blocked {
                still_pending.push(e);
                continue;
            }
            let tag = policies[assignment.index_for(&e.agent_id)].tag();
            let agent = spawn_agent(&e, airspace, tag, t)?;
            world.agents.insert(agent.id.clone(), agent);
        }
        world.pending = still_pending;

        if world.is_finished() || world.t_s >= params.max_time_s - eps {
            break;
        }

        // 2. observations from one snapshot
        let snapshot: Vec<AgentState> = world.agents.values().filter(|a| a.is_active()).cloned().collect();
        let mut requests: Vec<Vec<PolicyRequest>> = (0..policies.len()).map(|_| Vec::new()).collect();
        for a in &snapshot {
            let observation = build_observation(&snapshot, &a.id, airspace, &params.sensing)?;
            let idx = assignment.index_for(&a.id);
            let prompt = if policies[idx].needs_prompt() {
                render_prompt(&observation, &params.bins, &params.template).1
            } else {
                String::new()
            };
            requests[idx].push(PolicyRequest {
                episode: episode_seed,
                tick: world.tick,
                agent_id: a.id.clone(),
                prompt,
                observation,
                decision_seed: seed::decision_seed(params.rule.rng_seed, episode_seed, world.tick, &a.id),
            });
        }

        // 3. batched queries
        let mut decisions: BTreeMap<String, Decision> = BTreeMap::new();
        let mut requests_by_id: BTreeMap<String, PolicyRequest> = BTreeMap::new();
        for (idx, batch) in requests.into_iter().enumerate() {
            if batch.is_empty() {
                continue;
            }
            let replies = policies[idx].decide_batch(&batch);
            if replies.len() != batch.len() {
                return Err(EngineError::ReplyCount {
                    policy: policies[idx].name().into(),
                    expected: batch.len(),
                    got: replies.len(),
                });
            }
            for (req, reply) in batch.into_iter().zip(replies) {
                let d = match reply {
                    Reply::Action {
                        action,
                        partner,
                        branch,
                        overridden,
                    } => {
                        if let Some(b) = branch {
                            *branch_counts.entry(b.code().into()).or_default() += 1;
                        }
                        if overridden {
                            *branch_counts.entry("SPD".into()).or_default() += 1;
                        }
                        Decision { action, partner }
                    }
                    Reply::Text { text, partner } => {
                        let parsed = if text.chars().count() > params.max_response_chars {
                            None
                        } else {
                            parse_action(&text).ok()
                        };
                        match parsed {
                            Some(action) => Decision { action, partner },
                            None => {
                                parse_failures += 1;
                                Decision {
                                    action: Action::Hold,
                                    partner: None,
                                }
                            }
                        }
                    }
                    Reply::Failed { .. } => {
                        policy_failures += 1;
                        Decision {
                            action: Action::Hold,
                            partner: None,
                        }
                    }
                };
                decisions.insert(req.agent_id.clone(), d);
                requests_by_id.insert(req.agent_id.clone(), req);
            }
        }

        // 4. partner assignments, ascending ownship id
        let mut assigned: BTreeMap<String, (Action, String)> = BTreeMap::new();
        let mut sources: BTreeSet<String> = BTreeSet::new();
        for (id, d) in &decisions {
            if assigned.contains_key(id) {
                continue;
            }
            if let Some((pid, pa)) = &d.partner {
                if decisions.contains_key(pid) && !assigned.contains_key(pid) && !sources.contains(pid) {
                    assigned.insert(pid.clone(), (*pa, id.clone()));
                    sources.insert(id.clone());
                }
            }
        }

        // 5-6. override, integrate, advance
        let t_end = world.t_s + params.dt_s;
        for a in &snapshot {
            let d = &decisions[&a.id];
            let (chosen, by) = match assigned.get(&a.id) {
                Some((act, src)) => (*act, Some(src.clone())),
                None => (d.action, None),
            };
            let applied = enforce_speed_constraint(a, chosen);
            let next = apply_action(a, applied, params.dt_s, airspace, t_end);
            if params.record_log {
                let req = requests_by_id.remove(&a.id).expect("every active agent was queried");
                log.push(TickRecord {
                    tick: world.tick,
                    t_s: world.t_s,
                    agent_id: a.id.clone(),
                    observation: req.observation,
                    decided: d.action,
                    assigned_by: by,
                    applied,
                    decision_seed: req.decision_seed,
                });
            }
            if next.completed {
                world.completed_log.push(CompletionRecord {
                    agent_id: next.id.clone(),
                    spawned_at_s: next.spawned_at_s,
                    completed_at_s: t_end,
                });
            }
            world.agents.insert(next.id.clone(), next);
        }
        world.t_s = t_end;
        world.tick += 1;

        // 7. NMAC bookkeeping on the post-tick positions; agents that just
        // reached their exit have left the airspace.
        let states: Vec<AgentState> = world.agents.values().filter(|a| a.is_active()).cloned().collect();
        for (a, b) in tracker.update(&states) {
            let class = PairClass::of(&world.agents[&a].policy_tag, &world.agents[&b].policy_tag);
            world.nmac_log.push(NmacEvent {
                t_s: world.t_s,
                a: a.clone(),
                b: b.clone(),
                pair_class: class,
            });
            for id in [&a, &b] {
                *nmac_per_agent.entry(id.clone()).or_default() += 1;
                if let Some(s) = world.agents.get_mut(id) {
                    s.had_nmac = true;
                }
            }
            if params.remove_on_nmac {
                for id in [&a, &b] {
                    if let Some(s) = world.agents.get_mut(id) {
                        if s.is_active() {
                            s.completed = true;
                            world.removed.push((id.clone(), world.t_s));
                        }
                    }
                }
            }
        }
    }

    let metrics = compute_metrics(&world, &nmac_per_agent, policy_failures, parse_failures);
    Ok(EpisodeOutcome {
        episode_seed,
        world,
        log,
        metrics,
        branch_counts,
    })
}

/// Episode metrics from a finished world. `nmac_per_agent` counts NMAC
/// events per agent id.
pub fn compute_metrics(
    world: &WorldState,
    nmac_per_agent: &BTreeMap<String, u32>,
    policy_failures: u32,
    parse_failures: u32,
) -> EpisodeMetrics {
    let (mut ll, mut lr, mut rr) = (0u32, 0u32, 0u32);
    for e in &world.nmac_log {
        match e.pair_class {
            PairClass::ExternalExternal => ll += 1,
            PairClass::ExternalRule => lr += 1,
            PairClass::RuleRule => rr += 1,
        }
    }
    let removed: BTreeSet<&str> = world.removed.iter().map(|(id, _)| id.as_str()).collect();
    let agents: Vec<AgentOutcome> = world
        .agents
        .values()
        .map(|a| {
            let nmac_count = nmac_per_agent.get(&a.id).copied().unwrap_or(0);
            let completed_at_s = a.completed_at_s.filter(|_| !removed.contains(a.id.as_str()));
            AgentOutcome {
                agent_id: a.id.clone(),
                policy: a.policy_tag.clone(),
                class_name: a.config.class_name.clone(),
                route_id: a.route_id.clone(),
                spawned_at_s: a.spawned_at_s,
                completed_at_s,
                flight_time_s: completed_at_s.map(|c| c - a.spawned_at_s),
                nmac_count,
                success: completed_at_s.is_some() && nmac_count == 0,
            }
        })
        .collect();
    let any_external = agents.iter().any(|a| a.policy.is_external());
    let population: Vec<&AgentOutcome> = agents
        .iter()
        .filter(|a| !any_external || a.policy.is_external())
        .collect();
    let successful: Vec<&&AgentOutcome> = population.iter().filter(|a| a.success).collect();
    let success_rate = if population.is_empty() {
        1.0
    } else {
        successful.len() as f64 / population.len() as f64
    };
    let mean_flight_time_s = if successful.is_empty() {
        None
    } else {
        Some(successful.iter().filter_map(|a| a.flight_time_s).sum::<f64>() / successful.len() as f64)
    };
    let completed = agents.iter().filter(|a| a.completed_at_s.is_some()).count() as u32;
    let timed_out = world.agents.values().filter(|a| a.is_active()).count() as u32 + world.pending.len() as u32;
    EpisodeMetrics {
        nmac_all: ll + lr + rr,
        nmac_ll: ll,
        nmac_lr: lr,
        nmac_rr: rr,
        success_rate,
        mean_flight_time_s,
        population: population.len() as u32,
        successful: successful.len() as u32,
        completed,
        timed_out,
        policy_failures,
        parse_failures,
        agents,
    }
}

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
                n,
            };
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let std = if n < 2 {
            0.0
        } else {
            libm::sqrt(xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64)
        };
        Self { mean, std, n }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub episodes: usize,
    pub nmac_all: Stat,
    pub nmac_ll: Stat,
    pub nmac_lr: Stat,
    pub nmac_rr: Stat,
    pub success_rate: Stat,
    /// Over episodes that had at least one successful agent.
    pub mean_flight_time_s: Stat,
    pub policy_failures: Stat,
    pub parse_failures: Stat,
}

pub fn summarize(metrics: &[EpisodeMetrics]) -> BatchSummary {
    let col = |f: &dyn Fn(&EpisodeMetrics) -> f64| Stat::of(&metrics.iter().map(f).collect::<Vec<_>>());
    BatchSummary {
        episodes: metrics.len(),
        nmac_all: col(&|m| f64::from(m.nmac_all)),
        nmac_ll: col(&|m| f64::from(m.nmac_ll)),
        nmac_lr: col(&|m| f64::from(m.nmac_lr)),
        nmac_rr: col(&|m| f64::from(m.nmac_rr)),
        success_rate: col(&|m| m.success_rate),
        mean_flight_time_s: Stat::of(&metrics.iter().filter_map(|m| m.mean_flight_time_s).collect::<Vec<_>>()),
        policy_failures: col(&|m| f64::from(m.policy_failures)),
        parse_failures: col(&|m| f64::from(m.parse_failures)),
    }
}

/// Codes every rule branch can report, plus `SPD`.
pub fn branch_codes() -> Vec<&'static str> {
    let mut v: Vec<&'static str> = RuleBranch::ALL.iter().map(|b| b.code()).collect();
    v.push("SPD");
    v
}
