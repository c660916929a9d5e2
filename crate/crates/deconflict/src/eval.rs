//! Closed-loop evaluation: scenarios × seeds with a chosen policy flying a
//! chosen set of agents and the rule policy flying the rest.

use std::fmt;
use std::process::Command;
use std::str::FromStr;

use deconflict_core::engine::{run_episode, summarize, BatchSummary, EngineError, EngineParams, EpisodeOutcome};
use deconflict_core::policy::{ConstantPolicy, RulePolicy, UniformRandomPolicy};
use deconflict_core::{seed, Action, Airspace, Policy, PolicyAssignment, Scenario};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bridge::{BridgeError, BridgeOptions, BridgePolicy, BridgeStats, Connection};

/// Who flies the selected agents.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PolicySpec {
    Rule,
    Random,
    Constant(Action),
    /// Child process speaking the protocol on its standard streams.
    Stdio(String),
    /// Server listening on a TCP address.
    Tcp(String),
}

impl fmt::Display for PolicySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PolicySpec::Rule => f.write_str("rule"),
            PolicySpec::Random => f.write_str("random"),
            PolicySpec::Constant(a) => f.write_str(a.as_lower()),
            PolicySpec::Stdio(cmd) => write!(f, "stdio:{cmd}"),
            PolicySpec::Tcp(addr) => write!(f, "tcp:{addr}"),
        }
    }
}

impl FromStr for PolicySpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some(cmd) = s.strip_prefix("stdio:") {
            if cmd.split_whitespace().next().is_none() {
                return Err("stdio: needs a command".into());
            }
            return Ok(PolicySpec::Stdio(cmd.into()));
        }
        if let Some(addr) = s.strip_prefix("tcp:") {
            if addr.is_empty() {
                return Err("tcp: needs an address".into());
            }
            return Ok(PolicySpec::Tcp(addr.into()));
        }
        match s.to_ascii_lowercase().as_str() {
            "rule" => Ok(PolicySpec::Rule),
            "random" => Ok(PolicySpec::Random),
            other => Action::ALL
                .into_iter()
                .find(|a| a.as_lower() == other)
                .map(PolicySpec::Constant)
                .ok_or_else(|| {
                    format!("unknown policy `{s}` (rule, random, accelerate, hold, decelerate, stdio:CMD, tcp:ADDR)")
                }),
        }
    }
}

impl Serialize for PolicySpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PolicySpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl PolicySpec {
    pub fn is_remote(&self) -> bool {
        matches!(self, PolicySpec::Stdio(_) | PolicySpec::Tcp(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub policy: PolicySpec,
    /// How many agents per scenario the policy flies; all when unset.
    pub agents: Option<usize>,
    pub seeds: Vec<u64>,
    /// Seed of the uniform-random policy.
    pub random_seed: u64,
    pub engine: EngineParams,
    pub bridge: BridgeOptions,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            policy: PolicySpec::Rule,
            agents: None,
            seeds: (0..10).collect(),
            random_seed: 0,
            engine: EngineParams::default(),
            bridge: BridgeOptions::default(),
        }
    }
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Bridge(#[from] BridgeError),
    #[error("{0}")]
    Config(String),
}

/// Agents flown by the evaluated policy: the first `n` ids in an order
/// keyed on the scenario seed, so every episode of a scenario uses the
/// same set.
pub fn selected_agents(scenario: &Scenario, n: Option<usize>) -> Vec<String> {
    let mut ids: Vec<&str> = scenario.spawn_plan.iter().map(|e| e.agent_id.as_str()).collect();
    let Some(n) = n else {
        return ids.into_iter().map(String::from).collect();
    };
    ids.sort_by_key(|id| (seed::combine(&[scenario.seed, seed::hash_str(id)]), *id));
    let mut chosen: Vec<String> = ids.into_iter().take(n).map(String::from).collect();
    chosen.sort();
    chosen
}

/// Index 0 is the rule policy, index 1 the evaluated one.
pub fn assignment(scenario: &Scenario, cfg: &EvalConfig) -> PolicyAssignment {
    let mut a = PolicyAssignment::all(0);
    if cfg.policy != PolicySpec::Rule {
        for id in selected_agents(scenario, cfg.agents) {
            a.assign(id, 1);
        }
    }
    a
}

#[derive(Debug, Clone)]
pub struct ScenarioResult {
    pub name: String,
    pub scenario_seed: u64,
    pub episodes: Vec<EpisodeOutcome>,
    pub summary: BatchSummary,
}

fn local_policy(spec: &PolicySpec, cfg: &EvalConfig) -> Box<dyn Policy + Send> {
    match spec {
        PolicySpec::Rule | PolicySpec::Stdio(_) | PolicySpec::Tcp(_) => Box::new(RulePolicy::new(cfg.engine.rule)),
        PolicySpec::Random => Box::new(UniformRandomPolicy::new(cfg.random_seed)),
        PolicySpec::Constant(a) => Box::new(ConstantPolicy::new(*a)),
    }
}

fn run_local(airspace: &Airspace, cfg: &EvalConfig, seed: u64) -> Result<EpisodeOutcome, EngineError> {
    let mut rule = RulePolicy::new(cfg.engine.rule);
    let mut other = local_policy(&cfg.policy, cfg);
    let mut policies: [&mut dyn Policy; 2] = [&mut rule, other.as_mut()];
    run_episode(airspace, &mut policies, &assignment(&airspace.scenario, cfg), &cfg.engine, seed)
}

pub fn connect(spec: &PolicySpec, opts: &BridgeOptions) -> Result<BridgePolicy, EvalError> {
    let conn = match spec {
        PolicySpec::Stdio(cmd) => {
            let mut parts = cmd.split_whitespace();
            let prog = parts.next().ok_or_else(|| EvalError::Config("empty command".into()))?;
            let mut c = Command::new(prog);
            c.args(parts);
            Connection::spawn(&mut c).map_err(BridgeError::from)?
        }
        PolicySpec::Tcp(addr) => Connection::tcp(addr.as_str()).map_err(BridgeError::from)?,
        _ => return Err(EvalError::Config(format!("{spec} is not a remote policy"))),
    };
    Ok(BridgePolicy::connect(conn, opts.clone())?)
}

/// Evaluate every scenario over `cfg.seeds`. Built-in policies run seeds
/// in parallel; a remote policy runs everything over one session.
pub fn run_eval(scenarios: &[(String, Airspace)], cfg: &EvalConfig) -> Result<(Vec<ScenarioResult>, Option<BridgeStats>), EvalError> {
    cfg.engine.validate()?;
    let mut bridge = if cfg.policy.is_remote() {
        // announce the limit the engine enforces
        let opts = BridgeOptions {
            max_response_chars: Some(cfg.engine.max_response_chars),
            ..cfg.bridge.clone()
        };
        Some(connect(&cfg.policy, &opts)?)
    } else {
        None
    };
    let mut results = Vec::new();
    for (name, airspace) in scenarios {
        let episodes: Vec<EpisodeOutcome> = match bridge.as_mut() {
            Some(b) => {
                let mut rule = RulePolicy::new(cfg.engine.rule);
                let assign = assignment(&airspace.scenario, cfg);
                cfg.seeds
                    .iter()
                    .map(|&s| {
                        let mut policies: [&mut dyn Policy; 2] = [&mut rule, &mut *b];
                        run_episode(airspace, &mut policies, &assign, &cfg.engine, s)
                    })
                    .collect::<Result<_, _>>()?
            }
            None => cfg
                .seeds
                .par_iter()
                .map(|&s| run_local(airspace, cfg, s))
                .collect::<Result<_, _>>()?,
        };
        let metrics: Vec<_> = episodes.iter().map(|e| e.metrics.clone()).collect();
        results.push(ScenarioResult {
            name: name.clone(),
            scenario_seed: airspace.scenario.seed,
            summary: summarize(&metrics),
            episodes,
        });
    }
    let stats = bridge.map(|b| {
        let s = b.stats();
        b.close();
        s
    });
    Ok((results, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use deconflict_core::airspace::generate_scenario;
    use deconflict_core::ScenarioParams;

    #[test]
    fn spec_round_trips_through_text() {
        for s in ["rule", "random", "hold", "decelerate", "stdio:python3 client.py --echo", "tcp:127.0.0.1:9000"] {
            let spec: PolicySpec = s.parse().unwrap();
            assert_eq!(spec.to_string(), s);
            let json = serde_json::to_string(&spec).unwrap();
            assert_eq!(serde_json::from_str::<PolicySpec>(&json).unwrap(), spec);
        }
        assert!("llm".parse::<PolicySpec>().is_err());
        assert!("stdio:".parse::<PolicySpec>().is_err());
    }

    #[test]
    fn selection_is_stable_and_sized() {
        let s = generate_scenario(&ScenarioParams::evaluation(5), 1).unwrap();
        let a = selected_agents(&s, Some(10));
        assert_eq!(a.len(), 10);
        assert_eq!(a, selected_agents(&s, Some(10)));
        assert_eq!(selected_agents(&s, None).len(), 25);
        let cfg = EvalConfig {
            policy: PolicySpec::Random,
            agents: Some(10),
            ..EvalConfig::default()
        };
        let asg = assignment(&s, &cfg);
        assert_eq!(asg.by_agent.len(), 10);
        assert!(assignment(&s, &EvalConfig::default()).by_agent.is_empty());
    }
}
