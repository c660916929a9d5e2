//! Rule-policy episodes turned into supervised prompt/target records.

use std::collections::BTreeMap;

use deconflict_core::airspace::generate_scenario;
use deconflict_core::engine::{branch_codes, run_episode, EngineError, EngineParams, TickRecord};
use deconflict_core::policy::RulePolicy;
use deconflict_core::prompt::{render_prompt, split_for, target_text, PromptSource, Split};
use deconflict_core::rules::decide;
use deconflict_core::{Action, Airspace, Policy, PolicyAssignment, PromptPair, RuleParams, Scenario, ScenarioParams};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::formats::DatasetMeta;

/// Scenarios generated per round while growing toward `min_records`. Fixed
/// so the output does not depend on the thread count.
const GROW_BATCH: u64 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub episodes_per_scenario: u64,
    /// Keep adding generated scenarios until at least this many records
    /// exist. Zero means exactly the listed scenarios.
    pub min_records: usize,
    /// Seed of the first generated scenario; later ones count up.
    pub scenario_seed_start: u64,
    pub scenario_params: ScenarioParams,
    pub validation_percent: u8,
    pub engine: EngineParams,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            episodes_per_scenario: 1,
            min_records: 0,
            scenario_seed_start: 0,
            scenario_params: ScenarioParams::default(),
            validation_percent: 10,
            engine: EngineParams::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub pairs: Vec<PromptPair>,
    pub meta: DatasetMeta,
}

fn pair_from(record: &TickRecord, scenario_seed: u64, episode: u64, cfg: &DatasetConfig) -> PromptPair {
    let label = record.decided;
    let mut observation = record.observation.clone();
    observation.label = Some(label);
    let (system, user) = render_prompt(&observation, &cfg.engine.bins, &cfg.engine.template);
    PromptPair {
        system,
        user,
        target: target_text(&cfg.engine.template, label),
        label,
        source: PromptSource {
            scenario_seed,
            episode,
            t_s: record.t_s,
            agent_id: record.agent_id.clone(),
            decision_seed: record.decision_seed,
            split: split_for(scenario_seed, &record.agent_id, cfg.validation_percent),
            observation,
        },
    }
}

struct EpisodeRecords {
    pairs: Vec<PromptPair>,
    branches: BTreeMap<String, u64>,
}

fn run_one(airspace: &Airspace, episode: u64, cfg: &DatasetConfig) -> Result<EpisodeRecords, EngineError> {
    let mut engine = cfg.engine.clone();
    engine.record_log = true;
    let mut rule = RulePolicy::new(engine.rule);
    let mut policies: [&mut dyn Policy; 1] = [&mut rule];
    let out = run_episode(airspace, &mut policies, &PolicyAssignment::all(0), &engine, episode)?;
    let seed = airspace.scenario.seed;
    Ok(EpisodeRecords {
        pairs: out.log.iter().map(|r| pair_from(r, seed, episode, cfg)).collect(),
        branches: out.branch_counts,
    })
}

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("scenario {seed}: {message}")]
    Scenario { seed: u64, message: String },
}

fn airspace_for(s: Scenario) -> Result<Airspace, DatasetError> {
    let seed = s.seed;
    Airspace::new(s).map_err(|e| DatasetError::Scenario {
        seed,
        message: e.to_string(),
    })
}

/// Run `cfg.episodes_per_scenario` rule-policy episodes on every scenario
/// (in parallel, collected in order), then keep generating scenarios from
/// `cfg.scenario_params` until `cfg.min_records` is met.
pub fn generate(scenarios: Vec<Scenario>, cfg: &DatasetConfig) -> Result<Dataset, DatasetError> {
    let mut airspaces: Vec<Airspace> = scenarios.into_iter().map(airspace_for).collect::<Result<_, _>>()?;
    let mut pairs = Vec::new();
    let mut branches: BTreeMap<String, u64> = branch_codes().into_iter().map(|c| (c.to_string(), 0)).collect();
    let mut seeds = Vec::new();
    let mut next_seed = cfg.scenario_seed_start;
    loop {
        let jobs: Vec<(usize, u64)> = (0..airspaces.len())
            .flat_map(|i| (0..cfg.episodes_per_scenario).map(move |e| (i, e)))
            .collect();
        let results: Vec<EpisodeRecords> = jobs
            .par_iter()
            .map(|&(i, e)| run_one(&airspaces[i], e, cfg))
            .collect::<Result<_, _>>()?;
        seeds.extend(airspaces.iter().map(|a| a.scenario.seed));
        for r in results {
            pairs.extend(r.pairs);
            for (k, v) in r.branches {
                *branches.entry(k).or_default() += v;
            }
        }
        if pairs.len() >= cfg.min_records || cfg.episodes_per_scenario == 0 {
            break;
        }
        airspaces = (0..GROW_BATCH)
            .map(|k| {
                let seed = next_seed + k;
                generate_scenario(&cfg.scenario_params, seed)
                    .map_err(|e| DatasetError::Scenario {
                        seed,
                        message: e.to_string(),
                    })
                    .and_then(airspace_for)
            })
            .collect::<Result<_, _>>()?;
        next_seed += GROW_BATCH;
    }
    let meta = summarize(&pairs, branches, seeds, cfg);
    Ok(Dataset { pairs, meta })
}

fn summarize(pairs: &[PromptPair], branches: BTreeMap<String, u64>, seeds: Vec<u64>, cfg: &DatasetConfig) -> DatasetMeta {
    let mut class_balance: BTreeMap<String, usize> = Action::ALL.iter().map(|a| (a.as_str().to_string(), 0)).collect();
    for p in pairs {
        *class_balance.entry(p.label.as_str().to_string()).or_default() += 1;
    }
    let validation = pairs.iter().filter(|p| p.source.split == Split::Validation).count();
    let unfired_branches = branches.iter().filter(|(_, n)| **n == 0).map(|(k, _)| k.clone()).collect();
    DatasetMeta {
        records: pairs.len(),
        train: pairs.len() - validation,
        validation,
        class_balance,
        branch_counts: branches,
        unfired_branches,
        scenario_seeds: seeds,
        episodes_per_scenario: cfg.episodes_per_scenario,
        rule: cfg.engine.rule,
    }
}

/// Indices of records whose label the rule policy does not reproduce from
/// the embedded observation and decision seed.
pub fn replay_mismatches(pairs: &[PromptPair], rule: &RuleParams) -> Vec<usize> {
    pairs
        .par_iter()
        .enumerate()
        .filter(|(_, p)| {
            !matches!(decide(&p.source.observation, rule, p.source.decision_seed), Ok(d) if d.action == p.label)
        })
        .map(|(i, _)| i)
        .collect()
}
