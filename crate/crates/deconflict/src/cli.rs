//! Command-line surface. Each subcommand resolves flags into a config
//! struct; a `--config` JSON file is merged over the flags, and
//! `--print-config` prints the result instead of running.
//!
//! Exit codes: 0 success, 1 validation error, 2 runtime or protocol error.

use std::ffi::OsString;
use std::io::{self, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use deconflict_core::airspace::{generate_scenario, AgentCount, MergeLayout};
use deconflict_core::alignment::classification_metrics;
use deconflict_core::engine::{branch_codes, EngineParams};
use deconflict_core::policy::{ConstantPolicy, RulePolicy, UniformRandomPolicy};
use deconflict_core::prompt::{parse_action, BinningTable, Split};
use deconflict_core::sensing::NmacCounting;
use deconflict_core::{Action, Airspace, Policy, RuleParams, ScenarioParams};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::bridge::{self, ServeOptions};
use crate::dataset::{self, DatasetConfig};
use crate::eval::{self, EvalConfig, PolicySpec};
use crate::formats::{self, DatasetMeta};
use crate::report;
use crate::scoring::{score_group, CandidateGroup, ScoreOptions};

/// Default parent directory for outputs when no path is given.
pub const RUN_DIR_ENV: &str = "DECONFLICT_RUN_DIR";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0:#}")]
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<formats::FormatError> for CliError {
    fn from(e: formats::FormatError) -> Self {
        CliError::Runtime(e.into())
    }
}

fn invalid(msg: impl std::fmt::Display) -> CliError {
    CliError::Validation(msg.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "deconflict", version, about = "Multi-agent sUAS tactical deconfliction simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Generate a scenario file.
    GenScenario(GenScenarioArgs),
    /// Run rule-policy episodes and export prompt/target records.
    GenDataset(GenDatasetArgs),
    /// Score model responses against a dataset's labels.
    EvalDataset(EvalDatasetArgs),
    /// Compute rewards and group-relative advantages for candidate groups.
    ScoreCandidates(ScoreArgs),
    /// Closed-loop evaluation over scenarios and seeds.
    RunEval(RunEvalArgs),
    /// Serve a built-in policy over the bridge protocol.
    ServePolicy(ServeArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON file merged over the flag values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    pub print_config: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Layout {
    SeparatePairs,
    Chained,
}

#[derive(Debug, Args, Default)]
pub struct ScenarioFlags {
    /// Exact route count (sets both bounds).
    #[arg(long)]
    pub routes: Option<u32>,
    #[arg(long)]
    pub min_routes: Option<u32>,
    #[arg(long)]
    pub max_routes: Option<u32>,
    #[arg(long)]
    pub agents_per_route: Option<u32>,
    #[arg(long)]
    pub min_agents: Option<u32>,
    #[arg(long)]
    pub max_agents: Option<u32>,
    #[arg(long, value_enum)]
    pub layout: Option<Layout>,
    #[arg(long)]
    pub class_per_route: bool,
    /// Allow route and agent counts outside 4-6 routes / 20-30 agents.
    #[arg(long)]
    pub free_ranges: bool,
}

impl ScenarioFlags {
    fn apply(&self, p: &mut ScenarioParams) {
        if let Some(r) = self.routes {
            p.route_count = (r, r);
        }
        if let Some(r) = self.min_routes {
            p.route_count.0 = r;
        }
        if let Some(r) = self.max_routes {
            p.route_count.1 = r;
        }
        if let Some(n) = self.agents_per_route {
            p.agents = AgentCount::PerRoute(n);
        }
        if self.min_agents.is_some() || self.max_agents.is_some() {
            let (lo, hi) = match p.agents {
                AgentCount::Total { min, max } => (min, max),
                AgentCount::PerRoute(_) => (20, 30),
            };
            p.agents = AgentCount::Total {
                min: self.min_agents.unwrap_or(lo),
                max: self.max_agents.unwrap_or(hi),
            };
        }
        if let Some(l) = self.layout {
            p.merge_layout = match l {
                Layout::SeparatePairs => MergeLayout::SeparatePairs,
                Layout::Chained => MergeLayout::Chained,
            };
        }
        if self.class_per_route {
            p.class_per_route = true;
        }
        if self.free_ranges {
            p.standard_ranges = false;
        }
    }
}

#[derive(Debug, Args, Default)]
pub struct RuleFlags {
    #[arg(long)]
    pub d_safe: Option<f64>,
    #[arg(long)]
    pub d_collision: Option<f64>,
    /// Base seed for tie-break coin flips.
    #[arg(long)]
    pub rule_seed: Option<u64>,
}

impl RuleFlags {
    fn apply(&self, r: &mut RuleParams) {
        if let Some(v) = self.d_safe {
            r.d_safe_m = v;
        }
        if let Some(v) = self.d_collision {
            r.d_collision_m = v;
        }
        if let Some(v) = self.rule_seed {
            r.rng_seed = v;
        }
    }
}

#[derive(Debug, Args, Default)]
pub struct EngineFlags {
    #[command(flatten)]
    pub rule: RuleFlags,
    #[arg(long)]
    pub dt: Option<f64>,
    #[arg(long)]
    pub nmac_threshold: Option<f64>,
    #[arg(long)]
    pub max_time: Option<f64>,
    /// Count one NMAC per violating tick instead of per interval.
    #[arg(long)]
    pub nmac_per_tick: bool,
    #[arg(long)]
    pub remove_on_nmac: bool,
    /// Report the closest intruder behind the ownship too.
    #[arg(long)]
    pub include_rear: bool,
    #[arg(long)]
    pub spawn_jitter: Option<f64>,
}

impl EngineFlags {
    fn apply(&self, e: &mut EngineParams) {
        let before = e.rule;
        self.rule.apply(&mut e.rule);
        if e.rule != before && e.bins == BinningTable::for_rules(&before) {
            e.bins = BinningTable::for_rules(&e.rule);
        }
        if let Some(v) = self.dt {
            e.dt_s = v;
        }
        if let Some(v) = self.nmac_threshold {
            e.nmac_threshold_m = v;
        }
        if let Some(v) = self.max_time {
            e.max_time_s = v;
        }
        if self.nmac_per_tick {
            e.nmac_counting = NmacCounting::PerTick;
        }
        if self.remove_on_nmac {
            e.remove_on_nmac = true;
        }
        if self.include_rear {
            e.sensing.include_rear = true;
        }
        if let Some(v) = self.spawn_jitter {
            e.spawn_jitter_s = v;
        }
    }
}

#[derive(Debug, Args)]
pub struct GenScenarioArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub scenario: ScenarioFlags,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenDatasetArgs {
    #[command(flatten)]
    pub common: Common,
    /// Scenario files; more are generated when --min-records asks for it.
    #[arg(long = "scenario")]
    pub scenarios: Vec<PathBuf>,
    #[arg(long)]
    pub episodes: Option<u64>,
    #[arg(long)]
    pub min_records: Option<usize>,
    #[arg(long)]
    pub seed_start: Option<u64>,
    #[arg(long)]
    pub validation_percent: Option<u8>,
    #[command(flatten)]
    pub scenario: ScenarioFlags,
    #[command(flatten)]
    pub engine: EngineFlags,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitFilter {
    All,
    Train,
    Validation,
}

#[derive(Debug, Args)]
pub struct EvalDatasetArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Lines of `{"record": <line index>, "text": "..."}`.
    #[arg(long)]
    pub responses: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub split: Option<SplitFilter>,
    /// Row label in the table.
    #[arg(long)]
    pub model: Option<String>,
    /// Also write the metrics as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub groups: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub lambda_f: Option<f64>,
    #[arg(long)]
    pub lambda_a: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub normalize_std: bool,
}

#[derive(Debug, Args)]
pub struct RunEvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long = "scenario")]
    pub scenarios: Vec<PathBuf>,
    /// Scenarios to generate when no files are given.
    #[arg(long)]
    pub generate: Option<usize>,
    #[arg(long)]
    pub seed_start: Option<u64>,
    #[command(flatten)]
    pub scenario: ScenarioFlags,
    /// rule, random, accelerate, hold, decelerate, stdio:CMD or tcp:ADDR.
    #[arg(long)]
    pub policy: Option<PolicySpec>,
    /// How many agents per scenario the policy flies (default all).
    #[arg(long)]
    pub agents: Option<usize>,
    /// `0..10` or `1,2,5`.
    #[arg(long, value_parser = parse_seeds)]
    pub seeds: Option<Seeds>,
    #[arg(long)]
    pub random_seed: Option<u64>,
    #[arg(long)]
    pub deadline_ms: Option<u64>,
    #[command(flatten)]
    pub engine: EngineFlags,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write per-episode tick logs.
    #[arg(long)]
    pub log: bool,
    /// Write per-episode trajectory tables.
    #[arg(long)]
    pub trajectory: bool,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub common: Common,
    /// rule, random, accelerate, hold or decelerate.
    #[arg(long)]
    pub policy: Option<PolicySpec>,
    /// Listen on this TCP address instead of standard streams.
    #[arg(long)]
    pub listen: Option<String>,
    /// Stop after this many TCP sessions.
    #[arg(long)]
    pub sessions: Option<usize>,
    #[arg(long)]
    pub random_seed: Option<u64>,
    #[command(flatten)]
    pub rule: RuleFlags,
}

/// Parsed `--seeds` value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Seeds(pub Vec<u64>);

fn parse_seeds(s: &str) -> Result<Seeds, String> {
    parse_seed_list(s).map(Seeds)
}

fn parse_seed_list(s: &str) -> Result<Vec<u64>, String> {
    let bad = |e: std::num::ParseIntError| e.to_string();
    if let Some((a, b)) = s.split_once("..") {
        let (a, b): (u64, u64) = (a.trim().parse().map_err(bad)?, b.trim().parse().map_err(bad)?);
        if a >= b {
            return Err(format!("empty seed range {s}"));
        }
        return Ok((a..b).collect());
    }
    s.split(',').map(|x| x.trim().parse().map_err(bad)).collect()
}

fn run_dir() -> PathBuf {
    std::env::var_os(RUN_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

/// Merge `over` into `base`: objects key by key, everything else replaced.
pub fn merge_json(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge_json(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Flags first, then the config file over them.
fn resolve<T: Serialize + DeserializeOwned>(from_flags: T, common: &Common) -> Result<T, CliError> {
    let Some(path) = &common.config else {
        return Ok(from_flags);
    };
    let text = std::fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    let over: Value = serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    let mut base = serde_json::to_value(&from_flags).map_err(|e| CliError::Runtime(e.into()))?;
    merge_json(&mut base, over);
    serde_json::from_value(base).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

/// Print the config when asked. Returns true when the command should stop.
fn print_config<T: Serialize>(cfg: &T, common: &Common) -> Result<bool, CliError> {
    if common.print_config {
        let s = serde_json::to_string_pretty(cfg).map_err(|e| CliError::Runtime(e.into()))?;
        println!("{s}");
    }
    Ok(common.print_config)
}

fn require_file(p: &Path) -> Result<(), CliError> {
    if p.is_file() {
        Ok(())
    } else {
        Err(invalid(format!("{}: no such file", p.display())))
    }
}

fn validate_engine(e: &EngineParams, classes_min_sensing: f64) -> Result<(), CliError> {
    e.validate().map_err(invalid)?;
    e.rule.validate(classes_min_sensing).map_err(invalid)?;
    e.bins.validate().map_err(invalid)?;
    e.template.validate().map_err(invalid)
}

fn min_sensing(p: &ScenarioParams) -> f64 {
    p.classes.iter().map(|c| c.sensing_range_m).fold(f64::INFINITY, f64::min)
}

// gen-scenario

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenScenarioConfig {
    pub seed: u64,
    pub params: ScenarioParams,
    pub out: PathBuf,
}

fn gen_scenario(a: GenScenarioArgs) -> Result<(), CliError> {
    let mut params = ScenarioParams::default();
    a.scenario.apply(&mut params);
    let out = a.out.unwrap_or_else(|| run_dir().join(format!("scenario-{}.json", a.seed)));
    let cfg = resolve(GenScenarioConfig { seed: a.seed, params, out }, &a.common)?;
    if print_config(&cfg, &a.common)? {
        return Ok(());
    }
    cfg.params.validate().map_err(invalid)?;
    let s = generate_scenario(&cfg.params, cfg.seed).map_err(|e| CliError::Runtime(e.into()))?;
    formats::save_scenario(&cfg.out, &s)?;
    println!(
        "wrote {} ({} routes, {} agents)",
        cfg.out.display(),
        s.routes.len(),
        s.spawn_plan.len()
    );
    Ok(())
}

// gen-dataset

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenDatasetConfig {
    pub scenarios: Vec<PathBuf>,
    pub dataset: DatasetConfig,
    pub out: PathBuf,
}

pub fn coverage_table(meta: &DatasetMeta) -> String {
    let mut s = format!(
        "records {} (train {}, validation {})\n",
        meta.records, meta.train, meta.validation
    );
    for a in Action::ALL {
        let n = meta.class_balance.get(a.as_str()).copied().unwrap_or(0);
        s.push_str(&format!("  {:<11}{n:>9}  {:>6.2}%\n", a.as_str(), 100.0 * meta.class_fraction(a)));
    }
    s.push_str("branches\n");
    for code in branch_codes() {
        let n = meta.branch_counts.get(code).copied().unwrap_or(0);
        s.push_str(&format!("  {code:<11}{n:>9}\n"));
    }
    s
}

fn gen_dataset(a: GenDatasetArgs) -> Result<(), CliError> {
    let mut d = DatasetConfig::default();
    a.scenario.apply(&mut d.scenario_params);
    a.engine.apply(&mut d.engine);
    if let Some(v) = a.episodes {
        d.episodes_per_scenario = v;
    }
    if let Some(v) = a.min_records {
        d.min_records = v;
    }
    if let Some(v) = a.seed_start {
        d.scenario_seed_start = v;
    }
    if let Some(v) = a.validation_percent {
        d.validation_percent = v;
    }
    if a.scenarios.is_empty() && d.min_records == 0 {
        d.min_records = 1;
    }
    let out = a.out.unwrap_or_else(|| run_dir().join("dataset.jsonl"));
    let cfg = resolve(
        GenDatasetConfig {
            scenarios: a.scenarios,
            dataset: d,
            out,
        },
        &a.common,
    )?;
    if print_config(&cfg, &a.common)? {
        return Ok(());
    }
    cfg.dataset.scenario_params.validate().map_err(invalid)?;
    validate_engine(&cfg.dataset.engine, min_sensing(&cfg.dataset.scenario_params))?;
    if cfg.dataset.validation_percent > 100 {
        return Err(invalid("validation percent must be at most 100"));
    }
    let mut scenarios = Vec::new();
    for p in &cfg.scenarios {
        require_file(p)?;
        scenarios.push(formats::load_scenario(p).map_err(invalid)?);
    }
    let started = Instant::now();
    let data = dataset::generate(scenarios, &cfg.dataset).map_err(|e| CliError::Runtime(e.into()))?;
    let n = formats::export_dataset(&cfg.out, &data.pairs)?;
    formats::write_json(&formats::meta_path(&cfg.out), &data.meta)?;
    print!("{}", coverage_table(&data.meta));
    println!("wrote {n} records to {}", cfg.out.display());
    eprintln!("generated in {:.1} s", started.elapsed().as_secs_f64());
    if !data.meta.unfired_branches.is_empty() {
        eprintln!(
            "warning: rule branches that never fired: {}",
            data.meta.unfired_branches.join(", ")
        );
    }
    Ok(())
}

// eval-dataset

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalDatasetConfig {
    pub dataset: PathBuf,
    pub responses: PathBuf,
    pub split: SplitFilter,
    pub model: String,
    pub out: Option<PathBuf>,
}

/// One model response, keyed by the record's 0-based line index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub record: usize,
    pub text: String,
}

fn eval_dataset(a: EvalDatasetArgs) -> Result<(), CliError> {
    let cfg = resolve(
        EvalDatasetConfig {
            dataset: a.dataset.unwrap_or_else(|| run_dir().join("dataset.jsonl")),
            responses: a.responses.unwrap_or_else(|| run_dir().join("responses.jsonl")),
            split: a.split.unwrap_or(SplitFilter::All),
            model: a.model.unwrap_or_else(|| "model".into()),
            out: a.out,
        },
        &a.common,
    )?;
    if print_config(&cfg, &a.common)? {
        return Ok(());
    }
    require_file(&cfg.dataset)?;
    require_file(&cfg.responses)?;
    let pairs = formats::import_dataset(&cfg.dataset).map_err(invalid)?;
    let responses: Vec<ResponseRecord> = formats::read_jsonl(&cfg.responses).map_err(invalid)?;
    let by_record: std::collections::BTreeMap<usize, &str> =
        responses.iter().map(|r| (r.record, r.text.as_str())).collect();
    let keep = |s: Split| match cfg.split {
        SplitFilter::All => true,
        SplitFilter::Train => s == Split::Train,
        SplitFilter::Validation => s == Split::Validation,
    };
    let mut labels = Vec::new();
    let mut predictions = Vec::new();
    let mut missing = Vec::new();
    for (i, p) in pairs.iter().enumerate().filter(|(_, p)| keep(p.source.split)) {
        labels.push(p.label);
        match by_record.get(&i) {
            Some(t) => predictions.push(parse_action(t).ok()),
            None => {
                missing.push(i);
                predictions.push(None);
            }
        }
    }
    if labels.is_empty() {
        return Err(invalid("no dataset records in the selected split"));
    }
    let m = classification_metrics(&predictions, &labels).map_err(|e| CliError::Runtime(e.into()))?;
    print!("{}", report::classification_table(&[(cfg.model.clone(), m.clone())]));
    if !missing.is_empty() {
        let shown: Vec<String> = missing.iter().take(10).map(|i| i.to_string()).collect();
        let more = if missing.len() > 10 { ", ..." } else { "" };
        println!(
            "{} records without a response (counted incorrect): {}{more}",
            missing.len(),
            shown.join(", ")
        );
    }
    if let Some(out) = &cfg.out {
        formats::write_json(out, &m)?;
    }
    Ok(())
}

// score-candidates

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreConfig {
    pub groups: PathBuf,
    pub out: PathBuf,
    pub options: ScoreOptions,
}

fn score_candidates(a: ScoreArgs) -> Result<(), CliError> {
    let mut options = ScoreOptions::default();
    let w = &mut options.weights;
    if let Some(v) = a.lambda_f {
        w.lambda_f = v;
    }
    if let Some(v) = a.lambda_a {
        w.lambda_a = v;
    }
    if let Some(v) = a.gamma {
        w.gamma = v;
    }
    if let Some(v) = a.epsilon {
        w.epsilon = v;
    }
    options.normalize_std = a.normalize_std;
    let cfg = resolve(
        ScoreConfig {
            groups: a.groups.unwrap_or_else(|| run_dir().join("groups.jsonl")),
            out: a.out.unwrap_or_else(|| run_dir().join("scored.jsonl")),
            options,
        },
        &a.common,
    )?;
    if print_config(&cfg, &a.common)? {
        return Ok(());
    }
    cfg.options.weights.validate().map_err(invalid)?;
    require_file(&cfg.groups)?;
    let groups: Vec<CandidateGroup> = formats::read_jsonl(&cfg.groups).map_err(invalid)?;
    let scored = groups
        .iter()
        .enumerate()
        .map(|(i, g)| score_group(g, &cfg.options).map_err(|e| invalid(format!("group {}: {e}", i + 1))))
        .collect::<Result<Vec<_>, _>>()?;
    let n = formats::write_jsonl(&cfg.out, &scored)?;
    let mean = if scored.is_empty() {
        0.0
    } else {
        scored.iter().map(|g| g.mean_reward).sum::<f64>() / scored.len() as f64
    };
    println!("scored {n} groups, mean reward {mean:.4}, wrote {}", cfg.out.display());
    Ok(())
}

// run-eval

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEvalConfig {
    pub scenarios: Vec<PathBuf>,
    /// Generated scenarios, used when no files are given.
    pub generate: usize,
    pub seed_start: u64,
    pub scenario_params: ScenarioParams,
    pub eval: EvalConfig,
    pub out: PathBuf,
    pub write_logs: bool,
    pub write_trajectories: bool,
}

#[derive(Debug, Serialize)]
struct EpisodeSummary<'a> {
    seed: u64,
    metrics: &'a deconflict_core::EpisodeMetrics,
    branch_counts: &'a std::collections::BTreeMap<String, u64>,
}

#[derive(Debug, Serialize)]
struct ScenarioSummary<'a> {
    name: &'a str,
    scenario_seed: u64,
    summary: &'a deconflict_core::engine::BatchSummary,
    episodes: Vec<EpisodeSummary<'a>>,
}

#[derive(Debug, Serialize)]
struct EvalReport<'a> {
    policy: String,
    agents: Option<usize>,
    seeds: &'a [u64],
    scenarios: Vec<ScenarioSummary<'a>>,
    bridge: Option<bridge::BridgeStats>,
}

fn run_eval_cmd(a: RunEvalArgs) -> Result<(), CliError> {
    let mut scenario_params = ScenarioParams {
        route_count: (5, 6),
        agents: AgentCount::PerRoute(5),
        ..ScenarioParams::default()
    };
    a.scenario.apply(&mut scenario_params);
    let mut ev = EvalConfig::default();
    a.engine.apply(&mut ev.engine);
    if let Some(p) = a.policy {
        ev.policy = p;
    }
    ev.agents = a.agents;
    if let Some(Seeds(s)) = a.seeds {
        ev.seeds = s;
    }
    if let Some(s) = a.random_seed {
        ev.random_seed = s;
    }
    if let Some(d) = a.deadline_ms {
        ev.bridge.deadline_ms = d;
    }
    let cfg = resolve(
        RunEvalConfig {
            scenarios: a.scenarios,
            generate: a.generate.unwrap_or(3),
            seed_start: a.seed_start.unwrap_or(0),
            scenario_params,
            eval: ev,
            out: a.out.unwrap_or_else(|| run_dir().join("eval")),
            write_logs: a.log,
            write_trajectories: a.trajectory,
        },
        &a.common,
    )?;
    if print_config(&cfg, &a.common)? {
        return Ok(());
    }
    if cfg.eval.seeds.is_empty() {
        return Err(invalid("at least one seed is required"));
    }
    if matches!(cfg.eval.agents, Some(0)) {
        return Err(invalid("--agents must be positive"));
    }
    let mut eval_cfg = cfg.eval.clone();
    eval_cfg.engine.record_log = cfg.write_logs || cfg.write_trajectories;
    let mut airspaces = Vec::new();
    if cfg.scenarios.is_empty() {
        cfg.scenario_params.validate().map_err(invalid)?;
        validate_engine(&eval_cfg.engine, min_sensing(&cfg.scenario_params))?;
        for k in 0..cfg.generate as u64 {
            let seed = cfg.seed_start + k;
            let s = generate_scenario(&cfg.scenario_params, seed).map_err(|e| CliError::Runtime(e.into()))?;
            airspaces.push((format!("gen-{seed}"), Airspace::new(s).map_err(invalid)?));
        }
    } else {
        for p in &cfg.scenarios {
            require_file(p)?;
            let s = formats::load_scenario(p).map_err(invalid)?;
            let sensing = s.classes.iter().map(|c| c.sensing_range_m).fold(f64::INFINITY, f64::min);
            validate_engine(&eval_cfg.engine, sensing)?;
            let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            airspaces.push((name, Airspace::new(s).map_err(invalid)?));
        }
    }
    if airspaces.is_empty() {
        return Err(invalid("no scenarios to evaluate"));
    }
    let (results, stats) = eval::run_eval(&airspaces, &eval_cfg).map_err(|e| CliError::Runtime(e.into()))?;

    let rows: Vec<(String, deconflict_core::engine::BatchSummary)> =
        results.iter().map(|r| (r.name.clone(), r.summary.clone())).collect();
    let table = report::closed_loop_table(&rows);
    print!("{table}");
    if let Some(s) = &stats {
        println!(
            "bridge: {} requests, {} responses, {} fallbacks, {} protocol errors",
            s.requests,
            s.responses,
            s.fallbacks(),
            s.protocol_errors
        );
    }

    std::fs::create_dir_all(&cfg.out).with_context(|| cfg.out.display().to_string())?;
    std::fs::write(cfg.out.join("report.txt"), &table).with_context(|| cfg.out.display().to_string())?;
    let rep = EvalReport {
        policy: cfg.eval.policy.to_string(),
        agents: cfg.eval.agents,
        seeds: &cfg.eval.seeds,
        scenarios: results
            .iter()
            .map(|r| ScenarioSummary {
                name: &r.name,
                scenario_seed: r.scenario_seed,
                summary: &r.summary,
                episodes: r
                    .episodes
                    .iter()
                    .map(|e| EpisodeSummary {
                        seed: e.episode_seed,
                        metrics: &e.metrics,
                        branch_counts: &e.branch_counts,
                    })
                    .collect(),
            })
            .collect(),
        bridge: stats,
    };
    formats::write_json(&cfg.out.join("metrics.json"), &rep)?;
    let nmacs: Vec<_> = results
        .iter()
        .flat_map(|r| {
            r.episodes
                .iter()
                .flat_map(|e| e.world.nmac_log.iter().map(|n| (r.name.as_str(), e.episode_seed, n.clone())))
        })
        .collect();
    formats::write_nmac_csv(&cfg.out.join("nmac.csv"), &nmacs)?;
    for r in &results {
        for e in &r.episodes {
            let stem = format!("{}-seed{}", r.name, e.episode_seed);
            if cfg.write_logs {
                formats::write_tick_log(&cfg.out.join("logs").join(format!("{stem}.jsonl")), &e.log)?;
            }
            if cfg.write_trajectories {
                formats::write_trajectory_csv(&cfg.out.join("trajectories").join(format!("{stem}.csv")), &e.log)?;
            }
        }
    }
    Ok(())
}

// serve-policy

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServeConfig {
    pub policy: PolicySpec,
    pub listen: Option<String>,
    pub sessions: Option<usize>,
    pub random_seed: u64,
    pub rule: RuleParams,
}

fn make_policy(cfg: &ServeConfig) -> Box<dyn Policy> {
    match &cfg.policy {
        PolicySpec::Random => Box::new(UniformRandomPolicy::new(cfg.random_seed)),
        PolicySpec::Constant(a) => Box::new(ConstantPolicy::new(*a)),
        _ => Box::new(RulePolicy::new(cfg.rule)),
    }
}

fn serve_policy(a: ServeArgs) -> Result<(), CliError> {
    let mut rule = RuleParams::default();
    a.rule.apply(&mut rule);
    let cfg = resolve(
        ServeConfig {
            policy: a.policy.unwrap_or(PolicySpec::Rule),
            listen: a.listen,
            sessions: a.sessions,
            random_seed: a.random_seed.unwrap_or(0),
            rule,
        },
        &a.common,
    )?;
    if print_config(&cfg, &a.common)? {
        return Ok(());
    }
    if cfg.policy.is_remote() {
        return Err(invalid("serve-policy serves built-in policies only"));
    }
    let opts = ServeOptions {
        name: cfg.policy.to_string(),
        ..ServeOptions::default()
    };
    match &cfg.listen {
        Some(addr) => {
            let listener = TcpListener::bind(addr).map_err(|e| invalid(format!("{addr}: {e}")))?;
            let local = listener.local_addr().map_err(|e| CliError::Runtime(e.into()))?;
            eprintln!("listening on {local}");
            bridge::serve_tcp(&listener, &mut || make_policy(&cfg), &opts, cfg.sessions)
                .map_err(|e| CliError::Runtime(e.into()))
        }
        None => {
            let mut policy = make_policy(&cfg);
            let stdin = io::stdin().lock();
            let stdout = io::stdout().lock();
            bridge::serve(policy.as_mut(), &opts, stdin, stdout)
                .map(|_| ())
                .map_err(|e| CliError::Runtime(e.into()))
        }
    }
}

/// Parse `args` (including the program name) and run. Returns the exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let result = match cli.command {
        Cmd::GenScenario(a) => gen_scenario(a),
        Cmd::GenDataset(a) => gen_dataset(a),
        Cmd::EvalDataset(a) => eval_dataset(a),
        Cmd::ScoreCandidates(a) => score_candidates(a),
        Cmd::RunEval(a) => run_eval_cmd(a),
        Cmd::ServePolicy(a) => serve_policy(a),
    };
    let _ = io::stdout().flush();
    match result {
        Ok(()) => 0,
        Err(e) => {
            let kind = if e.exit_code() == 1 { "invalid" } else { "error" };
            eprintln!("{kind}: {e}");
            e.exit_code()
        }
    }
}
