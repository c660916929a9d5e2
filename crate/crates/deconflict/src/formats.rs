//! On-disk formats: scenario documents, line-delimited records, dataset
//! sidecars, tick logs and trajectory tables.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use deconflict_core::engine::{NmacEvent, TickRecord};
use deconflict_core::{Action, PromptPair, RuleParams, Scenario};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Line { path: PathBuf, line: usize, message: String },
    #[error("{path}: {message}")]
    Document { path: PathBuf, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> FormatError + '_ {
    move |source| FormatError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, FormatError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(path))?;
    }
    File::create(path).map(BufWriter::new).map_err(io_err(path))
}

/// Pretty JSON document with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), FormatError> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| FormatError::Document {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    w.write_all(b"\n").and_then(|_| w.flush()).map_err(io_err(path))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, FormatError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| FormatError::Document {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// One compact JSON object per line. Returns the record count.
pub fn write_jsonl<'a, T: Serialize + 'a>(
    path: &Path,
    records: impl IntoIterator<Item = &'a T>,
) -> Result<usize, FormatError> {
    let mut w = create(path)?;
    let mut n = 0;
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| FormatError::Line {
            path: path.to_path_buf(),
            line: n + 1,
            message: e.to_string(),
        })?;
        w.write_all(b"\n").map_err(io_err(path))?;
        n += 1;
    }
    w.flush().map_err(io_err(path))?;
    Ok(n)
}

/// Read line-delimited records. Blank lines are skipped; a bad line is
/// reported by its 1-based number.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, FormatError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| FormatError::Line {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn save_scenario(path: &Path, scenario: &Scenario) -> Result<(), FormatError> {
    write_json(path, scenario)
}

/// Load and validate a scenario document.
pub fn load_scenario(path: &Path) -> Result<Scenario, FormatError> {
    let s: Scenario = read_json(path)?;
    s.validate().map_err(|e| FormatError::Document {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(s)
}

pub fn export_dataset(path: &Path, pairs: &[PromptPair]) -> Result<usize, FormatError> {
    write_jsonl(path, pairs)
}

pub fn import_dataset(path: &Path) -> Result<Vec<PromptPair>, FormatError> {
    read_jsonl(path)
}

/// Sidecar written next to every dataset: what produced it and what it
/// contains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub records: usize,
    pub train: usize,
    pub validation: usize,
    /// Label counts keyed by action name.
    pub class_balance: BTreeMap<String, usize>,
    /// How often each rule branch fired, keyed by branch code, including
    /// branches that never fired.
    pub branch_counts: BTreeMap<String, u64>,
    pub unfired_branches: Vec<String>,
    pub scenario_seeds: Vec<u64>,
    pub episodes_per_scenario: u64,
    /// Rule parameters needed to replay every label.
    pub rule: RuleParams,
}

impl DatasetMeta {
    pub fn class_fraction(&self, action: Action) -> f64 {
        if self.records == 0 {
            return 0.0;
        }
        self.class_balance.get(action.as_str()).copied().unwrap_or(0) as f64 / self.records as f64
    }
}

/// `data.jsonl` → `data.meta.json`.
pub fn meta_path(dataset: &Path) -> PathBuf {
    dataset.with_extension("meta.json")
}

pub fn write_tick_log(path: &Path, log: &[TickRecord]) -> Result<usize, FormatError> {
    write_jsonl(path, log)
}

pub fn read_tick_log(path: &Path) -> Result<Vec<TickRecord>, FormatError> {
    read_jsonl(path)
}

/// Plot-ready trajectory table, one row per agent per tick (pre-tick
/// state plus the action flown during the tick).
pub fn write_trajectory_csv(path: &Path, log: &[TickRecord]) -> Result<usize, FormatError> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let csv_err = |e: csv::Error| FormatError::Document {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    w.write_record([
        "tick",
        "t_s",
        "agent_id",
        "route_id",
        "lat",
        "lon",
        "alt_m",
        "speed_mps",
        "heading_deg",
        "next_wpt_id",
        "dist_to_nxt_wpt_m",
        "intruders_ahead",
        "applied",
    ])
    .map_err(csv_err)?;
    for r in log {
        let o = &r.observation.ownship;
        w.write_record([
            r.tick.to_string(),
            r.t_s.to_string(),
            r.agent_id.clone(),
            o.route_id.clone(),
            o.lat.to_string(),
            o.lon.to_string(),
            o.altitude_m.to_string(),
            o.speed_mps.to_string(),
            o.heading_deg.to_string(),
            o.next_wpt_id.clone(),
            o.dist_to_nxt_wpt_m.to_string(),
            r.observation.num_intruders_ahead().to_string(),
            r.applied.as_str().to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(log.len())
}

/// One row per NMAC event, keyed by scenario name and episode seed.
pub fn write_nmac_csv(path: &Path, events: &[(&str, u64, NmacEvent)]) -> Result<usize, FormatError> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let csv_err = |e: csv::Error| FormatError::Document {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    w.write_record(["scenario", "episode", "t_s", "a", "b", "pair_class"]).map_err(csv_err)?;
    for (scenario, episode, e) in events {
        let class = serde_json::to_value(e.pair_class)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default();
        w.write_record([scenario.to_string(), episode.to_string(), e.t_s.to_string(), e.a.clone(), e.b.clone(), class])
            .map_err(csv_err)?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(events.len())
}
