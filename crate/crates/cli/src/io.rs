//! Dataset directories, schedule files and trajectory CSVs.

use anyhow::{Context, Result};
use causal_flow::config::ExperimentConfig;
use causal_flow::data::{read_batch_csv, SeriesBatch};
use causal_flow::forecaster::Rollout;
use causal_flow::graph::InterventionSchedule;
use causal_flow::scm::Dataset;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    InvalidConfig(String),
    #[error("schedule file: {0}")]
    ScheduleParseError(String),
    #[error("prediction and oracle files do not align: {0}")]
    AlignmentError(String),
    #[error("{0}")]
    MissingArgument(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub context_len: usize,
    pub total_len: usize,
    pub nodes: usize,
    pub train_origins: Vec<usize>,
    pub test_origins: Vec<usize>,
}

pub fn write_dataset(dir: &Path, ds: &Dataset, cfg: &ExperimentConfig) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    ds.train.write_csv(BufWriter::new(File::create(dir.join("train.csv"))?))?;
    ds.test.write_csv(BufWriter::new(File::create(dir.join("test.csv"))?))?;
    let origins = |b: &SeriesBatch| (0..b.batch()).map(|i| b.time_origin(i)).collect();
    let info = DatasetInfo {
        context_len: ds.train.context_len(),
        total_len: ds.train.total_len(),
        nodes: ds.train.nodes(),
        train_origins: origins(&ds.train),
        test_origins: origins(&ds.test),
    };
    std::fs::write(dir.join("dataset.json"), serde_json::to_string_pretty(&info)?)?;
    std::fs::write(dir.join("config.json"), cfg.to_json())?;
    std::fs::write(
        dir.join("seed.log"),
        format!(
            "seed={}\ntrain_windows={}\ntest_windows={}\n",
            cfg.seed,
            ds.train.batch(),
            ds.test.batch()
        ),
    )?;
    Ok(())
}

/// Parses `0,3,7` into window indices.
pub fn parse_windows(text: &str) -> Result<Vec<usize>> {
    text.split(',')
        .map(|s| s.trim().parse::<usize>().with_context(|| format!("bad window index {s:?}")))
        .collect()
}

pub fn load_split(dir: &Path, split: Split, windows: Option<&[usize]>) -> Result<SeriesBatch> {
    let info: DatasetInfo = serde_json::from_str(
        &std::fs::read_to_string(dir.join("dataset.json"))
            .with_context(|| format!("reading {}", dir.join("dataset.json").display()))?,
    )?;
    let (file, origins) = match split {
        Split::Train => ("train.csv", info.train_origins),
        Split::Test => ("test.csv", info.test_origins),
    };
    let path = dir.join(file);
    let rd = BufReader::new(File::open(&path).with_context(|| format!("opening {}", path.display()))?);
    let batch = read_batch_csv(rd, info.context_len, origins)?;
    Ok(match windows {
        Some(w) => {
            if let Some(&bad) = w.iter().find(|&&b| b >= batch.batch()) {
                anyhow::bail!(CliError::MissingArgument(format!(
                    "window {bad} out of range for {} windows",
                    batch.batch()
                )));
            }
            batch.select(w)
        }
        None => batch,
    })
}

#[derive(Deserialize)]
struct ScheduleRow {
    node: usize,
    t: usize,
    value: f64,
}

/// Reads `node,t,value` rows, `t` counted from 1 at the window start.
pub fn read_schedule(path: &Path, context_len: usize, total_len: usize, nodes: usize) -> Result<InterventionSchedule> {
    let perr = |m: String| anyhow::Error::new(CliError::ScheduleParseError(m));
    let mut rd = csv::Reader::from_path(path).map_err(|e| perr(e.to_string()))?;
    let mut s = InterventionSchedule::new(context_len, total_len);
    for (i, rec) in rd.deserialize::<ScheduleRow>().enumerate() {
        let row = rec.map_err(|e| perr(format!("row {}: {e}", i + 1)))?;
        if row.t == 0 {
            return Err(perr(format!("row {}: t is 1-based", i + 1)));
        }
        s.insert(row.node, row.t - 1, row.value)
            .map_err(|e| perr(format!("row {}: {e}", i + 1)))?;
    }
    s.validate(nodes, context_len, total_len)
        .map_err(|e| perr(e.to_string()))?;
    Ok(s)
}

/// Trajectories keyed by `(sample, window)`, values `[node][step]`, plus
/// the sorted set of 1-based times.
pub struct Trajectories {
    pub map: BTreeMap<(usize, usize), Vec<Vec<f64>>>,
    pub times: Vec<usize>,
}

#[derive(Deserialize)]
struct TrajRow {
    sample: usize,
    window: usize,
    node: usize,
    t: usize,
    value: f64,
}

pub fn read_trajectories(path: &Path) -> Result<Trajectories> {
    let mut rd = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let rows: Vec<TrajRow> = rd.deserialize().collect::<Result<_, _>>()?;
    let mut times: Vec<usize> = rows.iter().map(|r| r.t).collect();
    times.sort_unstable();
    times.dedup();
    let nodes = rows.iter().map(|r| r.node + 1).max().unwrap_or(0);
    let pos: BTreeMap<usize, usize> = times.iter().enumerate().map(|(i, &t)| (t, i)).collect();
    let mut map: BTreeMap<(usize, usize), Vec<Vec<f64>>> = BTreeMap::new();
    for r in &rows {
        let e = map
            .entry((r.sample, r.window))
            .or_insert_with(|| vec![vec![f64::NAN; times.len()]; nodes]);
        e[r.node][pos[&r.t]] = r.value;
    }
    for (key, v) in &map {
        if v.iter().flatten().any(|x| x.is_nan()) {
            anyhow::bail!(CliError::AlignmentError(format!(
                "{} has gaps in sample {}, window {}",
                path.display(),
                key.0,
                key.1
            )));
        }
    }
    Ok(Trajectories { map, times })
}

pub fn rollouts_from_values(values: Vec<(usize, Vec<Vec<f64>>)>) -> Vec<Rollout> {
    values
        .into_iter()
        .map(|(window, v)| Rollout {
            window,
            sample: 0,
            latents: v.iter().map(|r| vec![None; r.len()]).collect(),
            values: v,
        })
        .collect()
}
