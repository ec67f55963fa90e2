//! Aggregation and serialization of benchmark results.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BenchConfig, EpisodeResult};
use crate::error::{Error, Result};

/// Two-sided 95 % normal quantile.
const Z95: f64 = 1.959_963_984_540_054;

/// Wilson score interval for `k` successes in `n` trials at 95 %.
pub fn wilson_interval(k: usize, n: usize) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let n = n as f64;
    let p = k as f64 / n;
    let z2 = Z95 * Z95;
    let denom = 1.0 + z2 / n;
    let centre = (p + z2 / (2.0 * n)) / denom;
    let half = Z95 / denom * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalRow {
    pub goal: usize,
    pub successes: usize,
    pub trials: usize,
    pub rate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrictionRow {
    pub eta_spin: f64,
    pub successes: usize,
    pub trials: usize,
    pub rate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub seed: u64,
    pub config: BenchConfig,
    pub successes: usize,
    pub trials: usize,
    pub rate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub per_goal: Vec<GoalRow>,
    pub per_friction: Vec<FrictionRow>,
    #[serde(skip)]
    pub episodes: Vec<EpisodeResult>,
}

fn tally<'a>(eps: impl Iterator<Item = &'a EpisodeResult>) -> (usize, usize, f64, f64, f64) {
    let (mut k, mut n) = (0, 0);
    for e in eps {
        n += 1;
        k += e.success as usize;
    }
    let rate = if n == 0 { f64::NAN } else { k as f64 / n as f64 };
    let (lo, hi) = wilson_interval(k, n);
    (k, n, rate, lo, hi)
}

impl BenchReport {
    /// Assembles all aggregates from the episode list.
    pub fn from_episodes(config: BenchConfig, seed: u64, episodes: Vec<EpisodeResult>) -> Self {
        let per_goal = config
            .goals
            .iter()
            .map(|&g| {
                let (successes, trials, rate, ci_low, ci_high) = tally(episodes.iter().filter(|e| e.goal == g));
                GoalRow {
                    goal: g,
                    successes,
                    trials,
                    rate,
                    ci_low,
                    ci_high,
                }
            })
            .collect();
        let per_friction = config
            .eta_spin
            .iter()
            .enumerate()
            .map(|(i, &eta)| {
                let (successes, trials, rate, ci_low, ci_high) = tally(episodes.iter().filter(|e| e.eta_index == i));
                FrictionRow {
                    eta_spin: eta,
                    successes,
                    trials,
                    rate,
                    ci_low,
                    ci_high,
                }
            })
            .collect();
        let (successes, trials, rate, ci_low, ci_high) = tally(episodes.iter());
        Self {
            seed,
            config,
            successes,
            trials,
            rate,
            ci_low,
            ci_high,
            per_goal,
            per_friction,
            episodes,
        }
    }

    pub fn goal_rate(&self, goal: usize) -> Option<f64> {
        self.per_goal.iter().find(|r| r.goal == goal).map(|r| r.rate)
    }
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn read_csv<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Config(format!("csv: {other:?}")),
    }
}

/// Writes `bench.csv` (per goal), `bench_friction.csv`, `bench.json`,
/// gnuplot data files and one JSON line per episode into `dir`.
pub fn emit_report(report: &BenchReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_csv(&dir.join("bench.csv"), &report.per_goal)?;
    write_csv(&dir.join("bench_friction.csv"), &report.per_friction)?;
    serde_json::to_writer_pretty(BufWriter::new(File::create(dir.join("bench.json"))?), report)?;

    let mut f = BufWriter::new(File::create(dir.join("bench_goal.dat"))?);
    writeln!(f, "# goal rate ci_low ci_high successes trials")?;
    for r in &report.per_goal {
        writeln!(
            f,
            "{} {} {} {} {} {}",
            r.goal, r.rate, r.ci_low, r.ci_high, r.successes, r.trials
        )?;
    }
    f.flush()?;
    let mut f = BufWriter::new(File::create(dir.join("bench_friction.dat"))?);
    writeln!(f, "# eta_spin rate ci_low ci_high successes trials")?;
    for r in &report.per_friction {
        writeln!(
            f,
            "{} {} {} {} {} {}",
            r.eta_spin, r.rate, r.ci_low, r.ci_high, r.successes, r.trials
        )?;
    }
    f.flush()?;

    let mut f = BufWriter::new(File::create(dir.join("episodes.jsonl"))?);
    for e in &report.episodes {
        serde_json::to_writer(&mut f, e)?;
        writeln!(f)?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_goal_csv(path: &Path) -> Result<Vec<GoalRow>> {
    read_csv(path)
}

pub fn read_friction_csv(path: &Path) -> Result<Vec<FrictionRow>> {
    read_csv(path)
}

pub fn read_episodes(path: &Path) -> Result<Vec<EpisodeResult>> {
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
