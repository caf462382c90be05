//! Monte Carlo ensembles of protocol runs and their statistics.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::protocol::{run_protocol, Outcome, ProtocolConfig, TrajectoryRecord};
use crate::sme::trajectory_seed;

pub const STATS_SCHEMA: &str = "qnd-cat/ensemble-stats/v1";

/// 97.5% standard normal quantile.
const Z95: f64 = 1.959_963_984_540_054;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnsembleConfig {
    /// Template run; `base.seed` is the ensemble seed.
    pub base: ProtocolConfig,
    pub k: usize,
    /// Worker threads; 0 uses all available cores.
    pub parallelism: usize,
    /// Per-run JSON files are written here when set.
    pub output_dir: Option<PathBuf>,
    pub histogram_bins: usize,
    pub histogram_range: (f64, f64),
    /// Keep the step logs and final states of every run in memory.
    pub keep_details: bool,
}

impl EnsembleConfig {
    pub fn new(base: ProtocolConfig, k: usize) -> Self {
        Self {
            base,
            k,
            parallelism: 0,
            output_dir: None,
            histogram_bins: 20,
            histogram_range: (0.5, 1.0),
            keep_details: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("ensemble size K must be >= 1".into()));
        }
        if self.histogram_bins == 0 {
            return Err(Error::Config("histogram needs at least one bin".into()));
        }
        let (lo, hi) = self.histogram_range;
        if !(lo < hi) {
            return Err(Error::Config(format!("histogram range [{lo}, {hi}] is empty")));
        }
        self.base.validate()
    }

    /// Config of trajectory `index`, seeded by `trajectory_seed(base.seed, index)`.
    pub fn trajectory_config(&self, index: usize) -> ProtocolConfig {
        let mut cfg = self.base.clone();
        cfg.seed = trajectory_seed(self.base.seed, index as u64);
        cfg
    }
}

/// Fixed bins over `[low, high]`, half-open except the last, which is closed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub low: f64,
    pub high: f64,
    pub counts: Vec<usize>,
    /// Values below `low` or above `high`.
    pub outside: usize,
}

impl Histogram {
    pub fn new(low: f64, high: f64, bins: usize) -> Self {
        Self {
            low,
            high,
            counts: vec![0; bins],
            outside: 0,
        }
    }

    pub fn edges(&self, bin: usize) -> (f64, f64) {
        let w = (self.high - self.low) / self.counts.len() as f64;
        (self.low + w * bin as f64, self.low + w * (bin + 1) as f64)
    }

    pub fn add(&mut self, v: f64) {
        if !(v >= self.low && v <= self.high) {
            self.outside += 1;
            return;
        }
        let n = self.counts.len();
        let bin = (0..n).find(|&b| v < self.edges(b).1).unwrap_or(n - 1);
        self.counts[bin] += 1;
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "bin_low,bin_high,count")?;
        for (b, c) in self.counts.iter().enumerate() {
            let (lo, hi) = self.edges(b);
            writeln!(out, "{lo},{hi},{c}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub stddev: f64,
}

impl Summary {
    /// NaN statistics for an empty sample; `stddev` is the sample (n − 1) value.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self {
                count: 0,
                mean: f64::NAN,
                median: f64::NAN,
                stddev: f64::NAN,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        };
        let stddev = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self {
            count: n,
            mean,
            median,
            stddev,
        }
    }
}

/// Wilson score interval for `successes` out of `n` at 95%.
pub fn wilson_interval(successes: usize, n: usize) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let nf = n as f64;
    let p = successes as f64 / nf;
    let z2 = Z95 * Z95;
    let denom = 1.0 + z2 / nf;
    let center = (p + z2 / (2.0 * nf)) / denom;
    let half = Z95 * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt() / denom;
    let lo = if successes == 0 { 0.0 } else { (center - half).max(0.0) };
    let hi = if successes == n { 1.0 } else { (center + half).min(1.0) };
    (lo, hi)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleStats {
    pub schema: String,
    pub seed: u64,
    pub k: usize,
    pub success_count: usize,
    pub timeout_count: usize,
    pub numerical_failure_count: usize,
    pub success_probability: f64,
    /// Wilson 95% interval.
    pub success_ci: (f64, f64),
    /// Over successful runs with a fidelity result.
    pub fidelity: Summary,
    /// Mean over all runs, counting failures as zero.
    pub unconditional_fidelity_mean: f64,
    pub histogram: Histogram,
    pub mean_restarts: f64,
    pub mean_success_time: f64,
    /// Runs whose truncation guard fired.
    pub leakage_flags: usize,
    pub max_trace_error: f64,
    pub max_hermiticity_error: f64,
}

impl EnsembleStats {
    pub fn from_records(records: &[TrajectoryRecord], config: &EnsembleConfig) -> Self {
        let count = |o: Outcome| records.iter().filter(|r| r.outcome == o).count();
        let k = records.len();
        let success_count = count(Outcome::Success);
        let fidelities: Vec<f64> = records
            .iter()
            .filter(|r| r.is_success())
            .filter_map(|r| r.fidelity.map(|f| f.value))
            .collect();
        let (lo, hi) = config.histogram_range;
        let mut histogram = Histogram::new(lo, hi, config.histogram_bins);
        fidelities.iter().for_each(|&f| histogram.add(f));
        let success_times: Vec<f64> = records.iter().filter(|r| r.is_success()).map(|r| r.elapsed).collect();
        let kf = k.max(1) as f64;
        Self {
            schema: STATS_SCHEMA.into(),
            seed: config.base.seed,
            k,
            success_count,
            timeout_count: count(Outcome::Timeout),
            numerical_failure_count: count(Outcome::NumericalFailure),
            success_probability: success_count as f64 / kf,
            success_ci: wilson_interval(success_count, k),
            fidelity: Summary::of(&fidelities),
            unconditional_fidelity_mean: fidelities.iter().sum::<f64>() / kf,
            histogram,
            mean_restarts: records.iter().map(|r| r.restarts as f64).sum::<f64>() / kf,
            mean_success_time: Summary::of(&success_times).mean,
            leakage_flags: records.iter().filter(|r| r.leakage.flagged).count(),
            max_trace_error: records.iter().map(|r| r.invariants.max_trace_error).fold(0.0, f64::max),
            max_hermiticity_error: records
                .iter()
                .map(|r| r.invariants.max_hermiticity_error)
                .fold(0.0, f64::max),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Records in index order, their statistics, and any per-file write errors.
#[derive(Debug, Clone)]
pub struct EnsembleRun {
    pub stats: EnsembleStats,
    pub records: Vec<TrajectoryRecord>,
    pub write_errors: Vec<String>,
}

fn run_one(config: &EnsembleConfig, index: usize) -> (TrajectoryRecord, Option<String>) {
    let cfg = config.trajectory_config(index);
    let mut record = run_protocol(&cfg).expect("configuration validated before the ensemble");
    let write_error = config.output_dir.as_ref().and_then(|dir| {
        let path = dir.join(format!("{}.json", record.run_id));
        record
            .to_json()
            .and_then(|json| fs::write(&path, json).map_err(Error::from))
            .err()
            .map(|e| format!("{}: {e}", path.display()))
    });
    if !config.keep_details {
        record.steps = Vec::new();
        record.final_state = None;
        record.feedback_state = None;
    }
    (record, write_error)
}

/// Runs `K` independent trajectories. Results do not depend on the worker
/// count: seeds come from the trajectory index and records are reduced in
/// index order.
pub fn run_ensemble(config: &EnsembleConfig) -> Result<EnsembleRun> {
    config.validate()?;
    if let Some(dir) = &config.output_dir {
        fs::create_dir_all(dir)?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.parallelism)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let results: Vec<(TrajectoryRecord, Option<String>)> =
        pool.install(|| (0..config.k).into_par_iter().map(|i| run_one(config, i)).collect());
    let (records, errors): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let stats = EnsembleStats::from_records(&records, config);
    Ok(EnsembleRun {
        stats,
        records,
        write_errors: errors.into_iter().flatten().collect(),
    })
}

/// Writes the fidelity histogram as CSV `bin_low,bin_high,count`.
pub fn emit_histogram(stats: &EnsembleStats, path: &Path) -> Result<()> {
    let file = fs::File::create(path)?;
    stats.histogram.write_csv(std::io::BufWriter::new(file))?;
    Ok(())
}
