//! Run results, CSV output and summary lines.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use crate::committer::CommitResult;

/// Measurements of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub tx_count: u64,
    pub blocks: u64,
    pub throughput_tx_s: f64,
    pub block_latency_ms_mean: f64,
    pub block_latency_ms_std: f64,
    pub latency_samples_ms: Vec<f64>,
    pub span: Duration,
}

/// Population mean and standard deviation.
pub fn mean_std(samples: &[f64]) -> (f64, f64) {
    if samples.is_empty() {
        return (0.0, 0.0);
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl RunResult {
    /// Throughput is `tx_count / (last commit − first delivery)`; latency is
    /// per block, delivery to commit.
    pub fn from_commits(results: &[CommitResult]) -> Self {
        let tx_count: u64 = results.iter().map(|r| r.flags.len() as u64).sum();
        let first = results.iter().map(|r| r.delivered_at).min();
        let last = results.iter().map(|r| r.commit_time).max();
        let span = match (first, last) {
            (Some(f), Some(l)) => l.saturating_duration_since(f),
            _ => Duration::ZERO,
        };
        let samples: Vec<f64> = results.iter().map(|r| r.latency().as_secs_f64() * 1e3).collect();
        Self::new(tx_count, results.len() as u64, span, samples)
    }

    /// For runs where only arrival times are known (no commit step).
    pub fn from_arrivals(tx_count: u64, start: Instant, arrivals: &[Instant]) -> Self {
        let span = arrivals
            .iter()
            .max()
            .map_or(Duration::ZERO, |l| l.saturating_duration_since(start));
        Self::new(tx_count, arrivals.len() as u64, span, Vec::new())
    }

    pub fn new(tx_count: u64, blocks: u64, span: Duration, latency_samples_ms: Vec<f64>) -> Self {
        let (mean, std) = mean_std(&latency_samples_ms);
        let secs = span.as_secs_f64();
        Self {
            tx_count,
            blocks,
            throughput_tx_s: if secs > 0.0 { tx_count as f64 / secs } else { 0.0 },
            block_latency_ms_mean: mean,
            block_latency_ms_std: std,
            latency_samples_ms,
            span,
        }
    }
}

/// One CSV row.
#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub experiment: String,
    pub toggle_set: String,
    pub block_size: usize,
    pub payload: u32,
    pub repeat: u32,
    pub result: RunResult,
    pub seed: u64,
    pub sig_mode: String,
    pub transport: String,
}

pub const CSV_HEADER: [&str; 11] = [
    "experiment",
    "toggle_set",
    "block_size",
    "payload",
    "repeat",
    "throughput_tx_s",
    "block_latency_ms_mean",
    "block_latency_ms_std",
    "seed",
    "sig_mode",
    "transport",
];

pub fn write_csv<W: Write>(out: W, rows: &[Row]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in rows {
        w.write_record([
            r.experiment.clone(),
            r.toggle_set.clone(),
            r.block_size.to_string(),
            r.payload.to_string(),
            r.repeat.to_string(),
            format!("{:.1}", r.result.throughput_tx_s),
            format!("{:.3}", r.result.block_latency_ms_mean),
            format!("{:.3}", r.result.block_latency_ms_std),
            r.seed.to_string(),
            r.sig_mode.clone(),
            r.transport.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_csv_file(path: &Path, rows: &[Row]) -> csv::Result<()> {
    write_csv(std::fs::File::create(path)?, rows)
}

/// Throughput and latency of one configuration across its repeats.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub experiment: String,
    pub toggle_set: String,
    pub block_size: usize,
    pub payload: u32,
    pub transport: String,
    pub repeats: usize,
    pub throughput_mean: f64,
    pub throughput_std: f64,
    pub latency_mean: f64,
    pub latency_std: f64,
}

impl std::fmt::Display for Summary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<20} {:<14} block={:<6} payload={:<5} {:<6} n={} throughput {:>10.1} ± {:<8.1} tx/s  latency {:>8.3} ± {:.3} ms",
            self.experiment,
            self.toggle_set,
            self.block_size,
            self.payload,
            self.transport,
            self.repeats,
            self.throughput_mean,
            self.throughput_std,
            self.latency_mean,
            self.latency_std
        )
    }
}

/// Groups rows by configuration, in first-seen order.
pub fn summarize(rows: &[Row]) -> Vec<Summary> {
    let mut order = Vec::new();
    let mut groups: BTreeMap<(String, String, usize, u32, String), Vec<&Row>> = BTreeMap::new();
    for r in rows {
        let key = (
            r.experiment.clone(),
            r.toggle_set.clone(),
            r.block_size,
            r.payload,
            r.transport.clone(),
        );
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(r);
    }
    order
        .into_iter()
        .map(|key| {
            let rows = &groups[&key];
            let tp: Vec<f64> = rows.iter().map(|r| r.result.throughput_tx_s).collect();
            let lat: Vec<f64> = rows.iter().map(|r| r.result.block_latency_ms_mean).collect();
            let (throughput_mean, throughput_std) = mean_std(&tp);
            let (latency_mean, latency_std) = mean_std(&lat);
            Summary {
                experiment: key.0,
                toggle_set: key.1,
                block_size: key.2,
                payload: key.3,
                transport: key.4,
                repeats: rows.len(),
                throughput_mean,
                throughput_std,
                latency_mean,
                latency_std,
            }
        })
        .collect()
}

pub const REPORT_NOTE: &str = "throughput = committed txs / (last commit - first block delivery); \
block latency = block delivery at the committer to commit completion, network delay excluded for inproc runs";
