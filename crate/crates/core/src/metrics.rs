//! Run logs and their derived views: latency quantiles, goodput timelines,
//! speedup ratios, and the CSV export contract.

use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::engine::{RequestId, StepOutcome, StepPhase};

/// Per-request completion record.
#[derive(Debug, Clone, PartialEq)]
pub struct RequestRecord {
    pub id: RequestId,
    pub arrival_ms: f64,
    pub finish_ms: f64,
    pub prompt_len: u64,
    pub output_len: u64,
}

impl RequestRecord {
    pub fn latency_ms(&self) -> f64 {
        self.finish_ms - self.arrival_ms
    }
}

/// Everything one simulation run produced. Step and request records are in
/// execution order; `run_meta` echoes the configuration for reproducibility.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsLog {
    pub step_records: Vec<StepOutcome>,
    pub request_records: Vec<RequestRecord>,
    pub run_meta: Vec<(String, String)>,
    pub horizon_exceeded: bool,
}

impl MetricsLog {
    pub fn decode_steps(&self) -> impl Iterator<Item = &StepOutcome> {
        self.step_records
            .iter()
            .filter(|s| s.phase == StepPhase::Decode)
    }

    pub fn total_generated(&self) -> u64 {
        self.step_records.iter().map(|s| s.generated_tokens).sum()
    }

    /// Total busy time across steps, milliseconds.
    pub fn total_step_time_ms(&self) -> f64 {
        self.step_records.iter().map(|s| s.latency_ms).sum()
    }

    /// Realized goodput over the whole run, tokens per second.
    pub fn aggregate_goodput_tps(&self) -> f64 {
        crate::controller::tokens_per_second(self.total_generated() as f64, self.total_step_time_ms())
    }

    pub fn mean_request_latency_ms(&self) -> Result<f64, MetricsError> {
        if self.request_records.is_empty() {
            return Err(MetricsError::NoFinishedRequests);
        }
        let total: f64 = self.request_records.iter().map(|r| r.latency_ms()).sum();
        Ok(total / self.request_records.len() as f64)
    }

    /// Fraction of decode steps that ran without speculation.
    pub fn k_zero_fraction(&self) -> f64 {
        let (mut decode, mut zero) = (0u64, 0u64);
        for s in self.decode_steps() {
            decode += 1;
            if s.chosen_k == 0 {
                zero += 1;
            }
        }
        if decode == 0 {
            0.0
        } else {
            zero as f64 / decode as f64
        }
    }
}

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no finished requests to aggregate")]
    NoFinishedRequests,
    #[error("metrics io error at {0}: {1}")]
    Io(String, #[source] std::io::Error),
}

/// Empirical request-latency quantiles by linear interpolation over the
/// sorted finished-request latencies (the type-7 convention). Latencies are
/// in milliseconds, matching the log.
pub fn latency_cdf(log: &MetricsLog, quantiles: &[f64]) -> Result<Vec<(f64, f64)>, MetricsError> {
    if log.request_records.is_empty() {
        return Err(MetricsError::NoFinishedRequests);
    }
    let mut latencies: Vec<f64> = log.request_records.iter().map(|r| r.latency_ms()).collect();
    latencies.sort_by(f64::total_cmp);
    Ok(quantiles
        .iter()
        .map(|&q| (q, quantile_sorted(&latencies, q)))
        .collect())
}

fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let q = q.clamp(0.0, 1.0);
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let frac = pos - lo as f64;
        sorted[lo] * (1.0 - frac) + sorted[hi] * frac
    }
}

/// Sliding-window realized goodput: for each window of `window` consecutive
/// steps, total generated tokens over total step time, tagged by the last
/// step index in the window.
pub fn goodput_timeline(log: &MetricsLog, window: usize) -> Vec<(u64, f64)> {
    assert!(window >= 1, "window must be >= 1");
    let steps = &log.step_records;
    if steps.len() < window {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(steps.len() - window + 1);
    let mut tokens: u64 = steps[..window].iter().map(|s| s.generated_tokens).sum();
    let mut time_ms: f64 = steps[..window].iter().map(|s| s.latency_ms).sum();
    out.push((
        steps[window - 1].step_index,
        crate::controller::tokens_per_second(tokens as f64, time_ms),
    ));
    for i in window..steps.len() {
        tokens = tokens + steps[i].generated_tokens - steps[i - window].generated_tokens;
        time_ms = time_ms + steps[i].latency_ms - steps[i - window].latency_ms;
        out.push((
            steps[i].step_index,
            crate::controller::tokens_per_second(tokens as f64, time_ms),
        ));
    }
    out
}

/// Mean request latency of the baseline divided by the speculative run's.
pub fn compute_speedup(baseline: &MetricsLog, spec: &MetricsLog) -> Result<f64, MetricsError> {
    Ok(baseline.mean_request_latency_ms()? / spec.mean_request_latency_ms()?)
}

fn fmt_f64(v: f64) -> String {
    // Shortest round-trip formatting keeps files byte-stable across runs.
    format!("{v}")
}

/// Writes `steps.csv`, `requests.csv`, and `meta.csv` under `out_dir` with a
/// stable column order and deterministic contents for a fixed seed.
pub fn export_csv(log: &MetricsLog, out_dir: impl AsRef<Path>) -> Result<Vec<PathBuf>, MetricsError> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir)
        .map_err(|e| MetricsError::Io(out_dir.display().to_string(), e))?;

    let steps_path = out_dir.join("steps.csv");
    let mut steps = String::new();
    steps.push_str(
        "step_index,clock_ms,batch_size,chosen_k,proposed,accepted,generated,latency_ms,goodput,acceptance_est\n",
    );
    for s in &log.step_records {
        steps.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            s.step_index,
            fmt_f64(s.clock_ms),
            s.batch_size,
            s.chosen_k,
            s.proposed_tokens,
            s.accepted_tokens,
            s.generated_tokens,
            fmt_f64(s.latency_ms),
            fmt_f64(s.realized_goodput_tps),
            fmt_f64(s.acceptance_estimate),
        ));
    }
    write_file(&steps_path, &steps)?;

    let requests_path = out_dir.join("requests.csv");
    let mut requests = String::new();
    requests.push_str("id,arrival_ms,finish_ms,latency_ms,prompt_len,output_len\n");
    for r in &log.request_records {
        requests.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.id,
            fmt_f64(r.arrival_ms),
            fmt_f64(r.finish_ms),
            fmt_f64(r.latency_ms()),
            r.prompt_len,
            r.output_len,
        ));
    }
    write_file(&requests_path, &requests)?;

    let meta_path = out_dir.join("meta.csv");
    let mut meta = String::new();
    meta.push_str("key,value\n");
    for (k, v) in &log.run_meta {
        meta.push_str(&format!("{},{}\n", csv_escape(k), csv_escape(v)));
    }
    write_file(&meta_path, &meta)?;

    Ok(vec![steps_path, requests_path, meta_path])
}

fn csv_escape(field: &str) -> String {
    if field.contains([',', '"', '\n']) {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), MetricsError> {
    let mut file = std::fs::File::create(path)
        .map_err(|e| MetricsError::Io(path.display().to_string(), e))?;
    file.write_all(contents.as_bytes())
        .map_err(|e| MetricsError::Io(path.display().to_string(), e))
}
