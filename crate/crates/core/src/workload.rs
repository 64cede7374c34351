//! Request-stream generation: Poisson arrivals, per-dataset length
//! distributions, scripted multi-phase scenarios, and trace replay.
//!
//! The shipped dataset profiles are distributional stand-ins built from
//! published length/acceptance statistics, not the datasets themselves.

use std::io::Read;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{Request, RequestId};

/// Token-length distribution spec: a point mass or a truncated normal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LengthDist {
    Fixed {
        fixed: u64,
    },
    TruncNormal {
        mean: f64,
        stddev: f64,
        #[serde(default)]
        min: Option<u64>,
        #[serde(default)]
        max: Option<u64>,
    },
}

impl LengthDist {
    pub fn fixed(value: u64) -> Self {
        LengthDist::Fixed { fixed: value }
    }

    pub fn normal(mean: f64, stddev: f64) -> Self {
        LengthDist::TruncNormal {
            mean,
            stddev,
            min: None,
            max: None,
        }
    }

    /// Truncation bounds: [1, mean + 4 sigma] unless overridden.
    fn bounds(&self) -> (u64, u64) {
        match self {
            LengthDist::Fixed { fixed } => (*fixed, *fixed),
            LengthDist::TruncNormal {
                mean,
                stddev,
                min,
                max,
            } => {
                let lo = min.unwrap_or(1).max(1);
                let hi = max.unwrap_or((mean + 4.0 * stddev).ceil() as u64).max(lo);
                (lo, hi)
            }
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> u64 {
        match self {
            LengthDist::Fixed { fixed } => (*fixed).max(1),
            LengthDist::TruncNormal { mean, stddev, .. } => {
                let (lo, hi) = self.bounds();
                let normal = Normal::new(*mean, *stddev).expect("valid normal");
                for _ in 0..1000 {
                    let v = normal.sample(rng);
                    if v >= lo as f64 && v <= hi as f64 {
                        return (v.round() as u64).clamp(lo, hi);
                    }
                }
                // Pathological truncation; fall back to the nearest bound.
                let v = normal.sample(rng);
                (v.round().max(lo as f64) as u64).clamp(lo, hi)
            }
        }
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        match self {
            LengthDist::Fixed { fixed } => {
                if *fixed < 1 {
                    return Err(WorkloadError::InvalidScenario(
                        "fixed length must be >= 1".into(),
                    ));
                }
            }
            LengthDist::TruncNormal { mean, stddev, .. } => {
                if mean.is_nan() || *mean < 1.0 || stddev.is_nan() || *stddev < 0.0 {
                    return Err(WorkloadError::InvalidScenario(
                        "length distribution needs mean >= 1 and stddev >= 0".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Named workload profile: length distributions plus the hidden ground-truth
/// acceptance behavior requests from this dataset carry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetProfile {
    pub name: String,
    pub prompt_len: LengthDist,
    pub output_len: LengthDist,
    pub true_acceptance: f64,
    #[serde(default)]
    pub pld_match_prob: Option<f64>,
}

impl DatasetProfile {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        self.prompt_len.validate()?;
        self.output_len.validate()?;
        if !(0.0..=1.0).contains(&self.true_acceptance) {
            return Err(WorkloadError::InvalidScenario(format!(
                "dataset {}: true_acceptance must be in [0,1]",
                self.name
            )));
        }
        if let Some(p) = self.pld_match_prob {
            if !(0.0..=1.0).contains(&p) {
                return Err(WorkloadError::InvalidScenario(format!(
                    "dataset {}: pld_match_prob must be in [0,1]",
                    self.name
                )));
            }
        }
        Ok(())
    }

    /// Chat traffic: medium prompts, long high-variance outputs.
    pub fn sharegpt() -> Self {
        Self {
            name: "sharegpt".into(),
            prompt_len: LengthDist::normal(227.0, 264.0),
            output_len: LengthDist::normal(256.0, 249.0),
            true_acceptance: 0.62,
            pld_match_prob: None,
        }
    }

    /// Writing completion: long fixed-ish prompts, short outputs.
    pub fn sonnet() -> Self {
        Self {
            name: "sonnet".into(),
            prompt_len: LengthDist::normal(517.0, 10.0),
            output_len: LengthDist::normal(141.0, 22.0),
            true_acceptance: 0.53,
            pld_match_prob: None,
        }
    }

    /// Summarization: very long prompts, short outputs, lookup-friendly.
    pub fn cnn_dailymail() -> Self {
        Self {
            name: "cnn_dailymail".into(),
            prompt_len: LengthDist::normal(1067.0, 537.0),
            output_len: LengthDist::normal(108.0, 41.0),
            true_acceptance: 0.54,
            pld_match_prob: Some(0.6),
        }
    }

    pub fn builtin(name: &str) -> Option<Self> {
        match name {
            "sharegpt" => Some(Self::sharegpt()),
            "sonnet" => Some(Self::sonnet()),
            "cnn_dailymail" => Some(Self::cnn_dailymail()),
            _ => None,
        }
    }
}

/// One stretch of constant request rate drawing from one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioPhase {
    pub duration_s: f64,
    pub qps: f64,
    pub dataset: DatasetProfile,
}

/// An ordered list of phases plus the generation seed and simulation horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub phases: Vec<ScenarioPhase>,
    pub seed: u64,
    pub horizon_s: f64,
}

impl Scenario {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        let mut total = 0.0;
        for phase in &self.phases {
            if phase.duration_s.is_nan() || phase.duration_s <= 0.0 {
                return Err(WorkloadError::InvalidScenario(
                    "phase duration must be > 0".into(),
                ));
            }
            if phase.qps.is_nan() || phase.qps < 0.0 {
                return Err(WorkloadError::InvalidScenario("qps must be >= 0".into()));
            }
            phase.dataset.validate()?;
            total += phase.duration_s;
        }
        if self.horizon_s < total {
            return Err(WorkloadError::InvalidScenario(format!(
                "horizon {}s is shorter than the phases' total {}s",
                self.horizon_s, total
            )));
        }
        Ok(())
    }

    pub fn total_duration_s(&self) -> f64 {
        self.phases.iter().map(|p| p.duration_s).sum()
    }
}

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace io error at {0}: {1}")]
    Io(String, #[source] std::io::Error),
    #[error("trace parse error at line {line}: {msg}")]
    Parse { line: u64, msg: String },
    #[error("trace value out of range at line {line}: {field} = {value}")]
    ValueOutOfRange {
        line: u64,
        field: &'static str,
        value: String,
    },
}

/// Samples the full request stream for a scenario. Within each phase,
/// inter-arrival gaps are exponential with mean 1/qps and every request
/// carries that phase's dataset lengths and hidden acceptance rate.
pub fn generate_arrivals(scenario: &Scenario, rng: &mut impl Rng) -> Vec<Request> {
    let unit_exp = Exp::new(1.0).expect("unit exponential");
    let mut requests = Vec::new();
    let mut next_id = 0u64;
    let mut phase_start_ms = 0.0;
    for phase in &scenario.phases {
        let phase_end_ms = phase_start_ms + phase.duration_s * 1e3;
        if phase.qps > 0.0 {
            let mean_gap_ms = 1e3 / phase.qps;
            let mut t = phase_start_ms;
            loop {
                t += unit_exp.sample(rng) * mean_gap_ms;
                if t >= phase_end_ms {
                    break;
                }
                let prompt = phase.dataset.prompt_len.sample(rng);
                let output = phase.dataset.output_len.sample(rng);
                let mut request = Request::new(
                    RequestId(next_id),
                    t,
                    prompt,
                    output,
                    phase.dataset.true_acceptance,
                );
                request.pld_match_prob = phase.dataset.pld_match_prob;
                requests.push(request);
                next_id += 1;
            }
        }
        phase_start_ms = phase_end_ms;
    }
    requests
}

#[derive(Debug, Deserialize)]
struct TraceRow {
    arrival_ms: f64,
    prompt_len: u64,
    output_len: u64,
    acceptance: f64,
}

/// Parses an explicit arrival trace: CSV with header
/// `arrival_ms,prompt_len,output_len,acceptance`.
pub fn load_trace_reader(reader: impl Read) -> Result<Vec<Request>, TraceError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<TraceRow>().enumerate() {
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map(|p| p.line()).unwrap_or(i as u64 + 2);
                return Err(TraceError::Parse {
                    line,
                    msg: e.to_string(),
                });
            }
        };
        let line = i as u64 + 2; // header is line 1
        if !(0.0..=1.0).contains(&row.acceptance) {
            return Err(TraceError::ValueOutOfRange {
                line,
                field: "acceptance",
                value: row.acceptance.to_string(),
            });
        }
        if row.prompt_len < 1 {
            return Err(TraceError::ValueOutOfRange {
                line,
                field: "prompt_len",
                value: row.prompt_len.to_string(),
            });
        }
        if row.output_len < 1 {
            return Err(TraceError::ValueOutOfRange {
                line,
                field: "output_len",
                value: row.output_len.to_string(),
            });
        }
        if row.arrival_ms.is_nan() || row.arrival_ms < 0.0 {
            return Err(TraceError::ValueOutOfRange {
                line,
                field: "arrival_ms",
                value: row.arrival_ms.to_string(),
            });
        }
        out.push(Request::new(
            RequestId(out.len() as u64),
            row.arrival_ms,
            row.prompt_len,
            row.output_len,
            row.acceptance,
        ));
    }
    Ok(out)
}

pub fn load_trace(path: impl AsRef<Path>) -> Result<Vec<Request>, TraceError> {
    let file = std::fs::File::open(path.as_ref())
        .map_err(|e| TraceError::Io(path.as_ref().display().to_string(), e))?;
    load_trace_reader(file)
}
