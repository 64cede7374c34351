//! Linear forward-pass latency model: fitting from profiling samples and
//! batch-latency prediction.
//!
//! A single forward pass is modeled as
//! `T_fwd = ctx_coeff * context_tokens + tok_coeff * batched_tokens + fixed_cost`,
//! where context tokens already have KV cache resident and batched tokens are
//! processed by the current pass. One model is fitted per (model, hardware,
//! phase) profile; decode and prefill get separate fits.

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::PolicyKind;
use crate::engine::BatchPlan;

/// One observed forward pass from offline profiling.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize, Serialize)]
pub struct ProfileSample {
    pub context_tokens: u64,
    pub batched_tokens: u64,
    pub latency_ms: f64,
}

impl ProfileSample {
    pub fn validate(&self) -> Result<(), FitError> {
        if self.batched_tokens < 1 {
            return Err(FitError::InvalidSample(
                "batched_tokens must be >= 1".into(),
            ));
        }
        if self.latency_ms.is_nan() || self.latency_ms <= 0.0 {
            return Err(FitError::InvalidSample("latency_ms must be > 0".into()));
        }
        Ok(())
    }
}

/// Fitted per-forward-pass cost model. Coefficients are clamped non-negative
/// at fit time so latency predictions are monotone in both token counts.
#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
pub struct LatencyModel {
    pub profile_id: String,
    /// Milliseconds per context token (KV load).
    pub ctx_coeff: f64,
    /// Milliseconds per batched token (compute).
    pub tok_coeff: f64,
    /// Fixed per-pass cost in milliseconds (weights load, launch overheads).
    pub fixed_cost: f64,
    /// Coefficient of determination of the fit that produced this model.
    pub r_squared: f64,
}

impl LatencyModel {
    pub fn new(profile_id: impl Into<String>, ctx: f64, tok: f64, fixed: f64) -> Self {
        Self {
            profile_id: profile_id.into(),
            ctx_coeff: ctx,
            tok_coeff: tok,
            fixed_cost: fixed,
            r_squared: 1.0,
        }
    }

    /// Predicted forward-pass time in milliseconds. Token counts are real
    /// valued so estimators can pass expectations.
    pub fn forward_time(&self, context_tokens: f64, batched_tokens: f64) -> f64 {
        self.ctx_coeff * context_tokens + self.tok_coeff * batched_tokens + self.fixed_cost
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            profile_id: self.profile_id.clone(),
            ctx_coeff: self.ctx_coeff * factor,
            tok_coeff: self.tok_coeff * factor,
            fixed_cost: self.fixed_cost * factor,
            r_squared: self.r_squared,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("latency model serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self, ProfileIoError> {
        toml::from_str(text).map_err(|e| ProfileIoError::Parse(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ProfileIoError> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| ProfileIoError::Io(path.as_ref().display().to_string(), e))?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ProfileIoError> {
        std::fs::write(path.as_ref(), self.to_toml())
            .map_err(|e| ProfileIoError::Io(path.as_ref().display().to_string(), e))
    }
}

#[derive(Debug, Error)]
pub enum FitError {
    #[error("need at least 3 profiling samples, got {0}")]
    TooFewSamples(usize),
    #[error("degenerate design: regressor columns are collinear")]
    DegenerateDesign,
    #[error("invalid profiling sample: {0}")]
    InvalidSample(String),
}

#[derive(Debug, Error)]
pub enum LatencyError {
    #[error("policy requires a draft latency model but none was provided")]
    MissingDraftModel,
}

#[derive(Debug, Error)]
pub enum ProfileIoError {
    #[error("{0}: {1}")]
    Io(String, #[source] std::io::Error),
    #[error("profile parse error: {0}")]
    Parse(String),
    #[error("profile csv error at line {line}: {msg}")]
    Csv { line: u64, msg: String },
}

/// Ordinary least squares over the three regressors (context, batched,
/// constant), with negative coefficients clamped to zero and the fit re-run
/// on the remaining free coefficients.
pub fn fit_latency_model(
    samples: &[ProfileSample],
    profile_id: impl Into<String>,
) -> Result<LatencyModel, FitError> {
    if samples.len() < 3 {
        return Err(FitError::TooFewSamples(samples.len()));
    }
    for s in samples {
        s.validate()?;
    }

    let rows: Vec<[f64; 3]> = samples
        .iter()
        .map(|s| [s.context_tokens as f64, s.batched_tokens as f64, 1.0])
        .collect();
    let y: Vec<f64> = samples.iter().map(|s| s.latency_ms).collect();

    // Active-set clamp: refit with a coefficient pinned at zero whenever OLS
    // drives it negative. Three coefficients, so this terminates in <= 3 rounds.
    let mut free = [true; 3];
    let coeffs = loop {
        let coeffs = solve_ols(&rows, &y, &free)?;
        let mut clamped = false;
        for (i, c) in coeffs.iter().enumerate() {
            if free[i] && *c < 0.0 {
                free[i] = false;
                clamped = true;
            }
        }
        if !clamped {
            break coeffs;
        }
        if !free.iter().any(|f| *f) {
            break [0.0; 3];
        }
    };

    let mean_y = y.iter().sum::<f64>() / y.len() as f64;
    let ss_tot: f64 = y.iter().map(|v| (v - mean_y).powi(2)).sum();
    let ss_res: f64 = rows
        .iter()
        .zip(&y)
        .map(|(r, v)| {
            let pred = coeffs[0] * r[0] + coeffs[1] * r[1] + coeffs[2];
            (v - pred).powi(2)
        })
        .sum();
    let r_squared = if ss_tot == 0.0 {
        1.0
    } else {
        1.0 - ss_res / ss_tot
    };

    Ok(LatencyModel {
        profile_id: profile_id.into(),
        ctx_coeff: coeffs[0],
        tok_coeff: coeffs[1],
        fixed_cost: coeffs[2],
        r_squared,
    })
}

/// Least squares restricted to the `free` coefficients; pinned ones stay 0.
/// Solves the normal equations by Gaussian elimination with partial pivoting.
#[allow(clippy::needless_range_loop)]
fn solve_ols(rows: &[[f64; 3]], y: &[f64], free: &[bool; 3]) -> Result<[f64; 3], FitError> {
    let idx: Vec<usize> = (0..3).filter(|&i| free[i]).collect();
    let n = idx.len();
    if n == 0 {
        return Ok([0.0; 3]);
    }

    let mut ata = vec![vec![0.0f64; n]; n];
    let mut atb = vec![0.0f64; n];
    for (r, &v) in rows.iter().zip(y) {
        for a in 0..n {
            atb[a] += r[idx[a]] * v;
            for b in 0..n {
                ata[a][b] += r[idx[a]] * r[idx[b]];
            }
        }
    }

    // Relative pivot threshold: columns that never vary (or duplicate another)
    // leave a pivot that is tiny against the matrix scale.
    let scale = ata
        .iter()
        .flat_map(|row| row.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let eps = scale * 1e-12;

    let mut solution = vec![0.0f64; n];
    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&a, &b| ata[a][col].abs().total_cmp(&ata[b][col].abs()))
            .unwrap();
        if ata[pivot_row][col].abs() <= eps {
            return Err(FitError::DegenerateDesign);
        }
        ata.swap(col, pivot_row);
        atb.swap(col, pivot_row);
        for row in col + 1..n {
            let f = ata[row][col] / ata[col][col];
            for c in col..n {
                ata[row][c] -= f * ata[col][c];
            }
            atb[row] -= f * atb[col];
        }
    }
    for col in (0..n).rev() {
        let mut v = atb[col];
        for c in col + 1..n {
            v -= ata[col][c] * solution[c];
        }
        solution[col] = v / ata[col][col];
    }

    let mut out = [0.0; 3];
    for (slot, &i) in idx.iter().enumerate() {
        out[i] = solution[slot];
    }
    Ok(out)
}

/// Spec-op form of [`LatencyModel::forward_time`] over integer token counts.
pub fn predict_forward_time(model: &LatencyModel, context_tokens: u64, batched_tokens: u64) -> f64 {
    model.forward_time(context_tokens as f64, batched_tokens as f64)
}

/// Cost of `passes` sequential draft forward passes over `drafting` requests
/// whose combined context starts at `context_total` and grows by one token
/// per request per pass.
pub fn draft_chain_cost(draft: &LatencyModel, context_total: f64, drafting: f64, passes: u32) -> f64 {
    if drafting <= 0.0 || passes == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for pass in 0..passes {
        total += draft.forward_time(context_total + pass as f64 * drafting, drafting);
    }
    total
}

/// Predicted latency of one decode step: draft cost plus the target model's
/// single scoring pass. The plan's per-member `verified` counts determine the
/// target pass width (each speculating member contributes verified + 1
/// batched tokens, the +1 being the bonus slot).
pub fn predict_batch_latency(
    target: &LatencyModel,
    draft: Option<&LatencyModel>,
    policy: PolicyKind,
    pld_lookup_cost_ms: f64,
    plan: &BatchPlan,
    proposed_len: u32,
) -> Result<f64, LatencyError> {
    let t_draft = match policy {
        PolicyKind::DraftModel => {
            let drafting: Vec<_> = plan.members.iter().filter(|m| m.proposed > 0).collect();
            if proposed_len == 0 || drafting.is_empty() {
                0.0
            } else {
                let draft = draft.ok_or(LatencyError::MissingDraftModel)?;
                let ctx: f64 = drafting.iter().map(|m| m.context_len as f64).sum();
                draft_chain_cost(draft, ctx, drafting.len() as f64, proposed_len)
            }
        }
        // Lookup scans the context regardless of how many tokens come back.
        PolicyKind::PromptLookup => {
            if proposed_len == 0 {
                0.0
            } else {
                pld_lookup_cost_ms
            }
        }
    };

    let batched: u64 = plan.members.iter().map(|m| m.verified as u64 + 1).sum();
    let t_target = target.forward_time(plan.context_total() as f64, batched as f64);
    Ok(t_draft + t_target)
}

/// The latency models one simulation run needs, decode and prefill phases
/// fitted separately.
#[derive(Debug, Clone)]
pub struct LatencyProfiles {
    pub target: LatencyModel,
    pub draft: Option<LatencyModel>,
    pub prefill_target: LatencyModel,
    pub prefill_draft: Option<LatencyModel>,
    /// Per-step proposal cost under prompt-lookup speculation.
    pub pld_lookup_cost_ms: f64,
}

impl LatencyProfiles {
    /// Lookup cost defaults to 5% of a batch-1 target forward pass.
    pub fn new(
        target: LatencyModel,
        draft: Option<LatencyModel>,
        prefill_target: Option<LatencyModel>,
        prefill_draft: Option<LatencyModel>,
    ) -> Self {
        let lookup = 0.05 * target.forward_time(0.0, 1.0);
        let prefill_target = prefill_target.unwrap_or_else(|| target.clone());
        let prefill_draft = prefill_draft.or_else(|| draft.clone());
        Self {
            target,
            draft,
            prefill_target,
            prefill_draft,
            pld_lookup_cost_ms: lookup,
        }
    }

    pub fn with_pld_lookup_cost(mut self, cost_ms: f64) -> Self {
        self.pld_lookup_cost_ms = cost_ms;
        self
    }

    pub fn batch_latency(
        &self,
        policy: PolicyKind,
        plan: &BatchPlan,
        proposed_len: u32,
    ) -> Result<f64, LatencyError> {
        predict_batch_latency(
            &self.target,
            self.draft.as_ref(),
            policy,
            self.pld_lookup_cost_ms,
            plan,
            proposed_len,
        )
    }
}

/// Shipped desk-scale profiles, loosely shaped like a mid-size chat model with
/// a small companion draft on one accelerator. Values are stand-ins chosen so
/// the controller's regimes (speculate hard at small batches, shut off at
/// large ones) are all reachable in simulation.
pub mod desk {
    use super::{LatencyModel, LatencyProfiles};

    pub fn target() -> LatencyModel {
        LatencyModel::new("desk-target-decode", 5e-5, 0.06, 2.0)
    }

    pub fn draft() -> LatencyModel {
        LatencyModel::new("desk-draft-decode", 5e-5, 0.006, 0.3)
    }

    pub fn prefill_target() -> LatencyModel {
        LatencyModel::new("desk-target-prefill", 0.0, 0.045, 4.0)
    }

    pub fn prefill_draft() -> LatencyModel {
        LatencyModel::new("desk-draft-prefill", 0.0, 0.0015, 0.2)
    }

    pub fn profiles() -> LatencyProfiles {
        LatencyProfiles::new(
            target(),
            Some(draft()),
            Some(prefill_target()),
            Some(prefill_draft()),
        )
    }
}

/// Reads profiling samples from CSV with header
/// `context_tokens,batched_tokens,latency_ms`.
pub fn read_profile_csv(reader: impl Read) -> Result<Vec<ProfileSample>, ProfileIoError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut out = Vec::new();
    for record in rdr.deserialize::<ProfileSample>() {
        match record {
            Ok(sample) => out.push(sample),
            Err(e) => {
                let line = e.position().map(|p| p.line()).unwrap_or(0);
                return Err(ProfileIoError::Csv {
                    line,
                    msg: e.to_string(),
                });
            }
        }
    }
    Ok(out)
}

pub fn read_profile_csv_path(path: impl AsRef<Path>) -> Result<Vec<ProfileSample>, ProfileIoError> {
    let file = std::fs::File::open(path.as_ref())
        .map_err(|e| ProfileIoError::Io(path.as_ref().display().to_string(), e))?;
    read_profile_csv(file)
}
