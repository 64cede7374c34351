//! Token-acceptance modeling: the running acceptance-rate estimate, expected
//! generated lengths, and the sampled accept/reject chain the simulator uses
//! as ground truth.
//!
//! Acceptance is a Bernoulli chain: each of the k proposed tokens is accepted
//! independently with the per-request rate, the chain stops at the first
//! rejection, and the step always emits one bonus token on top of the accepted
//! prefix. A step therefore generates between 1 and k+1 tokens per request.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::BatchPlan;

/// Exponentially weighted moving estimate of the token acceptance rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceEstimate {
    pub rate: f64,
    pub decay: f64,
    pub observations: u64,
}

impl AcceptanceEstimate {
    /// Starts at the configured prior; the prior is reported until the first
    /// observation arrives.
    pub fn new(prior: f64, decay: f64) -> Self {
        assert!((0.0..=1.0).contains(&prior), "prior must be a probability");
        assert!(decay > 0.0 && decay < 1.0, "decay must be in (0, 1)");
        Self {
            rate: prior,
            decay,
            observations: 0,
        }
    }
}

/// Blends one step's measured per-token acceptance fraction into the estimate.
pub fn update_acceptance(est: AcceptanceEstimate, step_rate: f64) -> AcceptanceEstimate {
    debug_assert!((0.0..=1.0).contains(&step_rate));
    AcceptanceEstimate {
        rate: est.decay * est.rate + (1.0 - est.decay) * step_rate,
        decay: est.decay,
        observations: est.observations + 1,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpecKind {
    DraftModel,
    PromptLookup,
}

/// The world-side description of the speculation mechanism. `true_rate` is the
/// ground truth the simulator samples from; the controller never reads it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecProfile {
    pub kind: SpecKind,
    pub true_rate: f64,
    /// Chance a request finds an n-gram match this step (prompt lookup only).
    pub match_prob: Option<f64>,
    /// Tokens each matching request proposes under prompt lookup.
    #[serde(default = "default_fixed_pld_len")]
    pub fixed_pld_len: u32,
}

fn default_fixed_pld_len() -> u32 {
    5
}

#[derive(Debug, Error)]
pub enum SpecError {
    #[error("rates and ks have different lengths ({rates} vs {ks})")]
    LengthMismatch { rates: usize, ks: usize },
    #[error("invalid speculation profile: {0}")]
    InvalidProfile(String),
}

impl SpecProfile {
    pub fn draft_model(true_rate: f64) -> Self {
        Self {
            kind: SpecKind::DraftModel,
            true_rate,
            match_prob: None,
            fixed_pld_len: default_fixed_pld_len(),
        }
    }

    pub fn prompt_lookup(true_rate: f64, match_prob: f64, fixed_pld_len: u32) -> Self {
        Self {
            kind: SpecKind::PromptLookup,
            true_rate,
            match_prob: Some(match_prob),
            fixed_pld_len,
        }
    }

    pub fn validate(&self) -> Result<(), SpecError> {
        if !(0.0..=1.0).contains(&self.true_rate) {
            return Err(SpecError::InvalidProfile("true_rate must be in [0,1]".into()));
        }
        match (self.kind, self.match_prob) {
            (SpecKind::PromptLookup, None) => Err(SpecError::InvalidProfile(
                "prompt_lookup requires match_prob".into(),
            )),
            (SpecKind::DraftModel, Some(_)) => Err(SpecError::InvalidProfile(
                "match_prob only applies to prompt_lookup".into(),
            )),
            (SpecKind::PromptLookup, Some(p)) if !(0.0..=1.0).contains(&p) => Err(
                SpecError::InvalidProfile("match_prob must be in [0,1]".into()),
            ),
            _ => Ok(()),
        }
    }
}

/// Expected tokens one request generates in a step with k proposals, bonus
/// token included: (1 - rate^(k+1)) / (1 - rate), i.e. the geometric sum
/// 1 + rate + ... + rate^k. Returns k+1 in the rate -> 1 limit.
pub fn expected_generated_length(rate: f64, k: u32) -> f64 {
    debug_assert!((0.0..=1.0).contains(&rate));
    if k == 0 {
        return 1.0;
    }
    if 1.0 - rate < 1e-12 {
        return (k + 1) as f64;
    }
    (1.0 - rate.powi(k as i32 + 1)) / (1.0 - rate)
}

/// Expected tokens a whole batch generates: the per-request expectation summed
/// over paired (rate, k) lists.
pub fn expected_batch_tokens(rates: &[f64], ks: &[u32]) -> Result<f64, SpecError> {
    if rates.len() != ks.len() {
        return Err(SpecError::LengthMismatch {
            rates: rates.len(),
            ks: ks.len(),
        });
    }
    Ok(rates
        .iter()
        .zip(ks)
        .map(|(&r, &k)| expected_generated_length(r, k))
        .sum())
}

/// Samples the accepted-prefix length m of a k-token Bernoulli chain.
/// The step then generates m + 1 tokens (the bonus is unconditional).
pub fn sample_accepted_count(rng: &mut impl Rng, true_rate: f64, k: u32) -> u32 {
    sample_accepted_count_with(rng, |_| true_rate, k)
}

/// Position-dependent variant: `rate_at(j)` is the acceptance probability of
/// the j-th proposed token. The default chain uses a constant rate.
pub fn sample_accepted_count_with(
    rng: &mut impl Rng,
    mut rate_at: impl FnMut(u32) -> f64,
    k: u32,
) -> u32 {
    let mut accepted = 0;
    for j in 0..k {
        if rng.random::<f64>() < rate_at(j) {
            accepted += 1;
        } else {
            break;
        }
    }
    accepted
}

/// Per-request proposal sampling for prompt lookup: each request receives the
/// fixed proposal length with probability `match_prob`, else nothing.
pub fn propose_pld(rng: &mut impl Rng, profile: &SpecProfile, batch: &BatchPlan) -> Vec<u32> {
    let prob = profile.match_prob.unwrap_or(0.0);
    batch
        .members
        .iter()
        .map(|_| sample_pld_match(rng, prob, profile.fixed_pld_len))
        .collect()
}

/// One request's prompt-lookup proposal draw.
pub fn sample_pld_match(rng: &mut impl Rng, match_prob: f64, fixed_len: u32) -> u32 {
    if rng.random::<f64>() < match_prob {
        fixed_len
    } else {
        0
    }
}
