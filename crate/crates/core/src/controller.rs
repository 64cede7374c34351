//! Goodput-driven speculation control: estimate the goodput of each candidate
//! speculation depth, pick the best one per step, and manage draft-prefill
//! disabling under load.
//!
//! Goodput is expected generated tokens divided by predicted step latency, so
//! the search naturally shuts speculation off (k = 0) when batches are large
//! or acceptance is poor, and stretches it when a small batch leaves the
//! hardware underused.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{BatchPlan, KvBudget};
use crate::latency::{draft_chain_cost, LatencyError, LatencyProfiles};
use crate::speculation::{expected_generated_length, update_acceptance, AcceptanceEstimate};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    DraftModel,
    PromptLookup,
}

impl From<crate::speculation::SpecKind> for PolicyKind {
    fn from(kind: crate::speculation::SpecKind) -> Self {
        match kind {
            crate::speculation::SpecKind::DraftModel => PolicyKind::DraftModel,
            crate::speculation::SpecKind::PromptLookup => PolicyKind::PromptLookup,
        }
    }
}

/// Static controller configuration; every field is a scenario-config key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControllerConfig {
    /// Upper bound of the proposed-length search.
    pub max_len: u32,
    /// Proposal length every matching request attempts under prompt lookup.
    pub fixed_pld_len: u32,
    pub policy: PolicyKind,
    /// Decode steps between resets of the prefill-disable threshold.
    pub reset_period: u64,
    pub ewma_decay: f64,
    /// Acceptance-rate prior reported before any observation.
    pub prior_rate: f64,
    /// Match probability the offline goodput estimator assumes for prompt
    /// lookup; the runtime path uses actual match outcomes instead.
    pub pld_match_prob: f64,
    /// Whether the adaptive draft-prefill disabling mechanism is active.
    pub prefill_disabling: bool,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            max_len: 8,
            fixed_pld_len: 5,
            policy: PolicyKind::DraftModel,
            reset_period: 500,
            ewma_decay: 0.9,
            prior_rate: 0.7,
            pld_match_prob: 1.0,
            prefill_disabling: true,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<(), ControllerError> {
        if self.max_len < 1 {
            return Err(ControllerError::InvalidConfig("max_len must be >= 1".into()));
        }
        if self.policy == PolicyKind::PromptLookup && self.fixed_pld_len < 1 {
            return Err(ControllerError::InvalidConfig(
                "fixed_pld_len must be >= 1 under prompt lookup".into(),
            ));
        }
        if self.reset_period < 1 {
            return Err(ControllerError::InvalidConfig(
                "reset_period must be >= 1".into(),
            ));
        }
        if !(self.ewma_decay > 0.0 && self.ewma_decay < 1.0) {
            return Err(ControllerError::InvalidConfig(
                "ewma_decay must be in (0, 1)".into(),
            ));
        }
        for (name, p) in [
            ("prior_rate", self.prior_rate),
            ("pld_match_prob", self.pld_match_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(ControllerError::InvalidConfig(format!(
                    "{name} must be in [0, 1]"
                )));
            }
        }
        Ok(())
    }
}

/// Mutable controller state, owned by the engine loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerState {
    pub acceptance: AcceptanceEstimate,
    /// Batch size recorded the last time the search chose k = 0; prefills
    /// above it skip the draft model until the periodic reset.
    pub disable_batch_size: Option<u32>,
    pub skip_count: u64,
    pub steps_since_reset: u64,
}

/// One step's resolved speculation decision.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpecDecision {
    /// Tokens proposed per speculating request; 0 disables speculation.
    pub proposed_len: u32,
    /// Tokens the target model scores per speculating request.
    pub verification_len: u32,
    /// Estimated goodput of the chosen configuration, tokens per second.
    pub predicted_goodput: f64,
    pub predicted_latency_ms: f64,
}

/// Estimated goodput of one candidate configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GoodputPoint {
    pub goodput_tps: f64,
    pub latency_ms: f64,
    pub accept_len: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrefillDecision {
    RunDraftPrefill,
    SkipDraftPrefill,
}

/// How the run drives speculation: the adaptive search, a pinned length, or
/// plain decoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    TurboSpec,
    FixedK(u32),
    NoSpec,
}

impl Mode {
    pub fn validate(&self) -> Result<(), ControllerError> {
        match self {
            Mode::FixedK(0) => Err(ControllerError::InvalidConfig(
                "fixed_k requires k >= 1 (use no_spec for k = 0)".into(),
            )),
            _ => Ok(()),
        }
    }

    /// Pinned proposal length, if this mode is not adaptive.
    fn forced_len(&self) -> Option<u32> {
        match self {
            Mode::TurboSpec => None,
            Mode::FixedK(k) => Some(*k),
            Mode::NoSpec => Some(0),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Mode::TurboSpec => write!(f, "turbospec"),
            Mode::FixedK(k) => write!(f, "fixed:{k}"),
            Mode::NoSpec => write!(f, "no_spec"),
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "turbospec" => Ok(Mode::TurboSpec),
            "no_spec" => Ok(Mode::NoSpec),
            other => {
                let k = other
                    .strip_prefix("fixed:")
                    .or_else(|| other.strip_prefix("fixed_k:"))
                    .ok_or_else(|| format!("unknown mode '{other}'"))?;
                let k: u32 = k.parse().map_err(|_| format!("bad fixed length '{k}'"))?;
                let mode = Mode::FixedK(k);
                mode.validate().map_err(|e| e.to_string())?;
                Ok(mode)
            }
        }
    }
}

#[derive(Debug, Error)]
pub enum ControllerError {
    #[error(transparent)]
    Latency(#[from] LatencyError),
    #[error("invalid controller config: {0}")]
    InvalidConfig(String),
}

/// Hook for replacing the default verify-everything behavior under the draft
/// policy. The returned length is clamped to the proposed length.
pub trait VerificationPruner: Send + Sync {
    fn prune(&self, plan: &BatchPlan, proposed_len: u32) -> u32;
}

pub struct Controller {
    pub config: ControllerConfig,
    pub state: ControllerState,
    mode: Mode,
    pruner: Option<Box<dyn VerificationPruner>>,
}

impl Controller {
    pub fn new(config: ControllerConfig, mode: Mode) -> Self {
        let state = ControllerState {
            acceptance: AcceptanceEstimate::new(config.prior_rate, config.ewma_decay),
            disable_batch_size: None,
            skip_count: 0,
            steps_since_reset: 0,
        };
        Self {
            config,
            state,
            mode,
            pruner: None,
        }
    }

    pub fn with_pruner(mut self, pruner: Box<dyn VerificationPruner>) -> Self {
        self.pruner = Some(pruner);
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn acceptance_rate(&self) -> f64 {
        self.state.acceptance.rate
    }

    /// Estimated goodput and latency for candidate speculation depth `k`.
    ///
    /// Draft policy: every eligible member proposes and verifies k tokens.
    /// Prompt lookup: the offline expectation form, where each member matches
    /// with the configured probability and verifies min(k, fixed) tokens.
    pub fn estimate_goodput(
        &self,
        profiles: &LatencyProfiles,
        plan: &BatchPlan,
        k: u32,
    ) -> Result<GoodputPoint, ControllerError> {
        match self.config.policy {
            PolicyKind::DraftModel => self.estimate_draft_candidate(profiles, plan, k),
            PolicyKind::PromptLookup => {
                let v = k.min(self.config.fixed_pld_len);
                self.estimate_pld_expected(profiles, plan, v)
            }
        }
    }

    fn estimate_draft_candidate(
        &self,
        profiles: &LatencyProfiles,
        plan: &BatchPlan,
        k: u32,
    ) -> Result<GoodputPoint, ControllerError> {
        let rate = self.state.acceptance.rate;
        let eligible = plan.members.iter().filter(|m| m.spec_eligible);
        let n_eligible = eligible.clone().count() as f64;
        let ctx_eligible: f64 = eligible.map(|m| m.context_len as f64).sum();
        let n_rest = plan.members.len() as f64 - n_eligible;

        let (accept_len, batched, t_draft) = if k == 0 || n_eligible == 0.0 {
            let b = plan.members.len() as f64;
            (b, b, 0.0)
        } else {
            let draft = profiles.draft.as_ref().ok_or(LatencyError::MissingDraftModel)?;
            let accept = n_rest + n_eligible * expected_generated_length(rate, k);
            let batched = n_rest + n_eligible * (k + 1) as f64;
            let t_draft = draft_chain_cost(draft, ctx_eligible, n_eligible, k);
            (accept, batched, t_draft)
        };

        let latency = t_draft + profiles.target.forward_time(plan.context_total() as f64, batched);
        Ok(goodput_point(accept_len, latency))
    }

    /// Offline prompt-lookup form: match outcomes are unknown, so each
    /// eligible member contributes the match-probability-weighted mix of the
    /// matched (verify v) and unmatched (plain decode) terms.
    fn estimate_pld_expected(
        &self,
        profiles: &LatencyProfiles,
        plan: &BatchPlan,
        v: u32,
    ) -> Result<GoodputPoint, ControllerError> {
        let rate = self.state.acceptance.rate;
        let mp = self.config.pld_match_prob;
        let mut accept_len = 0.0;
        let mut batched = 0.0;
        for m in &plan.members {
            if m.spec_eligible {
                accept_len += mp * expected_generated_length(rate, v) + (1.0 - mp);
                batched += mp * (v + 1) as f64 + (1.0 - mp);
            } else {
                accept_len += 1.0;
                batched += 1.0;
            }
        }
        let latency = profiles.pld_lookup_cost_ms
            + profiles.target.forward_time(plan.context_total() as f64, batched);
        Ok(goodput_point(accept_len, latency))
    }

    /// Runtime prompt-lookup form over actual match outcomes: member i
    /// verifies min(proposed_i, v) tokens.
    fn estimate_pld_runtime(
        &self,
        profiles: &LatencyProfiles,
        plan: &BatchPlan,
        v: u32,
    ) -> GoodputPoint {
        let rate = self.state.acceptance.rate;
        let mut accept_len = 0.0;
        let mut batched = 0.0;
        for m in &plan.members {
            let verified = m.proposed.min(v);
            accept_len += expected_generated_length(rate, verified);
            batched += (verified + 1) as f64;
        }
        let latency = profiles.pld_lookup_cost_ms
            + profiles.target.forward_time(plan.context_total() as f64, batched);
        goodput_point(accept_len, latency)
    }

    /// Exhaustive search for the speculation depth with the best estimated
    /// goodput. Candidates whose token demand exceeds the free KV budget are
    /// skipped; k = 0 is always feasible, so a decision always exists. Ties
    /// break toward smaller k.
    pub fn argmax_goodput(
        &self,
        profiles: &LatencyProfiles,
        plan: &BatchPlan,
        kv: &KvBudget,
    ) -> SpecDecision {
        match self.config.policy {
            PolicyKind::DraftModel => {
                let mut best: (u32, GoodputPoint) = (
                    0,
                    self.estimate_draft_candidate(profiles, plan, 0)
                        .expect("k = 0 needs no draft model"),
                );
                for k in 1..=self.config.max_len {
                    if !self.draft_candidate_fits(plan, k, kv) {
                        continue;
                    }
                    let Ok(point) = self.estimate_draft_candidate(profiles, plan, k) else {
                        continue;
                    };
                    if point.goodput_tps > best.1.goodput_tps {
                        best = (k, point);
                    }
                }
                SpecDecision {
                    proposed_len: best.0,
                    verification_len: best.0,
                    predicted_goodput: best.1.goodput_tps,
                    predicted_latency_ms: best.1.latency_ms,
                }
            }
            PolicyKind::PromptLookup => {
                let (v, point) = self.pld_verification_search(profiles, plan, Some(kv));
                SpecDecision {
                    proposed_len: self.config.fixed_pld_len,
                    verification_len: v,
                    predicted_goodput: point.goodput_tps,
                    predicted_latency_ms: point.latency_ms,
                }
            }
        }
    }

    fn draft_candidate_fits(&self, plan: &BatchPlan, k: u32, kv: &KvBudget) -> bool {
        if k == 0 {
            return true;
        }
        let mut need: u64 = 0;
        for m in &plan.members {
            if m.spec_eligible {
                // k + 1 verification slots on the target side, k drafted
                // tokens on the draft side.
                need += (k as u64 + 1) + k as u64;
            } else {
                need += 1;
            }
        }
        need <= kv.free_slots()
    }

    fn pld_candidate_fits(&self, plan: &BatchPlan, v: u32, kv: &KvBudget) -> bool {
        if v == 0 {
            return true;
        }
        let proposals_known = plan.members.iter().any(|m| m.proposed > 0);
        let need: u64 = plan
            .members
            .iter()
            .map(|m| {
                if proposals_known {
                    m.proposed.min(v) as u64 + 1
                } else if m.spec_eligible {
                    v as u64 + 1
                } else {
                    1
                }
            })
            .sum();
        need <= kv.free_slots()
    }

    fn pld_verification_search(
        &self,
        profiles: &LatencyProfiles,
        plan: &BatchPlan,
        kv: Option<&KvBudget>,
    ) -> (u32, GoodputPoint) {
        let proposals_known = plan.members.iter().any(|m| m.proposed > 0);
        let evaluate = |v: u32| {
            if proposals_known {
                Ok(self.estimate_pld_runtime(profiles, plan, v))
            } else {
                self.estimate_pld_expected(profiles, plan, v)
            }
        };
        let mut best = (0, evaluate(0).expect("v = 0 is always evaluable"));
        for v in 1..=self.config.fixed_pld_len {
            if let Some(kv) = kv {
                if !self.pld_candidate_fits(plan, v, kv) {
                    continue;
                }
            }
            let Ok(point) = evaluate(v) else { continue };
            if point.goodput_tps > best.1.goodput_tps {
                best = (v, point);
            }
        }
        best
    }

    /// Proposal length for this decode step.
    pub fn get_proposed_len(
        &self,
        profiles: &LatencyProfiles,
        plan: &BatchPlan,
        kv: &KvBudget,
    ) -> u32 {
        if let Some(forced) = self.mode.forced_len() {
            return forced;
        }
        match self.config.policy {
            PolicyKind::PromptLookup => self.config.fixed_pld_len,
            PolicyKind::DraftModel => {
                let k = self.argmax_goodput(profiles, plan, kv).proposed_len;
                // A k = 0 lock-in stops acceptance observations entirely, so
                // the estimate could never recover from a pessimistic dip.
                // The first decode step of each reset epoch probes with one
                // speculative token to keep the feedback loop alive.
                if k == 0
                    && self.state.steps_since_reset == 0
                    && self.state.acceptance.observations > 0
                    && plan.members.iter().any(|m| m.spec_eligible)
                    && self.draft_candidate_fits(plan, 1, kv)
                {
                    return 1;
                }
                k
            }
        }
    }

    /// Verification length given the already-determined proposal length.
    /// Draft policy verifies everything it proposed unless a pruner is
    /// installed; prompt lookup searches over the actual match outcomes.
    pub fn get_verification_len(
        &self,
        profiles: &LatencyProfiles,
        plan: &BatchPlan,
        proposed_len: u32,
    ) -> u32 {
        if let Some(forced) = self.mode.forced_len() {
            return forced.min(proposed_len);
        }
        match self.config.policy {
            PolicyKind::DraftModel => match &self.pruner {
                Some(p) => p.prune(plan, proposed_len).min(proposed_len),
                None => proposed_len,
            },
            PolicyKind::PromptLookup => self.pld_verification_search(profiles, plan, None).0,
        }
    }

    /// Estimator view of a fully shaped step (verified counts final), used to
    /// log predictions next to realized outcomes.
    pub fn predict_step(
        &self,
        profiles: &LatencyProfiles,
        plan: &BatchPlan,
        proposed_len: u32,
    ) -> Result<GoodputPoint, ControllerError> {
        let rate = self.state.acceptance.rate;
        let accept_len: f64 = plan
            .members
            .iter()
            .map(|m| expected_generated_length(rate, m.verified))
            .sum();
        let latency = profiles.batch_latency(self.config.policy, plan, proposed_len)?;
        Ok(GoodputPoint {
            goodput_tps: tokens_per_second(accept_len, latency),
            latency_ms: latency,
            accept_len,
        })
    }

    /// Prefill-phase gate for the draft model: above the recorded disable
    /// threshold the draft prefill is skipped, leaving those requests
    /// ineligible for speculation for their lifetime. Every `reset_period`-th
    /// skip runs one draft prefill anyway as a probe.
    pub fn on_prefill(&mut self, batch_size: u32) -> PrefillDecision {
        if let Some(forced) = self.mode.forced_len() {
            return if forced == 0 {
                PrefillDecision::SkipDraftPrefill
            } else {
                PrefillDecision::RunDraftPrefill
            };
        }
        if self.config.policy == PolicyKind::PromptLookup || !self.config.prefill_disabling {
            return PrefillDecision::RunDraftPrefill;
        }
        match self.state.disable_batch_size {
            Some(threshold) if batch_size > threshold => {
                self.state.skip_count += 1;
                if self.state.skip_count.is_multiple_of(self.config.reset_period) {
                    PrefillDecision::RunDraftPrefill
                } else {
                    PrefillDecision::SkipDraftPrefill
                }
            }
            _ => PrefillDecision::RunDraftPrefill,
        }
    }

    /// Post-decision bookkeeping: the first k = 0 outcome of each reset epoch
    /// records the disable threshold, and the threshold is periodically reset
    /// so speculation can come back when conditions improve.
    pub fn on_decision(&mut self, proposed_len: u32, batch_size: u32) {
        if proposed_len == 0 && self.state.disable_batch_size.is_none() {
            self.state.disable_batch_size = Some(batch_size);
        }
        self.state.steps_since_reset += 1;
        if self.state.steps_since_reset >= self.config.reset_period {
            self.state.disable_batch_size = None;
            self.state.skip_count = 0;
            self.state.steps_since_reset = 0;
        }
    }

    /// Feeds one step's measured acceptance back into the moving estimate.
    /// Steps that scored nothing do not update.
    pub fn observe_acceptance(&mut self, accepted: u64, scored: u64) {
        if scored == 0 {
            return;
        }
        let step_rate = accepted as f64 / scored as f64;
        self.state.acceptance = update_acceptance(self.state.acceptance, step_rate);
    }
}

fn goodput_point(accept_len: f64, latency_ms: f64) -> GoodputPoint {
    GoodputPoint {
        goodput_tps: tokens_per_second(accept_len, latency_ms),
        latency_ms,
        accept_len,
    }
}

pub(crate) fn tokens_per_second(tokens: f64, latency_ms: f64) -> f64 {
    tokens / latency_ms.max(1e-9) * 1e3
}

/// Expected per-token latency of one speculative step given the per-token
/// latency of each possible outcome (1..=k+1 tokens generated). Outcome
/// probabilities follow the acceptance chain: P(j accepted) = rate^j (1-rate)
/// for j < k and rate^k for j = k.
pub fn expected_per_token_latency(outcome_latencies_ms: &[f64], rate: f64, k: u32) -> f64 {
    assert_eq!(
        outcome_latencies_ms.len(),
        k as usize + 1,
        "need one latency per outcome (1..=k+1 tokens)"
    );
    let mut expectation = 0.0;
    for (j, latency) in outcome_latencies_ms.iter().enumerate() {
        let p = if (j as u32) < k {
            rate.powi(j as i32) * (1.0 - rate)
        } else {
            rate.powi(k as i32)
        };
        expectation += p * latency;
    }
    expectation
}
